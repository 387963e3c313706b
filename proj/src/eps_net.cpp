#include "spectdiff/eps_net.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "spectdiff/rng.hpp"
#include "spectdiff/threading.hpp"

namespace spectdiff {

namespace {

double sigmoid(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double silu(double x) { return x * sigmoid(x); }

double silu_grad(double x) {
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

// Assumed RMS of the clean slices; fixes the preconditioning scales.
constexpr double kSigmaData = 0.3;

struct Precond {
    double c_in, c_skip, c_out;  // x0_head = c_skip*x_t + c_out*F(c_in*x_t, ...)
};

Precond precond_coeffs(double abar) {
    const double denom = (1.0 - abar) + abar * kSigmaData * kSigmaData;
    Precond p;
    p.c_in = 1.0 / std::sqrt(denom);
    p.c_skip = std::sqrt(abar) * kSigmaData * kSigmaData / denom;
    p.c_out = std::sqrt(1.0 - abar) * kSigmaData / std::sqrt(denom);
    return p;
}

void conv3x3_forward(const double* x, int in_c, int nx, int ny, const double* w,
                     const double* b, int out_c, double* y) {
    const size_t N = size_t(nx) * ny;
    for (int oc = 0; oc < out_c; ++oc) {
        double* yo = y + size_t(oc) * N;
        std::fill(yo, yo + N, b[oc]);
        for (int ic = 0; ic < in_c; ++ic) {
            const double* xi = x + size_t(ic) * N;
            const double* wk = w + (size_t(oc) * in_c + ic) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    const double wv = wk[ky * 3 + kx];
                    if (wv == 0.0) continue;
                    const int dy = ky - 1, dx = kx - 1;
                    const int y0 = std::max(0, -dy), y1 = std::min(ny, ny - dy);
                    const int x0 = std::max(0, -dx), x1 = std::min(nx, nx - dx);
                    for (int py = y0; py < y1; ++py) {
                        double* yrow = yo + size_t(py) * nx;
                        const double* xrow = xi + size_t(py + dy) * nx + dx;
                        for (int px = x0; px < x1; ++px) yrow[px] += wv * xrow[px];
                    }
                }
            }
        }
    }
}

/// Gradients w.r.t. weights/bias and (optionally) the input.
void conv3x3_backward(const double* x, int in_c, int nx, int ny, const double* w, int out_c,
                      const double* gy, double* gw, double* gb, double* gx) {
    const size_t N = size_t(nx) * ny;
    if (gx) std::fill(gx, gx + size_t(in_c) * N, 0.0);
    for (int oc = 0; oc < out_c; ++oc) {
        const double* go = gy + size_t(oc) * N;
        if (gb) {
            double acc = 0.0;
            for (size_t p = 0; p < N; ++p) acc += go[p];
            gb[oc] += acc;
        }
        for (int ic = 0; ic < in_c; ++ic) {
            const double* xi = x + size_t(ic) * N;
            double* gxi = gx ? gx + size_t(ic) * N : nullptr;
            const double* wk = w + (size_t(oc) * in_c + ic) * 9;
            double* gwk = gw ? gw + (size_t(oc) * in_c + ic) * 9 : nullptr;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    const int dy = ky - 1, dx = kx - 1;
                    const int y0 = std::max(0, -dy), y1 = std::min(ny, ny - dy);
                    const int x0 = std::max(0, -dx), x1 = std::min(nx, nx - dx);
                    double acc = 0.0;
                    const double wv = wk[ky * 3 + kx];
                    for (int py = y0; py < y1; ++py) {
                        const double* grow = go + size_t(py) * nx;
                        const double* xrow = xi + size_t(py + dy) * nx + dx;
                        double* gxrow = gxi ? gxi + size_t(py + dy) * nx + dx : nullptr;
                        for (int px = x0; px < x1; ++px) {
                            acc += grow[px] * xrow[px];
                            if (gxrow) gxrow[px] += wv * grow[px];
                        }
                    }
                    if (gwk) gwk[ky * 3 + kx] += acc;
                }
            }
        }
    }
}

}  // namespace

std::vector<double> depth_weights(int slice_index, int n_z) {
    if (slice_index < 0 || slice_index >= n_z)
        throw std::invalid_argument("depth_weights: slice index out of range");
    std::vector<double> w(n_z);
    for (int j = 0; j < n_z; ++j) w[j] = 1.0 - double(std::abs(slice_index - j)) / double(n_z);
    return w;
}

std::vector<double> sinusoid_encoding(double value, int dim, double max_period) {
    const int half = dim / 2;
    std::vector<double> enc(dim, 0.0);
    for (int k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(max_period) * double(k) / double(half));
        enc[k] = std::sin(value * freq);
        enc[half + k] = std::cos(value * freq);
    }
    return enc;
}

void TinyEpsNet::compute_layout() {
    const int C = channels_, E = emb_dim_, H = emb_hidden_, Cin = 1 + n_z_;
    const int M = 6 * C + (1 + n_z_);  // three conv FiLMs + input channel gate
    size_t o = 0;
    layout_.lin1_w = o; o += size_t(H) * E;
    layout_.lin1_b = o; o += H;
    layout_.lin2_w = o; o += size_t(M) * H;
    layout_.lin2_b = o; o += M;
    layout_.conv1_w = o; o += size_t(C) * Cin * 9;
    layout_.conv1_b = o; o += C;
    layout_.conv2_w = o; o += size_t(C) * C * 9;
    layout_.conv2_b = o; o += C;
    layout_.conv2b_w = o; o += size_t(C) * C * 9;
    layout_.conv2b_b = o; o += C;
    layout_.conv3_w = o; o += size_t(2) * C * 9;
    layout_.conv3_b = o; o += 2;
    layout_.total = o;
}

TinyEpsNet::TinyEpsNet(int n_z, int channels, int emb_dim, int emb_hidden)
    : n_z_(n_z), channels_(channels), emb_dim_(emb_dim), emb_hidden_(emb_hidden) {
    if (n_z < 1 || channels < 1 || emb_dim < 2 || emb_hidden < 1)
        throw std::invalid_argument("TinyEpsNet: bad hyperparameters");
    compute_layout();
    params_.assign(layout_.total, 0.0);
}

void TinyEpsNet::init_params(uint64_t seed) {
    RngStream rs(seed, "net-init");
    const int C = channels_, E = emb_dim_, H = emb_hidden_, Cin = 1 + n_z_;
    auto fill_gauss = [&](size_t off, size_t n, double std) {
        for (size_t i = 0; i < n; ++i) params_[off + i] = rs.next_gauss() * std;
    };
    fill_gauss(layout_.lin1_w, size_t(H) * E, std::sqrt(1.0 / E));
    std::fill_n(params_.begin() + layout_.lin1_b, H, 0.0);
    // lin2 starts at zero so the embedding modulation begins as identity.
    const int M = 6 * C + (1 + n_z_);
    std::fill_n(params_.begin() + layout_.lin2_w, size_t(M) * H, 0.0);
    std::fill_n(params_.begin() + layout_.lin2_b, M, 0.0);
    fill_gauss(layout_.conv1_w, size_t(C) * Cin * 9, std::sqrt(2.0 / (Cin * 9)));
    std::fill_n(params_.begin() + layout_.conv1_b, C, 0.0);
    fill_gauss(layout_.conv2_w, size_t(C) * C * 9, std::sqrt(2.0 / (C * 9)));
    std::fill_n(params_.begin() + layout_.conv2_b, C, 0.0);
    fill_gauss(layout_.conv2b_w, size_t(C) * C * 9, std::sqrt(2.0 / (C * 9)));
    std::fill_n(params_.begin() + layout_.conv2b_b, C, 0.0);
    fill_gauss(layout_.conv3_w, size_t(2) * C * 9, 0.1 * std::sqrt(2.0 / (C * 9)));
    std::fill_n(params_.begin() + layout_.conv3_b, 2, 0.0);
}

struct TinyEpsNet::Trace {
    int t = 0, slice = 0, nx = 0, ny = 0;
    double abar = 1.0;
    std::vector<double> x_t;        // raw slice input
    std::vector<double> input_raw;  // (1+n_z) x N, x_t channel preconditioned
    std::vector<double> input;      // input_raw with the per-channel gate applied
    std::vector<double> e0, z1, ae1, e2;
    std::vector<double> h1, h1f, a1, h2, h2f, a2, h3, h3f, a3, x0_head, out;
};

std::vector<double> TinyEpsNet::slice_embedding(int t, int slice_index) const {
    if (slice_index < 0 || slice_index >= n_z_)
        throw std::invalid_argument("slice_embedding: slice index out of range");
    const int E = emb_dim_, H = emb_hidden_, C = channels_;
    const int M = 6 * C + (1 + n_z_);
    std::vector<double> e0 = sinusoid_encoding(double(t), E, 10000.0);
    const std::vector<double> es = sinusoid_encoding(double(slice_index), E, 100.0);
    for (int k = 0; k < E; ++k) e0[k] += es[k];

    std::vector<double> z1(H), e2(M);
    const double* w1 = params_.data() + layout_.lin1_w;
    const double* b1 = params_.data() + layout_.lin1_b;
    for (int h = 0; h < H; ++h) {
        double acc = b1[h];
        for (int k = 0; k < E; ++k) acc += w1[size_t(h) * E + k] * e0[k];
        z1[h] = acc;
    }
    const double* w2 = params_.data() + layout_.lin2_w;
    const double* b2 = params_.data() + layout_.lin2_b;
    for (int o = 0; o < M; ++o) {
        double acc = b2[o];
        for (int h = 0; h < H; ++h) acc += w2[size_t(o) * H + h] * silu(z1[h]);
        e2[o] = acc;
    }
    return e2;
}

void TinyEpsNet::forward_impl(std::span<const double> x_t, std::span<const double> cond, int nx,
                              int ny, int t, int slice_index, const NoiseSchedule& sched,
                              Trace& tr) const {
    sched.check_t(t);
    const size_t N = size_t(nx) * ny;
    const int C = channels_, E = emb_dim_, H = emb_hidden_, Cin = 1 + n_z_;
    if (x_t.size() != N || cond.size() != size_t(n_z_) * N)
        throw std::invalid_argument("TinyEpsNet: input size mismatch");

    tr.t = t;
    tr.slice = slice_index;
    tr.nx = nx;
    tr.ny = ny;
    tr.abar = sched.abar(t);
    tr.x0_head.resize(N);
    tr.x_t.assign(x_t.begin(), x_t.end());
    const Precond pc = precond_coeffs(tr.abar);
    tr.input_raw.resize(size_t(Cin) * N);
    for (size_t p = 0; p < N; ++p) tr.input_raw[p] = pc.c_in * x_t[p];
    std::copy(cond.begin(), cond.end(), tr.input_raw.begin() + N);

    // Embedding path.
    tr.e0 = sinusoid_encoding(double(t), E, 10000.0);
    const std::vector<double> es = sinusoid_encoding(double(slice_index), E, 100.0);
    for (int k = 0; k < E; ++k) tr.e0[k] += es[k];
    tr.z1.resize(H);
    tr.ae1.resize(H);
    const double* w1 = params_.data() + layout_.lin1_w;
    const double* b1 = params_.data() + layout_.lin1_b;
    for (int h = 0; h < H; ++h) {
        double acc = b1[h];
        for (int k = 0; k < E; ++k) acc += w1[size_t(h) * E + k] * tr.e0[k];
        tr.z1[h] = acc;
        tr.ae1[h] = silu(acc);
    }
    const int M = 6 * C + Cin;
    tr.e2.resize(M);
    const double* w2 = params_.data() + layout_.lin2_w;
    const double* b2 = params_.data() + layout_.lin2_b;
    for (int o = 0; o < M; ++o) {
        double acc = b2[o];
        for (int h = 0; h < H; ++h) acc += w2[size_t(o) * H + h] * tr.ae1[h];
        tr.e2[o] = acc;
    }

    // Per-channel input gate: lets the stack sharpen or mute individual
    // conditioning slices as a function of (t, target slice).
    tr.input.resize(size_t(Cin) * N);
    for (int c = 0; c < Cin; ++c) {
        const double gate = 1.0 + tr.e2[6 * C + c];
        for (size_t p = 0; p < N; ++p)
            tr.input[size_t(c) * N + p] = gate * tr.input_raw[size_t(c) * N + p];
    }

    // Conv stack with per-channel scale/shift from the embedding after the
    // first two convs.
    tr.h1.resize(size_t(C) * N);
    conv3x3_forward(tr.input.data(), Cin, nx, ny, params_.data() + layout_.conv1_w,
                    params_.data() + layout_.conv1_b, C, tr.h1.data());
    tr.h1f.resize(size_t(C) * N);
    tr.a1.resize(size_t(C) * N);
    for (int c = 0; c < C; ++c) {
        const double sc = 1.0 + tr.e2[c];
        const double sh = tr.e2[C + c];
        for (size_t p = 0; p < N; ++p) {
            const double v = tr.h1[size_t(c) * N + p] * sc + sh;
            tr.h1f[size_t(c) * N + p] = v;
            tr.a1[size_t(c) * N + p] = silu(v);
        }
    }
    tr.h2.resize(size_t(C) * N);
    conv3x3_forward(tr.a1.data(), C, nx, ny, params_.data() + layout_.conv2_w,
                    params_.data() + layout_.conv2_b, C, tr.h2.data());
    tr.h2f.resize(size_t(C) * N);
    tr.a2.resize(size_t(C) * N);
    for (int c = 0; c < C; ++c) {
        const double sc = 1.0 + tr.e2[2 * C + c];
        const double sh = tr.e2[3 * C + c];
        for (size_t p = 0; p < N; ++p) {
            const double v = tr.h2[size_t(c) * N + p] * sc + sh;
            tr.h2f[size_t(c) * N + p] = v;
            tr.a2[size_t(c) * N + p] = silu(v);
        }
    }
    tr.h3.resize(size_t(C) * N);
    conv3x3_forward(tr.a2.data(), C, nx, ny, params_.data() + layout_.conv2b_w,
                    params_.data() + layout_.conv2b_b, C, tr.h3.data());
    tr.h3f.resize(size_t(C) * N);
    tr.a3.resize(size_t(C) * N);
    for (int c = 0; c < C; ++c) {
        const double sc = 1.0 + tr.e2[4 * C + c];
        const double sh = tr.e2[5 * C + c];
        for (size_t p = 0; p < N; ++p) {
            const double v = tr.h3[size_t(c) * N + p] * sc + sh;
            tr.h3f[size_t(c) * N + p] = v;
            tr.a3[size_t(c) * N + p] = silu(v);
        }
    }
    tr.out.resize(2 * N);
    conv3x3_forward(tr.a3.data(), C, nx, ny, params_.data() + layout_.conv3_w,
                    params_.data() + layout_.conv3_b, 2, tr.out.data());
    // Preconditioned x0 head: the analytic skip keeps the conv stack working
    // on a unit-scale residual at every timestep; the eps channel is then
    // derived from the head, so denoiser error never sees the 1/sqrt(abar)
    // amplification.
    const double ab = tr.abar;
    const double sab = std::sqrt(ab), se = std::sqrt(1.0 - ab);
    for (size_t p = 0; p < N; ++p) {
        const double x0_head = pc.c_skip * tr.x_t[p] + pc.c_out * tr.out[p];
        tr.x0_head[p] = x0_head;
        tr.out[p] = (tr.x_t[p] - sab * x0_head) / se;
    }

    for (size_t i = 0; i < tr.out.size(); ++i)
        if (!std::isfinite(tr.out[i]))
            throw NumericalError("TinyEpsNet: non-finite activation in output layer (t=" +
                                 std::to_string(t) + ", slice=" + std::to_string(slice_index) +
                                 ")");
}

void TinyEpsNet::forward(std::span<const double> x_t, std::span<const double> cond, int nx,
                         int ny, int t, int slice_index, const NoiseSchedule& sched,
                         std::span<double> eps_out, std::span<double> v_out) const {
    Trace tr;
    forward_impl(x_t, cond, nx, ny, t, slice_index, sched, tr);
    const size_t N = size_t(nx) * ny;
    for (size_t p = 0; p < N; ++p) {
        eps_out[p] = tr.out[p];
        v_out[p] = sigmoid(tr.out[N + p]);
    }
}

void TinyEpsNet::backward_impl(const Trace& tr, int nx, int ny, std::span<const double> d_eps,
                               std::span<const double> d_vraw, std::span<double> grad,
                               std::span<double> d_input_x) const {
    const size_t N = size_t(nx) * ny;
    const int C = channels_, E = emb_dim_, H = emb_hidden_, Cin = 1 + n_z_;

    std::vector<double> d_out(2 * N);
    std::copy(d_eps.begin(), d_eps.end(), d_out.begin());
    std::copy(d_vraw.begin(), d_vraw.end(), d_out.begin() + N);

    double* g = grad.empty() ? nullptr : grad.data();
    const int M = 6 * C + Cin;
    std::vector<double> d_e2(M, 0.0);
    // eps = (x_t - sqrt(abar) x0_head)/sqrt(1-abar) and
    // x0_head = c_skip x_t + c_out F: convert the eps cotangent to the conv
    // output and keep the direct x_t terms for the input gradient.
    const double sab = std::sqrt(tr.abar), se = std::sqrt(1.0 - tr.abar);
    const Precond pc = precond_coeffs(tr.abar);
    std::vector<double> d_head(N);
    std::vector<double> d_eps_direct(d_out.begin(), d_out.begin() + N);
    for (size_t p = 0; p < N; ++p) {
        d_head[p] = d_out[p] * (-sab / se);
        d_out[p] = d_head[p] * pc.c_out;  // cotangent of the conv ch0 output
    }

    std::vector<double> d_a3(size_t(C) * N);
    conv3x3_backward(tr.a3.data(), C, nx, ny, params_.data() + layout_.conv3_w, 2, d_out.data(),
                     g ? g + layout_.conv3_w : nullptr, g ? g + layout_.conv3_b : nullptr,
                     d_a3.data());

    std::vector<double> d_h3(size_t(C) * N);
    for (int c = 0; c < C; ++c) {
        const double sc = 1.0 + tr.e2[4 * C + c];
        double dsc = 0.0, dsh = 0.0;
        for (size_t p = 0; p < N; ++p) {
            const size_t i = size_t(c) * N + p;
            const double dh3f = d_a3[i] * silu_grad(tr.h3f[i]);
            d_h3[i] = dh3f * sc;
            dsc += dh3f * tr.h3[i];
            dsh += dh3f;
        }
        d_e2[4 * C + c] = dsc;
        d_e2[5 * C + c] = dsh;
    }

    std::vector<double> d_a2(size_t(C) * N);
    conv3x3_backward(tr.a2.data(), C, nx, ny, params_.data() + layout_.conv2b_w, C, d_h3.data(),
                     g ? g + layout_.conv2b_w : nullptr, g ? g + layout_.conv2b_b : nullptr,
                     d_a2.data());

    std::vector<double> d_h2(size_t(C) * N);
    for (int c = 0; c < C; ++c) {
        const double sc = 1.0 + tr.e2[2 * C + c];
        double dsc = 0.0, dsh = 0.0;
        for (size_t p = 0; p < N; ++p) {
            const size_t i = size_t(c) * N + p;
            const double dh2f = d_a2[i] * silu_grad(tr.h2f[i]);
            d_h2[i] = dh2f * sc;
            dsc += dh2f * tr.h2[i];
            dsh += dh2f;
        }
        d_e2[2 * C + c] = dsc;
        d_e2[3 * C + c] = dsh;
    }

    std::vector<double> d_a1(size_t(C) * N);
    conv3x3_backward(tr.a1.data(), C, nx, ny, params_.data() + layout_.conv2_w, C, d_h2.data(),
                     g ? g + layout_.conv2_w : nullptr, g ? g + layout_.conv2_b : nullptr,
                     d_a1.data());

    std::vector<double> d_h1(size_t(C) * N);
    for (int c = 0; c < C; ++c) {
        const double sc = 1.0 + tr.e2[c];
        double dsc = 0.0, dsh = 0.0;
        for (size_t p = 0; p < N; ++p) {
            const size_t i = size_t(c) * N + p;
            const double dh1f = d_a1[i] * silu_grad(tr.h1f[i]);
            d_h1[i] = dh1f * sc;
            dsc += dh1f * tr.h1[i];
            dsh += dh1f;
        }
        d_e2[c] = dsc;
        d_e2[C + c] = dsh;
    }

    std::vector<double> d_input;
    const bool want_input = !d_input_x.empty();
    const bool need_dinput = want_input || g != nullptr;
    if (need_dinput) d_input.resize(size_t(Cin) * N);
    conv3x3_backward(tr.input.data(), Cin, nx, ny, params_.data() + layout_.conv1_w, C,
                     d_h1.data(), g ? g + layout_.conv1_w : nullptr,
                     g ? g + layout_.conv1_b : nullptr, need_dinput ? d_input.data() : nullptr);
    if (g) {
        for (int c = 0; c < Cin; ++c) {
            double dg = 0.0;
            for (size_t p = 0; p < N; ++p)
                dg += d_input[size_t(c) * N + p] * tr.input_raw[size_t(c) * N + p];
            d_e2[6 * C + c] = dg;
        }
    }
    if (want_input) {
        const double gate0 = 1.0 + tr.e2[6 * C];
        for (size_t p = 0; p < N; ++p)
            d_input_x[p] =
                gate0 * pc.c_in * d_input[p] + pc.c_skip * d_head[p] + d_eps_direct[p] / se;
    }

    if (g) {
        // lin2 backward
        const double* w2 = params_.data() + layout_.lin2_w;
        std::vector<double> d_ae1(H, 0.0);
        for (int o = 0; o < M; ++o) {
            for (int h = 0; h < H; ++h) {
                g[layout_.lin2_w + size_t(o) * H + h] += d_e2[o] * tr.ae1[h];
                d_ae1[h] += w2[size_t(o) * H + h] * d_e2[o];
            }
            g[layout_.lin2_b + o] += d_e2[o];
        }
        // lin1 backward
        for (int h = 0; h < H; ++h) {
            const double dz = d_ae1[h] * silu_grad(tr.z1[h]);
            for (int k = 0; k < E; ++k) g[layout_.lin1_w + size_t(h) * E + k] += dz * tr.e0[k];
            g[layout_.lin1_b + h] += dz;
        }
    }
}

double TinyEpsNet::training_loss_and_grad(std::span<const double> x0,
                                          std::span<const double> cond, int nx, int ny, int t,
                                          int slice_index, std::span<const double> eps,
                                          const NoiseSchedule& sched, double lambda_vlb,
                                          std::span<double> grad) const {
    sched.check_t(t);
    const size_t N = size_t(nx) * ny;
    std::vector<double> x_t(N);
    q_sample(x0, eps, t, sched, x_t);

    Trace tr;
    forward_impl(x_t, cond, nx, ny, t, slice_index, sched, tr);

    std::vector<double> d_eps(N), d_vraw(N, 0.0);
    double mse = 0.0;
    for (size_t p = 0; p < N; ++p) {
        const double diff = tr.out[p] - eps[p];
        mse += diff * diff;
        d_eps[p] = 2.0 * diff / double(N);
    }
    mse /= double(N);

    double vlb = 0.0;
    if (t >= 2 && lambda_vlb > 0.0) {
        const double bt = sched.beta[t - 1];
        const double btil = sched.beta_tilde[t - 1];
        const double log_ratio = std::log(bt) - std::log(btil);
        for (size_t p = 0; p < N; ++p) {
            const double v = sigmoid(tr.out[N + p]);
            const double var = std::exp(v * std::log(bt) + (1.0 - v) * std::log(btil));
            // Stop-gradient on the mean path: delta is a constant for backward.
            const double mu_q = posterior_mean(x_t[p], x0[p], t, sched);
            const double mu_t = mu_theta(x_t[p], tr.out[p], t, sched);
            const double delta = mu_q - mu_t;
            const double kl =
                0.5 * ((btil + delta * delta) / var - 1.0 + std::log(var) - std::log(btil));
            vlb += kl;
            const double dkl_dvar = 0.5 * (1.0 / var - (btil + delta * delta) / (var * var));
            const double dvar_dv = var * log_ratio;
            d_vraw[p] = lambda_vlb / double(N) * dkl_dvar * dvar_dv * v * (1.0 - v);
        }
        vlb /= double(N);
    }

    const double loss = mse + lambda_vlb * vlb;
    if (!std::isfinite(loss))
        throw NumericalError("training_loss: non-finite loss at t=" + std::to_string(t));
    backward_impl(tr, nx, ny, d_eps, d_vraw, grad, {});
    return loss;
}

void TinyEpsNet::eps_input_vjp(std::span<const double> x_t, std::span<const double> cond, int nx,
                               int ny, int t, int slice_index, const NoiseSchedule& sched,
                               std::span<const double> g_out, std::span<double> g_in) const {
    Trace tr;
    forward_impl(x_t, cond, nx, ny, t, slice_index, sched, tr);
    const size_t N = size_t(nx) * ny;
    std::vector<double> d_vraw(N, 0.0);
    backward_impl(tr, nx, ny, g_out, d_vraw, {}, g_in);
}

void TinyEpsNet::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for write: " + path);
    f.write("SPNN", 4);
    const uint64_t step = train_step_;
    f.write(reinterpret_cast<const char*>(&step), 8);

    const int C = channels_, E = emb_dim_, H = emb_hidden_, Cin = 1 + n_z_;
    struct Entry {
        const char* name;
        size_t off;
        std::vector<uint32_t> dims;
    };
    const Entry entries[] = {
        {"emb.lin1.w", layout_.lin1_w, {uint32_t(H), uint32_t(E)}},
        {"emb.lin1.b", layout_.lin1_b, {uint32_t(H)}},
        {"emb.lin2.w", layout_.lin2_w, {uint32_t(6 * C + Cin), uint32_t(H)}},
        {"emb.lin2.b", layout_.lin2_b, {uint32_t(6 * C + Cin)}},
        {"conv1.w", layout_.conv1_w, {uint32_t(C), uint32_t(Cin), 3, 3}},
        {"conv1.b", layout_.conv1_b, {uint32_t(C)}},
        {"conv2.w", layout_.conv2_w, {uint32_t(C), uint32_t(C), 3, 3}},
        {"conv2.b", layout_.conv2_b, {uint32_t(C)}},
        {"conv2b.w", layout_.conv2b_w, {uint32_t(C), uint32_t(C), 3, 3}},
        {"conv2b.b", layout_.conv2b_b, {uint32_t(C)}},
        {"conv3.w", layout_.conv3_w, {2, uint32_t(C), 3, 3}},
        {"conv3.b", layout_.conv3_b, {2}},
    };
    const uint32_t n_tensors = uint32_t(std::size(entries));
    f.write(reinterpret_cast<const char*>(&n_tensors), 4);
    for (const auto& e : entries) {
        const uint32_t len = uint32_t(std::strlen(e.name));
        f.write(reinterpret_cast<const char*>(&len), 4);
        f.write(e.name, len);
        const uint32_t nd = uint32_t(e.dims.size());
        f.write(reinterpret_cast<const char*>(&nd), 4);
        for (uint32_t d : e.dims) f.write(reinterpret_cast<const char*>(&d), 4);
    }
    for (const auto& e : entries) {
        size_t count = 1;
        for (uint32_t d : e.dims) count *= d;
        for (size_t i = 0; i < count; ++i) {
            const float v = float(params_[e.off + i]);
            f.write(reinterpret_cast<const char*>(&v), 4);
        }
    }
    if (!f) throw DataError("write failed: " + path);
}

TinyEpsNet TinyEpsNet::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for read: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "SPNN", 4) != 0) throw DataError("not a SPNN file: " + path);
    uint64_t step = 0;
    f.read(reinterpret_cast<char*>(&step), 8);
    uint32_t n_tensors = 0;
    f.read(reinterpret_cast<char*>(&n_tensors), 4);
    struct Entry {
        std::string name;
        std::vector<uint32_t> dims;
    };
    std::vector<Entry> entries(n_tensors);
    for (auto& e : entries) {
        uint32_t len = 0;
        f.read(reinterpret_cast<char*>(&len), 4);
        e.name.resize(len);
        f.read(e.name.data(), len);
        uint32_t nd = 0;
        f.read(reinterpret_cast<char*>(&nd), 4);
        e.dims.resize(nd);
        for (auto& d : e.dims) f.read(reinterpret_cast<char*>(&d), 4);
    }
    auto find = [&](const std::string& name) -> const Entry& {
        for (const auto& e : entries)
            if (e.name == name) return e;
        throw DataError("SPNN: missing tensor " + name);
    };
    const Entry& c1 = find("conv1.w");
    const Entry& l1 = find("emb.lin1.w");
    if (c1.dims.size() != 4 || l1.dims.size() != 2) throw DataError("SPNN: bad tensor dims");
    const int channels = int(c1.dims[0]);
    const int n_z = int(c1.dims[1]) - 1;
    const int emb_hidden = int(l1.dims[0]);
    const int emb_dim = int(l1.dims[1]);

    TinyEpsNet net(n_z, channels, emb_dim, emb_hidden);
    net.train_step_ = step;
    for (const auto& e : entries) {
        size_t count = 1;
        for (uint32_t d : e.dims) count *= d;
        size_t off = 0;
        if (e.name == "emb.lin1.w") off = net.layout_.lin1_w;
        else if (e.name == "emb.lin1.b") off = net.layout_.lin1_b;
        else if (e.name == "emb.lin2.w") off = net.layout_.lin2_w;
        else if (e.name == "emb.lin2.b") off = net.layout_.lin2_b;
        else if (e.name == "conv1.w") off = net.layout_.conv1_w;
        else if (e.name == "conv1.b") off = net.layout_.conv1_b;
        else if (e.name == "conv2.w") off = net.layout_.conv2_w;
        else if (e.name == "conv2.b") off = net.layout_.conv2_b;
        else if (e.name == "conv2b.w") off = net.layout_.conv2b_w;
        else if (e.name == "conv2b.b") off = net.layout_.conv2b_b;
        else if (e.name == "conv3.w") off = net.layout_.conv3_w;
        else if (e.name == "conv3.b") off = net.layout_.conv3_b;
        else throw DataError("SPNN: unknown tensor " + e.name);
        for (size_t i = 0; i < count; ++i) {
            float v = 0;
            f.read(reinterpret_cast<char*>(&v), 4);
            net.params_[off + i] = double(v);
        }
    }
    if (!f) throw DataError("truncated SPNN file: " + path);
    return net;
}

TrainResult train(TinyEpsNet& net, std::span<const TrainingSample> data,
                  const NoiseSchedule& sched, const TrainConfig& cfg) {
    if (data.empty()) throw std::invalid_argument("train: empty dataset");
    for (const auto& s : data) {
        if (s.x0->nz() != net.n_z() || !s.x0->same_shape(*s.anatomy))
            throw std::invalid_argument("train: dataset shape mismatch");
    }
    const int nx = data[0].x0->nx(), ny = data[0].x0->ny();
    const size_t N = size_t(nx) * ny;
    const size_t P = net.n_params();

    std::vector<double> momentum(P, 0.0);
    std::vector<std::vector<double>> grads(cfg.batch, std::vector<double>(P));
    std::vector<double> losses(cfg.batch);

    TrainResult result;
    // Divergence baseline: the mean loss over the first few steps (a single
    // batch is dominated by which timesteps it happened to draw).
    const int baseline_window = std::min(20, cfg.steps);
    double baseline_acc = 0.0;
    double baseline = -1.0;
    const uint64_t step0 = net.train_step();

    for (int step = 0; step < cfg.steps; ++step) {
        const uint64_t gstep = step0 + uint64_t(step);
        parallel_for(cfg.batch, cfg.threads, [&](int64_t b) {
            RngStream rs(cfg.seed, "train-sample", gstep * uint64_t(cfg.batch) + uint64_t(b));
            const auto& sample = data[rs.next_u64() % data.size()];
            const int slice = int(rs.next_u64() % uint64_t(net.n_z()));
            const int t = 1 + int(rs.next_u64() % uint64_t(sched.T));
            std::vector<double> eps(N);
            for (size_t i = 0; i < N; ++i) eps[i] = rs.next_gauss();
            const std::vector<double> cond = make_condition_stack(*sample.anatomy, slice);
            std::span<const double> x0(sample.x0->slice(slice), N);
            std::fill(grads[b].begin(), grads[b].end(), 0.0);
            losses[b] = net.training_loss_and_grad(x0, cond, nx, ny, t, slice, eps, sched,
                                                   cfg.lambda_vlb, grads[b]);
        });

        double batch_loss = 0.0;
        for (int b = 0; b < cfg.batch; ++b) batch_loss += losses[b];
        batch_loss /= cfg.batch;
        if (!std::isfinite(batch_loss))
            throw NumericalError("train: non-finite loss at step " + std::to_string(gstep));
        if (step < baseline_window) {
            baseline_acc += batch_loss;
            if (step == baseline_window - 1) baseline = baseline_acc / baseline_window;
        } else if (batch_loss > 1e3 * baseline) {
            throw NumericalError("train: diverged at step " + std::to_string(gstep) +
                                 " (loss " + std::to_string(batch_loss) + ", initial " +
                                 std::to_string(baseline) + ")");
        }

        auto& p = net.params();
        // Batch mean, clipped in L2 norm; the eps parameterization makes the
        // low-t loss surface stiff.
        double gnorm2 = 0.0;
        for (size_t i = 0; i < P; ++i) {
            double gsum = 0.0;
            for (int b = 0; b < cfg.batch; ++b) gsum += grads[b][i];
            grads[0][i] = gsum / cfg.batch;
            gnorm2 += grads[0][i] * grads[0][i];
        }
        double scale = 1.0;
        if (cfg.grad_clip > 0.0) {
            const double gnorm = std::sqrt(gnorm2);
            if (gnorm > cfg.grad_clip) scale = cfg.grad_clip / gnorm;
        }
        for (size_t i = 0; i < P; ++i) {
            momentum[i] = cfg.momentum * momentum[i] + scale * grads[0][i];
            p[i] -= cfg.lr * momentum[i];
        }
        result.loss_curve.emplace_back(gstep, batch_loss);
        net.set_train_step(gstep + 1);
    }
    return result;
}

void write_loss_csv(const std::string& path, const TrainResult& result) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for write: " + path);
    f << "step,loss\n";
    for (const auto& [step, loss] : result.loss_curve) f << step << "," << loss << "\n";
    if (!f) throw DataError("write failed: " + path);
}

std::vector<double> make_condition_stack(const ImageVolume& anatomy, int slice_index) {
    const int n_z = anatomy.nz();
    const std::vector<double> w = depth_weights(slice_index, n_z);
    const size_t N = anatomy.slice_size();
    std::vector<double> cond(size_t(n_z) * N);
    for (int j = 0; j < n_z; ++j) {
        const double* src = anatomy.slice(j);
        double* dst = cond.data() + size_t(j) * N;
        for (size_t p = 0; p < N; ++p) dst[p] = src[p] * w[j];
    }
    return cond;
}

NetDenoiser::NetDenoiser(const TinyEpsNet& net, const ImageVolume& anatomy,
                         const NoiseSchedule& sched)
    : net_(net), sched_(sched), nx_(anatomy.nx()), ny_(anatomy.ny()), n_z_(anatomy.nz()) {
    if (n_z_ != net.n_z())
        throw std::invalid_argument("NetDenoiser: anatomy nz does not match the network");
    cond_.reserve(n_z_);
    for (int i = 0; i < n_z_; ++i) cond_.push_back(make_condition_stack(anatomy, i));
}

void NetDenoiser::eval(std::span<const double> x_t, int t, int slice_index,
                       std::span<double> eps_out, std::span<double> v_out) const {
    net_.forward(x_t, cond_[slice_index], nx_, ny_, t, slice_index, sched_, eps_out, v_out);
}

void NetDenoiser::eps_vjp(std::span<const double> x_t, int t, int slice_index,
                          std::span<const double> g_out, std::span<double> g_in) const {
    net_.eps_input_vjp(x_t, cond_[slice_index], nx_, ny_, t, slice_index, sched_, g_out, g_in);
}

}  // namespace spectdiff

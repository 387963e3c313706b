#include "spectdiff/tv.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "spectdiff/threading.hpp"

namespace spectdiff {

double tv_z(const ImageVolume& x) {
    if (x.nz() < 2) throw std::invalid_argument("tv_z: nz must be >= 2");
    double tv = 0.0;
    for (int z = 0; z + 1 < x.nz(); ++z)
        for (int y = 0; y < x.ny(); ++y)
            for (int i = 0; i < x.nx(); ++i) tv += std::abs(x(i, y, z + 1) - x(i, y, z));
    return tv;
}

namespace {

/// ADMM on one z-column: min (1/2)||u-x||^2 + w ||Du||_1, rho = 1.
void prox_column(const double* x, int n, double w, int n_inner, double* u, double* scratch) {
    const int m = n - 1;
    double* z = scratch;          // m
    double* a = scratch + m;      // m
    double* rhs = scratch + 2 * m;  // n
    double* cp = scratch + 2 * m + n;  // n, Thomas forward coefficients

    std::fill(z, z + m, 0.0);
    std::fill(a, a + m, 0.0);
    for (int i = 0; i < n; ++i) u[i] = x[i];

    for (int it = 0; it < n_inner; ++it) {
        // u-step: (I + D^T D) u = x + D^T (z - a)
        for (int i = 0; i < n; ++i) rhs[i] = x[i];
        for (int i = 0; i < m; ++i) {
            const double v = z[i] - a[i];
            rhs[i] -= v;
            rhs[i + 1] += v;
        }
        // Tridiagonal solve, diag = 1 + deg(i), off-diagonals = -1.
        double diag0 = (n == 1) ? 1.0 : 2.0;
        cp[0] = -1.0 / diag0;
        rhs[0] = rhs[0] / diag0;
        for (int i = 1; i < n; ++i) {
            const double deg = (i == n - 1) ? 1.0 : 2.0;
            const double denom = (1.0 + deg) + cp[i - 1];
            cp[i] = -1.0 / denom;
            rhs[i] = (rhs[i] + rhs[i - 1]) / denom;
        }
        u[n - 1] = rhs[n - 1];
        for (int i = n - 2; i >= 0; --i) u[i] = rhs[i] - cp[i] * u[i + 1];

        // z-step: soft threshold on Du + a
        for (int i = 0; i < m; ++i) {
            const double t = (u[i + 1] - u[i]) + a[i];
            const double mag = std::abs(t) - w;
            z[i] = mag > 0.0 ? (t > 0.0 ? mag : -mag) : 0.0;
        }
        // dual update
        for (int i = 0; i < m; ++i) a[i] += (u[i + 1] - u[i]) - z[i];
    }
}

}  // namespace

ImageVolume tv_z_prox(const ImageVolume& x, double weight, int n_inner, int n_threads) {
    if (!(weight > 0.0)) throw std::invalid_argument("tv_z_prox: weight must be > 0");
    if (x.nz() < 2) throw std::invalid_argument("tv_z_prox: nz must be >= 2");
    if (n_inner < 1) throw std::invalid_argument("tv_z_prox: n_inner must be >= 1");

    const int n = x.nz();
    const int64_t n_cols = int64_t(x.nx()) * x.ny();
    ImageVolume out(x.nx(), x.ny(), x.nz());
    out.set_voxel_size(x.voxel_size());
    const size_t stride = x.slice_size();

    parallel_for(n_cols, n_threads, [&](int64_t c) {
        std::vector<double> col(n), res(n), scratch(4 * size_t(n));
        bool constant = true;
        for (int z = 0; z < n; ++z) {
            col[z] = x.data()[size_t(z) * stride + c];
            if (col[z] != col[0]) constant = false;
        }
        if (constant) {
            // Already the exact minimizer for any weight.
            for (int z = 0; z < n; ++z) out.data()[size_t(z) * stride + c] = col[z];
            return;
        }
        prox_column(col.data(), n, weight, n_inner, res.data(), scratch.data());

        // Contract guards: the exact prox never increases the column TV nor
        // moves farther than ||col||; fall back to the input column if the
        // truncated ADMM iterate violates either.
        double tv_in = 0.0, tv_out = 0.0, d2 = 0.0, n2 = 0.0;
        for (int z = 0; z < n; ++z) {
            if (z + 1 < n) {
                tv_in += std::abs(col[z + 1] - col[z]);
                tv_out += std::abs(res[z + 1] - res[z]);
            }
            d2 += (res[z] - col[z]) * (res[z] - col[z]);
            n2 += col[z] * col[z];
        }
        const bool ok = tv_out <= tv_in + 1e-12 && d2 <= n2 + 1e-12;
        for (int z = 0; z < n; ++z)
            out.data()[size_t(z) * stride + c] = ok ? res[z] : col[z];
    });
    return out;
}

double operator_norm_sq(const SystemMatrix& S, int iters, int n_threads) {
    std::vector<double> v(S.cols(), 1.0), sv(S.rows()), stv(S.cols());
    double norm_sq = 0.0;
    for (int it = 0; it < iters; ++it) {
        S.apply(v.data(), sv.data(), n_threads);
        S.apply_adjoint(sv.data(), stv.data(), n_threads);
        double vv = 0.0, num = 0.0;
        for (size_t j = 0; j < v.size(); ++j) {
            num += v[j] * stv[j];
            vv += v[j] * v[j];
        }
        if (vv == 0.0) return 0.0;
        norm_sq = num / vv;
        double mx = 0.0;
        for (double s : stv) mx = std::max(mx, std::abs(s));
        if (mx == 0.0) return 0.0;
        for (size_t j = 0; j < v.size(); ++j) v[j] = stv[j] / mx;
    }
    return norm_sq;
}

ImageVolume admm_tv_reconstruct(const SystemMatrix& S, const ProjectionData& y,
                                double tv_weight, int n_outer, int n_inner, int n_threads) {
    if (n_outer < 1) throw std::invalid_argument("admm_tv_reconstruct: n_outer must be >= 1");
    if (tv_weight < 0.0) throw std::invalid_argument("admm_tv_reconstruct: negative tv_weight");
    if (int64_t(y.size()) != S.rows())
        throw std::invalid_argument("admm_tv_reconstruct: y size mismatch");

    const double L = operator_norm_sq(S, 60, n_threads) * 1.05 + 1e-30;
    ImageVolume x = S.make_volume(0.0);
    ProjectionData res = S.make_projection();
    ImageVolume grad = S.make_volume();

    for (int it = 0; it < n_outer; ++it) {
        S.apply(x.data(), res.data(), n_threads);
        for (size_t k = 0; k < res.size(); ++k) res[k] -= y[k];
        S.apply_adjoint(res.data(), grad.data(), n_threads);
        for (size_t j = 0; j < x.size(); ++j) x[j] -= grad[j] / L;
        if (tv_weight > 0.0) x = tv_z_prox(x, tv_weight / L, n_inner, n_threads);
    }
    return x;
}

}  // namespace spectdiff

#include "spectdiff/gmm_prior.hpp"

#include <algorithm>
#include <cmath>

namespace spectdiff {

namespace {
constexpr double kLog2Pi = 1.8378770664093454835606594728112;

/// Responsibilities of the diffused mixture at x_t, log-sum-exp guarded.
void responsibilities(std::span<const double> x, int t, const GMMPrior& prior,
                      const NoiseSchedule& sched, std::vector<double>* resp,
                      double* logpdf = nullptr) {
    const double ab = sched.abar(t);
    const size_t nc = prior.components.size();
    std::vector<double> logp(nc);
    for (size_t c = 0; c < nc; ++c) {
        const auto& comp = prior.components[c];
        const double V = ab * comp.var + (1.0 - ab);
        double q = 0.0;
        const double sab = std::sqrt(ab);
        for (size_t i = 0; i < x.size(); ++i) {
            const double d = x[i] - sab * comp.mean[i];
            q += d * d;
        }
        logp[c] = std::log(comp.weight) - 0.5 * double(x.size()) * (kLog2Pi + std::log(V)) -
                  0.5 * q / V;
    }
    const double mx = *std::max_element(logp.begin(), logp.end());
    double z = 0.0;
    for (size_t c = 0; c < nc; ++c) z += std::exp(logp[c] - mx);
    resp->resize(nc);
    for (size_t c = 0; c < nc; ++c) (*resp)[c] = std::exp(logp[c] - mx) / z;
    if (logpdf) *logpdf = mx + std::log(z);
}

}  // namespace

void GMMPrior::validate() const {
    if (components.empty()) throw std::invalid_argument("GMMPrior: no components");
    double wsum = 0.0;
    for (const auto& c : components) {
        if (c.weight < 0.0) throw std::invalid_argument("GMMPrior: negative weight");
        if (!(c.var > 0.0)) throw std::invalid_argument("GMMPrior: variance must be > 0");
        if (int(c.mean.size()) != dim) throw std::invalid_argument("GMMPrior: mean dim mismatch");
        wsum += c.weight;
    }
    if (std::abs(wsum - 1.0) > 1e-9)
        throw std::invalid_argument("GMMPrior: weights must sum to 1");
}

GMMPrior single_gaussian(std::vector<double> mean, double var) {
    GMMPrior p;
    p.dim = int(mean.size());
    p.components.push_back({1.0, std::move(mean), var});
    return p;
}

DenoiserOutput gmm_eps(std::span<const double> x_t, int t, const GMMPrior& prior,
                       const NoiseSchedule& sched) {
    sched.check_t(t);
    const double ab = sched.abar(t);
    const double sab = std::sqrt(ab);
    const double coeff = std::sqrt(1.0 - ab);

    std::vector<double> resp;
    responsibilities(x_t, t, prior, sched, &resp);

    DenoiserOutput out;
    out.eps_hat.assign(x_t.size(), 0.0);
    out.v.assign(x_t.size(), 0.0);
    for (size_t c = 0; c < prior.components.size(); ++c) {
        const auto& comp = prior.components[c];
        const double V = ab * comp.var + (1.0 - ab);
        const double w = resp[c] / V;
        for (size_t i = 0; i < x_t.size(); ++i)
            out.eps_hat[i] += w * (x_t[i] - sab * comp.mean[i]);
    }
    for (size_t i = 0; i < x_t.size(); ++i) out.eps_hat[i] *= coeff;
    return out;
}

double gmm_diffused_logpdf(std::span<const double> x_t, int t, const GMMPrior& prior,
                           const NoiseSchedule& sched) {
    std::vector<double> resp;
    double logpdf = 0.0;
    responsibilities(x_t, t, prior, sched, &resp, &logpdf);
    return logpdf;
}

void GmmDenoiser::eval(std::span<const double> x_t, int t, int slice_index,
                       std::span<double> eps_out, std::span<double> v_out) const {
    (void)slice_index;
    DenoiserOutput out = gmm_eps(x_t, t, prior_, sched_);
    std::copy(out.eps_hat.begin(), out.eps_hat.end(), eps_out.begin());
    std::copy(out.v.begin(), out.v.end(), v_out.begin());
}

void GmmDenoiser::eps_vjp(std::span<const double> x_t, int t, int slice_index,
                          std::span<const double> g_out, std::span<double> g_in) const {
    (void)slice_index;
    sched_.check_t(t);
    const double ab = sched_.abar(t);
    const double sab = std::sqrt(ab);
    const double coeff = std::sqrt(1.0 - ab);

    std::vector<double> resp;
    responsibilities(x_t, t, prior_, sched_, &resp);

    // d eps/dx = -sqrt(1-abar) * H with H the Hessian of log q_t:
    // H = sum_c r_c s_c s_c^T - sbar sbar^T - (sum_c r_c / V_c) I,
    // s_c = (sqrt(abar) mu_c - x)/V_c.
    const size_t n = x_t.size();
    const size_t nc = prior_.components.size();
    std::vector<double> sbar(n, 0.0);
    std::vector<std::vector<double>> s(nc, std::vector<double>(n));
    double trace_coeff = 0.0;
    for (size_t c = 0; c < nc; ++c) {
        const auto& comp = prior_.components[c];
        const double V = ab * comp.var + (1.0 - ab);
        for (size_t i = 0; i < n; ++i) {
            s[c][i] = (sab * comp.mean[i] - x_t[i]) / V;
            sbar[i] += resp[c] * s[c][i];
        }
        trace_coeff += resp[c] / V;
    }
    for (size_t i = 0; i < n; ++i) g_in[i] = -trace_coeff * g_out[i];
    for (size_t c = 0; c < nc; ++c) {
        double dot = 0.0;
        for (size_t i = 0; i < n; ++i) dot += s[c][i] * g_out[i];
        for (size_t i = 0; i < n; ++i) g_in[i] += resp[c] * s[c][i] * dot;
    }
    double dotb = 0.0;
    for (size_t i = 0; i < n; ++i) dotb += sbar[i] * g_out[i];
    for (size_t i = 0; i < n; ++i) {
        g_in[i] -= sbar[i] * dotb;
        g_in[i] *= -coeff;
    }
}

}  // namespace spectdiff

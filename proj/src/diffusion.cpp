#include "spectdiff/diffusion.hpp"

#include <algorithm>
#include <cmath>

namespace spectdiff {

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T < 2) throw std::invalid_argument("make_schedule: T must be >= 2");
    if (!(beta_start > 0.0) || !(beta_start < beta_end) || !(beta_end < 1.0))
        throw std::invalid_argument("make_schedule: need 0 < beta_start < beta_end < 1");

    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    s.beta_tilde.resize(T);
    double abar = 1.0;
    for (int i = 0; i < T; ++i) {
        s.beta[i] = beta_start + (beta_end - beta_start) * double(i) / double(T - 1);
        s.alpha[i] = 1.0 - s.beta[i];
        const double abar_prev = abar;
        abar *= s.alpha[i];
        s.alpha_bar[i] = abar;
        s.beta_tilde[i] = i == 0 ? 0.0 : s.beta[i] * (1.0 - abar_prev) / (1.0 - abar);
    }
    return s;
}

std::vector<int> ddim_timesteps(int T, int n) {
    if (n < 2) throw std::invalid_argument("ddim_timesteps: need n >= 2");
    if (n > T) n = T;
    std::vector<int> ts(n);
    for (int i = 0; i < n; ++i) {
        const double f = double(i) / double(n - 1);
        ts[i] = int(std::lround(T - f * (T - 1)));
    }
    // Monotone and unique even after rounding.
    for (int i = 1; i < n; ++i)
        if (ts[i] >= ts[i - 1]) ts[i] = ts[i - 1] - 1;
    if (ts.back() < 1) throw std::invalid_argument("ddim_timesteps: grid does not fit");
    return ts;
}

double sigma_theta(double v, int t, const NoiseSchedule& s) {
    s.check_t(t);
    if (t == 1) return 0.0;
    v = std::clamp(v, 0.0, 1.0);
    const double log_bt = std::log(s.beta[t - 1]);
    const double log_btil = std::log(s.beta_tilde[t - 1]);
    const double var = std::exp(v * log_bt + (1.0 - v) * log_btil);
    return std::sqrt(var);
}

void q_sample(std::span<const double> x0, std::span<const double> eps, int t,
              const NoiseSchedule& s, std::span<double> out) {
    s.check_t(t);
    const double ab = s.abar(t);
    const double c0 = std::sqrt(ab), ce = std::sqrt(1.0 - ab);
    for (size_t i = 0; i < out.size(); ++i) out[i] = c0 * x0[i] + ce * eps[i];
}

void predict_x0(std::span<const double> x_t, std::span<const double> eps_hat, int t,
                const NoiseSchedule& s, std::span<double> out) {
    s.check_t(t);
    const double ab = s.abar(t);
    const double ce = std::sqrt(1.0 - ab), inv = 1.0 / std::sqrt(ab);
    for (size_t i = 0; i < out.size(); ++i) out[i] = (x_t[i] - ce * eps_hat[i]) * inv;
}

void ddim_step(std::span<const double> x_t, std::span<const double> eps_hat, int t, int t_prev,
               const NoiseSchedule& s, std::span<double> out) {
    s.check_t(t);
    if (t_prev >= t || t_prev < 0) throw std::invalid_argument("ddim_step: need 0 <= t_prev < t");
    const double ab = s.abar(t);
    const double abp = s.abar(t_prev);
    const double ce = std::sqrt(1.0 - ab), inv = 1.0 / std::sqrt(ab);
    const double c0p = std::sqrt(abp), cep = std::sqrt(1.0 - abp);
    for (size_t i = 0; i < out.size(); ++i) {
        const double x0 = (x_t[i] - ce * eps_hat[i]) * inv;
        out[i] = c0p * x0 + cep * eps_hat[i];
    }
}

}  // namespace spectdiff

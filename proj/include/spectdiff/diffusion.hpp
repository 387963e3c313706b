#pragma once

#include <cmath>
#include <span>

#include "spectdiff/schedule.hpp"

namespace spectdiff {

/// Denoiser output for one slice: noise estimate and the variance
/// interpolation coefficient v in [0, 1].
struct DenoiserOutput {
    std::vector<double> eps_hat;
    std::vector<double> v;
};

// Scalar forms of the diffusion algebra; array helpers below apply them
// elementwise.

inline double q_sample(double x0, double eps, int t, const NoiseSchedule& s) {
    s.check_t(t);
    const double ab = s.abar(t);
    return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

inline double predict_x0(double x_t, double eps_hat, int t, const NoiseSchedule& s) {
    s.check_t(t);
    const double ab = s.abar(t);
    return (x_t - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab);
}

inline double posterior_mean(double x_t, double x0, int t, const NoiseSchedule& s) {
    s.check_t(t);
    const double ab = s.abar(t);
    const double abp = s.abar(t - 1);
    const double a = s.alpha[t - 1];
    return (std::sqrt(a) * (1.0 - abp) * x_t + std::sqrt(abp) * (1.0 - a) * x0) / (1.0 - ab);
}

inline double mu_theta(double x_t, double eps_hat, int t, const NoiseSchedule& s) {
    s.check_t(t);
    const double ab = s.abar(t);
    const double a = s.alpha[t - 1];
    return (x_t - (1.0 - a) / std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(a);
}

/// Geometric interpolation between the posterior lower bound beta_tilde and
/// beta, returned as a standard deviation. t = 1 is the deterministic final
/// step and returns 0. v is clamped to [0, 1].
double sigma_theta(double v, int t, const NoiseSchedule& s);

inline double ancestral_step(double x_t, double eps_hat, double v, int t, double z,
                             const NoiseSchedule& s) {
    const double mean = mu_theta(x_t, eps_hat, t, s);
    if (t == 1) return mean;
    return mean + sigma_theta(v, t, s) * z;
}

/// Deterministic DDIM step (eta = 0); t_prev = 0 returns the x0 estimate.
inline double ddim_step(double x_t, double eps_hat, int t, int t_prev, const NoiseSchedule& s) {
    s.check_t(t);
    if (t_prev >= t || t_prev < 0) throw std::invalid_argument("ddim_step: need 0 <= t_prev < t");
    const double x0 = predict_x0(x_t, eps_hat, t, s);
    const double abp = s.abar(t_prev);
    return std::sqrt(abp) * x0 + std::sqrt(1.0 - abp) * eps_hat;
}

// Array helpers over whole slices/volumes.

void q_sample(std::span<const double> x0, std::span<const double> eps, int t,
              const NoiseSchedule& s, std::span<double> out);
void predict_x0(std::span<const double> x_t, std::span<const double> eps_hat, int t,
                const NoiseSchedule& s, std::span<double> out);
void ddim_step(std::span<const double> x_t, std::span<const double> eps_hat, int t, int t_prev,
               const NoiseSchedule& s, std::span<double> out);

}  // namespace spectdiff

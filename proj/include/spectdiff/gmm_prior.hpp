#pragma once

#include <vector>

#include "spectdiff/denoiser.hpp"
#include "spectdiff/diffusion.hpp"

namespace spectdiff {

/// Isotropic Gaussian mixture prior over flattened slices. The diffused
/// marginal at time t has component covariance abar*var + (1-abar), which
/// makes the posterior noise prediction available in closed form. Used as a
/// verification oracle for the samplers.
struct GMMPrior {
    struct Component {
        double weight = 1.0;
        std::vector<double> mean;
        double var = 1.0;  // isotropic
    };
    std::vector<Component> components;
    int dim = 0;

    void validate() const;
};

GMMPrior single_gaussian(std::vector<double> mean, double var);

/// Exact eps* = -sqrt(1-abar) * grad log q_t(x_t); v = 0.
DenoiserOutput gmm_eps(std::span<const double> x_t, int t, const GMMPrior& prior,
                       const NoiseSchedule& sched);

/// Log density of the diffused marginal q_t (for finite-difference checks).
double gmm_diffused_logpdf(std::span<const double> x_t, int t, const GMMPrior& prior,
                           const NoiseSchedule& sched);

class GmmDenoiser final : public DenoiserModel {
public:
    GmmDenoiser(GMMPrior prior, const NoiseSchedule& sched)
        : prior_(std::move(prior)), sched_(sched) {
        prior_.validate();
    }

    void eval(std::span<const double> x_t, int t, int slice_index, std::span<double> eps_out,
              std::span<double> v_out) const override;
    bool has_input_grad() const override { return true; }
    void eps_vjp(std::span<const double> x_t, int t, int slice_index,
                 std::span<const double> g_out, std::span<double> g_in) const override;

    const GMMPrior& prior() const { return prior_; }

private:
    GMMPrior prior_;
    const NoiseSchedule& sched_;
};

}  // namespace spectdiff

#pragma once

#include <span>

#include "spectdiff/schedule.hpp"

namespace spectdiff {

/// Conditional noise predictor used by the samplers. Implementations bind
/// their own conditioning (anatomy volume, prior parameters) and must be
/// immutable during sampling so slices can be evaluated concurrently.
class DenoiserModel {
public:
    virtual ~DenoiserModel() = default;

    /// Predict (eps_hat, v) for one slice at timestep t.
    virtual void eval(std::span<const double> x_t, int t, int slice_index,
                      std::span<double> eps_out, std::span<double> v_out) const = 0;

    /// Whether eps_vjp is available (exact guidance gradients).
    virtual bool has_input_grad() const { return false; }

    /// g_in = (d eps_hat / d x_t)^T g_out at the given input.
    virtual void eps_vjp(std::span<const double> x_t, int t, int slice_index,
                         std::span<const double> g_out, std::span<double> g_in) const {
        (void)x_t; (void)t; (void)slice_index; (void)g_out; (void)g_in;
        throw std::logic_error("DenoiserModel: eps_vjp not implemented");
    }
};

}  // namespace spectdiff

#pragma once

#include "spectdiff/denoiser.hpp"
#include "spectdiff/diffusion.hpp"
#include "spectdiff/mlem.hpp"
#include "spectdiff/system_matrix.hpp"
#include "spectdiff/tv.hpp"

namespace spectdiff {

/// Fitted image-consistency weight; clamped at 0 (the fit goes negative for
/// very small count levels).
double lambda_dps_of(double count_level);

/// Fitted projection-consistency weight; clamped to [0, 1].
double lambda_mlem_of(double count_level);

enum class GradMode { approx, exact };
enum class CorrectionTarget { xprev, x0 };

struct GuidanceConfig {
    double lambda_dps = -1.0;   // < 0 resolves to lambda_dps_of(count_level)
    double lambda_mlem = -1.0;  // < 0 resolves to lambda_mlem_of(count_level)
    double count_level = 1.0;
    int mlem_every = 10;
    int mlem_inner = 1;
    int ddim_steps = 25;
    double tv_weight = 0.0;
    int tv_inner = 5;
    bool dual_noise = true;
    bool x_in_start = true;
    bool use_dps = true;
    bool use_mlem = true;
    bool use_tv = true;
    GradMode grad_mode = GradMode::approx;
    CorrectionTarget correction_target = CorrectionTarget::xprev;
    double count_scale = 1.0;  // expected counts per activity unit, for MLEM insertion
    // Per-step x0 estimates are clamped to this range and eps re-derived
    // from the clamped value, bounding the compounding of denoiser error
    // across DDIM steps. Widen or disable for priors outside [0, 4].
    double clip_x0_lo = 0.0;
    double clip_x0_hi = 4.0;
    int threads = 1;

    double resolved_lambda_dps() const;
    double resolved_lambda_mlem() const;
};

struct SamplerRun {
    const ImageVolume* x_in = nullptr;
    const ProjectionData* y = nullptr;
    const SystemMatrix* S = nullptr;
    const DenoiserModel* model = nullptr;
    const NoiseSchedule* sched = nullptr;
    uint64_t seed = 0;
    /// When set, trajectory i uses (*eps0_override)[i] as its fixed noise
    /// field instead of drawing one from the seed.
    const std::vector<std::vector<double>>* eps0_override = nullptr;
};

/// x_T = sqrt(abar_T) x_in + sqrt(1-abar_T) eps0, the same 2D noise field
/// reused for every slice of the volume.
ImageVolume init_start(const ImageVolume& x_in, const NoiseSchedule& sched,
                       std::span<const double> eps0);

/// Image-consistency correction of Eq.-style gradient guidance: moves x_prev
/// along J^T (x_in - x0_hat) with a semi-implicit step that equals the plain
/// gradient step -lambda * grad ||x_in - x0_hat||^2 to first order in lambda
/// and stays stable (and monotone in lambda) for arbitrarily large lambda.
/// grad_mode approx uses d x0/d x_t ~ 1/sqrt(abar_t); exact uses the model's
/// vector-Jacobian product.
void dps_correct(ImageVolume& x_prev, const ImageVolume& x_t, const ImageVolume& x0_hat,
                 const ImageVolume& x_in, double lambda, int t, const NoiseSchedule& sched,
                 GradMode mode, const DenoiserModel* model, int threads = 1);

/// Convex blend (1-lambda) x0_hat + lambda f_mlem(x0_hat, y, S); x0_hat is
/// floored to a small positive value (or a uniform start when all zero)
/// before the MLEM updates. count_scale converts activity units to the count
/// units of y.
ImageVolume mlem_insert(const ImageVolume& x0_hat, const ProjectionData& y,
                        const SystemMatrix& S, double lambda, int n_mlem_iters,
                        double count_scale = 1.0, int threads = 1);

struct SamplerDiagnostics {
    std::vector<double> tv_before;  // per TV-corrected step
    std::vector<double> tv_after;
};

/// Full guided sampling: per-slice DDIM with the shared fixed noise, DPS
/// image consistency, MLEM insertion every mlem_every steps with re-noising
/// to the current level, z-TV proximal step, optional dual-noise averaging.
/// Output is clipped to >= 0. Deterministic given the seed at any thread
/// count.
ImageVolume sample_volume(const SamplerRun& run, const GuidanceConfig& cfg,
                          SamplerDiagnostics* diag = nullptr);

}  // namespace spectdiff

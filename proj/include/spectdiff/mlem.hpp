#pragma once

#include <optional>

#include "spectdiff/system_matrix.hpp"
#include "spectdiff/types.hpp"

namespace spectdiff {

struct MLEMState {
    ImageVolume current;      // strictly positive on the sensitivity support
    ImageVolume sensitivity;  // per-voxel sum of matrix entries
    int iteration = 0;
};

/// Per-voxel column sums of S; equals back_project(S, ones).
ImageVolume sensitivity_image(const SystemMatrix& S, int n_threads = 1);

MLEMState make_mlem_state(const SystemMatrix& S, const std::optional<ImageVolume>& init,
                          int n_threads = 1);

/// One multiplicative EM update. Zero-measurement bins with zero expectation
/// contribute ratio 0; zero-sensitivity voxels stay frozen at 0.
void mlem_update(MLEMState& state, const ProjectionData& y, const SystemMatrix& S,
                 int n_threads = 1);

ImageVolume mlem_reconstruct(const SystemMatrix& S, const ProjectionData& y, int n_iter,
                             const std::optional<ImageVolume>& init = std::nullopt,
                             int n_threads = 1);

/// Poisson log-likelihood sum_k [y log(lambda) - lambda] with y log(lambda)
/// := 0 when y = 0; returns -inf when y > 0 meets lambda = 0.
double poisson_loglik(const SystemMatrix& S, const ImageVolume& x, const ProjectionData& y,
                      int n_threads = 1);

}  // namespace spectdiff

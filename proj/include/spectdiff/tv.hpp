#pragma once

#include "spectdiff/system_matrix.hpp"
#include "spectdiff/types.hpp"

namespace spectdiff {

/// z-axis total variation seminorm: sum |x(i,j,k+1) - x(i,j,k)|.
double tv_z(const ImageVolume& x);

/// Approximate prox of (1/2)||u - x||^2 + weight * ||D_z u||_1 via ADMM
/// (soft-threshold z-step, tridiagonal u-step, rho = 1). Columns along z are
/// independent. The returned volume is guarded so tv_z never increases and
/// ||out - x|| <= ||x||, which the exact prox satisfies.
ImageVolume tv_z_prox(const ImageVolume& x, double weight, int n_inner, int n_threads = 1);

/// Proximal-gradient on (1/2)||y - Sx||^2 + tv_weight * tv_z(x): a Lipschitz
/// quadratic-surrogate data step followed by tv_z_prox each outer iteration.
ImageVolume admm_tv_reconstruct(const SystemMatrix& S, const ProjectionData& y,
                                double tv_weight, int n_outer, int n_inner = 30,
                                int n_threads = 1);

/// Largest squared singular value of S, by power iteration from a fixed
/// deterministic start vector.
double operator_norm_sq(const SystemMatrix& S, int iters = 50, int n_threads = 1);

}  // namespace spectdiff

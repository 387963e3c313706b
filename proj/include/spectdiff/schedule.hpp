#pragma once

#include <vector>

#include "spectdiff/types.hpp"

namespace spectdiff {

/// Forward-process tables indexed by timestep t in 1..T (index t-1).
/// beta_tilde[0] (t = 1) is 0 by the alpha_bar_0 := 1 convention.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;       // 1 - beta_t
    std::vector<double> alpha_bar;   // prod_{s<=t} alpha_s
    std::vector<double> beta_tilde;  // beta_t (1 - abar_{t-1}) / (1 - abar_t)

    double abar(int t) const { return t == 0 ? 1.0 : alpha_bar[t - 1]; }
    void check_t(int t) const {
        if (t < 1 || t > T) throw std::invalid_argument("timestep out of range");
    }
};

/// Linear beta schedule. Defaults elsewhere: T = 1000, beta in [1e-4, 0.02].
NoiseSchedule make_schedule(int T, double beta_start, double beta_end);

/// n uniformly spaced timesteps from T down to 1 inclusive, for DDIM.
std::vector<int> ddim_timesteps(int T, int n);

}  // namespace spectdiff

#include "spectdiff/mlem.hpp"

#include <cmath>
#include <limits>

namespace spectdiff {

ImageVolume sensitivity_image(const SystemMatrix& S, int n_threads) {
    ProjectionData ones = S.make_projection(1.0);
    return back_project(S, ones, n_threads);
}

MLEMState make_mlem_state(const SystemMatrix& S, const std::optional<ImageVolume>& init,
                          int n_threads) {
    MLEMState st;
    st.sensitivity = sensitivity_image(S, n_threads);
    if (init) {
        if (!init->same_shape(st.sensitivity))
            throw std::invalid_argument("mlem: init shape mismatch");
        st.current = *init;
    } else {
        st.current = S.make_volume(1.0);
    }
    // Freeze voxels the scanner never sees.
    for (size_t j = 0; j < st.current.size(); ++j)
        if (st.sensitivity[j] <= 0.0) st.current[j] = 0.0;
    st.iteration = 0;
    return st;
}

void mlem_update(MLEMState& state, const ProjectionData& y, const SystemMatrix& S,
                 int n_threads) {
    if (int64_t(y.size()) != S.rows()) throw std::invalid_argument("mlem_update: y size mismatch");
    for (size_t k = 0; k < y.size(); ++k)
        if (y[k] < 0.0) throw std::invalid_argument("mlem_update: negative measurement");

    ProjectionData lambda = S.make_projection();
    S.apply(state.current.data(), lambda.data(), n_threads);

    ProjectionData ratio = S.make_projection();
    for (size_t k = 0; k < y.size(); ++k) {
        if (lambda[k] > 0.0)
            ratio[k] = y[k] / lambda[k];
        else
            ratio[k] = 0.0;
    }

    ImageVolume correction = S.make_volume();
    S.apply_adjoint(ratio.data(), correction.data(), n_threads);

    for (size_t j = 0; j < state.current.size(); ++j) {
        const double sens = state.sensitivity[j];
        if (sens > 0.0)
            state.current[j] *= correction[j] / sens;
        else
            state.current[j] = 0.0;
    }
    ++state.iteration;
}

ImageVolume mlem_reconstruct(const SystemMatrix& S, const ProjectionData& y, int n_iter,
                             const std::optional<ImageVolume>& init, int n_threads) {
    if (n_iter < 1) throw std::invalid_argument("mlem_reconstruct: n_iter must be >= 1");
    MLEMState st = make_mlem_state(S, init, n_threads);
    for (int i = 0; i < n_iter; ++i) mlem_update(st, y, S, n_threads);
    return st.current;
}

double poisson_loglik(const SystemMatrix& S, const ImageVolume& x, const ProjectionData& y,
                      int n_threads) {
    for (size_t j = 0; j < x.size(); ++j)
        if (x[j] < 0.0) throw std::invalid_argument("poisson_loglik: x must be nonnegative");
    ProjectionData lambda = S.make_projection();
    S.apply(x.data(), lambda.data(), n_threads);
    double ll = 0.0;
    for (size_t k = 0; k < y.size(); ++k) {
        if (y[k] > 0.0) {
            if (lambda[k] <= 0.0) return -std::numeric_limits<double>::infinity();
            ll += y[k] * std::log(lambda[k]);
        }
        ll -= lambda[k];
    }
    return ll;
}

}  // namespace spectdiff

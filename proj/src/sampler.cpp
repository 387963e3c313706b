#include "spectdiff/sampler.hpp"

#include <algorithm>
#include <cmath>

#include "spectdiff/rng.hpp"
#include "spectdiff/threading.hpp"

namespace spectdiff {

double lambda_dps_of(double count_level) {
    if (!(count_level > 0.0) || count_level > 1.0)
        throw std::invalid_argument("lambda_dps_of: count level must be in (0, 1]");
    return std::max(0.0, 0.0698 * std::log(count_level) + 0.3454);
}

double lambda_mlem_of(double count_level) {
    if (!(count_level > 0.0) || count_level > 1.0)
        throw std::invalid_argument("lambda_mlem_of: count level must be in (0, 1]");
    const double v = 0.1559 * std::exp(-4.8120 * count_level) +
                     0.0079 * std::exp(3.6508 * count_level);
    return std::clamp(v, 0.0, 1.0);
}

double GuidanceConfig::resolved_lambda_dps() const {
    return lambda_dps >= 0.0 ? lambda_dps : lambda_dps_of(count_level);
}

double GuidanceConfig::resolved_lambda_mlem() const {
    const double v = lambda_mlem >= 0.0 ? lambda_mlem : lambda_mlem_of(count_level);
    if (v > 1.0) throw std::invalid_argument("lambda_mlem must be in [0, 1]");
    return v;
}

ImageVolume init_start(const ImageVolume& x_in, const NoiseSchedule& sched,
                       std::span<const double> eps0) {
    if (eps0.size() != x_in.slice_size())
        throw std::invalid_argument("init_start: eps0 must be one slice field");
    const double ab = sched.abar(sched.T);
    const double c0 = std::sqrt(ab), ce = std::sqrt(1.0 - ab);
    ImageVolume out(x_in.nx(), x_in.ny(), x_in.nz());
    out.set_voxel_size(x_in.voxel_size());
    const size_t N = x_in.slice_size();
    for (int z = 0; z < x_in.nz(); ++z) {
        const double* src = x_in.slice(z);
        double* dst = out.slice(z);
        for (size_t p = 0; p < N; ++p) dst[p] = c0 * src[p] + ce * eps0[p];
    }
    return out;
}

void dps_correct(ImageVolume& x_prev, const ImageVolume& x_t, const ImageVolume& x0_hat,
                 const ImageVolume& x_in, double lambda, int t, const NoiseSchedule& sched,
                 GradMode mode, const DenoiserModel* model, int threads) {
    if (lambda < 0.0) throw std::invalid_argument("dps_correct: lambda must be >= 0");
    if (lambda == 0.0) return;
    if (!x_prev.same_shape(x0_hat) || !x_prev.same_shape(x_in) || !x_prev.same_shape(x_t))
        throw std::invalid_argument("dps_correct: shape mismatch");
    sched.check_t(t);

    const size_t n = x_prev.size();
    const size_t N = x_prev.slice_size();
    std::vector<double> residual(n), g(n);
    for (size_t i = 0; i < n; ++i) residual[i] = x_in[i] - x0_hat[i];

    const double ab = sched.abar(t);
    const double inv_sab = 1.0 / std::sqrt(ab);
    if (mode == GradMode::approx) {
        for (size_t i = 0; i < n; ++i) g[i] = residual[i] * inv_sab;
    } else {
        if (model == nullptr || !model->has_input_grad())
            throw std::invalid_argument("dps_correct: exact mode needs a model with eps_vjp");
        // J^T r = (r - sqrt(1-abar) * (d eps/d x)^T r) / sqrt(abar)
        const double ce = std::sqrt(1.0 - ab);
        parallel_for(x_prev.nz(), threads, [&](int64_t z) {
            std::vector<double> vjp(N);
            std::span<const double> xt_slice(x_t.slice(int(z)), N);
            std::span<const double> r_slice(residual.data() + size_t(z) * N, N);
            model->eps_vjp(xt_slice, t, int(z), r_slice, vjp);
            double* gz = g.data() + size_t(z) * N;
            for (size_t p = 0; p < N; ++p) gz[p] = (r_slice[p] - ce * vjp[p]) * inv_sab;
        });
    }

    double g2 = 0.0, r2 = 0.0;
    for (size_t i = 0; i < n; ++i) {
        g2 += g[i] * g[i];
        r2 += residual[i] * residual[i];
    }
    if (r2 <= 0.0) return;
    // Semi-implicit gradient step: equals x_prev + 2 lambda g for small
    // lambda, saturates toward a full data-consistency move as lambda grows.
    const double c2 = g2 / r2;
    const double step = 2.0 * lambda / (1.0 + 2.0 * lambda * c2);
    for (size_t i = 0; i < n; ++i) x_prev[i] += step * g[i];
}

ImageVolume mlem_insert(const ImageVolume& x0_hat, const ProjectionData& y,
                        const SystemMatrix& S, double lambda, int n_mlem_iters,
                        double count_scale, int threads) {
    if (lambda < 0.0 || lambda > 1.0)
        throw std::invalid_argument("mlem_insert: lambda must be in [0, 1]");
    if (!(count_scale > 0.0)) throw std::invalid_argument("mlem_insert: bad count_scale");
    if (lambda == 0.0) return x0_hat;
    if (n_mlem_iters < 1) throw std::invalid_argument("mlem_insert: need >= 1 MLEM iteration");

    double vmax = 0.0;
    for (size_t i = 0; i < x0_hat.size(); ++i) vmax = std::max(vmax, x0_hat[i]);

    ImageVolume start = x0_hat;
    if (vmax <= 0.0) {
        for (size_t i = 0; i < start.size(); ++i) start[i] = 1.0;
    } else {
        const double floor_v = vmax * 1e-6;
        for (size_t i = 0; i < start.size(); ++i) {
            start[i] = std::max(start[i], floor_v) * count_scale;
        }
    }

    MLEMState st = make_mlem_state(S, start, threads);
    for (int i = 0; i < n_mlem_iters; ++i) mlem_update(st, y, S, threads);

    ImageVolume out = x0_hat;
    const double inv_scale = 1.0 / count_scale;
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = (1.0 - lambda) * x0_hat[i] + lambda * st.current[i] * inv_scale;
    return out;
}

ImageVolume sample_volume(const SamplerRun& run, const GuidanceConfig& cfg,
                          SamplerDiagnostics* diag) {
    if (!run.x_in || !run.model || !run.sched)
        throw std::invalid_argument("sample_volume: missing inputs");
    const bool want_mlem = cfg.use_mlem && run.y != nullptr && run.S != nullptr;
    if (cfg.use_mlem && (run.y == nullptr) != (run.S == nullptr))
        throw std::invalid_argument("sample_volume: MLEM insertion needs both y and S");
    if (cfg.mlem_every < 1) throw std::invalid_argument("sample_volume: mlem_every must be >= 1");
    if (cfg.ddim_steps < 2) throw std::invalid_argument("sample_volume: ddim_steps must be >= 2");

    const NoiseSchedule& sched = *run.sched;
    const ImageVolume& x_in = *run.x_in;
    const int nz = x_in.nz();
    const size_t N = x_in.slice_size();
    const double lam_dps = cfg.use_dps ? cfg.resolved_lambda_dps() : 0.0;
    const double lam_mlem = want_mlem ? cfg.resolved_lambda_mlem() : 0.0;
    const std::vector<int> ts = ddim_timesteps(sched.T, cfg.ddim_steps);

    const int n_traj = cfg.dual_noise ? 2 : 1;
    ImageVolume accum(x_in.nx(), x_in.ny(), nz);
    accum.set_voxel_size(x_in.voxel_size());

    if (run.eps0_override && int(run.eps0_override->size()) < n_traj)
        throw std::invalid_argument("sample_volume: eps0_override needs one field per trajectory");

    for (int traj = 0; traj < n_traj; ++traj) {
        std::vector<double> eps0(N);
        if (run.eps0_override) {
            if ((*run.eps0_override)[traj].size() != N)
                throw std::invalid_argument("sample_volume: eps0_override field size mismatch");
            eps0 = (*run.eps0_override)[traj];
        } else {
            RngStream rs(run.seed, "sampler-init-noise", uint64_t(traj));
            for (size_t p = 0; p < N; ++p) eps0[p] = rs.next_gauss();
        }

        ImageVolume x(x_in.nx(), x_in.ny(), nz);
        x.set_voxel_size(x_in.voxel_size());
        if (cfg.x_in_start) {
            x = init_start(x_in, sched, eps0);
        } else {
            for (int z = 0; z < nz; ++z) std::copy(eps0.begin(), eps0.end(), x.slice(z));
        }

        ImageVolume x0_hat(x_in.nx(), x_in.ny(), nz);
        ImageVolume x_prev(x_in.nx(), x_in.ny(), nz);
        x_prev.set_voxel_size(x_in.voxel_size());

        for (size_t step = 0; step < ts.size(); ++step) {
            const int t = ts[step];
            const int t_prev = step + 1 < ts.size() ? ts[step + 1] : 0;

            const double ab = sched.abar(t);
            const double abp = sched.abar(t_prev);
            const double sab = std::sqrt(ab), se = std::sqrt(1.0 - ab);
            const double sabp = std::sqrt(abp), sep = std::sqrt(1.0 - abp);
            parallel_for(nz, cfg.threads, [&](int64_t z) {
                std::vector<double> eps_hat(N), v(N);
                std::span<const double> xz(x.slice(int(z)), N);
                run.model->eval(xz, t, int(z), eps_hat, v);
                double* x0z = x0_hat.slice(int(z));
                double* xpz = x_prev.slice(int(z));
                for (size_t p = 0; p < N; ++p) {
                    double x0 = (xz[p] - se * eps_hat[p]) / sab;
                    x0 = std::clamp(x0, cfg.clip_x0_lo, cfg.clip_x0_hi);
                    const double eps_used = (xz[p] - sab * x0) / se;
                    x0z[p] = x0;
                    xpz[p] = sabp * x0 + sep * eps_used;
                }
            });

            if (cfg.correction_target == CorrectionTarget::xprev) {
                if (lam_dps > 0.0)
                    dps_correct(x_prev, x, x0_hat, x_in, lam_dps, t, sched, cfg.grad_mode,
                                run.model, cfg.threads);
                if (lam_mlem > 0.0 && step % uint64_t(cfg.mlem_every) == 0) {
                    const ImageVolume blended = mlem_insert(x0_hat, *run.y, *run.S, lam_mlem,
                                                            cfg.mlem_inner, cfg.count_scale,
                                                            cfg.threads);
                    // Re-enter the trajectory at level t-1 with the fixed noise.
                    if (t_prev == 0) {
                        x_prev = blended;
                    } else {
                        for (int z = 0; z < nz; ++z)
                            q_sample({blended.slice(z), N}, eps0, t_prev, sched,
                                     {x_prev.slice(z), N});
                    }
                }
                if (cfg.use_tv && cfg.tv_weight > 0.0) {
                    const double tv0 = diag ? tv_z(x_prev) : 0.0;
                    x_prev = tv_z_prox(x_prev, cfg.tv_weight, cfg.tv_inner, cfg.threads);
                    if (diag) {
                        diag->tv_before.push_back(tv0);
                        diag->tv_after.push_back(tv_z(x_prev));
                    }
                }
            } else {
                // All corrections at the x0 level, then one re-noising.
                ImageVolume x0c = x0_hat;
                if (lam_dps > 0.0) {
                    const double g = 2.0 * lam_dps;
                    for (size_t i = 0; i < x0c.size(); ++i)
                        x0c[i] = (x0c[i] + g * x_in[i]) / (1.0 + g);
                }
                if (lam_mlem > 0.0 && step % uint64_t(cfg.mlem_every) == 0)
                    x0c = mlem_insert(x0c, *run.y, *run.S, lam_mlem, cfg.mlem_inner,
                                      cfg.count_scale, cfg.threads);
                if (cfg.use_tv && cfg.tv_weight > 0.0) {
                    const double tv0 = diag ? tv_z(x0c) : 0.0;
                    x0c = tv_z_prox(x0c, cfg.tv_weight, cfg.tv_inner, cfg.threads);
                    if (diag) {
                        diag->tv_before.push_back(tv0);
                        diag->tv_after.push_back(tv_z(x0c));
                    }
                }
                if (t_prev == 0) {
                    x_prev = x0c;
                } else {
                    for (int z = 0; z < nz; ++z)
                        q_sample({x0c.slice(z), N}, eps0, t_prev, sched, {x_prev.slice(z), N});
                }
            }

            x = x_prev;
            if (!x.all_finite())
                throw NumericalError("sample_volume: non-finite state at step " +
                                     std::to_string(step) + " (t=" + std::to_string(t) + ")");
        }

        for (size_t i = 0; i < accum.size(); ++i) accum[i] += x[i];
    }

    for (size_t i = 0; i < accum.size(); ++i)
        accum[i] = std::max(0.0, accum[i] / double(n_traj));
    return accum;
}

}  // namespace spectdiff

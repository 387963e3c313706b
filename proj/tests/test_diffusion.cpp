#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "spectdiff/diffusion.hpp"
#include "spectdiff/gmm_prior.hpp"
#include "spectdiff/rng.hpp"

using namespace spectdiff;
namespace oracle = spectdiff::testing;

namespace {
const NoiseSchedule& default_schedule() {
    static const NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
    return s;
}
}  // namespace

TEST_CASE("linear schedule tables") {
    const NoiseSchedule& s = default_schedule();
    CHECK(s.alpha_bar[999] < 1e-4);
    CHECK(s.alpha_bar[0] == doctest::Approx(1.0 - s.beta[0]).epsilon(1e-15));
    CHECK(s.beta_tilde[0] == 0.0);
    for (int i = 1; i < s.T; ++i) {
        CHECK(s.beta[i] > s.beta[i - 1]);
        CHECK(s.alpha_bar[i] < s.alpha_bar[i - 1]);
        CHECK(s.beta_tilde[i] <= s.beta[i]);
        CHECK(s.beta_tilde[i] > 0.0);
    }
    CHECK_THROWS_AS(make_schedule(1, 1e-4, 0.02), std::invalid_argument);
    CHECK_THROWS_AS(make_schedule(100, 0.02, 1e-4), std::invalid_argument);
    CHECK_THROWS_AS(make_schedule(100, 0.0, 0.02), std::invalid_argument);
    CHECK_THROWS_AS(make_schedule(100, 1e-4, 1.0), std::invalid_argument);
}

TEST_CASE("q_sample endpoints and Monte Carlo variance") {
    const NoiseSchedule& s = default_schedule();
    const int t = 700;
    const double ab = s.abar(t);
    CHECK(q_sample(2.0, 0.0, t, s) == doctest::Approx(std::sqrt(ab) * 2.0).epsilon(1e-15));
    CHECK(q_sample(0.0, 1.5, t, s) == doctest::Approx(std::sqrt(1.0 - ab) * 1.5).epsilon(1e-15));
    CHECK_THROWS_AS(q_sample(0.0, 0.0, 0, s), std::invalid_argument);
    CHECK_THROWS_AS(q_sample(0.0, 0.0, 1001, s), std::invalid_argument);

    RngStream rs(1, "qsample");
    double mean = 0.0, m2 = 0.0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        const double v = q_sample(0.0, rs.next_gauss(), s.T, s);
        mean += v;
        m2 += v * v;
    }
    mean /= n;
    const double var = m2 / n - mean * mean;
    CHECK(var == doctest::Approx(1.0 - s.abar(s.T)).epsilon(0.05));
}

TEST_CASE("composing single forward steps matches the closed-form marginal") {
    const NoiseSchedule& s = default_schedule();
    const int t = 60;
    const double x0 = 1.3;
    RngStream rs(2, "compose");
    const int n = 10000;
    double mean = 0.0, m2 = 0.0;
    for (int i = 0; i < n; ++i) {
        double x = x0;
        for (int step = 1; step <= t; ++step)
            x = std::sqrt(1.0 - s.beta[step - 1]) * x + std::sqrt(s.beta[step - 1]) * rs.next_gauss();
        mean += x;
        m2 += x * x;
    }
    mean /= n;
    const double var = m2 / n - mean * mean;
    CHECK(mean == doctest::Approx(std::sqrt(s.abar(t)) * x0).epsilon(0.05));
    CHECK(var == doctest::Approx(1.0 - s.abar(t)).epsilon(0.05));
}

TEST_CASE("predict_x0 inverts q_sample") {
    const NoiseSchedule& s = default_schedule();
    RngStream rs(3, "roundtrip");
    for (int rep = 0; rep < 200; ++rep) {
        const double x0 = 4.0 * rs.next_uniform() - 2.0;
        const double eps = rs.next_gauss();
        const int t = 1 + int(rs.next_u64() % 1000);
        const double xt = q_sample(x0, eps, t, s);
        CHECK(predict_x0(xt, eps, t, s) == doctest::Approx(x0).epsilon(1e-9));
    }
    CHECK(predict_x0(0.7, 0.0, 500, s) ==
          doctest::Approx(0.7 / std::sqrt(s.abar(500))).epsilon(1e-12));
}

TEST_CASE("posterior mean boundary and mu_theta equivalence") {
    const NoiseSchedule& s = default_schedule();
    CHECK(posterior_mean(0.9, 0.4, 1, s) == doctest::Approx(0.4).epsilon(1e-12));

    RngStream rs(4, "mu");
    double worst = 0.0;
    for (int rep = 0; rep < 1000; ++rep) {
        const double x0 = 2.0 * rs.next_gauss();
        const double eps = rs.next_gauss();
        const int t = 1 + int(rs.next_u64() % 1000);
        const double xt = q_sample(x0, eps, t, s);
        const double via_eps = mu_theta(xt, eps, t, s);
        const double via_x0 = posterior_mean(xt, predict_x0(xt, eps, t, s), t, s);
        const double direct = posterior_mean(xt, x0, t, s);
        worst = std::max(worst, std::abs(via_eps - via_x0) / std::max(1.0, std::abs(via_x0)));
        worst = std::max(worst, std::abs(via_eps - direct) / std::max(1.0, std::abs(direct)));
    }
    CHECK(worst < 1e-10);

    const int t = 300;
    CHECK(mu_theta(1.1, 0.0, t, s) ==
          doctest::Approx(1.1 / std::sqrt(s.alpha[t - 1])).epsilon(1e-12));
}

TEST_CASE("sigma_theta endpoints, geometric mean, and the deterministic last step") {
    const NoiseSchedule& s = default_schedule();
    const int t = 500;
    CHECK(sigma_theta(1.0, t, s) == doctest::Approx(std::sqrt(s.beta[t - 1])).epsilon(1e-14));
    CHECK(sigma_theta(0.0, t, s) ==
          doctest::Approx(std::sqrt(s.beta_tilde[t - 1])).epsilon(1e-14));
    CHECK(sigma_theta(0.5, t, s) ==
          doctest::Approx(std::sqrt(std::sqrt(s.beta[t - 1] * s.beta_tilde[t - 1])))
              .epsilon(1e-14));
    CHECK(sigma_theta(0.4, 1, s) == 0.0);
    // Out-of-range v clamps to the endpoints.
    CHECK(sigma_theta(7.0, t, s) == sigma_theta(1.0, t, s));
    CHECK(sigma_theta(-7.0, t, s) == sigma_theta(0.0, t, s));
}

TEST_CASE("ancestral step reduces to the mean when z = 0 and at t = 1") {
    const NoiseSchedule& s = default_schedule();
    CHECK(ancestral_step(0.8, 0.1, 0.6, 400, 0.0, s) ==
          doctest::Approx(mu_theta(0.8, 0.1, 400, s)).epsilon(1e-15));
    CHECK(ancestral_step(0.8, 0.1, 0.6, 1, 3.0, s) ==
          doctest::Approx(mu_theta(0.8, 0.1, 1, s)).epsilon(1e-15));
}

TEST_CASE("full ancestral sampling with the exact Gaussian prior matches the prior") {
    const NoiseSchedule& s = default_schedule();
    const double mu = 3.0, var = 1.0;
    const GMMPrior prior = single_gaussian({mu}, var);

    double om, ov;
    oracle::ancestral_gauss_moments(mu, var, s, &om, &ov);
    // The closed form itself must sit close to the prior moments.
    CHECK(om == doctest::Approx(mu).epsilon(1e-3));
    CHECK(ov == doctest::Approx(var).epsilon(0.02));

    RngStream rs(5, "ancestral");
    const int n = 10000;
    double mean = 0.0, m2 = 0.0;
    for (int i = 0; i < n; ++i) {
        double x = rs.next_gauss();
        for (int t = s.T; t >= 1; --t) {
            const DenoiserOutput out = gmm_eps(std::span<const double>(&x, 1), t, prior, s);
            const double z = t > 1 ? rs.next_gauss() : 0.0;
            x = ancestral_step(x, out.eps_hat[0], out.v[0], t, z, s);
        }
        mean += x;
        m2 += x * x;
    }
    mean /= n;
    const double svar = m2 / n - mean * mean;
    // Against the closed-form oracle (3 standard errors of the MC estimate).
    const double se_mean = std::sqrt(ov / n);
    const double se_var = ov * std::sqrt(2.0 / n);
    CHECK(std::abs(mean - om) < 3.0 * se_mean);
    CHECK(std::abs(svar - ov) < 3.0 * se_var);
    // And against the target prior itself.
    CHECK(std::abs(mean - mu) < 3.0 * se_mean + 1e-3);
    CHECK(std::abs(svar - var) < 3.0 * se_var + 0.01);
}

TEST_CASE("ddim step algebra") {
    const NoiseSchedule& s = default_schedule();
    RngStream rs(6, "ddim");
    for (int rep = 0; rep < 100; ++rep) {
        const double x0 = rs.next_gauss();
        const double eps = rs.next_gauss();
        const int t = 2 + int(rs.next_u64() % 999);
        const int tp = int(rs.next_u64() % uint64_t(t));
        const double xt = q_sample(x0, eps, t, s);
        // With the true noise, DDIM lands exactly on q_sample at t_prev.
        const double stepped = ddim_step(xt, eps, t, tp, s);
        const double direct = tp == 0 ? x0 : q_sample(x0, eps, tp, s);
        CHECK(stepped == doctest::Approx(direct).epsilon(1e-10));
    }
    CHECK_THROWS_AS(ddim_step(0.0, 0.0, 10, 10, s), std::invalid_argument);
    CHECK_THROWS_AS(ddim_step(0.0, 0.0, 10, 12, s), std::invalid_argument);
}

TEST_CASE("ddim timestep grid includes both ends") {
    const std::vector<int> ts = ddim_timesteps(1000, 25);
    CHECK(ts.size() == 25);
    CHECK(ts.front() == 1000);
    CHECK(ts.back() == 1);
    for (size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] < ts[i - 1]);
}

TEST_CASE("25-step DDIM trajectories agree with the closed-form affine oracle") {
    const NoiseSchedule& s = default_schedule();
    const double mu = 3.0, var = 0.25;
    const GMMPrior prior = single_gaussian({mu}, var);
    const std::vector<int> ts = ddim_timesteps(s.T, 25);
    const oracle::AffineMap map = oracle::ddim_gauss_closed_form(mu, var, s, ts);

    RngStream rs(7, "ddim-mc");
    const int n = 10000;
    double mean = 0.0;
    double worst = 0.0;
    for (int i = 0; i < n; ++i) {
        const double xT = rs.next_gauss();
        double x = xT;
        for (size_t k = 0; k < ts.size(); ++k) {
            const int t = ts[k];
            const int tp = k + 1 < ts.size() ? ts[k + 1] : 0;
            const DenoiserOutput out = gmm_eps(std::span<const double>(&x, 1), t, prior, s);
            x = ddim_step(x, out.eps_hat[0], t, tp, s);
        }
        worst = std::max(worst, std::abs(x - (map.a * xT + map.b)));
        mean += x;
    }
    mean /= n;
    CHECK(worst < 1e-9);  // the sampler IS the affine map
    CHECK(mean == doctest::Approx(map.b).epsilon(0.005));
    CHECK(std::abs(mean - mu) / mu < 0.005);
}

TEST_CASE("gmm_eps closed forms") {
    const NoiseSchedule& s = default_schedule();
    const int t = 600;
    const double ab = s.abar(t);

    // Single standard component: eps = sqrt(1-abar) x / (abar + 1 - abar).
    const GMMPrior p1 = single_gaussian({0.0}, 1.0);
    const double x = 0.73;
    const DenoiserOutput o1 = gmm_eps(std::span<const double>(&x, 1), t, p1, s);
    CHECK(o1.eps_hat[0] == doctest::Approx(std::sqrt(1.0 - ab) * x).epsilon(1e-12));
    CHECK(o1.v[0] == 0.0);

    // Two symmetric components at x = 0 cancel by symmetry.
    GMMPrior p2;
    p2.dim = 1;
    p2.components.push_back({0.5, {2.0}, 0.5});
    p2.components.push_back({0.5, {-2.0}, 0.5});
    const double zero = 0.0;
    const DenoiserOutput o2 = gmm_eps(std::span<const double>(&zero, 1), t, p2, s);
    CHECK(std::abs(o2.eps_hat[0]) < 1e-14);
}

TEST_CASE("gmm_eps implied score matches the finite-difference log-density gradient") {
    const NoiseSchedule& s = default_schedule();
    GMMPrior prior;
    prior.dim = 2;
    prior.components.push_back({0.3, {1.0, -0.5}, 0.7});
    prior.components.push_back({0.7, {-0.8, 0.9}, 1.4});

    RngStream rs(8, "score");
    for (int rep = 0; rep < 50; ++rep) {
        const int t = 1 + int(rs.next_u64() % 1000);
        std::vector<double> x{rs.next_gauss(), rs.next_gauss()};
        const DenoiserOutput out = gmm_eps(x, t, prior, s);
        const double ab = s.abar(t);
        for (int d = 0; d < 2; ++d) {
            const double h = 1e-6;
            auto f = [&](double xv) {
                std::vector<double> xx = x;
                xx[d] = xv;
                return gmm_diffused_logpdf(xx, t, prior, s);
            };
            const double fd_score = oracle::central_diff(f, x[d], h);
            const double implied = -out.eps_hat[d] / std::sqrt(1.0 - ab);
            CHECK(implied == doctest::Approx(fd_score).epsilon(1e-6));
        }
    }
}

TEST_CASE("GmmDenoiser vjp matches directional finite differences") {
    const NoiseSchedule& s = default_schedule();
    GMMPrior prior;
    prior.dim = 3;
    prior.components.push_back({0.4, {0.2, -0.1, 0.5}, 0.6});
    prior.components.push_back({0.6, {-0.3, 0.4, -0.2}, 1.1});
    const GmmDenoiser model(prior, s);

    RngStream rs(9, "vjp");
    for (int rep = 0; rep < 20; ++rep) {
        const int t = 1 + int(rs.next_u64() % 1000);
        std::vector<double> x{rs.next_gauss(), rs.next_gauss(), rs.next_gauss()};
        std::vector<double> g{rs.next_gauss(), rs.next_gauss(), rs.next_gauss()};
        std::vector<double> dir{rs.next_gauss(), rs.next_gauss(), rs.next_gauss()};
        std::vector<double> vjp(3);
        model.eps_vjp(x, t, 0, g, vjp);

        // <vjp, dir> must equal d/dh <g, eps(x + h dir)> at h = 0.
        const double h = 1e-6;
        auto eval_dot = [&](double hh) {
            std::vector<double> xx = x;
            for (int i = 0; i < 3; ++i) xx[i] += hh * dir[i];
            std::vector<double> eps(3), v(3);
            model.eval(xx, t, 0, eps, v);
            double dot = 0.0;
            for (int i = 0; i < 3; ++i) dot += g[i] * eps[i];
            return dot;
        };
        const double fd = (eval_dot(h) - eval_dot(-h)) / (2.0 * h);
        double lhs = 0.0;
        for (int i = 0; i < 3; ++i) lhs += vjp[i] * dir[i];
        CHECK(lhs == doctest::Approx(fd).epsilon(1e-5));
    }
}

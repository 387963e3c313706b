#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "spectdiff/gmm_prior.hpp"
#include "spectdiff/rng.hpp"
#include "spectdiff/sampler.hpp"

using namespace spectdiff;
using spectdiff::testing::well_posed_geometry;

namespace {

const NoiseSchedule& sched() {
    static const NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
    return s;
}

}  // namespace

TEST_CASE("fitted lambda_dps values") {
    CHECK(lambda_dps_of(1.0) == 0.3454);
    CHECK(lambda_dps_of(0.01) ==
          doctest::Approx(0.0698 * std::log(0.01) + 0.3454).epsilon(1e-12));
    CHECK(lambda_dps_of(0.01) == doctest::Approx(0.024).epsilon(2e-3));
    CHECK(lambda_dps_of(0.005) == 0.0);  // formula is negative there, clamped
    CHECK_THROWS_AS(lambda_dps_of(0.0), std::invalid_argument);
    CHECK_THROWS_AS(lambda_dps_of(-0.1), std::invalid_argument);
}

TEST_CASE("fitted lambda_mlem values") {
    auto direct = [](double c) {
        return 0.1559 * std::exp(-4.8120 * c) + 0.0079 * std::exp(3.6508 * c);
    };
    CHECK(lambda_mlem_of(0.01) == doctest::Approx(direct(0.01)).epsilon(1e-12));
    CHECK(lambda_mlem_of(1.0) == doctest::Approx(direct(1.0)).epsilon(1e-12));
    CHECK(lambda_mlem_of(0.01) == doctest::Approx(0.1568).epsilon(1e-3));
    CHECK(lambda_mlem_of(1.0) == doctest::Approx(0.305).epsilon(2e-3));
    for (double c : {0.01, 0.05, 0.1, 0.2, 0.5, 1.0}) {
        CHECK(lambda_mlem_of(c) >= 0.0);
        CHECK(lambda_mlem_of(c) <= 1.0);
    }
}

TEST_CASE("lambda ratio trend over the count levels used in practice") {
    // The ratio falls strictly over the five experimental count levels; over
    // the whole interval (0.01, 1] it has an interior minimum near C = 0.42,
    // so it is NOT monotone up to C = 1 (both facts from the numeric sweep).
    auto ratio = [](double c) { return lambda_mlem_of(c) / lambda_dps_of(c); };
    const double levels[] = {0.01, 0.05, 0.10, 0.20, 0.50};
    for (int i = 1; i < 5; ++i) CHECK(ratio(levels[i]) < ratio(levels[i - 1]));
    CHECK(ratio(0.42) < ratio(1.0));
    CHECK(ratio(0.42) < ratio(0.01));
    CHECK(ratio(1.0) < ratio(0.01));
}

TEST_CASE("init_start uses one shared noise field across slices") {
    const VoxelGrid grid = make_centered_grid(8, 8, 4, 4.0);
    ImageVolume x_in(grid);
    RngStream rs(1, "xin");
    for (size_t i = 0; i < x_in.size(); ++i) x_in[i] = rs.next_uniform();

    const size_t N = x_in.slice_size();
    std::vector<double> eps0(N);
    for (auto& e : eps0) e = rs.next_gauss();

    const ImageVolume xT = init_start(x_in, sched(), eps0);
    const double c0 = std::sqrt(sched().abar(sched().T));
    const double ce = std::sqrt(1.0 - sched().abar(sched().T));
    for (int z = 0; z < 4; ++z)
        for (size_t p = 0; p < N; ++p) {
            const double noise_part = xT.slice(z)[p] - c0 * x_in.slice(z)[p];
            CHECK(noise_part == doctest::Approx(ce * eps0[p]).epsilon(1e-12));
        }

    // With eps0 = 0 the start is just the scaled input.
    std::vector<double> zero(N, 0.0);
    const ImageVolume xT0 = init_start(x_in, sched(), zero);
    for (size_t i = 0; i < xT0.size(); ++i)
        CHECK(xT0[i] == doctest::Approx(c0 * x_in[i]).epsilon(1e-15));

    // The noise dominates: the x_in contribution is under 1% in norm.
    double nx = 0.0, nn = 0.0;
    for (size_t i = 0; i < xT.size(); ++i) {
        const double sig = c0 * x_in[i];
        nx += sig * sig;
        nn += xT[i] * xT[i];
    }
    CHECK(std::sqrt(nx / nn) < 0.01);
}

TEST_CASE("dps_correct identities and mode agreement") {
    const VoxelGrid grid = make_centered_grid(8, 8, 4, 4.0);
    RngStream rs(3, "dps");
    ImageVolume x_prev(grid), x_t(grid), x0_hat(grid), x_in(grid);
    for (size_t i = 0; i < x_prev.size(); ++i) {
        x_prev[i] = rs.next_gauss();
        x_t[i] = rs.next_gauss();
        x0_hat[i] = rs.next_uniform();
        x_in[i] = rs.next_uniform();
    }

    ImageVolume same = x_prev;
    dps_correct(same, x_t, x0_hat, x_in, 0.0, 500, sched(), GradMode::approx, nullptr);
    for (size_t i = 0; i < same.size(); ++i) CHECK(same[i] == x_prev[i]);

    ImageVolume zero_resid = x_prev;
    dps_correct(zero_resid, x_t, x0_hat, x0_hat, 2.0, 500, sched(), GradMode::approx, nullptr);
    for (size_t i = 0; i < zero_resid.size(); ++i) CHECK(zero_resid[i] == x_prev[i]);

    // A very wide Gaussian prior makes d eps/dx vanish, so the exact
    // Jacobian collapses to the 1/sqrt(abar) approximation.
    const GMMPrior wide = single_gaussian(std::vector<double>(x_prev.slice_size(), 0.0), 1e12);
    const GmmDenoiser model(wide, sched());
    ImageVolume a = x_prev, b = x_prev;
    dps_correct(a, x_t, x0_hat, x_in, 0.7, 500, sched(), GradMode::approx, nullptr);
    dps_correct(b, x_t, x0_hat, x_in, 0.7, 500, sched(), GradMode::exact, &model);
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-8));

    CHECK_THROWS_AS(
        dps_correct(a, x_t, x0_hat, x_in, -1.0, 500, sched(), GradMode::approx, nullptr),
        std::invalid_argument);
    CHECK_THROWS_AS(
        dps_correct(a, x_t, x0_hat, x_in, 1.0, 500, sched(), GradMode::exact, nullptr),
        std::invalid_argument);
}

TEST_CASE("dps_correct equals the explicit gradient step to first order") {
    const VoxelGrid grid = make_centered_grid(8, 8, 2, 4.0);
    RngStream rs(5, "dps-small");
    ImageVolume x_prev(grid), x_t(grid), x0_hat(grid), x_in(grid);
    for (size_t i = 0; i < x_prev.size(); ++i) {
        x_prev[i] = rs.next_gauss();
        x_t[i] = rs.next_gauss();
        x0_hat[i] = rs.next_uniform();
        x_in[i] = rs.next_uniform();
    }
    const int t = 40;  // late step, abar close to 1
    const double lambda = 1e-6;
    ImageVolume corrected = x_prev;
    dps_correct(corrected, x_t, x0_hat, x_in, lambda, t, sched(), GradMode::approx, nullptr);
    const double inv_sab = 1.0 / std::sqrt(sched().abar(t));
    for (size_t i = 0; i < corrected.size(); ++i) {
        const double explicit_step = 2.0 * lambda * inv_sab * (x_in[i] - x0_hat[i]);
        CHECK(corrected[i] - x_prev[i] == doctest::Approx(explicit_step).epsilon(1e-4));
    }
}

TEST_CASE("mlem_insert blends, fixes points, and guards zero inputs") {
    const VoxelGrid grid = make_centered_grid(8, 8, 4, 4.0);
    const SystemMatrix S = build_system_matrix(well_posed_geometry(), grid);
    RngStream rs(7, "insert");
    ImageVolume x(grid);
    for (size_t i = 0; i < x.size(); ++i) x[i] = 0.5 + rs.next_uniform();
    const ProjectionData y = forward_project(S, x);

    const ImageVolume keep = mlem_insert(x, y, S, 0.0, 1);
    for (size_t i = 0; i < x.size(); ++i) CHECK(keep[i] == x[i]);

    const ImageVolume fixed = mlem_insert(x, y, S, 1.0, 1);
    for (size_t i = 0; i < x.size(); ++i)
        CHECK(fixed[i] == doctest::Approx(x[i]).epsilon(1e-7));

    // Convex midpoint against the full MLEM route.
    ImageVolume x_off = x;
    for (size_t i = 0; i < x.size(); ++i) x_off[i] *= 1.7;
    const ImageVolume full = mlem_insert(x_off, y, S, 1.0, 1);
    const ImageVolume half = mlem_insert(x_off, y, S, 0.5, 1);
    for (size_t i = 0; i < x.size(); ++i)
        CHECK(half[i] == doctest::Approx(0.5 * x_off[i] + 0.5 * full[i]).epsilon(1e-12));

    // All-zero estimate falls back to a uniform MLEM start without throwing.
    ImageVolume zero(grid, 0.0);
    const ImageVolume out = mlem_insert(zero, y, S, 0.7, 1);
    CHECK(out.all_finite());
    double s = 0.0;
    for (size_t i = 0; i < out.size(); ++i) s += out[i];
    CHECK(s > 0.0);

    CHECK_THROWS_AS(mlem_insert(x, y, S, 1.5, 1), std::invalid_argument);
    CHECK_THROWS_AS(mlem_insert(x, y, S, -0.1, 1), std::invalid_argument);
}

TEST_CASE("count scale maps activity units through the MLEM insertion") {
    const VoxelGrid grid = make_centered_grid(8, 8, 4, 4.0);
    const SystemMatrix S = build_system_matrix(well_posed_geometry(), grid);
    RngStream rs(9, "scale");
    ImageVolume x(grid);
    for (size_t i = 0; i < x.size(); ++i) x[i] = 0.5 + rs.next_uniform();
    const double scale = 250.0;
    ProjectionData y = forward_project(S, x);
    for (size_t k = 0; k < y.size(); ++k) y[k] *= scale;  // counts at scale
    const ImageVolume fixed = mlem_insert(x, y, S, 1.0, 1, scale);
    for (size_t i = 0; i < x.size(); ++i)
        CHECK(fixed[i] == doctest::Approx(x[i]).epsilon(1e-7));
}

namespace {

/// Sampler setup around a narrow Gaussian prior whose mean is a known slice
/// pattern, so unguided sampling must land on the mean.
struct GaussSetup {
    VoxelGrid grid = make_centered_grid(8, 8, 4, 4.0);
    std::vector<double> slice_mean;
    ImageVolume x_in;
    std::unique_ptr<GmmDenoiser> model;

    explicit GaussSetup(double var) {
        const size_t N = size_t(8) * 8;
        slice_mean.resize(N);
        for (size_t p = 0; p < N; ++p) slice_mean[p] = 0.5 + 0.4 * std::sin(double(p) * 0.31);
        x_in = ImageVolume(grid);
        for (int z = 0; z < 4; ++z)
            for (size_t p = 0; p < N; ++p) x_in.slice(z)[p] = slice_mean[p];
        model = std::make_unique<GmmDenoiser>(single_gaussian(slice_mean, var), sched());
    }
};

}  // namespace

TEST_CASE("unguided sampling reproduces a narrow analytic prior") {
    GaussSetup setup(1e-6);
    SamplerRun run;
    run.x_in = &setup.x_in;
    run.model = setup.model.get();
    run.sched = &sched();
    run.seed = 42;

    GuidanceConfig cfg;
    cfg.use_dps = false;
    cfg.use_mlem = false;
    cfg.use_tv = false;
    cfg.dual_noise = false;
    cfg.count_level = 1.0;

    const ImageVolume out = sample_volume(run, cfg);
    double num = 0.0, den = 0.0;
    for (int z = 0; z < 4; ++z)
        for (size_t p = 0; p < setup.slice_mean.size(); ++p) {
            num += std::pow(out.slice(z)[p] - setup.slice_mean[p], 2);
            den += std::pow(setup.slice_mean[p], 2);
        }
    CHECK(std::sqrt(num / den) < 0.01);
}

TEST_CASE("sampling is deterministic at any thread count") {
    GaussSetup setup(0.05);
    SamplerRun run;
    run.x_in = &setup.x_in;
    run.model = setup.model.get();
    run.sched = &sched();
    run.seed = 7;

    GuidanceConfig cfg;
    cfg.use_mlem = false;
    cfg.count_level = 0.1;
    cfg.tv_weight = 0.01;
    cfg.tv_inner = 5;

    cfg.threads = 1;
    const ImageVolume a = sample_volume(run, cfg);
    cfg.threads = 4;
    const ImageVolume b = sample_volume(run, cfg);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] >= 0.0);
    CHECK(a.all_finite());
}

TEST_CASE("larger lambda_dps pulls the output strictly closer to x_in") {
    GaussSetup setup(0.25);
    // Make x_in distinct from the prior mean so the pull is measurable.
    RngStream rs(11, "xin-noise");
    for (size_t i = 0; i < setup.x_in.size(); ++i)
        setup.x_in[i] = std::max(0.0, setup.x_in[i] + 0.3 * rs.next_gauss());

    SamplerRun run;
    run.x_in = &setup.x_in;
    run.model = setup.model.get();
    run.sched = &sched();
    run.seed = 13;

    double prev = -1.0;
    bool first = true;
    for (double lam : {0.0, 0.1, 1.0, 10.0, 1000.0}) {
        GuidanceConfig cfg;
        cfg.use_mlem = false;
        cfg.use_tv = false;
        cfg.dual_noise = false;
        cfg.lambda_dps = lam;
        cfg.count_level = 1.0;
        const ImageVolume out = sample_volume(run, cfg);
        double num = 0.0, den = 0.0;
        for (size_t i = 0; i < out.size(); ++i) {
            num += std::pow(out[i] - setup.x_in[i], 2);
            den += std::pow(setup.x_in[i], 2);
        }
        const double rel = std::sqrt(num / den);
        if (!first) CHECK(rel < prev);
        first = false;
        prev = rel;
    }
    CHECK(prev < 0.02);  // lambda = 1000 essentially reproduces x_in
}

TEST_CASE("dual noise averaging is symmetric in the two noise fields") {
    GaussSetup setup(0.1);
    SamplerRun run;
    run.x_in = &setup.x_in;
    run.model = setup.model.get();
    run.sched = &sched();
    run.seed = 17;

    const size_t N = setup.x_in.slice_size();
    RngStream ra(100, "eps-a"), rb(100, "eps-b");
    std::vector<std::vector<double>> fields(2, std::vector<double>(N));
    for (auto& v : fields[0]) v = ra.next_gauss();
    for (auto& v : fields[1]) v = rb.next_gauss();

    GuidanceConfig cfg;
    cfg.use_mlem = false;
    cfg.use_tv = false;
    cfg.count_level = 1.0;

    run.eps0_override = &fields;
    const ImageVolume ab = sample_volume(run, cfg);
    std::swap(fields[0], fields[1]);
    const ImageVolume ba = sample_volume(run, cfg);
    for (size_t i = 0; i < ab.size(); ++i) CHECK(ab[i] == ba[i]);
}

namespace {

class NanModel final : public DenoiserModel {
public:
    void eval(std::span<const double>, int, int, std::span<double> eps_out,
              std::span<double> v_out) const override {
        for (auto& e : eps_out) e = std::numeric_limits<double>::quiet_NaN();
        for (auto& v : v_out) v = 0.0;
    }
};

}  // namespace

TEST_CASE("non-finite sampler states abort with step diagnostics") {
    const VoxelGrid grid = make_centered_grid(8, 8, 2, 4.0);
    ImageVolume x_in(grid, 0.5);
    NanModel model;
    SamplerRun run;
    run.x_in = &x_in;
    run.model = &model;
    run.sched = &sched();
    run.seed = 3;
    GuidanceConfig cfg;
    cfg.use_dps = false;
    cfg.use_mlem = false;
    cfg.use_tv = false;
    cfg.dual_noise = false;
    CHECK_THROWS_AS(sample_volume(run, cfg), NumericalError);
}

TEST_CASE("x0-level correction target produces valid output") {
    GaussSetup setup(0.1);
    SamplerRun run;
    run.x_in = &setup.x_in;
    run.model = setup.model.get();
    run.sched = &sched();
    run.seed = 19;

    GuidanceConfig cfg;
    cfg.use_mlem = false;
    cfg.count_level = 0.2;
    cfg.tv_weight = 0.02;
    cfg.correction_target = CorrectionTarget::x0;
    const ImageVolume out = sample_volume(run, cfg);
    CHECK(out.all_finite());
    for (size_t i = 0; i < out.size(); ++i) CHECK(out[i] >= 0.0);
}

TEST_CASE("guidance config resolves auto lambdas from the count level") {
    GuidanceConfig cfg;
    cfg.count_level = 0.05;
    CHECK(cfg.resolved_lambda_dps() == doctest::Approx(lambda_dps_of(0.05)).epsilon(1e-15));
    CHECK(cfg.resolved_lambda_mlem() == doctest::Approx(lambda_mlem_of(0.05)).epsilon(1e-15));
    cfg.lambda_dps = 0.25;
    cfg.lambda_mlem = 0.5;
    CHECK(cfg.resolved_lambda_dps() == 0.25);
    CHECK(cfg.resolved_lambda_mlem() == 0.5);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "spectdiff/metrics.hpp"
#include "spectdiff/rng.hpp"

using namespace spectdiff;

TEST_CASE("psnr formula and sentinel") {
    ImageVolume ref(2, 2, 1);
    ref(0, 0, 0) = 0.0;
    ref(1, 0, 0) = 0.5;
    ref(0, 1, 0) = 0.75;
    ref(1, 1, 0) = 1.0;

    CHECK(psnr(ref, ref) == std::numeric_limits<double>::infinity());

    // Shift every voxel by 0.1: MSE = 0.01 against peak 1 -> 20 dB.
    ImageVolume x = ref;
    for (size_t i = 0; i < x.size(); ++i) x[i] += 0.1;
    CHECK(psnr(x, ref) == doctest::Approx(20.0).epsilon(1e-12));

    // Hand-computed 4-voxel case: errors (0.1, -0.2, 0, 0.1),
    // MSE = (0.01 + 0.04 + 0 + 0.01)/4 = 0.015, peak = 1.
    ImageVolume h = ref;
    h(0, 0, 0) += 0.1;
    h(1, 0, 0) -= 0.2;
    h(1, 1, 0) += 0.1;
    CHECK(psnr(h, ref) == doctest::Approx(10.0 * std::log10(1.0 / 0.015)).epsilon(1e-12));

    ImageVolume flat(2, 2, 1, 0.4);
    CHECK_THROWS_AS(psnr(ref, flat), std::invalid_argument);
}

TEST_CASE("psnr decreases monotonically with perturbation amplitude") {
    RngStream rs(5, "psnr");
    ImageVolume ref(8, 8, 4);
    for (size_t i = 0; i < ref.size(); ++i) ref[i] = rs.next_uniform();
    std::vector<double> noise(ref.size());
    for (auto& n : noise) n = rs.next_gauss();

    double prev = std::numeric_limits<double>::infinity();
    for (int k = 1; k <= 10; ++k) {
        ImageVolume x = ref;
        for (size_t i = 0; i < x.size(); ++i) x[i] += 0.02 * k * noise[i];
        const double p = psnr(x, ref);
        CHECK(p < prev);
        prev = p;
    }
}

TEST_CASE("nrmse formula and invariances") {
    ImageVolume ref(2, 2, 1);
    ref(0, 0, 0) = 0.0;
    ref(1, 0, 0) = 2.0;
    ref(0, 1, 0) = 1.0;
    ref(1, 1, 0) = 0.5;

    CHECK(nrmse(ref, ref) == 0.0);

    ImageVolume shifted = ref;
    for (size_t i = 0; i < shifted.size(); ++i) shifted[i] += 0.3;
    CHECK(nrmse(shifted, ref) == doctest::Approx(0.3 / 2.0).epsilon(1e-12));

    // Adding the same constant to both volumes changes nothing.
    ImageVolume x = ref;
    x(0, 0, 0) += 0.2;
    const double base = nrmse(x, ref);
    ImageVolume x2 = x, ref2 = ref;
    for (size_t i = 0; i < x2.size(); ++i) {
        x2[i] += 5.0;
        ref2[i] += 5.0;
    }
    CHECK(nrmse(x2, ref2) == doctest::Approx(base).epsilon(1e-12));

    // Hand case: single error 0.2 over 4 voxels, range 2:
    // sqrt(0.04/4)/2 = 0.1/2 = 0.05.
    CHECK(base == doctest::Approx(0.05).epsilon(1e-12));

    ImageVolume flat(2, 2, 1, 1.0);
    CHECK_THROWS_AS(nrmse(ref, flat), std::invalid_argument);
}

TEST_CASE("ssim identities, symmetry, and failure modes") {
    RngStream rs(9, "ssim");
    ImageVolume ref(16, 16, 3);
    for (size_t i = 0; i < ref.size(); ++i) ref[i] = rs.next_uniform();

    CHECK(ssim(ref, ref) == doctest::Approx(1.0).epsilon(1e-12));

    ImageVolume noisy = ref;
    for (size_t i = 0; i < noisy.size(); ++i) noisy[i] += 0.1 * rs.next_gauss();
    const double s = ssim(noisy, ref);
    CHECK(s < 1.0);
    CHECK(s > -1.0);

    // Symmetric when the dynamic range is shared.
    const double range = 2.0;
    CHECK(ssim(noisy, ref, range) == doctest::Approx(ssim(ref, noisy, range)).epsilon(1e-12));

    // A zero-mean pattern against its negation drives the structure term
    // negative.
    ImageVolume pattern(16, 16, 1);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) pattern(x, y, 0) = ((x + y) % 2 == 0) ? 1.0 : -1.0;
    ImageVolume anti = pattern;
    for (size_t i = 0; i < anti.size(); ++i) anti[i] = -anti[i];
    CHECK(ssim(anti, pattern, 2.0) < 0.0);

    ImageVolume small(8, 8, 2, 0.0);
    small(1, 1, 0) = 1.0;
    CHECK_THROWS_AS(ssim(small, small), std::invalid_argument);
}

TEST_CASE("evaluate_sweep aggregates per condition in order") {
    ImageVolume ref(16, 16, 2);
    RngStream rs(13, "sweep");
    for (size_t i = 0; i < ref.size(); ++i) ref[i] = rs.next_uniform();

    // Identical pair: (inf, 0, 1).
    MetricReport single = evaluate_sweep({"same"}, {&ref}, {&ref});
    REQUIRE(single.rows.size() == 1);
    CHECK(single.rows[0].psnr_db == std::numeric_limits<double>::infinity());
    CHECK(single.rows[0].nrmse == 0.0);
    CHECK(single.rows[0].ssim == doctest::Approx(1.0).epsilon(1e-12));

    ImageVolume a = ref, b = ref;
    for (size_t i = 0; i < a.size(); ++i) {
        a[i] += 0.05 * rs.next_gauss();
        b[i] += 0.20 * rs.next_gauss();
    }
    const MetricReport rep = evaluate_sweep({"zeta", "alpha", "zeta"}, {&a, &b, &a},
                                            {&ref, &ref, &ref});
    REQUIRE(rep.rows.size() == 2);
    CHECK(rep.rows[0].condition == "zeta");  // first-appearance order kept
    CHECK(rep.rows[1].condition == "alpha");
    CHECK(rep.rows[0].n_volumes == 2);
    CHECK(rep.rows[1].n_volumes == 1);

    CHECK_THROWS_AS(evaluate_sweep({"x"}, {&a, &b}, {&ref, &ref}), std::invalid_argument);

    // Paper-shaped sweep: 5 count + 5 view conditions give a 10-row report.
    std::vector<std::string> conds;
    std::vector<const ImageVolume*> vols, refs;
    for (const char* c : {"c001", "c005", "c010", "c020", "c050", "v01", "v03", "v05", "v07", "v09"}) {
        conds.push_back(c);
        vols.push_back(&a);
        refs.push_back(&ref);
    }
    const MetricReport ten = evaluate_sweep(conds, vols, refs);
    CHECK(ten.rows.size() == 10);

    const std::string csv = ten.to_csv();
    CHECK(csv.find("condition,psnr_db,nrmse,ssim,n_volumes") != std::string::npos);
    CHECK(csv.find("c001") != std::string::npos);
    const std::string table = ten.to_table();
    CHECK(table.find("PSNR(dB)") != std::string::npos);
}

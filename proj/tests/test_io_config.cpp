#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "spectdiff/config.hpp"
#include "spectdiff/io.hpp"
#include "spectdiff/rng.hpp"
#include "spectdiff/system_matrix.hpp"

using namespace spectdiff;

TEST_CASE("volume serialization round trip is f32 exact") {
    ImageVolume v(5, 4, 3);
    v.set_voxel_size({4.0, 4.0, 4.0});
    RngStream rs(1, "io");
    for (size_t i = 0; i < v.size(); ++i) v[i] = rs.next_gauss();

    const std::string path = "test_vol.spvl";
    write_volume(path, v);
    const ImageVolume back = read_volume(path);
    CHECK(back.nx() == 5);
    CHECK(back.ny() == 4);
    CHECK(back.nz() == 3);
    CHECK(back.voxel_size().x == 4.0f);
    for (size_t i = 0; i < v.size(); ++i) CHECK(back[i] == double(float(v[i])));
    std::remove(path.c_str());
}

TEST_CASE("projection serialization round trip") {
    ProjectionData p(6, 5, 3);
    RngStream rs(2, "io");
    for (size_t i = 0; i < p.size(); ++i) p[i] = std::floor(10.0 * rs.next_uniform());
    const std::string path = "test_proj.sppj";
    write_projection(path, p, 4.0, 4.0);
    const ProjectionData back = read_projection(path);
    CHECK(back.nu() == 6);
    CHECK(back.nv() == 5);
    CHECK(back.n_detectors() == 3);
    for (size_t i = 0; i < p.size(); ++i) CHECK(back[i] == p[i]);
    std::remove(path.c_str());
}

TEST_CASE("magic bytes are enforced") {
    const std::string path = "test_bad.bin";
    {
        std::ofstream f(path, std::ios::binary);
        f << "JUNKJUNKJUNKJUNKJUNKJUNK";
    }
    CHECK_THROWS_AS(read_volume(path), DataError);
    CHECK_THROWS_AS(read_projection(path), DataError);
    CHECK_THROWS_AS(load_system_matrix(path), DataError);
    std::remove(path.c_str());
    CHECK_THROWS_AS(read_volume("does_not_exist.spvl"), DataError);
}

TEST_CASE("montage contains the three orthogonal center slices") {
    ImageVolume v(8, 6, 4);
    for (size_t i = 0; i < v.size(); ++i) v[i] = double(i % 17) / 16.0;
    const std::string path = "test_montage.pgm";
    write_montage_pgm(path, v);
    std::ifstream f(path, std::ios::binary);
    std::string magic;
    int w = 0, h = 0, maxv = 0;
    f >> magic >> w >> h >> maxv;
    CHECK(magic == "P5");
    CHECK(w == 8 + 8 + 6 + 2);  // axial + coronal + sagittal + separators
    CHECK(h == 6);              // max(ny, nz)
    CHECK(maxv == 255);
    std::remove(path.c_str());
}

TEST_CASE("file hashing is content-based") {
    const std::string p1 = "hash_a.bin", p2 = "hash_b.bin";
    {
        std::ofstream f(p1, std::ios::binary);
        f << "identical-content";
    }
    {
        std::ofstream f(p2, std::ios::binary);
        f << "identical-content";
    }
    CHECK(hash_file(p1) == hash_file(p2));
    {
        std::ofstream f(p2, std::ios::binary);
        f << "different-content";
    }
    CHECK(hash_file(p1) != hash_file(p2));
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("key=value parsing skips comments and trims whitespace") {
    const auto kv = parse_kv_text("# comment\n  a.b = 12 \n\nc.d=hello world\n");
    CHECK(kv.at("a.b") == "12");
    CHECK(kv.at("c.d") == "hello world");
    CHECK_THROWS_AS(parse_kv_text("no equals sign here"), DataError);
}

TEST_CASE("config rejects unknown keys and parses typed values") {
    RunConfig cfg;
    CHECK(cfg.get_int("grid.nx") == 32);
    CHECK(cfg.get_double("grid.voxel_mm") == 4.0);
    CHECK(cfg.get_bool("guidance.dual_noise") == true);
    CHECK(cfg.get("guidance.lambda_dps") == "auto");

    cfg.set("grid.nx", "16");
    CHECK(cfg.get_int("grid.nx") == 16);
    CHECK_THROWS_AS(cfg.set("grid.unknown", "1"), ConfigError);
    CHECK_THROWS_AS(cfg.apply_text("bogus.key = 3\n"), ConfigError);
    CHECK_THROWS_AS(cfg.get("not.a.key"), ConfigError);

    cfg.set("grid.nx", "not-a-number");
    CHECK_THROWS_AS(cfg.get_int("grid.nx"), ConfigError);
}

TEST_CASE("config hash tracks content, not application order") {
    RunConfig a, b;
    a.set("grid.nx", "24");
    a.set("train.steps", "100");
    b.set("train.steps", "100");
    b.set("grid.nx", "24");
    CHECK(a.hash() == b.hash());
    CHECK(a.hash_hex().size() == 16);

    b.set("grid.nx", "25");
    CHECK(a.hash() != b.hash());

    const RunConfig fresh;
    CHECK(fresh.hash() != a.hash());
}

TEST_CASE("config file round trip") {
    RunConfig cfg;
    cfg.set("schedule.T", "250");
    cfg.set("guidance.tv_weight", "0.125");
    const std::string path = "test_config.txt";
    {
        std::ofstream f(path, std::ios::binary);
        f << cfg.canonical_text();
    }
    const RunConfig back = RunConfig::from_file(path);
    CHECK(back.hash() == cfg.hash());
    CHECK(back.get_int("schedule.T") == 250);
    CHECK(back.get_double("guidance.tv_weight") == 0.125);
    std::remove(path.c_str());
}

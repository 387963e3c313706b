#include "spectdiff/io.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace spectdiff {

uint64_t fnv1a64_bytes(const void* data, size_t n, uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

uint64_t fnv1a64_string(const std::string& s) { return fnv1a64_bytes(s.data(), s.size()); }

uint64_t hash_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for read: " + path);
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (f) {
        f.read(buf, sizeof(buf));
        h = fnv1a64_bytes(buf, size_t(f.gcount()), h);
    }
    return h;
}

std::string hex64(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

namespace {

void write_f32(std::ofstream& f, float v) { f.write(reinterpret_cast<const char*>(&v), 4); }
void write_u32(std::ofstream& f, uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }

float read_f32(std::ifstream& f) {
    float v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
uint32_t read_u32(std::ifstream& f) {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
}

}  // namespace

void write_volume(const std::string& path, const ImageVolume& vol) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for write: " + path);
    f.write("SPVL", 4);
    write_u32(f, uint32_t(vol.nx()));
    write_u32(f, uint32_t(vol.ny()));
    write_u32(f, uint32_t(vol.nz()));
    write_f32(f, float(vol.voxel_size().x));
    write_f32(f, float(vol.voxel_size().y));
    write_f32(f, float(vol.voxel_size().z));
    for (size_t i = 0; i < vol.size(); ++i) write_f32(f, float(vol[i]));
    if (!f) throw DataError("write failed: " + path);
}

ImageVolume read_volume(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for read: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "SPVL", 4) != 0) throw DataError("not a SPVL file: " + path);
    const int nx = int(read_u32(f)), ny = int(read_u32(f)), nz = int(read_u32(f));
    Vec3 vs;
    vs.x = read_f32(f);
    vs.y = read_f32(f);
    vs.z = read_f32(f);
    ImageVolume vol(nx, ny, nz);
    vol.set_voxel_size(vs);
    for (size_t i = 0; i < vol.size(); ++i) vol[i] = double(read_f32(f));
    if (!f) throw DataError("truncated SPVL file: " + path);
    return vol;
}

void write_projection(const std::string& path, const ProjectionData& proj, double pixel_u,
                      double pixel_v) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for write: " + path);
    f.write("SPPJ", 4);
    write_u32(f, uint32_t(proj.nu()));
    write_u32(f, uint32_t(proj.nv()));
    write_u32(f, uint32_t(proj.n_detectors()));
    write_f32(f, float(pixel_u));
    write_f32(f, float(pixel_v));
    for (size_t i = 0; i < proj.size(); ++i) write_f32(f, float(proj[i]));
    if (!f) throw DataError("write failed: " + path);
}

ProjectionData read_projection(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for read: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "SPPJ", 4) != 0) throw DataError("not a SPPJ file: " + path);
    const int nu = int(read_u32(f)), nv = int(read_u32(f)), nd = int(read_u32(f));
    read_f32(f);
    read_f32(f);
    ProjectionData proj(nu, nv, nd);
    for (size_t i = 0; i < proj.size(); ++i) proj[i] = double(read_f32(f));
    if (!f) throw DataError("truncated SPPJ file: " + path);
    return proj;
}

void write_montage_pgm(const std::string& path, const ImageVolume& vol) {
    // Three center slices (axial z, coronal y, sagittal x) side by side.
    const int nx = vol.nx(), ny = vol.ny(), nz = vol.nz();
    const int h = std::max(ny, nz);
    const int w = nx + nx + ny + 2;
    double vmax = 0.0;
    for (size_t i = 0; i < vol.size(); ++i) vmax = std::max(vmax, vol[i]);
    if (vmax <= 0.0) vmax = 1.0;

    std::vector<unsigned char> img(size_t(w) * h, 0);
    auto put = [&](int x, int y, double v) {
        double q = v / vmax;
        q = std::clamp(q, 0.0, 1.0);
        img[size_t(y) * w + x] = static_cast<unsigned char>(q * 255.0 + 0.5);
    };
    const int cz = nz / 2, cy = ny / 2, cx = nx / 2;
    for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x) put(x, y, vol(x, y, cz));
    for (int z = 0; z < nz; ++z)
        for (int x = 0; x < nx; ++x) put(nx + 1 + x, z, vol(x, cy, z));
    for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y) put(nx + nx + 2 + y, z, vol(cx, y, z));

    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for write: " + path);
    f << "P5\n" << w << " " << h << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.data()), std::streamsize(img.size()));
    if (!f) throw DataError("write failed: " + path);
}

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    while (std::getline(is, line)) {
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw DataError("key=value parse error: " + line);
        kv[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    return kv;
}

std::map<std::string, std::string> read_kv_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for read: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_kv_text(ss.str());
}

void write_kv_file(const std::string& path, const std::map<std::string, std::string>& kv) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for write: " + path);
    for (const auto& [k, v] : kv) f << k << " = " << v << "\n";
    if (!f) throw DataError("write failed: " + path);
}

bool file_exists(const std::string& path) {
    std::error_code ec;
    return std::filesystem::exists(path, ec);
}

}  // namespace spectdiff

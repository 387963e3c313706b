#include "spectdiff/geometry.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace spectdiff {

namespace {
constexpr double kPi = 3.14159265358979323846;

double deg2rad(double d) { return d * kPi / 180.0; }
}  // namespace

void DetectorSpec::validate() const {
    if (nu < 1 || nv < 1)
        throw std::invalid_argument("DetectorSpec: pixel counts must be >= 1");
    if (std::abs(detector_normal.norm() - 1.0) > 1e-12)
        throw std::invalid_argument("DetectorSpec: detector_normal must have unit norm");
    if (width <= 0.0 || height <= 0.0)
        throw std::invalid_argument("DetectorSpec: detector size must be positive");
    const double dist = std::abs((pinhole_position - detector_center).dot(detector_normal));
    if (dist < 1e-9)
        throw std::invalid_argument("DetectorSpec: pinhole lies on the detector plane");
}

DetectorAxes detector_axes(const DetectorSpec& d) {
    const Vec3 n = d.detector_normal;
    Vec3 up{0.0, 0.0, 1.0};
    if (std::abs(n.dot(up)) > 0.999) up = Vec3{1.0, 0.0, 0.0};
    const Vec3 u = up.cross(n).normalized();
    const Vec3 v = n.cross(u);
    return {u, v};
}

void ScannerGeometry::validate() const {
    if (detectors.empty()) throw std::invalid_argument("ScannerGeometry: no detectors");
    if (detectors.size() != row_assignment.size())
        throw std::invalid_argument("ScannerGeometry: row_assignment size mismatch");
    for (const auto& d : detectors) d.validate();
}

ScannerGeometry build_default_geometry(double scale) {
    if (!(scale > 0.0)) throw std::invalid_argument("build_default_geometry: scale must be > 0");

    // Desk-scale analog of a 19-module three-row pinhole scanner. Pinholes sit
    // on an arc of radius 150*scale mm about the grid center, detectors behind
    // them at 250*scale mm, every module aimed at the origin. The focused FOV
    // is the central sphere of diameter 76*scale mm (19 voxels at 4 mm).
    const double pinhole_radius = 150.0 * scale;
    const double detector_radius = 250.0 * scale;
    const double face = 64.0 * scale;  // 16 pixels at 4*scale mm
    const int pixels = 16;

    ScannerGeometry geom;
    auto add = [&](double azimuth_deg, double elevation_deg, DetectorRow row) {
        const double az = deg2rad(azimuth_deg);
        const double el = deg2rad(elevation_deg);
        const Vec3 dir{std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)};
        DetectorSpec d;
        d.pinhole_position = dir * pinhole_radius;
        d.detector_center = dir * detector_radius;
        d.detector_normal = (Vec3{0, 0, 0} - dir).normalized();
        d.width = face;
        d.height = face;
        d.nu = pixels;
        d.nv = pixels;
        geom.detectors.push_back(d);
        geom.row_assignment.push_back(row);
    };

    for (int i = 0; i < 9; ++i) add(-76.0 + 19.0 * i, 0.0, DetectorRow::center);
    for (int i = 0; i < 5; ++i) add(-57.0 + 28.5 * i, 24.0, DetectorRow::top);
    for (int i = 0; i < 5; ++i) add(-57.0 + 28.5 * i, -24.0, DetectorRow::bottom);

    geom.validate();
    return geom;
}

void ViewSubset::validate(int n_detectors) const {
    if (included.empty()) throw std::invalid_argument("ViewSubset: empty subset");
    int prev = -1;
    for (int idx : included) {
        if (idx < 0 || idx >= n_detectors)
            throw std::invalid_argument("ViewSubset: detector index out of range");
        if (idx <= prev)
            throw std::invalid_argument("ViewSubset: indices must be sorted and unique");
        prev = idx;
    }
}

ViewSubset full_views(int n_detectors) {
    ViewSubset s;
    s.included.resize(n_detectors);
    for (int i = 0; i < n_detectors; ++i) s.included[i] = i;
    return s;
}

ViewSubset center_row_views(int n_views) {
    if (n_views != 1 && n_views != 3 && n_views != 5 && n_views != 7 && n_views != 9)
        throw std::invalid_argument("center_row_views: preset must be one of 1,3,5,7,9");
    // Center row occupies indices 0..8 with index 4 on the central azimuth.
    ViewSubset s;
    const int half = n_views / 2;
    for (int i = 4 - half; i <= 4 + half; ++i) s.included.push_back(i);
    return s;
}

namespace {

std::string vec_str(const Vec3& v) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g", v.x, v.y, v.z);
    return buf;
}

Vec3 parse_vec(const std::string& s) {
    std::istringstream is(s);
    Vec3 v;
    if (!(is >> v.x >> v.y >> v.z)) throw DataError("geometry: bad vector: " + s);
    return v;
}

}  // namespace

std::string serialize_geometry(const ScannerGeometry& geom) {
    std::ostringstream os;
    os << "n_detectors = " << geom.n_detectors() << "\n";
    static const char* row_names[] = {"top", "center", "bottom"};
    for (int i = 0; i < geom.n_detectors(); ++i) {
        const DetectorSpec& d = geom.detectors[i];
        const std::string p = "detector." + std::to_string(i) + ".";
        os << p << "pinhole = " << vec_str(d.pinhole_position) << "\n";
        os << p << "center = " << vec_str(d.detector_center) << "\n";
        os << p << "normal = " << vec_str(d.detector_normal) << "\n";
        os << p << "size = " << d.width << " " << d.height << "\n";
        os << p << "pixels = " << d.nu << " " << d.nv << "\n";
        os << p << "row = " << row_names[int(geom.row_assignment[i])] << "\n";
    }
    return os.str();
}

ScannerGeometry parse_geometry(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw DataError("geometry: missing '=' in line: " + line);
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    auto get = [&](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw DataError("geometry: missing key " + key);
        return it->second;
    };

    ScannerGeometry geom;
    const int n = std::stoi(get("n_detectors"));
    for (int i = 0; i < n; ++i) {
        const std::string p = "detector." + std::to_string(i) + ".";
        DetectorSpec d;
        d.pinhole_position = parse_vec(get(p + "pinhole"));
        d.detector_center = parse_vec(get(p + "center"));
        d.detector_normal = parse_vec(get(p + "normal"));
        {
            std::istringstream ss(get(p + "size"));
            ss >> d.width >> d.height;
        }
        {
            std::istringstream ss(get(p + "pixels"));
            ss >> d.nu >> d.nv;
        }
        const std::string row = get(p + "row");
        DetectorRow r;
        if (row == "top") r = DetectorRow::top;
        else if (row == "center") r = DetectorRow::center;
        else if (row == "bottom") r = DetectorRow::bottom;
        else throw DataError("geometry: bad row label " + row);
        geom.detectors.push_back(d);
        geom.row_assignment.push_back(r);
    }
    geom.validate();
    return geom;
}

void save_geometry(const std::string& path, const ScannerGeometry& geom) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for write: " + path);
    f << serialize_geometry(geom);
}

ScannerGeometry load_geometry(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for read: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_geometry(ss.str());
}

}  // namespace spectdiff

#pragma once

#include <string>
#include <vector>

#include "spectdiff/types.hpp"

namespace spectdiff {

/// One pinhole-collimated detector module.
struct DetectorSpec {
    Vec3 pinhole_position;   // mm
    Vec3 detector_center;    // mm
    Vec3 detector_normal;    // unit vector, points from the detector toward the FOV
    double width = 0.0;      // mm, along the u axis
    double height = 0.0;     // mm, along the v axis
    int nu = 0, nv = 0;      // pixel counts

    void validate() const;
};

/// In-plane pixel axes derived canonically from the detector normal.
struct DetectorAxes {
    Vec3 u, v;
};
DetectorAxes detector_axes(const DetectorSpec& d);

enum class DetectorRow { top = 0, center = 1, bottom = 2 };

/// Stationary multi-pinhole scanner.
///
/// The default build has 19 detectors in three rows (5 top, 9 center,
/// 5 bottom) on an arc focused on the grid center. Detector ordering is
/// stable: indices 0..8 are the center row sorted by azimuth, 9..13 the
/// top row, 14..18 the bottom row.
struct ScannerGeometry {
    std::vector<DetectorSpec> detectors;
    std::vector<DetectorRow> row_assignment;

    int n_detectors() const { return int(detectors.size()); }
    void validate() const;
};

ScannerGeometry build_default_geometry(double scale);

/// Subset of detector indices included in an acquisition.
struct ViewSubset {
    std::vector<int> included;  // sorted, unique

    void validate(int n_detectors) const;
    bool is_full(int n_detectors) const { return int(included.size()) == n_detectors; }
};

ViewSubset full_views(int n_detectors);

/// Named few-view presets: n in {1,3,5,7,9} selects detectors symmetrically
/// from the middle of the center row outward; 9 is the entire center row.
ViewSubset center_row_views(int n_views);

std::string serialize_geometry(const ScannerGeometry& geom);
ScannerGeometry parse_geometry(const std::string& text);
void save_geometry(const std::string& path, const ScannerGeometry& geom);
ScannerGeometry load_geometry(const std::string& path);

}  // namespace spectdiff

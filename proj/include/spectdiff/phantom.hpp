#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "spectdiff/system_matrix.hpp"
#include "spectdiff/types.hpp"

namespace spectdiff {

/// Perfusion defect carved into the shell: an azimuthal sector crossed with
/// an axial band. severity 1 drops the wall to background level.
struct DefectSpec {
    double azimuth_center_deg = 0.0;
    double azimuth_extent_deg = 60.0;
    double axial_center_frac = 0.0;   // relative to the shell z half-extent, in [-1, 1]
    double axial_extent_frac = 0.5;   // band height as a fraction of the z extent
    double severity = 1.0;            // in [0, 1]
};

struct LiverBlob {
    Vec3 center;
    Vec3 semi_axes;
    double activity = 0.0;
};

/// Cardiac-like phantom: an ellipsoidal myocardium shell with optional
/// defects, a warm background body, and an optional liver blob.
struct PhantomSpec {
    Vec3 center;
    Vec3 semi_axes{28.0, 28.0, 24.0};  // mm, outer shell
    double wall_thickness = 8.0;       // mm
    double shell_activity = 1.0;
    double background_activity = 0.08;
    std::vector<DefectSpec> defects;
    std::optional<LiverBlob> liver;
    uint64_t seed = 0;

    void validate() const;
};

/// Tissue-density surrogate on the same grid as the activity volume,
/// deterministic in the spec; values in [0, 1].
struct PhantomVolumes {
    ImageVolume activity;
    ImageVolume anatomy;
};

PhantomVolumes make_phantom(const PhantomSpec& spec, const VoxelGrid& grid);

/// Randomized spec for dataset generation; deterministic in (grid, seed).
PhantomSpec random_phantom_spec(const VoxelGrid& grid, uint64_t seed);

/// Poisson projection data with expectation scaled so its sum equals
/// total_counts. Per-bin counter RNG streams keep the draw order-independent.
ProjectionData simulate_counts(const SystemMatrix& S, const ImageVolume& activity,
                               double total_counts, uint64_t seed);

/// Binomial thinning: each count survives independently with probability
/// level. Input must be integer-valued.
ProjectionData thin_counts(const ProjectionData& y, double level, uint64_t seed);

/// Keep only detectors in the subset, consistent with restrict_views ordering.
ProjectionData mask_views(const ProjectionData& y, const ViewSubset& subset);

}  // namespace spectdiff

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "spectdiff/geometry.hpp"
#include "spectdiff/types.hpp"

namespace spectdiff {

/// Sparse nonnegative operator mapping voxel activities to expected detector
/// counts, with exact transpose access. Row k is a detector bin, column j a
/// voxel. Immutable after build; safe to share across threads.
class SystemMatrix {
public:
    int64_t rows() const { return rows_; }
    int64_t cols() const { return cols_; }
    uint64_t nnz() const { return uint64_t(values_.size()); }
    uint64_t geometry_hash() const { return geometry_hash_; }

    /// y = S x. x has cols() entries, y rows() entries.
    void apply(const double* x, double* y, int n_threads = 1) const;
    /// x = S^T y.
    void apply_adjoint(const double* y, double* x, int n_threads = 1) const;

    /// Entries of one row as (col, value) pairs.
    void row_entries(int64_t row, std::vector<std::pair<int64_t, double>>* out) const;

    // Shape metadata (present when built from a geometry; detector_ids maps
    // row blocks back to the original detector ordering).
    const VoxelGrid& grid() const { return grid_; }
    int bins_u() const { return nu_; }
    int bins_v() const { return nv_; }
    int n_detectors() const { return int(detector_ids_.size()); }
    const std::vector<int>& detector_ids() const { return detector_ids_; }

    ProjectionData make_projection(double fill = 0.0) const {
        return ProjectionData(nu_, nv_, n_detectors(), fill);
    }
    ImageVolume make_volume(double fill = 0.0) const { return ImageVolume(grid_, fill); }

    static SystemMatrix from_triplets(int64_t rows, int64_t cols,
                                      const std::vector<uint32_t>& r,
                                      const std::vector<uint32_t>& c,
                                      const std::vector<double>& v);

    friend SystemMatrix build_system_matrix(const ScannerGeometry&, const VoxelGrid&, int);
    friend SystemMatrix restrict_views(const SystemMatrix&, const ViewSubset&);
    friend void save_system_matrix(const std::string&, const SystemMatrix&);
    friend SystemMatrix load_system_matrix(const std::string&);

private:
    void build_index();
    void compute_hash();

    int64_t rows_ = 0, cols_ = 0;
    // CSR
    std::vector<int64_t> row_ptr_;
    std::vector<uint32_t> col_idx_;
    std::vector<double> values_;
    // CSC (same entries, column-major) for the exact adjoint
    std::vector<int64_t> col_ptr_;
    std::vector<uint32_t> row_idx_;
    std::vector<double> values_csc_;

    uint64_t geometry_hash_ = 0;
    VoxelGrid grid_;
    int nu_ = 0, nv_ = 0;
    std::vector<int> detector_ids_;
};

/// Ideal-pinhole perspective projector: every voxel center is projected
/// through each pinhole onto the detector plane and splatted bilinearly onto
/// the 2x2 nearest pixels, weighted by cos(theta)/(4 pi r^2). Entries below
/// 1e-12 of the per-column maximum are dropped. Deterministic for fixed
/// inputs at any thread count.
SystemMatrix build_system_matrix(const ScannerGeometry& geom, const VoxelGrid& grid,
                                 int n_threads = 1);

/// Rows of detectors outside the subset are removed; ordering of the kept
/// detectors follows ascending original index.
SystemMatrix restrict_views(const SystemMatrix& S, const ViewSubset& subset);

ProjectionData forward_project(const SystemMatrix& S, const ImageVolume& x, int n_threads = 1);
ImageVolume back_project(const SystemMatrix& S, const ProjectionData& y, int n_threads = 1);

// Binary format: magic "SPSM", u32 rows, u32 cols, u64 nnz, then
// little-endian (u32 row, u32 col, f32 value) triplets in row-major order.
void save_system_matrix(const std::string& path, const SystemMatrix& S);
SystemMatrix load_system_matrix(const std::string& path);

}  // namespace spectdiff

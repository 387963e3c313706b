#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace spectdiff {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const {
        const double n = norm();
        if (n == 0.0) throw std::invalid_argument("cannot normalize zero vector");
        return {x / n, y / n, z / n};
    }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

/// Axis-aligned voxel grid. Voxel (ix,iy,iz) has its center at
/// origin + ((ix+0.5)*sx, (iy+0.5)*sy, (iz+0.5)*sz).
struct VoxelGrid {
    std::array<int, 3> dims{1, 1, 1};
    Vec3 voxel_size{1.0, 1.0, 1.0};
    Vec3 origin{0.0, 0.0, 0.0};

    int64_t n_voxels() const {
        return int64_t(dims[0]) * dims[1] * dims[2];
    }
    int64_t index(int ix, int iy, int iz) const {
        return ix + int64_t(dims[0]) * (iy + int64_t(dims[1]) * iz);
    }
    Vec3 voxel_center(int ix, int iy, int iz) const {
        return {origin.x + (ix + 0.5) * voxel_size.x,
                origin.y + (iy + 0.5) * voxel_size.y,
                origin.z + (iz + 0.5) * voxel_size.z};
    }
    Vec3 extent() const {
        return {dims[0] * voxel_size.x, dims[1] * voxel_size.y, dims[2] * voxel_size.z};
    }
    Vec3 center() const { return origin + extent() * 0.5; }

    void validate() const {
        if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1)
            throw std::invalid_argument("VoxelGrid: all dims must be >= 1");
        if (voxel_size.x <= 0 || voxel_size.y <= 0 || voxel_size.z <= 0)
            throw std::invalid_argument("VoxelGrid: voxel_size must be positive");
    }
};

/// Grid centered on the world origin.
inline VoxelGrid make_centered_grid(int nx, int ny, int nz, double voxel_mm) {
    VoxelGrid g;
    g.dims = {nx, ny, nz};
    g.voxel_size = {voxel_mm, voxel_mm, voxel_mm};
    g.origin = {-0.5 * nx * voxel_mm, -0.5 * ny * voxel_mm, -0.5 * nz * voxel_mm};
    g.validate();
    return g;
}

/// Dense 3D scalar field stored x-fastest, so one z-slice is contiguous.
class ImageVolume {
public:
    ImageVolume() = default;
    ImageVolume(int nx, int ny, int nz, double fill = 0.0)
        : nx_(nx), ny_(ny), nz_(nz), v_(size_t(nx) * ny * nz, fill) {
        if (nx < 1 || ny < 1 || nz < 1)
            throw std::invalid_argument("ImageVolume: dims must be >= 1");
    }
    explicit ImageVolume(const VoxelGrid& g, double fill = 0.0)
        : ImageVolume(g.dims[0], g.dims[1], g.dims[2], fill) {
        voxel_size_ = g.voxel_size;
    }

    int nx() const { return nx_; }
    int ny() const { return ny_; }
    int nz() const { return nz_; }
    size_t size() const { return v_.size(); }
    size_t slice_size() const { return size_t(nx_) * ny_; }

    double& operator()(int ix, int iy, int iz) {
        return v_[ix + size_t(nx_) * (iy + size_t(ny_) * iz)];
    }
    double operator()(int ix, int iy, int iz) const {
        return v_[ix + size_t(nx_) * (iy + size_t(ny_) * iz)];
    }
    double& operator[](size_t i) { return v_[i]; }
    double operator[](size_t i) const { return v_[i]; }

    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }
    double* slice(int iz) { return v_.data() + slice_size() * iz; }
    const double* slice(int iz) const { return v_.data() + slice_size() * iz; }

    Vec3 voxel_size() const { return voxel_size_; }
    void set_voxel_size(const Vec3& s) { voxel_size_ = s; }

    bool same_shape(const ImageVolume& o) const {
        return nx_ == o.nx_ && ny_ == o.ny_ && nz_ == o.nz_;
    }
    bool all_finite() const {
        for (double x : v_)
            if (!std::isfinite(x)) return false;
        return true;
    }

private:
    int nx_ = 0, ny_ = 0, nz_ = 0;
    Vec3 voxel_size_{1.0, 1.0, 1.0};
    std::vector<double> v_;
};

/// Per-detector 2D bin arrays stacked over detectors. Bin k maps to
/// (det, pv, pu) as k = det*nu*nv + pv*nu + pu.
class ProjectionData {
public:
    ProjectionData() = default;
    ProjectionData(int nu, int nv, int n_det, double fill = 0.0)
        : nu_(nu), nv_(nv), n_det_(n_det), v_(size_t(nu) * nv * n_det, fill) {
        if (nu < 1 || nv < 1 || n_det < 1)
            throw std::invalid_argument("ProjectionData: dims must be >= 1");
    }

    int nu() const { return nu_; }
    int nv() const { return nv_; }
    int n_detectors() const { return n_det_; }
    size_t size() const { return v_.size(); }
    size_t bins_per_detector() const { return size_t(nu_) * nv_; }

    double& operator()(int det, int pv, int pu) {
        return v_[size_t(det) * bins_per_detector() + size_t(pv) * nu_ + pu];
    }
    double operator()(int det, int pv, int pu) const {
        return v_[size_t(det) * bins_per_detector() + size_t(pv) * nu_ + pu];
    }
    double& operator[](size_t i) { return v_[i]; }
    double operator[](size_t i) const { return v_[i]; }
    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }

    double sum() const {
        double s = 0.0;
        for (double x : v_) s += x;
        return s;
    }

private:
    int nu_ = 0, nv_ = 0, n_det_ = 0;
    std::vector<double> v_;
};

// Exception types used to map failures to CLI exit codes.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace spectdiff

#include "spectdiff/phantom.hpp"

#include <algorithm>
#include <cmath>

#include "spectdiff/rng.hpp"

namespace spectdiff {

namespace {
constexpr double kPi = 3.14159265358979323846;

double ellipsoid_q(const Vec3& p, const Vec3& c, const Vec3& ax) {
    const double qx = (p.x - c.x) / ax.x;
    const double qy = (p.y - c.y) / ax.y;
    const double qz = (p.z - c.z) / ax.z;
    return qx * qx + qy * qy + qz * qz;
}

double wrap_deg(double d) {
    while (d > 180.0) d -= 360.0;
    while (d < -180.0) d += 360.0;
    return d;
}

/// 3-tap binomial smoothing along each axis, applied in place.
void smooth3(ImageVolume& v) {
    const int nx = v.nx(), ny = v.ny(), nz = v.nz();
    ImageVolume tmp(nx, ny, nz);
    auto pass = [&](int axis) {
        for (int z = 0; z < nz; ++z)
            for (int y = 0; y < ny; ++y)
                for (int x = 0; x < nx; ++x) {
                    int xm = x, xp = x, ym = y, yp = y, zm = z, zp = z;
                    if (axis == 0) { xm = std::max(x - 1, 0); xp = std::min(x + 1, nx - 1); }
                    if (axis == 1) { ym = std::max(y - 1, 0); yp = std::min(y + 1, ny - 1); }
                    if (axis == 2) { zm = std::max(z - 1, 0); zp = std::min(z + 1, nz - 1); }
                    tmp(x, y, z) = 0.25 * v(xm, ym, zm) + 0.5 * v(x, y, z) + 0.25 * v(xp, yp, zp);
                }
        std::swap(v, tmp);
    };
    pass(0);
    pass(1);
    pass(2);
}

}  // namespace

void PhantomSpec::validate() const {
    if (shell_activity < 0.0 || background_activity < 0.0)
        throw std::invalid_argument("PhantomSpec: activity levels must be >= 0");
    const double amin = std::min({semi_axes.x, semi_axes.y, semi_axes.z});
    if (!(wall_thickness > 0.0) || wall_thickness >= amin)
        throw std::invalid_argument("PhantomSpec: wall thickness must be < smallest semi-axis");
    for (const auto& d : defects) {
        if (d.severity < 0.0 || d.severity > 1.0)
            throw std::invalid_argument("PhantomSpec: defect severity must be in [0,1]");
        if (d.axial_center_frac < -1.0 || d.axial_center_frac > 1.0)
            throw std::invalid_argument("PhantomSpec: defect outside shell (axial center)");
        if (d.azimuth_extent_deg <= 0.0 || d.axial_extent_frac <= 0.0)
            throw std::invalid_argument("PhantomSpec: defect extents must be positive");
    }
    if (liver && (liver->semi_axes.x <= 0 || liver->semi_axes.y <= 0 || liver->semi_axes.z <= 0))
        throw std::invalid_argument("PhantomSpec: liver semi-axes must be positive");
}

PhantomVolumes make_phantom(const PhantomSpec& spec, const VoxelGrid& grid) {
    spec.validate();
    grid.validate();

    const Vec3 inner{spec.semi_axes.x - spec.wall_thickness,
                     spec.semi_axes.y - spec.wall_thickness,
                     spec.semi_axes.z - spec.wall_thickness};
    // Warm body region filling most of the grid.
    const Vec3 body_axes = grid.extent() * 0.45;
    const Vec3 body_center = grid.center();

    ImageVolume activity(grid);
    ImageVolume anatomy(grid);

    const int nx = grid.dims[0], ny = grid.dims[1], nz = grid.dims[2];
    for (int iz = 0; iz < nz; ++iz)
        for (int iy = 0; iy < ny; ++iy)
            for (int ix = 0; ix < nx; ++ix) {
                const Vec3 p = grid.voxel_center(ix, iy, iz);
                double act = 0.0;
                double ana = 0.0;
                if (ellipsoid_q(p, body_center, body_axes) <= 1.0) {
                    act = spec.background_activity;
                    ana = 0.25;
                }
                if (spec.liver && ellipsoid_q(p, spec.liver->center, spec.liver->semi_axes) <= 1.0) {
                    act = spec.liver->activity;
                    ana = 0.55;
                }
                const bool in_outer = ellipsoid_q(p, spec.center, spec.semi_axes) <= 1.0;
                const bool in_inner = ellipsoid_q(p, spec.center, inner) < 1.0;
                if (in_outer && !in_inner) {
                    double wall = spec.shell_activity;
                    const double az = std::atan2(p.y - spec.center.y, p.x - spec.center.x) * 180.0 / kPi;
                    const double zf = (p.z - spec.center.z) / spec.semi_axes.z;
                    for (const auto& d : spec.defects) {
                        const bool in_az =
                            std::abs(wrap_deg(az - d.azimuth_center_deg)) <= 0.5 * d.azimuth_extent_deg;
                        const bool in_z =
                            std::abs(zf - d.axial_center_frac) <= 0.5 * d.axial_extent_frac;
                        if (in_az && in_z) {
                            wall = spec.shell_activity * (1.0 - d.severity) +
                                   spec.background_activity * d.severity;
                        }
                    }
                    act = wall;
                    ana = 0.85;
                }
                activity(ix, iy, iz) = act;
                anatomy(ix, iy, iz) = ana;
            }

    smooth3(anatomy);
    for (size_t i = 0; i < anatomy.size(); ++i) anatomy[i] = std::clamp(anatomy[i], 0.0, 1.0);

    activity.set_voxel_size(grid.voxel_size);
    anatomy.set_voxel_size(grid.voxel_size);
    return {std::move(activity), std::move(anatomy)};
}

PhantomSpec random_phantom_spec(const VoxelGrid& grid, uint64_t seed) {
    RngStream rs(seed, "phantom-spec");
    const Vec3 c = grid.center();
    PhantomSpec spec;
    spec.seed = seed;
    spec.center = {c.x + (rs.next_uniform() - 0.5) * 12.0,
                   c.y + (rs.next_uniform() - 0.5) * 12.0,
                   c.z + (rs.next_uniform() - 0.5) * 6.0};
    spec.semi_axes = {24.0 + rs.next_uniform() * 10.0, 24.0 + rs.next_uniform() * 10.0,
                      20.0 + rs.next_uniform() * 8.0};
    spec.wall_thickness = 7.0 + rs.next_uniform() * 3.0;
    spec.shell_activity = 1.0;
    spec.background_activity = 0.05 + rs.next_uniform() * 0.05;

    const int n_defects = int(rs.next_u64() % 3);  // 0..2
    for (int i = 0; i < n_defects; ++i) {
        DefectSpec d;
        d.azimuth_center_deg = (rs.next_uniform() - 0.5) * 360.0;
        d.azimuth_extent_deg = 40.0 + rs.next_uniform() * 60.0;
        d.axial_center_frac = (rs.next_uniform() - 0.5) * 1.0;
        d.axial_extent_frac = 0.3 + rs.next_uniform() * 0.4;
        d.severity = 0.5 + rs.next_uniform() * 0.5;
        spec.defects.push_back(d);
    }
    if (rs.next_uniform() < 0.5) {
        LiverBlob liver;
        liver.center = {c.x + 30.0 + rs.next_uniform() * 10.0, c.y - 20.0 + rs.next_uniform() * 10.0,
                        c.z - 8.0};
        liver.semi_axes = {20.0, 16.0, 14.0};
        liver.activity = 0.25 + rs.next_uniform() * 0.25;
        spec.liver = liver;
    }
    return spec;
}

ProjectionData simulate_counts(const SystemMatrix& S, const ImageVolume& activity,
                               double total_counts, uint64_t seed) {
    if (total_counts < 1.0)
        throw std::invalid_argument("simulate_counts: total_counts must be >= 1");
    for (size_t i = 0; i < activity.size(); ++i)
        if (activity[i] < 0.0)
            throw std::invalid_argument("simulate_counts: activity must be nonnegative");

    ProjectionData lambda = forward_project(S, activity);
    const double total = lambda.sum();
    if (total <= 0.0)
        throw std::invalid_argument("simulate_counts: all-zero expectation");
    const double scale = total_counts / total;

    ProjectionData y(lambda.nu(), lambda.nv(), lambda.n_detectors());
    for (size_t k = 0; k < lambda.size(); ++k) {
        RngStream rs(seed, "poisson", k);
        y[k] = double(rs.next_poisson(lambda[k] * scale));
    }
    return y;
}

ProjectionData thin_counts(const ProjectionData& y, double level, uint64_t seed) {
    if (!(level > 0.0) || level > 1.0)
        throw std::invalid_argument("thin_counts: level must be in (0, 1]");
    ProjectionData out(y.nu(), y.nv(), y.n_detectors());
    for (size_t k = 0; k < y.size(); ++k) {
        const double c = y[k];
        if (c < 0.0 || c != std::floor(c))
            throw std::invalid_argument("thin_counts: input must be integer-valued counts");
        if (level == 1.0) {
            out[k] = c;
            continue;
        }
        RngStream rs(seed, "thin", k);
        out[k] = double(rs.next_binomial(uint64_t(c), level));
    }
    return out;
}

ProjectionData mask_views(const ProjectionData& y, const ViewSubset& subset) {
    subset.validate(y.n_detectors());
    ProjectionData out(y.nu(), y.nv(), int(subset.included.size()));
    const size_t bins = y.bins_per_detector();
    size_t dst = 0;
    for (int det : subset.included) {
        const double* src = y.data() + size_t(det) * bins;
        std::copy(src, src + bins, out.data() + dst * bins);
        ++dst;
    }
    return out;
}

}  // namespace spectdiff

#include "spectdiff/system_matrix.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "spectdiff/threading.hpp"

namespace spectdiff {

namespace {

constexpr double kFourPi = 12.566370614359172953850573533118;
constexpr double kColumnDropRel = 1e-12;

struct Entry {
    uint32_t row;
    double value;
};

void append_bytes(std::vector<unsigned char>& buf, const void* p, size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    buf.insert(buf.end(), b, b + n);
}

uint64_t fnv1a64(const unsigned char* p, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

void SystemMatrix::apply(const double* x, double* y, int n_threads) const {
    parallel_for(rows_, n_threads, [&](int64_t k) {
        double acc = 0.0;
        for (int64_t i = row_ptr_[k]; i < row_ptr_[k + 1]; ++i)
            acc += values_[i] * x[col_idx_[i]];
        y[k] = acc;
    });
}

void SystemMatrix::apply_adjoint(const double* y, double* x, int n_threads) const {
    parallel_for(cols_, n_threads, [&](int64_t j) {
        double acc = 0.0;
        for (int64_t i = col_ptr_[j]; i < col_ptr_[j + 1]; ++i)
            acc += values_csc_[i] * y[row_idx_[i]];
        x[j] = acc;
    });
}

void SystemMatrix::row_entries(int64_t row, std::vector<std::pair<int64_t, double>>* out) const {
    out->clear();
    for (int64_t i = row_ptr_[row]; i < row_ptr_[row + 1]; ++i)
        out->emplace_back(int64_t(col_idx_[i]), values_[i]);
}

void SystemMatrix::build_index() {
    // CSR from the CSC entry lists; per-row columns come out ascending
    // because columns are visited in ascending order.
    row_ptr_.assign(rows_ + 1, 0);
    for (uint32_t r : row_idx_) ++row_ptr_[r + 1];
    for (int64_t k = 0; k < rows_; ++k) row_ptr_[k + 1] += row_ptr_[k];
    col_idx_.resize(values_csc_.size());
    values_.resize(values_csc_.size());
    std::vector<int64_t> cursor(row_ptr_.begin(), row_ptr_.end() - 1);
    for (int64_t j = 0; j < cols_; ++j) {
        for (int64_t i = col_ptr_[j]; i < col_ptr_[j + 1]; ++i) {
            const int64_t dst = cursor[row_idx_[i]]++;
            col_idx_[dst] = uint32_t(j);
            values_[dst] = values_csc_[i];
        }
    }
}

void SystemMatrix::compute_hash() {
    // Hash over the exact serialized form (f32 values, row-major triplets) so
    // built and reloaded matrices agree.
    std::vector<unsigned char> buf;
    buf.reserve(24);
    const uint32_t r32 = uint32_t(rows_), c32 = uint32_t(cols_);
    const uint64_t n = nnz();
    append_bytes(buf, &r32, 4);
    append_bytes(buf, &c32, 4);
    append_bytes(buf, &n, 8);
    uint64_t h = fnv1a64(buf.data(), buf.size());
    for (int64_t k = 0; k < rows_; ++k) {
        for (int64_t i = row_ptr_[k]; i < row_ptr_[k + 1]; ++i) {
            unsigned char rec[12];
            const uint32_t rr = uint32_t(k), cc = col_idx_[i];
            const float v = float(values_[i]);
            std::memcpy(rec, &rr, 4);
            std::memcpy(rec + 4, &cc, 4);
            std::memcpy(rec + 8, &v, 4);
            h = fnv1a64(rec, 12, h);
        }
    }
    geometry_hash_ = h;
}

SystemMatrix SystemMatrix::from_triplets(int64_t rows, int64_t cols,
                                         const std::vector<uint32_t>& r,
                                         const std::vector<uint32_t>& c,
                                         const std::vector<double>& v) {
    if (r.size() != c.size() || r.size() != v.size())
        throw std::invalid_argument("from_triplets: length mismatch");
    SystemMatrix S;
    S.rows_ = rows;
    S.cols_ = cols;
    // Sort into column-major order (stable by row inside a column).
    std::vector<size_t> order(v.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        return c[a] != c[b] ? c[a] < c[b] : r[a] < r[b];
    });
    S.col_ptr_.assign(cols + 1, 0);
    S.row_idx_.reserve(v.size());
    S.values_csc_.reserve(v.size());
    for (size_t i : order) {
        ++S.col_ptr_[c[i] + 1];
        S.row_idx_.push_back(r[i]);
        S.values_csc_.push_back(v[i]);
    }
    for (int64_t j = 0; j < cols; ++j) S.col_ptr_[j + 1] += S.col_ptr_[j];
    S.build_index();
    S.compute_hash();
    return S;
}

SystemMatrix build_system_matrix(const ScannerGeometry& geom, const VoxelGrid& grid,
                                 int n_threads) {
    geom.validate();
    grid.validate();

    const Vec3 lo = grid.origin;
    const Vec3 hi = grid.origin + grid.extent();
    for (const auto& d : geom.detectors) {
        const Vec3& p = d.pinhole_position;
        if (p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z &&
            p.z <= hi.z)
            throw std::invalid_argument("build_system_matrix: pinhole inside the voxel grid");
    }

    const int n_det = geom.n_detectors();
    std::vector<DetectorAxes> axes(n_det);
    std::vector<int64_t> det_row_offset(n_det + 1, 0);
    for (int d = 0; d < n_det; ++d) {
        axes[d] = detector_axes(geom.detectors[d]);
        det_row_offset[d + 1] = det_row_offset[d] +
                                int64_t(geom.detectors[d].nu) * geom.detectors[d].nv;
    }
    const int64_t n_rows = det_row_offset[n_det];
    const int64_t n_cols = grid.n_voxels();

    const int nx = grid.dims[0], ny = grid.dims[1];
    std::vector<std::vector<Entry>> per_voxel(n_cols);

    parallel_for(n_cols, n_threads, [&](int64_t j) {
        const int ix = int(j % nx);
        const int iy = int((j / nx) % ny);
        const int iz = int(j / (int64_t(nx) * ny));
        const Vec3 p = grid.voxel_center(ix, iy, iz);

        auto& entries = per_voxel[j];
        for (int d = 0; d < n_det; ++d) {
            const DetectorSpec& det = geom.detectors[d];
            const Vec3 ray = det.pinhole_position - p;
            const double r2 = ray.dot(ray);
            const double r = std::sqrt(r2);
            if (r < 1e-9) continue;
            const Vec3 dir = ray * (1.0 / r);
            const double denom = dir.dot(det.detector_normal);
            if (std::abs(denom) < 1e-12) continue;
            // Intersection with the detector plane, beyond the pinhole only.
            const double s = (det.detector_center - p).dot(det.detector_normal) / denom;
            if (s <= r) continue;
            const Vec3 hit = p + dir * s;
            const Vec3 rel = hit - det.detector_center;
            const double u = rel.dot(axes[d].u);
            const double v = rel.dot(axes[d].v);
            const double pw = det.width / det.nu;
            const double ph = det.height / det.nv;
            // Continuous pixel coordinates; pixel centers at (i+0.5)-nu/2.
            const double pu = u / pw + 0.5 * det.nu - 0.5;
            const double pv = v / ph + 0.5 * det.nv - 0.5;
            const int iu0 = int(std::floor(pu));
            const int iv0 = int(std::floor(pv));
            const double fu = pu - iu0;
            const double fv = pv - iv0;
            const double w = std::abs(denom) / (kFourPi * r2);
            const double wq[4] = {(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv};
            const int qu[4] = {iu0, iu0 + 1, iu0, iu0 + 1};
            const int qv[4] = {iv0, iv0, iv0 + 1, iv0 + 1};
            for (int q = 0; q < 4; ++q) {
                if (qu[q] < 0 || qu[q] >= det.nu || qv[q] < 0 || qv[q] >= det.nv) continue;
                if (wq[q] <= 0.0) continue;
                const int64_t row = det_row_offset[d] + int64_t(qv[q]) * det.nu + qu[q];
                entries.push_back({uint32_t(row), w * wq[q]});
            }
        }
        double cmax = 0.0;
        for (const Entry& e : entries) cmax = std::max(cmax, e.value);
        const double cutoff = cmax * kColumnDropRel;
        entries.erase(std::remove_if(entries.begin(), entries.end(),
                                     [&](const Entry& e) { return e.value < cutoff; }),
                      entries.end());
        std::sort(entries.begin(), entries.end(),
                  [](const Entry& a, const Entry& b) { return a.row < b.row; });
    });

    SystemMatrix S;
    S.rows_ = n_rows;
    S.cols_ = n_cols;
    S.col_ptr_.assign(n_cols + 1, 0);
    size_t total = 0;
    for (int64_t j = 0; j < n_cols; ++j) total += per_voxel[j].size();
    if (total == 0)
        throw std::runtime_error("build_system_matrix: degenerate geometry, empty matrix");
    S.row_idx_.reserve(total);
    S.values_csc_.reserve(total);
    for (int64_t j = 0; j < n_cols; ++j) {
        for (const Entry& e : per_voxel[j]) {
            S.row_idx_.push_back(e.row);
            S.values_csc_.push_back(e.value);
        }
        S.col_ptr_[j + 1] = int64_t(S.row_idx_.size());
    }
    S.build_index();

    S.grid_ = grid;
    S.nu_ = geom.detectors.empty() ? 0 : geom.detectors[0].nu;
    S.nv_ = geom.detectors.empty() ? 0 : geom.detectors[0].nv;
    S.detector_ids_.resize(n_det);
    for (int d = 0; d < n_det; ++d) S.detector_ids_[d] = d;
    S.compute_hash();
    return S;
}

SystemMatrix restrict_views(const SystemMatrix& S, const ViewSubset& subset) {
    subset.validate(S.n_detectors());

    const int64_t bins = int64_t(S.nu_) * S.nv_;
    std::vector<int64_t> new_row_of(S.rows_, -1);
    int64_t out_rows = 0;
    for (int idx : subset.included) {
        const int64_t base = int64_t(idx) * bins;
        for (int64_t b = 0; b < bins; ++b) new_row_of[base + b] = out_rows++;
    }

    SystemMatrix R;
    R.rows_ = out_rows;
    R.cols_ = S.cols_;
    R.col_ptr_.assign(S.cols_ + 1, 0);
    R.row_idx_.reserve(S.values_csc_.size());
    R.values_csc_.reserve(S.values_csc_.size());
    for (int64_t j = 0; j < S.cols_; ++j) {
        for (int64_t i = S.col_ptr_[j]; i < S.col_ptr_[j + 1]; ++i) {
            const int64_t nr = new_row_of[S.row_idx_[i]];
            if (nr < 0) continue;
            R.row_idx_.push_back(uint32_t(nr));
            R.values_csc_.push_back(S.values_csc_[i]);
        }
        R.col_ptr_[j + 1] = int64_t(R.row_idx_.size());
    }
    R.build_index();

    R.grid_ = S.grid_;
    R.nu_ = S.nu_;
    R.nv_ = S.nv_;
    R.detector_ids_.reserve(subset.included.size());
    for (int idx : subset.included) R.detector_ids_.push_back(S.detector_ids_[idx]);
    R.compute_hash();
    return R;
}

ProjectionData forward_project(const SystemMatrix& S, const ImageVolume& x, int n_threads) {
    if (int64_t(x.size()) != S.cols())
        throw std::invalid_argument("forward_project: volume size does not match matrix cols");
    if (!x.all_finite()) throw std::invalid_argument("forward_project: volume not finite");
    ProjectionData y = S.make_projection();
    S.apply(x.data(), y.data(), n_threads);
    return y;
}

ImageVolume back_project(const SystemMatrix& S, const ProjectionData& y, int n_threads) {
    if (int64_t(y.size()) != S.rows())
        throw std::invalid_argument("back_project: projection size does not match matrix rows");
    ImageVolume x = S.make_volume();
    S.apply_adjoint(y.data(), x.data(), n_threads);
    return x;
}

void save_system_matrix(const std::string& path, const SystemMatrix& S) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for write: " + path);
    f.write("SPSM", 4);
    const uint32_t r = uint32_t(S.rows_), c = uint32_t(S.cols_);
    const uint64_t n = S.nnz();
    f.write(reinterpret_cast<const char*>(&r), 4);
    f.write(reinterpret_cast<const char*>(&c), 4);
    f.write(reinterpret_cast<const char*>(&n), 8);
    for (int64_t k = 0; k < S.rows_; ++k) {
        for (int64_t i = S.row_ptr_[k]; i < S.row_ptr_[k + 1]; ++i) {
            const uint32_t rr = uint32_t(k), cc = S.col_idx_[i];
            const float v = float(S.values_[i]);
            f.write(reinterpret_cast<const char*>(&rr), 4);
            f.write(reinterpret_cast<const char*>(&cc), 4);
            f.write(reinterpret_cast<const char*>(&v), 4);
        }
    }
    if (!f) throw DataError("write failed: " + path);
}

SystemMatrix load_system_matrix(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for read: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "SPSM", 4) != 0)
        throw DataError("not a SPSM file: " + path);
    uint32_t r = 0, c = 0;
    uint64_t n = 0;
    f.read(reinterpret_cast<char*>(&r), 4);
    f.read(reinterpret_cast<char*>(&c), 4);
    f.read(reinterpret_cast<char*>(&n), 8);
    std::vector<uint32_t> rows(n), cols(n);
    std::vector<double> vals(n);
    for (uint64_t i = 0; i < n; ++i) {
        uint32_t rr, cc;
        float v;
        f.read(reinterpret_cast<char*>(&rr), 4);
        f.read(reinterpret_cast<char*>(&cc), 4);
        f.read(reinterpret_cast<char*>(&v), 4);
        rows[i] = rr;
        cols[i] = cc;
        vals[i] = double(v);
    }
    if (!f) throw DataError("truncated SPSM file: " + path);
    return SystemMatrix::from_triplets(int64_t(r), int64_t(c), rows, cols, vals);
}

}  // namespace spectdiff

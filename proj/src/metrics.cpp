#include "spectdiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace spectdiff {

namespace {

void check_shapes(const ImageVolume& x, const ImageVolume& ref, const char* who) {
    if (!x.same_shape(ref))
        throw std::invalid_argument(std::string(who) + ": shape mismatch");
}

double mse(const ImageVolume& x, const ImageVolume& ref) {
    double acc = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - ref[i];
        acc += d * d;
    }
    return acc / double(x.size());
}

}  // namespace

double psnr(const ImageVolume& x, const ImageVolume& ref) {
    check_shapes(x, ref, "psnr");
    double peak = -std::numeric_limits<double>::infinity();
    double lo = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < ref.size(); ++i) {
        peak = std::max(peak, ref[i]);
        lo = std::min(lo, ref[i]);
    }
    if (peak == lo) throw std::invalid_argument("psnr: reference is constant");
    const double m = mse(x, ref);
    if (m == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / m);
}

double nrmse(const ImageVolume& x, const ImageVolume& ref) {
    check_shapes(x, ref, "nrmse");
    double hi = -std::numeric_limits<double>::infinity();
    double lo = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < ref.size(); ++i) {
        hi = std::max(hi, ref[i]);
        lo = std::min(lo, ref[i]);
    }
    if (hi == lo) throw std::invalid_argument("nrmse: reference is constant");
    return std::sqrt(mse(x, ref)) / (hi - lo);
}

double ssim(const ImageVolume& x, const ImageVolume& ref, double dynamic_range) {
    check_shapes(x, ref, "ssim");
    constexpr int kWin = 11;
    constexpr double kSigma = 1.5;
    constexpr double kK1 = 0.01, kK2 = 0.03;
    if (x.nx() < kWin || x.ny() < kWin)
        throw std::invalid_argument("ssim: slices smaller than the 11x11 window");

    double L = dynamic_range;
    if (L < 0.0) {
        double hi = -std::numeric_limits<double>::infinity();
        double lo = std::numeric_limits<double>::infinity();
        for (size_t i = 0; i < ref.size(); ++i) {
            hi = std::max(hi, ref[i]);
            lo = std::min(lo, ref[i]);
        }
        L = hi - lo;
    }
    if (L <= 0.0) throw std::invalid_argument("ssim: zero dynamic range");
    const double c1 = (kK1 * L) * (kK1 * L);
    const double c2 = (kK2 * L) * (kK2 * L);

    double win[kWin * kWin];
    {
        double sum = 0.0;
        for (int dy = 0; dy < kWin; ++dy)
            for (int dx = 0; dx < kWin; ++dx) {
                const double ry = dy - kWin / 2, rx = dx - kWin / 2;
                const double w = std::exp(-(rx * rx + ry * ry) / (2.0 * kSigma * kSigma));
                win[dy * kWin + dx] = w;
                sum += w;
            }
        for (double& w : win) w /= sum;
    }

    const int nx = x.nx(), ny = x.ny(), nz = x.nz();
    double total = 0.0;
    int64_t count = 0;
    for (int z = 0; z < nz; ++z) {
        for (int oy = 0; oy + kWin <= ny; ++oy) {
            for (int ox = 0; ox + kWin <= nx; ++ox) {
                double mu_a = 0, mu_b = 0;
                for (int dy = 0; dy < kWin; ++dy)
                    for (int dx = 0; dx < kWin; ++dx) {
                        const double w = win[dy * kWin + dx];
                        mu_a += w * x(ox + dx, oy + dy, z);
                        mu_b += w * ref(ox + dx, oy + dy, z);
                    }
                double va = 0, vb = 0, cov = 0;
                for (int dy = 0; dy < kWin; ++dy)
                    for (int dx = 0; dx < kWin; ++dx) {
                        const double w = win[dy * kWin + dx];
                        const double da = x(ox + dx, oy + dy, z) - mu_a;
                        const double db = ref(ox + dx, oy + dy, z) - mu_b;
                        va += w * da * da;
                        vb += w * db * db;
                        cov += w * da * db;
                    }
                const double s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                                 ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
                total += s;
                ++count;
            }
        }
    }
    return total / double(count);
}

MetricReport evaluate_sweep(const std::vector<std::string>& conditions,
                            const std::vector<const ImageVolume*>& volumes,
                            const std::vector<const ImageVolume*>& refs) {
    if (conditions.size() != volumes.size() || conditions.size() != refs.size())
        throw std::invalid_argument("evaluate_sweep: list length mismatch");

    // Aggregate in first-appearance order.
    std::vector<std::string> order;
    std::map<std::string, MetricRow> acc;
    for (size_t i = 0; i < conditions.size(); ++i) {
        auto it = acc.find(conditions[i]);
        if (it == acc.end()) {
            order.push_back(conditions[i]);
            it = acc.emplace(conditions[i], MetricRow{conditions[i], 0, 0, 0, 0}).first;
        }
        MetricRow& row = it->second;
        row.psnr_db += psnr(*volumes[i], *refs[i]);
        row.nrmse += nrmse(*volumes[i], *refs[i]);
        row.ssim += ssim(*volumes[i], *refs[i]);
        row.n_volumes += 1;
    }
    MetricReport report;
    for (const auto& name : order) {
        MetricRow row = acc[name];
        row.psnr_db /= row.n_volumes;
        row.nrmse /= row.n_volumes;
        row.ssim /= row.n_volumes;
        report.rows.push_back(row);
    }
    return report;
}

std::string MetricReport::to_csv() const {
    std::ostringstream os;
    for (const auto& [k, v] : metadata) os << "# " << k << " = " << v << "\n";
    os << "condition,psnr_db,nrmse,ssim,n_volumes\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%d\n", r.condition.c_str(), r.psnr_db,
                      r.nrmse, r.ssim, r.n_volumes);
        os << buf;
    }
    return os.str();
}

std::string MetricReport::to_table() const {
    std::ostringstream os;
    size_t w = 9;
    for (const auto& r : rows) w = std::max(w, r.condition.size());
    char buf[200];
    std::snprintf(buf, sizeof(buf), "%-*s  %10s  %10s  %10s  %4s\n", int(w), "condition",
                  "PSNR(dB)", "NRMSE", "SSIM", "n");
    os << buf;
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%-*s  %10.3f  %10.4f  %10.4f  %4d\n", int(w),
                      r.condition.c_str(), r.psnr_db, r.nrmse, r.ssim, r.n_volumes);
        os << buf;
    }
    return os.str();
}

void write_report(const std::string& csv_path, const std::string& table_path,
                  const MetricReport& report) {
    {
        std::ofstream f(csv_path, std::ios::binary);
        if (!f) throw DataError("cannot open for write: " + csv_path);
        f << report.to_csv();
    }
    {
        std::ofstream f(table_path, std::ios::binary);
        if (!f) throw DataError("cannot open for write: " + table_path);
        f << report.to_table();
    }
}

}  // namespace spectdiff

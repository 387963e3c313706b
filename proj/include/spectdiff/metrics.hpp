#pragma once

#include <map>
#include <string>
#include <vector>

#include "spectdiff/types.hpp"

namespace spectdiff {

/// 10 log10(peak^2 / MSE) with peak = max(ref); +inf when x == ref.
double psnr(const ImageVolume& x, const ImageVolume& ref);

/// sqrt(MSE) / (max(ref) - min(ref)).
double nrmse(const ImageVolume& x, const ImageVolume& ref);

/// Mean local SSIM, computed slicewise over z with an 11x11 Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range = max(ref) - min(ref)
/// unless overridden.
double ssim(const ImageVolume& x, const ImageVolume& ref, double dynamic_range = -1.0);

struct MetricRow {
    std::string condition;
    double psnr_db = 0.0;
    double nrmse = 0.0;
    double ssim = 0.0;
    int n_volumes = 0;
};

struct MetricReport {
    std::vector<MetricRow> rows;
    std::map<std::string, std::string> metadata;

    std::string to_csv() const;
    std::string to_table() const;
};

/// Per-condition means; volumes[i] is scored against refs[i] and aggregated
/// under conditions[i].
MetricReport evaluate_sweep(const std::vector<std::string>& conditions,
                            const std::vector<const ImageVolume*>& volumes,
                            const std::vector<const ImageVolume*>& refs);

void write_report(const std::string& csv_path, const std::string& table_path,
                  const MetricReport& report);

}  // namespace spectdiff

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "spectdiff/config.hpp"
#include "spectdiff/eps_net.hpp"
#include "spectdiff/metrics.hpp"
#include "spectdiff/phantom.hpp"
#include "spectdiff/sampler.hpp"

namespace spectdiff {

/// Everything derived from the run config that the commands share.
struct PipelineSetup {
    VoxelGrid grid;
    ScannerGeometry geom;
    SystemMatrix S;  // all 19 views
    NoiseSchedule sched;
    double total_counts = 0.0;
    int threads = 1;
};

PipelineSetup make_setup(const RunConfig& cfg, int threads);

/// One degradation condition: a count level (binomial thinning of the full
/// acquisition) or a few-view subset of the center row. count_level is the
/// C that feeds the fitted lambda schedules: the count fraction, or
/// n_views/19 for view conditions.
struct Condition {
    std::string label;
    bool is_count = true;
    double thin_level = 1.0;
    int n_views = 19;
    double count_level = 1.0;
};

/// The paper-shaped sweep: counts {1,5,10,20,50}% then views {1,3,5,7,9}.
std::vector<Condition> standard_conditions();
Condition find_condition(const std::string& label);

/// Restricted matrices for the view presets, built once and shared.
class ViewMatrixCache {
public:
    explicit ViewMatrixCache(const SystemMatrix& full);
    const SystemMatrix& get(int n_views) const;  // 19 returns the full matrix

private:
    const SystemMatrix& full_;
    std::vector<std::pair<int, std::unique_ptr<SystemMatrix>>> restricted_;
};

/// Degraded data plus its MLEM baseline in activity units.
struct DegradedCase {
    Condition cond;
    ProjectionData y;
    ImageVolume x_in;
    double count_scale = 1.0;  // expected counts per activity unit in y
    const SystemMatrix* S = nullptr;
};

DegradedCase make_degraded_case(const PipelineSetup& setup, const ViewMatrixCache& cache,
                                const ImageVolume& activity, const ProjectionData& y_full,
                                double full_count_scale, const Condition& cond, uint64_t seed,
                                int mlem_iters);

/// Expected-counts-per-activity-unit of the full acquisition.
double full_acquisition_scale(const SystemMatrix& S, const ImageVolume& activity,
                              double total_counts, int threads);

GuidanceConfig guidance_from_config(const RunConfig& cfg, const DegradedCase& casedata,
                                    int threads);

/// DiffSPECT-3D reconstruction of one degraded case.
ImageVolume reconstruct_diffspect(const DegradedCase& casedata, const ImageVolume& anatomy,
                                  const TinyEpsNet& net, const NoiseSchedule& sched,
                                  const GuidanceConfig& gcfg, uint64_t seed);

// Dataset directory layout helpers (used by the CLI).
struct DatasetPaths {
    std::string root;
    std::string manifest() const { return root + "/manifest.txt"; }
    std::string config() const { return root + "/config.txt"; }
    std::string geometry() const { return root + "/geometry.txt"; }
    std::string matrix() const { return root + "/matrix.spsm"; }
    std::string phantom_dir(int i) const;
    std::string condition_dir(int i, const std::string& label) const;
};

/// Simulated dataset on disk: phantoms, anatomy, full and degraded
/// projections, and MLEM baselines for all ten standard conditions, with a
/// hash manifest.
class Dataset {
public:
    /// Refuses to overwrite an existing directory unless force is set.
    static void simulate(const RunConfig& cfg, const std::string& dir, int n_phantoms,
                         uint64_t seed, bool force, int threads);

    /// Loads the config, rebuilds the system matrix, and verifies it against
    /// the recorded geometry hash before any computation.
    Dataset(const std::string& dir, int threads);

    const RunConfig& config() const { return cfg_; }
    const PipelineSetup& setup() const { return setup_; }
    const ViewMatrixCache& views() const { return *views_; }
    const DatasetPaths& paths() const { return paths_; }
    int n_phantoms() const { return n_phantoms_; }
    uint64_t seed() const { return seed_; }

    ImageVolume activity(int i) const;
    ImageVolume anatomy(int i) const;
    DegradedCase load_case(int i, const std::string& label) const;

private:
    DatasetPaths paths_;
    RunConfig cfg_;
    PipelineSetup setup_;
    std::unique_ptr<ViewMatrixCache> views_;
    int n_phantoms_ = 0;
    uint64_t seed_ = 0;
};

/// Method labels: "input" (the MLEM baseline), cumulative ablations
/// "prior", "xin", "xin+dps", "xin+dps+tv", "full", and single-component
/// removals "full-dps", "full-tv", "full-mlem", "full-xinstart".
GuidanceConfig apply_method(const GuidanceConfig& base, const std::string& method);

/// Reconstruct every (phantom, condition, method) triple, write volumes,
/// sidecars, per-condition montages, and the aggregated report (rows labeled
/// method/condition). Byte-identical output for a fixed (config, seed) at
/// any thread count; partial failures are recorded per row and the sweep
/// continues.
MetricReport run_sweep(const Dataset& data, const TinyEpsNet* net,
                       const std::vector<std::string>& conditions,
                       const std::vector<std::string>& methods, const std::string& out_dir,
                       uint64_t seed, int threads);

}  // namespace spectdiff

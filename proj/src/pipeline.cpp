#include "spectdiff/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "spectdiff/io.hpp"
#include "spectdiff/rng.hpp"
#include "spectdiff/threading.hpp"

namespace fs = std::filesystem;

namespace spectdiff {

PipelineSetup make_setup(const RunConfig& cfg, int threads) {
    PipelineSetup s;
    s.grid = make_centered_grid(cfg.get_int("grid.nx"), cfg.get_int("grid.ny"),
                                cfg.get_int("grid.nz"), cfg.get_double("grid.voxel_mm"));
    s.geom = build_default_geometry(cfg.get_double("geometry.scale"));
    s.S = build_system_matrix(s.geom, s.grid, threads);
    s.sched = make_schedule(cfg.get_int("schedule.T"), cfg.get_double("schedule.beta_start"),
                            cfg.get_double("schedule.beta_end"));
    s.total_counts = cfg.get_double("sim.total_counts");
    s.threads = threads;
    return s;
}

std::vector<Condition> standard_conditions() {
    std::vector<Condition> out;
    const double counts[] = {0.01, 0.05, 0.10, 0.20, 0.50};
    const char* clabels[] = {"c001", "c005", "c010", "c020", "c050"};
    for (int i = 0; i < 5; ++i)
        out.push_back({clabels[i], true, counts[i], 19, counts[i]});
    const int views[] = {1, 3, 5, 7, 9};
    const char* vlabels[] = {"v01", "v03", "v05", "v07", "v09"};
    for (int i = 0; i < 5; ++i)
        out.push_back({vlabels[i], false, 1.0, views[i], double(views[i]) / 19.0});
    return out;
}

Condition find_condition(const std::string& label) {
    for (const auto& c : standard_conditions())
        if (c.label == label) return c;
    throw ConfigError("unknown condition label: " + label);
}

ViewMatrixCache::ViewMatrixCache(const SystemMatrix& full) : full_(full) {
    for (int n : {1, 3, 5, 7, 9})
        restricted_.emplace_back(
            n, std::make_unique<SystemMatrix>(restrict_views(full, center_row_views(n))));
}

const SystemMatrix& ViewMatrixCache::get(int n_views) const {
    if (n_views == 19) return full_;
    for (const auto& [n, m] : restricted_)
        if (n == n_views) return *m;
    throw std::invalid_argument("ViewMatrixCache: no matrix for " + std::to_string(n_views) +
                                " views");
}

double full_acquisition_scale(const SystemMatrix& S, const ImageVolume& activity,
                              double total_counts, int threads) {
    const ProjectionData lambda = forward_project(S, activity, threads);
    const double total = lambda.sum();
    if (total <= 0.0) throw DataError("full_acquisition_scale: zero expectation");
    return total_counts / total;
}

DegradedCase make_degraded_case(const PipelineSetup& setup, const ViewMatrixCache& cache,
                                const ImageVolume& activity, const ProjectionData& y_full,
                                double full_count_scale, const Condition& cond, uint64_t seed,
                                int mlem_iters) {
    DegradedCase out;
    out.cond = cond;
    if (cond.is_count) {
        out.S = &cache.get(19);
        out.y = thin_counts(y_full, cond.thin_level, seed);
        out.count_scale = full_count_scale * cond.thin_level;
    } else {
        out.S = &cache.get(cond.n_views);
        out.y = mask_views(y_full, center_row_views(cond.n_views));
        out.count_scale = full_count_scale;
    }
    out.x_in = mlem_reconstruct(*out.S, out.y, mlem_iters, std::nullopt, setup.threads);
    for (size_t i = 0; i < out.x_in.size(); ++i) out.x_in[i] /= out.count_scale;
    return out;
}

GuidanceConfig guidance_from_config(const RunConfig& cfg, const DegradedCase& casedata,
                                    int threads) {
    GuidanceConfig g;
    const std::string ld = cfg.get("guidance.lambda_dps");
    const std::string lm = cfg.get("guidance.lambda_mlem");
    g.lambda_dps = ld == "auto" ? -1.0 : std::stod(ld);
    g.lambda_mlem = lm == "auto" ? -1.0 : std::stod(lm);
    g.count_level = casedata.cond.count_level;
    g.mlem_every = cfg.get_int("guidance.mlem_every");
    g.mlem_inner = cfg.get_int("guidance.mlem_inner");
    g.ddim_steps = cfg.get_int("guidance.ddim_steps");
    g.tv_weight = cfg.get_double("guidance.tv_weight");
    g.tv_inner = cfg.get_int("guidance.tv_inner");
    g.dual_noise = cfg.get_bool("guidance.dual_noise");
    const std::string gm = cfg.get("guidance.grad_mode");
    if (gm == "approx") g.grad_mode = GradMode::approx;
    else if (gm == "exact") g.grad_mode = GradMode::exact;
    else throw ConfigError("guidance.grad_mode must be approx or exact");
    const std::string ct = cfg.get("guidance.correction_target");
    if (ct == "xprev") g.correction_target = CorrectionTarget::xprev;
    else if (ct == "x0") g.correction_target = CorrectionTarget::x0;
    else throw ConfigError("guidance.correction_target must be xprev or x0");
    g.clip_x0_lo = cfg.get_double("guidance.clip_x0_lo");
    g.clip_x0_hi = cfg.get_double("guidance.clip_x0_hi");
    g.count_scale = casedata.count_scale;
    g.threads = threads;
    return g;
}

ImageVolume reconstruct_diffspect(const DegradedCase& casedata, const ImageVolume& anatomy,
                                  const TinyEpsNet& net, const NoiseSchedule& sched,
                                  const GuidanceConfig& gcfg, uint64_t seed) {
    NetDenoiser model(net, anatomy, sched);
    SamplerRun run;
    run.x_in = &casedata.x_in;
    run.y = &casedata.y;
    run.S = casedata.S;
    run.model = &model;
    run.sched = &sched;
    run.seed = seed;
    return sample_volume(run, gcfg);
}

std::string DatasetPaths::phantom_dir(int i) const {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "/phantom_%03d", i);
    return root + buf;
}

std::string DatasetPaths::condition_dir(int i, const std::string& label) const {
    return phantom_dir(i) + "/cond_" + label;
}

void Dataset::simulate(const RunConfig& cfg, const std::string& dir, int n_phantoms,
                       uint64_t seed, bool force, int threads) {
    if (n_phantoms < 1) throw ConfigError("simulate: need at least one phantom");
    if (fs::exists(dir)) {
        if (!force) throw DataError("simulate: output directory exists (use --force): " + dir);
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
    DatasetPaths paths{dir};

    PipelineSetup setup = make_setup(cfg, threads);
    const ViewMatrixCache cache(setup.S);
    const std::vector<Condition> conds = standard_conditions();
    const int mlem_iters = cfg.get_int("recon.mlem_iters");

    save_geometry(paths.geometry(), setup.geom);
    save_system_matrix(paths.matrix(), setup.S);
    {
        std::map<std::string, std::string> kv;
        kv["config"] = "below";
        std::ofstream f(paths.config(), std::ios::binary);
        f << cfg.canonical_text();
    }

    std::map<std::string, std::string> manifest;
    manifest["config_hash"] = cfg.hash_hex();
    manifest["seed"] = std::to_string(seed);
    manifest["n_phantoms"] = std::to_string(n_phantoms);
    manifest["geometry_hash"] = hex64(setup.S.geometry_hash());

    auto record = [&](const std::string& rel) {
        manifest["file." + rel] = hex64(hash_file(dir + "/" + rel));
    };

    for (int i = 0; i < n_phantoms; ++i) {
        const std::string pdir = paths.phantom_dir(i);
        fs::create_directories(pdir);
        const uint64_t phantom_seed = stream_key(seed, "phantom", uint64_t(i));
        const PhantomSpec spec = random_phantom_spec(setup.grid, phantom_seed);
        const PhantomVolumes ph = make_phantom(spec, setup.grid);
        const double scale =
            full_acquisition_scale(setup.S, ph.activity, setup.total_counts, threads);
        const ProjectionData y_full =
            simulate_counts(setup.S, ph.activity, setup.total_counts, phantom_seed);

        char rel[64];
        std::snprintf(rel, sizeof(rel), "phantom_%03d", i);
        const std::string base = rel;
        write_volume(pdir + "/activity.spvl", ph.activity);
        write_volume(pdir + "/anatomy.spvl", ph.anatomy);
        write_projection(pdir + "/proj_full.sppj", y_full);
        {
            std::map<std::string, std::string> info;
            info["seed"] = std::to_string(phantom_seed);
            info["count_scale_full"] = std::to_string(scale);
            info["config_hash"] = cfg.hash_hex();
            write_kv_file(pdir + "/info.txt", info);
        }
        record(base + "/activity.spvl");
        record(base + "/anatomy.spvl");
        record(base + "/proj_full.sppj");
        record(base + "/info.txt");

        for (const Condition& cond : conds) {
            const std::string cdir = paths.condition_dir(i, cond.label);
            fs::create_directories(cdir);
            const uint64_t cond_seed = stream_key(phantom_seed, "condition", hash_tag(cond.label));
            const DegradedCase dc = make_degraded_case(setup, cache, ph.activity, y_full, scale,
                                                       cond, cond_seed, mlem_iters);
            write_projection(cdir + "/proj.sppj", dc.y);
            write_volume(cdir + "/mlem.spvl", dc.x_in);
            std::map<std::string, std::string> info;
            info["count_level"] = std::to_string(cond.count_level);
            info["count_scale"] = std::to_string(dc.count_scale);
            info["n_views"] = std::to_string(cond.n_views);
            info["geometry_hash"] = hex64(dc.S->geometry_hash());
            info["config_hash"] = cfg.hash_hex();
            write_kv_file(cdir + "/info.txt", info);
            record(base + "/cond_" + cond.label + "/proj.sppj");
            record(base + "/cond_" + cond.label + "/mlem.spvl");
            record(base + "/cond_" + cond.label + "/info.txt");
        }
    }
    record("geometry.txt");
    record("matrix.spsm");
    record("config.txt");
    write_kv_file(paths.manifest(), manifest);
}

Dataset::Dataset(const std::string& dir, int threads) {
    paths_.root = dir;
    if (!fs::exists(paths_.manifest())) throw DataError("dataset: no manifest in " + dir);
    cfg_ = RunConfig::from_file(paths_.config());
    const auto manifest = read_kv_file(paths_.manifest());
    n_phantoms_ = std::stoi(manifest.at("n_phantoms"));
    seed_ = std::stoull(manifest.at("seed"));
    if (manifest.at("config_hash") != cfg_.hash_hex())
        throw DataError("dataset: config hash mismatch in " + dir);
    setup_ = make_setup(cfg_, threads);
    if (hex64(setup_.S.geometry_hash()) != manifest.at("geometry_hash"))
        throw DataError("dataset: geometry hash mismatch (config and matrix disagree)");
    views_ = std::make_unique<ViewMatrixCache>(setup_.S);
}

ImageVolume Dataset::activity(int i) const {
    return read_volume(paths_.phantom_dir(i) + "/activity.spvl");
}

ImageVolume Dataset::anatomy(int i) const {
    return read_volume(paths_.phantom_dir(i) + "/anatomy.spvl");
}

DegradedCase Dataset::load_case(int i, const std::string& label) const {
    const std::string cdir = paths_.condition_dir(i, label);
    if (!fs::exists(cdir + "/info.txt")) throw DataError("dataset: missing condition " + cdir);
    const auto info = read_kv_file(cdir + "/info.txt");
    if (info.at("config_hash") != cfg_.hash_hex())
        throw DataError("dataset: condition config hash mismatch in " + cdir);
    DegradedCase dc;
    dc.cond = find_condition(label);
    dc.y = read_projection(cdir + "/proj.sppj");
    dc.x_in = read_volume(cdir + "/mlem.spvl");
    dc.count_scale = std::stod(info.at("count_scale"));
    dc.S = &views_->get(dc.cond.n_views);
    if (hex64(dc.S->geometry_hash()) != info.at("geometry_hash"))
        throw DataError("dataset: geometry hash mismatch for condition " + label);
    return dc;
}

GuidanceConfig apply_method(const GuidanceConfig& base, const std::string& method) {
    GuidanceConfig g = base;
    if (method == "full") return g;
    if (method == "prior") {
        g.x_in_start = false;
        g.use_dps = false;
        g.use_tv = false;
        g.use_mlem = false;
    } else if (method == "xin") {
        g.use_dps = false;
        g.use_tv = false;
        g.use_mlem = false;
    } else if (method == "xin+dps") {
        g.use_tv = false;
        g.use_mlem = false;
    } else if (method == "xin+dps+tv") {
        g.use_mlem = false;
    } else if (method == "full-dps") {
        g.use_dps = false;
    } else if (method == "full-tv") {
        g.use_tv = false;
    } else if (method == "full-mlem") {
        g.use_mlem = false;
    } else if (method == "full-xinstart") {
        g.x_in_start = false;
    } else {
        throw ConfigError("unknown method: " + method);
    }
    return g;
}

MetricReport run_sweep(const Dataset& data, const TinyEpsNet* net,
                       const std::vector<std::string>& conditions,
                       const std::vector<std::string>& methods, const std::string& out_dir,
                       uint64_t seed, int threads) {
    fs::create_directories(out_dir);
    const RunConfig& cfg = data.config();

    struct Job {
        int phantom;
        std::string cond;
        std::string method;
    };
    std::vector<Job> jobs;
    for (const auto& method : methods)
        for (const auto& cond : conditions)
            for (int i = 0; i < data.n_phantoms(); ++i) jobs.push_back({i, cond, method});

    struct JobResult {
        bool ok = false;
        std::string error;
        double psnr_db = 0.0, nrmse_v = 0.0, ssim_v = 0.0;
    };
    std::vector<JobResult> results(jobs.size());

    for (const auto& method : methods)
        for (const auto& cond : conditions)
            fs::create_directories(out_dir + "/recon/" + method + "/" + cond);

    parallel_for(int64_t(jobs.size()), threads, [&](int64_t j) {
        const Job& job = jobs[j];
        JobResult& res = results[j];
        try {
            const ImageVolume truth = data.activity(job.phantom);
            const DegradedCase dc = data.load_case(job.phantom, job.cond);
            ImageVolume recon;
            GuidanceConfig gcfg = guidance_from_config(cfg, dc, 1);
            gcfg = apply_method(gcfg, job.method);
            if (job.method == "input") {
                recon = dc.x_in;
            } else {
                if (net == nullptr) throw DataError("sweep: methods need a trained checkpoint");
                const ImageVolume anat = data.anatomy(job.phantom);
                const uint64_t run_seed =
                    stream_key(seed, "sweep-" + job.method + "-" + job.cond, uint64_t(job.phantom));
                recon = reconstruct_diffspect(dc, anat, *net, data.setup().sched, gcfg, run_seed);
            }
            char name[64];
            std::snprintf(name, sizeof(name), "/phantom_%03d.spvl", job.phantom);
            const std::string vol_path =
                out_dir + "/recon/" + job.method + "/" + job.cond + name;
            write_volume(vol_path, recon);
            {
                std::map<std::string, std::string> info;
                info["config_hash"] = cfg.hash_hex();
                info["seed"] = std::to_string(seed);
                info["method"] = job.method;
                info["condition"] = job.cond;
                info["lambda_dps"] =
                    std::to_string(gcfg.use_dps ? gcfg.resolved_lambda_dps() : 0.0);
                info["lambda_mlem"] =
                    std::to_string(gcfg.use_mlem ? gcfg.resolved_lambda_mlem() : 0.0);
                write_kv_file(vol_path + ".info.txt", info);
            }
            if (job.phantom == 0)
                write_montage_pgm(out_dir + "/montage_" + job.cond + "_" + job.method + ".pgm",
                                  recon);
            res.psnr_db = psnr(recon, truth);
            res.nrmse_v = nrmse(recon, truth);
            res.ssim_v = ssim(recon, truth);
            res.ok = true;
        } catch (const std::exception& e) {
            res.ok = false;
            res.error = e.what();
        }
    });

    MetricReport report;
    report.metadata["config_hash"] = cfg.hash_hex();
    report.metadata["seed"] = std::to_string(seed);
    for (const auto& method : methods) {
        for (const auto& cond : conditions) {
            MetricRow row;
            row.condition = method + "/" + cond;
            int failures = 0;
            for (size_t j = 0; j < jobs.size(); ++j) {
                if (jobs[j].method != method || jobs[j].cond != cond) continue;
                if (!results[j].ok) {
                    ++failures;
                    report.metadata["error." + row.condition + "." +
                                    std::to_string(jobs[j].phantom)] = results[j].error;
                    continue;
                }
                row.psnr_db += results[j].psnr_db;
                row.nrmse += results[j].nrmse_v;
                row.ssim += results[j].ssim_v;
                row.n_volumes += 1;
            }
            if (row.n_volumes > 0) {
                row.psnr_db /= row.n_volumes;
                row.nrmse /= row.n_volumes;
                row.ssim /= row.n_volumes;
            }
            if (failures > 0)
                report.metadata["failures." + row.condition] = std::to_string(failures);
            report.rows.push_back(row);
        }
    }
    write_report(out_dir + "/report.csv", out_dir + "/report.txt", report);
    return report;
}

}  // namespace spectdiff

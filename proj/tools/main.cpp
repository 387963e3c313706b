// spectdiff: simulate, train, reconstruct, evaluate, and sweep a desk-scale
// multi-pinhole SPECT pipeline with a diffusion-guided reconstruction path.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "spectdiff/eps_net.hpp"
#include "spectdiff/gmm_prior.hpp"
#include "spectdiff/io.hpp"
#include "spectdiff/metrics.hpp"
#include "spectdiff/pipeline.hpp"
#include "spectdiff/threading.hpp"
#include "spectdiff/tv.hpp"

namespace fs = std::filesystem;
using namespace spectdiff;

namespace {

int env_threads_default() {
    if (const char* env = std::getenv("SPECTDIFF_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    return default_thread_count();
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    RunConfig cfg = path.empty() ? RunConfig() : RunConfig::from_file(path);
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got: " + kv);
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

struct ReconArgs {
    std::string dataset;
    std::string out = "recon_out";
    std::string method = "mlem";
    std::string condition = "c050";
    std::string checkpoint;
    std::string prior = "net";
    int phantom = 0;
    int iters = -1;
    double tv_weight = -1.0;
    double count_level = -1.0;
    int views = -1;
    int ddim_steps = -1;
    int mlem_every = -1;
    std::string lambda_dps = "auto";
    std::string lambda_mlem = "auto";
    bool no_dual_noise = false;
    std::string grad_mode;
};

void write_provenance(const std::string& vol_path, const RunConfig& cfg, uint64_t seed,
                      const std::map<std::string, std::string>& extra) {
    std::map<std::string, std::string> info = extra;
    info["config_hash"] = cfg.hash_hex();
    info["seed"] = std::to_string(seed);
    write_kv_file(vol_path + ".info.txt", info);
}

int cmd_simulate(const RunConfig& cfg, const std::string& out, int phantoms, uint64_t seed,
                 bool force, int threads) {
    const int n = phantoms > 0 ? phantoms : cfg.get_int("sim.n_phantoms");
    Dataset::simulate(cfg, out, n, seed, force, threads);
    std::cout << "wrote dataset with " << n << " phantoms to " << out << "\n";
    return 0;
}

int cmd_train(const RunConfig& cfg_cli, const std::string& dataset_dir, const std::string& out,
              const std::string& resume, uint64_t seed, int threads) {
    (void)cfg_cli;
    const Dataset data(dataset_dir, threads);
    const RunConfig& cfg = data.config();
    fs::create_directories(out);

    std::vector<PhantomVolumes> volumes;
    volumes.reserve(data.n_phantoms());
    std::vector<TrainingSample> samples;
    for (int i = 0; i < data.n_phantoms(); ++i) {
        // Training touches only fully-sampled volumes and anatomy.
        volumes.push_back({data.activity(i), data.anatomy(i)});
    }
    for (const auto& v : volumes) samples.push_back({&v.activity, &v.anatomy});

    TinyEpsNet net;
    if (!resume.empty()) {
        net = TinyEpsNet::load(resume);
    } else {
        net = TinyEpsNet(cfg.get_int("grid.nz"), cfg.get_int("train.channels"),
                         cfg.get_int("train.emb_dim"), cfg.get_int("train.emb_hidden"));
        net.init_params(seed);
    }

    TrainConfig tcfg;
    tcfg.steps = cfg.get_int("train.steps");
    tcfg.batch = cfg.get_int("train.batch");
    tcfg.lr = cfg.get_double("train.lr");
    tcfg.momentum = cfg.get_double("train.momentum");
    tcfg.lambda_vlb = cfg.get_double("train.lambda_vlb");
    tcfg.grad_clip = cfg.get_double("train.grad_clip");
    tcfg.seed = seed;
    tcfg.threads = threads;

    const TrainResult result = train(net, samples, data.setup().sched, tcfg);
    net.save(out + "/checkpoint.spnn");
    write_loss_csv(out + "/loss.csv", result);
    write_provenance(out + "/checkpoint.spnn", cfg, seed,
                     {{"train_steps", std::to_string(net.train_step())}});
    std::cout << "trained to step " << net.train_step() << "; checkpoint in " << out << "\n";
    return 0;
}

int cmd_reconstruct(const ReconArgs& args, uint64_t seed, int threads) {
    const Dataset data(args.dataset, threads);
    RunConfig cfg = data.config();
    if (args.ddim_steps > 0) cfg.set("guidance.ddim_steps", std::to_string(args.ddim_steps));
    if (args.mlem_every > 0) cfg.set("guidance.mlem_every", std::to_string(args.mlem_every));
    if (args.lambda_dps != "auto") cfg.set("guidance.lambda_dps", args.lambda_dps);
    if (args.lambda_mlem != "auto") cfg.set("guidance.lambda_mlem", args.lambda_mlem);
    if (args.tv_weight >= 0.0 && args.method == "diffspect3d")
        cfg.set("guidance.tv_weight", std::to_string(args.tv_weight));
    if (args.no_dual_noise) cfg.set("guidance.dual_noise", "false");
    if (!args.grad_mode.empty()) cfg.set("guidance.grad_mode", args.grad_mode);

    std::string condition = args.condition;
    if (args.views > 0) {
        char label[8];
        std::snprintf(label, sizeof(label), "v%02d", args.views);
        condition = label;
    } else if (args.count_level > 0.0) {
        char label[8];
        std::snprintf(label, sizeof(label), "c%03d", int(std::lround(args.count_level * 100)));
        condition = label;
    }

    const DegradedCase dc = data.load_case(args.phantom, condition);
    fs::create_directories(args.out);
    const std::string vol_path = args.out + "/recon_" + args.method + "_" + condition + ".spvl";

    ImageVolume recon;
    std::map<std::string, std::string> extra{{"method", args.method}, {"condition", condition}};
    if (args.method == "mlem") {
        const int iters = args.iters > 0 ? args.iters : cfg.get_int("recon.mlem_iters");
        recon = mlem_reconstruct(*dc.S, dc.y, iters, std::nullopt, threads);
        for (size_t i = 0; i < recon.size(); ++i) recon[i] /= dc.count_scale;
        extra["iters"] = std::to_string(iters);
    } else if (args.method == "admm-tv") {
        const int iters = args.iters > 0 ? args.iters : cfg.get_int("recon.admm_outer");
        const double w =
            args.tv_weight >= 0.0 ? args.tv_weight : cfg.get_double("recon.admm_tv_weight");
        recon = admm_tv_reconstruct(*dc.S, dc.y, w, iters, cfg.get_int("recon.admm_inner"),
                                    threads);
        for (size_t i = 0; i < recon.size(); ++i) recon[i] /= dc.count_scale;
        extra["iters"] = std::to_string(iters);
        extra["tv_weight"] = std::to_string(w);
    } else if (args.method == "diffspect3d") {
        GuidanceConfig gcfg = guidance_from_config(cfg, dc, threads);
        const ImageVolume anat = data.anatomy(args.phantom);
        if (args.prior == "gmm") {
            // Analytic wide prior: pure data-consistency sampling.
            const GMMPrior prior =
                single_gaussian(std::vector<double>(anat.slice_size(), 0.0), 1.0);
            const GmmDenoiser model(prior, data.setup().sched);
            SamplerRun run;
            run.x_in = &dc.x_in;
            run.y = &dc.y;
            run.S = dc.S;
            run.model = &model;
            run.sched = &data.setup().sched;
            run.seed = seed;
            recon = sample_volume(run, gcfg);
        } else {
            if (args.checkpoint.empty())
                throw DataError("reconstruct: --method diffspect3d needs --checkpoint "
                                "(or --prior gmm)");
            const TinyEpsNet net = TinyEpsNet::load(args.checkpoint);
            recon = reconstruct_diffspect(dc, anat, net, data.setup().sched, gcfg, seed);
        }
        extra["lambda_dps"] = std::to_string(gcfg.use_dps ? gcfg.resolved_lambda_dps() : 0.0);
        extra["lambda_mlem"] = std::to_string(gcfg.use_mlem ? gcfg.resolved_lambda_mlem() : 0.0);
        extra["count_level"] = std::to_string(gcfg.count_level);
    } else {
        throw ConfigError("unknown method: " + args.method);
    }

    write_volume(vol_path, recon);
    write_montage_pgm(args.out + "/recon_" + args.method + "_" + condition + ".pgm", recon);
    write_provenance(vol_path, cfg, seed, extra);
    std::cout << "wrote " << vol_path << "\n";
    return 0;
}

int cmd_evaluate(const std::string& x_path, const std::string& ref_path,
                 const std::string& label, const std::string& out) {
    const ImageVolume x = read_volume(x_path);
    const ImageVolume ref = read_volume(ref_path);
    const MetricReport report = evaluate_sweep({label}, {&x}, {&ref});
    std::cout << report.to_table();
    if (!out.empty()) {
        fs::create_directories(out);
        write_report(out + "/report.csv", out + "/report.txt", report);
    }
    return 0;
}

int cmd_sweep_cli(const std::string& dataset_dir, const std::string& checkpoint,
                  const std::string& out, const std::string& conditions_csv,
                  const std::string& methods_csv, uint64_t seed, int threads) {
    const Dataset data(dataset_dir, threads);

    auto split = [](const std::string& csv) {
        std::vector<std::string> items;
        std::string cur;
        for (char c : csv) {
            if (c == ',') {
                if (!cur.empty()) items.push_back(cur);
                cur.clear();
            } else {
                cur += c;
            }
        }
        if (!cur.empty()) items.push_back(cur);
        return items;
    };

    std::vector<std::string> conditions = split(conditions_csv);
    if (conditions.empty())
        for (const auto& c : standard_conditions()) conditions.push_back(c.label);
    std::vector<std::string> methods = split(methods_csv);
    if (methods.empty()) methods = {"input", "prior", "xin", "xin+dps", "xin+dps+tv", "full"};

    TinyEpsNet net;
    const bool needs_net = !(methods.size() == 1 && methods[0] == "input");
    if (needs_net) {
        if (checkpoint.empty()) throw DataError("sweep: --checkpoint required");
        net = TinyEpsNet::load(checkpoint);
    }
    const MetricReport report =
        run_sweep(data, needs_net ? &net : nullptr, conditions, methods, out, seed, threads);
    std::cout << report.to_table();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale multi-pinhole SPECT simulation and reconstruction"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out";
    uint64_t seed = 0;
    int threads = env_threads_default();
    bool force = false;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "key=value config file");
    app.add_option("--seed", seed, "master RNG seed");
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--threads", threads, "worker thread count");
    app.add_flag("--force", force, "overwrite existing outputs");
    app.add_option("--set", overrides, "config override key=value (repeatable)");

    auto* sim = app.add_subcommand("simulate", "generate phantoms, projections, baselines");
    int phantoms = -1;
    sim->add_option("--phantoms", phantoms, "number of phantoms (default from config)");

    auto* tr = app.add_subcommand("train", "train the conditional denoiser");
    std::string dataset_dir, resume;
    tr->add_option("--dataset", dataset_dir, "dataset directory");
    tr->add_option("--resume", resume, "checkpoint to continue from");

    auto* rec = app.add_subcommand("reconstruct", "reconstruct one phantom/condition");
    ReconArgs rargs;
    rec->add_option("--dataset", rargs.dataset, "dataset directory");
    rec->add_option("--phantom", rargs.phantom, "phantom index");
    rec->add_option("--condition", rargs.condition, "condition label (c001..c050, v01..v09)");
    rec->add_option("--method", rargs.method, "mlem | admm-tv | diffspect3d");
    rec->add_option("--iters", rargs.iters, "iteration count for mlem/admm-tv");
    rec->add_option("--tv-weight", rargs.tv_weight, "TV weight");
    rec->add_option("--checkpoint", rargs.checkpoint, "trained denoiser checkpoint");
    rec->add_option("--prior", rargs.prior, "net | gmm (analytic prior, no checkpoint)");
    rec->add_option("--count-level", rargs.count_level, "select count condition by fraction");
    rec->add_option("--views", rargs.views, "select view condition (1,3,5,7,9)");
    rec->add_option("--ddim-steps", rargs.ddim_steps, "DDIM step count");
    rec->add_option("--mlem-every", rargs.mlem_every, "MLEM insertion period");
    rec->add_option("--lambda-dps", rargs.lambda_dps, "auto or a number");
    rec->add_option("--lambda-mlem", rargs.lambda_mlem, "auto or a number");
    rec->add_flag("--no-dual-noise", rargs.no_dual_noise, "single noise trajectory");
    rec->add_option("--grad-mode", rargs.grad_mode, "exact | approx");

    auto* ev = app.add_subcommand("evaluate", "metrics for a volume against a reference");
    std::string x_path, ref_path, label = "volume";
    ev->add_option("--x", x_path, "volume to score");
    ev->add_option("--ref", ref_path, "reference volume");
    ev->add_option("--label", label, "row label");

    auto* sw = app.add_subcommand("sweep", "reconstruct all conditions and ablations");
    std::string sweep_checkpoint, conditions_csv, methods_csv, sweep_dataset;
    sw->add_option("--dataset", sweep_dataset, "dataset directory");
    sw->add_option("--checkpoint", sweep_checkpoint, "trained denoiser checkpoint");
    sw->add_option("--conditions", conditions_csv, "comma-separated condition labels");
    sw->add_option("--methods", methods_csv, "comma-separated method labels");

    CLI11_PARSE(app, argc, argv);

    try {
        const RunConfig cfg = load_config(config_path, overrides);
        if (sim->parsed()) return cmd_simulate(cfg, out_dir, phantoms, seed, force, threads);
        if (tr->parsed()) {
            if (dataset_dir.empty()) throw ConfigError("train: --dataset is required");
            return cmd_train(cfg, dataset_dir, out_dir, resume, seed, threads);
        }
        if (rec->parsed()) {
            if (rargs.dataset.empty()) throw ConfigError("reconstruct: --dataset is required");
            rargs.out = out_dir;
            return cmd_reconstruct(rargs, seed, threads);
        }
        if (ev->parsed()) {
            if (x_path.empty() || ref_path.empty())
                throw ConfigError("evaluate: --x and --ref are required");
            return cmd_evaluate(x_path, ref_path, label, out_dir);
        }
        if (sw->parsed()) {
            if (sweep_dataset.empty()) throw ConfigError("sweep: --dataset is required");
            return cmd_sweep_cli(sweep_dataset, sweep_checkpoint, out_dir, conditions_csv,
                                 methods_csv, seed, threads);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
    return 0;
}

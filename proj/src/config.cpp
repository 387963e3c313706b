#include "spectdiff/config.hpp"

#include <fstream>
#include <sstream>

#include "spectdiff/io.hpp"

namespace spectdiff {

namespace {

const std::map<std::string, std::string>& default_entries() {
    static const std::map<std::string, std::string> defaults = {
        {"grid.nx", "32"},
        {"grid.ny", "32"},
        {"grid.nz", "16"},
        {"grid.voxel_mm", "4.0"},
        {"geometry.scale", "1.0"},
        {"sim.total_counts", "2000000"},
        {"sim.n_phantoms", "4"},
        {"schedule.T", "1000"},
        {"schedule.beta_start", "1e-4"},
        {"schedule.beta_end", "0.02"},
        {"train.steps", "6000"},
        {"train.batch", "4"},
        {"train.lr", "0.002"},
        {"train.momentum", "0.9"},
        {"train.lambda_vlb", "0.001"},
        {"train.grad_clip", "5.0"},
        {"train.channels", "16"},
        {"train.emb_dim", "32"},
        {"train.emb_hidden", "32"},
        {"recon.mlem_iters", "50"},
        {"recon.admm_tv_weight", "0.5"},
        {"recon.admm_outer", "100"},
        {"recon.admm_inner", "30"},
        {"guidance.ddim_steps", "25"},
        {"guidance.mlem_every", "10"},
        {"guidance.mlem_inner", "1"},
        {"guidance.lambda_dps", "auto"},
        {"guidance.lambda_mlem", "auto"},
        {"guidance.tv_weight", "0.02"},
        {"guidance.tv_inner", "5"},
        {"guidance.dual_noise", "true"},
        {"guidance.grad_mode", "approx"},
        {"guidance.correction_target", "xprev"},
        {"guidance.clip_x0_lo", "0.0"},
        {"guidance.clip_x0_hi", "4.0"},
    };
    return defaults;
}

}  // namespace

RunConfig::RunConfig() : kv_(default_entries()) {}

RunConfig RunConfig::from_file(const std::string& path) {
    RunConfig cfg;
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open config: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    cfg.apply_text(ss.str());
    return cfg;
}

void RunConfig::apply(const std::string& key, const std::string& value) {
    if (kv_.find(key) == kv_.end()) throw ConfigError("unknown config key: " + key);
    kv_[key] = value;
}

void RunConfig::apply_text(const std::string& text) {
    for (const auto& [k, v] : parse_kv_text(text)) apply(k, v);
}

const std::string& RunConfig::get(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw ConfigError("unknown config key: " + key);
    return it->second;
}

double RunConfig::get_double(const std::string& key) const {
    try {
        return std::stod(get(key));
    } catch (const std::exception&) {
        throw ConfigError("config value for " + key + " is not a number: " + get(key));
    }
}

int RunConfig::get_int(const std::string& key) const {
    try {
        return std::stoi(get(key));
    } catch (const std::exception&) {
        throw ConfigError("config value for " + key + " is not an integer: " + get(key));
    }
}

uint64_t RunConfig::get_u64(const std::string& key) const {
    try {
        return std::stoull(get(key));
    } catch (const std::exception&) {
        throw ConfigError("config value for " + key + " is not an integer: " + get(key));
    }
}

bool RunConfig::get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config value for " + key + " is not a boolean: " + v);
}

std::string RunConfig::canonical_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : kv_) os << k << "=" << v << "\n";
    return os.str();
}

uint64_t RunConfig::hash() const { return fnv1a64_string(canonical_text()); }

std::string RunConfig::hash_hex() const { return hex64(hash()); }

}  // namespace spectdiff

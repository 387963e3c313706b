#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "spectdiff/types.hpp"

namespace spectdiff {

/// Flat key=value run configuration with a fixed schema. Unknown keys are
/// rejected; the hash covers the canonicalized (sorted) content so equal
/// configs always hash equal.
class RunConfig {
public:
    RunConfig();  // defaults

    static RunConfig from_file(const std::string& path);
    void apply(const std::string& key, const std::string& value);
    void apply_text(const std::string& text);

    const std::string& get(const std::string& key) const;
    double get_double(const std::string& key) const;
    int get_int(const std::string& key) const;
    uint64_t get_u64(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    void set(const std::string& key, const std::string& value) { apply(key, value); }

    std::string canonical_text() const;
    uint64_t hash() const;
    std::string hash_hex() const;

    const std::map<std::string, std::string>& entries() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
};

}  // namespace spectdiff

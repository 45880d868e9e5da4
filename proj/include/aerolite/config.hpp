#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace aerolite {

struct ConfigKey {
    std::string_view name;
    std::string_view default_value;
    std::string_view help;
};

/// Every recognised configuration key with its default. CLI flags are
/// generated from this table one-to-one (`--train.lr` etc.).
const std::vector<ConfigKey>& config_keys();

/// Flat key=value configuration. Lines starting with '#' are comments.
/// Unknown keys are rejected so that typos do not silently fall back to
/// defaults.
class Config {
public:
    /// Config holding the default value of every known key.
    Config();

    static Config parse(std::string_view text);
    static Config load(const std::string& path);

    /// Sets only the keys present in `text`, leaving the rest untouched.
    void update(std::string_view text);
    void update_from_file(const std::string& path);

    void set(const std::string& key, const std::string& value);
    bool has(const std::string& key) const;

    const std::string& get(const std::string& key) const;
    double get_double(const std::string& key) const;
    std::int64_t get_int(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<std::string> get_list(const std::string& key) const;

    const std::map<std::string, std::string>& entries() const { return values_; }

    /// key=value lines in key order; parse(serialize()) reproduces the config.
    std::string serialize() const;

    bool operator==(const Config&) const = default;

private:
    std::map<std::string, std::string> values_;
};

}  // namespace aerolite

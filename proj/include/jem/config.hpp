#pragma once

#include <concepts>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace jem {

// `key = value` text config. `[section]` headers prefix later keys with
// "section."; `#` starts a comment; values may be double-quoted.
class KeyValueConfig {
public:
    static KeyValueConfig parse(const std::string& text, const std::string& origin = "<string>");
    static KeyValueConfig load(const std::filesystem::path& path);

    // Later sets win (flag overrides go through here).
    void set(const std::string& key, const std::string& value);
    bool has(const std::string& key) const { return values_.count(key) != 0; }

    // Typed reads mark the key as used; malformed values are collected into
    // problems() rather than thrown, so all of them can be reported at once.
    void read(const std::string& key, std::string& out) const;
    void read(const std::string& key, double& out) const;
    template <std::unsigned_integral T>
    void read(const std::string& key, T& out) const {
        std::uint64_t x = 0;
        if (read_unsigned(key, x)) {
            out = static_cast<T>(x);
        }
    }
    void read(const std::string& key, bool& out) const;
    void read(const std::string& key, std::vector<std::size_t>& out) const;

    // Keys never read.
    std::vector<std::string> unused() const;
    const std::vector<std::string>& problems() const noexcept { return problems_; }
    const std::map<std::string, std::string>& values() const noexcept { return values_; }

private:
    const std::string* lookup(const std::string& key) const;
    bool read_unsigned(const std::string& key, std::uint64_t& out) const;

    std::map<std::string, std::string> values_;
    mutable std::set<std::string> used_;
    mutable std::vector<std::string> problems_;
};

// Accepts decimals and fractions such as "2/255".
std::optional<double> parse_real(const std::string& text);

}  // namespace jem

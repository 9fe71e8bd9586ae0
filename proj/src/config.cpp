#include "jem/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "jem/error.hpp"

namespace jem {
namespace {

std::string trim(std::string_view s) {
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string_view::npos) {
        return {};
    }
    const auto end = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(begin, end - begin + 1));
}

std::optional<double> parse_plain(const std::string& text) {
    if (text.empty()) {
        return std::nullopt;
    }
    std::size_t used = 0;
    try {
        const double v = std::stod(text, &used);
        if (used != text.size() || !std::isfinite(v)) {
            return std::nullopt;
        }
        return v;
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

}  // namespace

std::optional<double> parse_real(const std::string& raw) {
    const std::string text = trim(raw);
    const auto slash = text.find('/');
    if (slash == std::string::npos) {
        return parse_plain(text);
    }
    const auto num = parse_plain(trim(text.substr(0, slash)));
    const auto den = parse_plain(trim(text.substr(slash + 1)));
    if (!num || !den || *den == 0.0) {
        return std::nullopt;
    }
    return *num / *den;
}

KeyValueConfig KeyValueConfig::parse(const std::string& text, const std::string& origin) {
    KeyValueConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::string section;
    std::size_t line_no = 0;
    std::vector<std::string> errors;
    while (std::getline(in, line)) {
        ++line_no;
        bool quoted = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') {
                quoted = !quoted;
            } else if (line[i] == '#' && !quoted) {
                line.resize(i);
                break;
            }
        }
        const std::string body = trim(line);
        if (body.empty()) {
            continue;
        }
        const std::string where = origin + ":" + std::to_string(line_no);
        if (body.front() == '[') {
            if (body.back() != ']') {
                errors.push_back(where + ": unterminated section header");
                continue;
            }
            section = trim(body.substr(1, body.size() - 2));
            continue;
        }
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            errors.push_back(where + ": expected key = value");
            continue;
        }
        std::string key = trim(body.substr(0, eq));
        std::string value = trim(body.substr(eq + 1));
        if (key.empty()) {
            errors.push_back(where + ": empty key");
            continue;
        }
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
            value = value.substr(1, value.size() - 2);
        }
        cfg.set(section.empty() ? key : section + "." + key, value);
    }
    if (!errors.empty()) {
        std::string msg = "malformed config";
        for (const auto& e : errors) {
            msg += "\n  " + e;
        }
        throw ConfigError(msg);
    }
    return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot read config file " + path.string());
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse(buf.str(), path.string());
}

void KeyValueConfig::set(const std::string& key, const std::string& value) { values_[key] = value; }

const std::string* KeyValueConfig::lookup(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) {
        return nullptr;
    }
    used_.insert(key);
    return &it->second;
}

void KeyValueConfig::read(const std::string& key, std::string& out) const {
    if (const auto* v = lookup(key)) {
        out = *v;
    }
}

void KeyValueConfig::read(const std::string& key, double& out) const {
    if (const auto* v = lookup(key)) {
        if (const auto x = parse_real(*v)) {
            out = *x;
        } else {
            problems_.push_back(key + ": expected a number, got '" + *v + "'");
        }
    }
}

bool KeyValueConfig::read_unsigned(const std::string& key, std::uint64_t& out) const {
    const auto* v = lookup(key);
    if (v == nullptr) {
        return false;
    }
    const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc() || ptr != v->data() + v->size()) {
        problems_.push_back(key + ": expected a non-negative integer, got '" + *v + "'");
        return false;
    }
    return true;
}

void KeyValueConfig::read(const std::string& key, bool& out) const {
    if (const auto* v = lookup(key)) {
        std::string s = *v;
        std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
        if (s == "true" || s == "1" || s == "yes" || s == "on") {
            out = true;
        } else if (s == "false" || s == "0" || s == "no" || s == "off") {
            out = false;
        } else {
            problems_.push_back(key + ": expected true/false, got '" + *v + "'");
        }
    }
}

void KeyValueConfig::read(const std::string& key, std::vector<std::size_t>& out) const {
    if (const auto* v = lookup(key)) {
        std::vector<std::size_t> items;
        std::string text = *v;
        std::replace(text.begin(), text.end(), ',', ' ');
        std::istringstream in(text);
        std::string tok;
        while (in >> tok) {
            std::size_t x = 0;
            const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), x);
            if (ec != std::errc() || ptr != tok.data() + tok.size()) {
                problems_.push_back(key + ": bad list element '" + tok + "'");
                return;
            }
            items.push_back(x);
        }
        out = std::move(items);
    }
}

std::vector<std::string> KeyValueConfig::unused() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_) {
        if (used_.count(k) == 0) {
            out.push_back(k);
        }
    }
    return out;
}

}  // namespace jem

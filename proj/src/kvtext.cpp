#include "rf/kvtext.hpp"

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace rf::kv {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

Table parse(const std::string& text) {
    Table t;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash_pos = line.find('#'); hash_pos != std::string::npos) line.resize(hash_pos);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
        }
        auto key = trim(line.substr(0, eq));
        if (key.empty()) throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
        t[key] = trim(line.substr(eq + 1));
    }
    return t;
}

std::string format(const Table& table) {
    std::string out;
    for (const auto& [k, v] : table) out += k + " = " + v + "\n";
    return out;
}

double get_double(const Table& t, const std::string& key, double fallback) {
    auto it = t.find(key);
    if (it == t.end()) return fallback;
    try {
        std::size_t used = 0;
        const double v = std::stod(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw std::invalid_argument("config key '" + key + "': not a number: " + it->second);
    }
}

long long get_int(const Table& t, const std::string& key, long long fallback) {
    auto it = t.find(key);
    if (it == t.end()) return fallback;
    long long v = 0;
    const auto& s = it->second;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        throw std::invalid_argument("config key '" + key + "': not an integer: " + s);
    }
    return v;
}

std::string get_string(const Table& t, const std::string& key, const std::string& fallback) {
    auto it = t.find(key);
    return it == t.end() ? fallback : it->second;
}

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip form
    return std::string(buf, r.ptr);
}

std::uint64_t hash(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace rf::kv

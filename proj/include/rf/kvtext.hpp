#pragma once

// Flat `key = value` text: one pair per line, `#` starts a comment.

#include <cstdint>
#include <map>
#include <string>

namespace rf::kv {

using Table = std::map<std::string, std::string>;

Table parse(const std::string& text);
std::string format(const Table& table);

double get_double(const Table& t, const std::string& key, double fallback);
long long get_int(const Table& t, const std::string& key, long long fallback);
std::string get_string(const Table& t, const std::string& key, const std::string& fallback);

std::string format_double(double v);  // round-trip exact

// FNV-1a over the bytes of `text`.
std::uint64_t hash(const std::string& text);
std::string hex(std::uint64_t v);

}  // namespace rf::kv

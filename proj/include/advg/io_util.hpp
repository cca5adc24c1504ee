#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace advg {

// Shortest round-trip-exact decimal form (17 significant digits).
std::string fmt_double(double v);

// strtod with full-token validation.
double parse_double(std::string_view s);
long long parse_int(std::string_view s);
unsigned long long parse_uint(std::string_view s);

std::vector<std::string> split(std::string_view s, char sep);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view content);

// FNV-1a fingerprint of a file's bytes, as a 16-char hex string.
std::string hash_file_hex(const std::filesystem::path& path);
std::string hash_hex(std::uint64_t h);

}  // namespace advg

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace trebi {

// 64-bit FNV-1a, used for env-spec and config fingerprints.
std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t value);

// Shortest decimal text that parses back to the same double.
std::string format_double(double value);

// Writes to a sibling temp file then renames it over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace trebi

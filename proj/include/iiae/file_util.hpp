#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace iiae {

/// Writes through `writer` into a sibling temporary file, then renames it
/// over `path`. A throwing writer leaves no file behind.
void write_atomically(const std::filesystem::path& path, const std::function<void(std::ostream&)>& writer);

void write_f32_le(std::ostream& out, std::span<const double> values);
/// Reads `count` little-endian floats; returns false on short read.
bool read_f32_le(std::istream& in, std::size_t count, std::vector<double>& out);

}  // namespace iiae

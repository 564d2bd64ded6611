#pragma once

#include <string>
#include <string_view>

namespace ocnet {

/// Shortest decimal form that parses back to the same double.
std::string format_double(double v);
/// Throws IoError on malformed input.
double parse_double(std::string_view s);

/// Writes to `path.tmp` and renames over `path`, so readers never see a partial file.
void write_file_atomic(const std::string& path, const std::string& content);
std::string read_file(const std::string& path);

}  // namespace ocnet

#pragma once

#include <string>
#include <vector>

namespace geohmc::cli {

/// Full command-line front end. `args` excludes the program name.
/// Returns 0 on success, 1 on runtime failure, 2 on usage error.
int run_cli(std::vector<std::string> args);

/// Round-trip-exact float formatting used by every CSV writer.
std::string format_value(double v);

/// Write `content` to `path` via a temp file + rename.
void write_file_atomic(const std::string& path, const std::string& content);

/// Parse a `i,y` CSV produced by simulate-data; throws std::runtime_error
/// when unreadable or empty.
std::vector<double> read_observations(const std::string& path);

}  // namespace geohmc::cli

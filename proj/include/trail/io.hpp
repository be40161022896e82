#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace trail::io {

// Shortest decimal representation that round-trips the exact double. Used for
// every numeric field we write so re-runs produce byte-identical files.
std::string format_double(double v);

std::string read_file(const std::filesystem::path& path);

// Writes to a temp file in the target directory and renames it into place, so
// interrupted runs never leave half-written artifacts.
void atomic_write(const std::filesystem::path& path, const std::string& content);

// Splits one CSV line on commas. No quoting support; none of our formats
// need it.
std::vector<std::string> split_csv_line(const std::string& line);

// Splits file content into lines, tolerating a trailing newline and CRLF.
std::vector<std::string> split_lines(const std::string& content);

double parse_double(const std::string& s, const std::string& context);
long parse_long(const std::string& s, const std::string& context);

}  // namespace trail::io

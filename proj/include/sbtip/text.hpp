#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace sbtip {

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);
double parse_double(std::string_view text, std::size_t line);
long long parse_integer(std::string_view text, std::size_t line);
std::string_view trim(std::string_view s);

/// Reads the next line that is neither blank nor a '#' comment.
bool next_nonblank_line(std::istream& in, std::string& line, std::size_t& lineno);
std::vector<double> split_csv_doubles(std::string_view line, std::size_t lineno);

}  // namespace sbtip

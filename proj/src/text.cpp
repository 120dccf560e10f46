#include "sbtip/text.hpp"

#include <array>
#include <charconv>
#include <istream>

#include "sbtip/error.hpp"

namespace sbtip {

std::string format_double(double v) {
  std::array<char, 32> buf;
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_double(std::string_view text, std::size_t line) {
  text = trim(text);
  if (!text.empty() && text.front() == '+') text.remove_prefix(1);
  double v = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || res.ec != std::errc() || res.ptr != text.data() + text.size())
    throw ParseError(line, "not a number: '" + std::string(text) + "'");
  return v;
}

long long parse_integer(std::string_view text, std::size_t line) {
  text = trim(text);
  long long v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || res.ec != std::errc() || res.ptr != text.data() + text.size())
    throw ParseError(line, "not an integer: '" + std::string(text) + "'");
  return v;
}

bool next_nonblank_line(std::istream& in, std::string& line, std::size_t& lineno) {
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (!t.empty() && t.front() != '#') return true;
  }
  return false;
}

std::vector<double> split_csv_doubles(std::string_view line, std::size_t lineno) {
  std::vector<double> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(parse_double(line.substr(start, comma - start), lineno));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace sbtip

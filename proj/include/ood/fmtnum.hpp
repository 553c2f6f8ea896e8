#pragma once

#include <charconv>
#include <string>
#include <system_error>

namespace ood {

// Shortest decimal form that parses back to the same f64. Used everywhere a
// double crosses a text boundary (CSV cells, fingerprint material).
inline std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

} // namespace ood

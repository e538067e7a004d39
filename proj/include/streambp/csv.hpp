#pragma once

#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace streambp {

// 17 significant digits: a printed real64 reads back bit-identical.
inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Comma-separated rows with LF endings. Cells are plain tokens (no quoting).
class CsvWriter {
 public:
  explicit CsvWriter(std::ostream& out) : out_(&out) {}

  void header(const std::vector<std::string>& names) { write_row(names); }

  template <class... Cells>
  void row(const Cells&... cells) {
    std::vector<std::string> v;
    v.reserve(sizeof...(cells));
    (v.push_back(cell(cells)), ...);
    write_row(v);
  }

  void write_row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i != 0) *out_ << ',';
      *out_ << cells[i];
    }
    *out_ << '\n';
  }

  template <class V>
  static std::string cell(const V& v) {
    if constexpr (std::is_same_v<V, bool>) {
      return v ? "true" : "false";
    } else if constexpr (std::is_floating_point_v<V>) {
      return format_real(static_cast<double>(v));
    } else if constexpr (std::is_integral_v<V>) {
      return std::to_string(v);
    } else {
      return std::string(std::string_view(v));
    }
  }

 private:
  std::ostream* out_;
};

}  // namespace streambp

#pragma once

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <span>
#include <tuple>
#include <string>
#include <vector>

#include "mmq/downstream.hpp"
#include "mmq/errors.hpp"
#include "mmq/io.hpp"

namespace mmq {

struct ResultLine {
  std::vector<std::string> fields;  // config_hash m n seed train_acc test_acc wall_time param_count
  std::string line;                 // verbatim source text
  std::size_t m = 0, n = 0;
};

inline std::vector<ResultLine> parse_results(const std::string& text, const std::string& source) {
  const auto rows = io::lines(text);
  if (rows.empty() || rows[0] != "# mmq-results v1") throw ParseError(source, 1, "missing '# mmq-results v1' header");
  auto whole = [&](const std::string& s, std::size_t ln, bool integer) {
    char* end = nullptr;
    if (integer) {
      if (s.empty() || !std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); })) {
        throw ParseError(source, ln, "expected a non-negative integer, got '" + s + "'");
      }
      return static_cast<double>(std::strtoull(s.c_str(), &end, 10));
    }
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size()) throw ParseError(source, ln, "expected a number, got '" + s + "'");
    return v;
  };
  std::vector<ResultLine> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const std::size_t ln = i + 1;
    if (rows[i].empty() || rows[i][0] == '#') continue;
    ResultLine r;
    r.fields = io::split(rows[i], '\t');
    if (r.fields.size() != 8) {
      throw ParseError(source, ln, "expected 8 tab-separated fields, got " + std::to_string(r.fields.size()));
    }
    if (r.fields[0].empty()) throw ParseError(source, ln, "empty config hash");
    r.m = static_cast<std::size_t>(whole(r.fields[1], ln, true));
    r.n = static_cast<std::size_t>(whole(r.fields[2], ln, true));
    whole(r.fields[3], ln, true);
    for (std::size_t c : {4, 5, 6}) whole(r.fields[c], ln, false);
    whole(r.fields[7], ln, true);
    r.line = rows[i];
    out.push_back(std::move(r));
  }
  return out;
}

struct Rendered {
  std::string table;    // aligned human-readable summary
  std::string records;  // results-format rows sorted by (m, n)
  std::vector<ResultLine> rows;
};

// Rows from every input, stably sorted by (m, n); values are echoed verbatim.
inline Rendered report_render(std::span<const std::filesystem::path> inputs) {
  Rendered r;
  for (const auto& p : inputs) {
    auto rows = parse_results(io::read_file(p), p.string());
    r.rows.insert(r.rows.end(), rows.begin(), rows.end());
  }
  if (r.rows.empty()) throw DataError("report: no result rows in the given files");
  for (const auto& row : r.rows) {
    if (row.fields[0] != r.rows[0].fields[0]) {
      throw DataError("report: inputs mix config hashes " + r.rows[0].fields[0] + " and " + row.fields[0]);
    }
  }
  std::stable_sort(r.rows.begin(), r.rows.end(),
                   [](const ResultLine& a, const ResultLine& b) { return std::tie(a.m, a.n) < std::tie(b.m, b.n); });

  r.records = kResultsHeader;
  for (const auto& row : r.rows) r.records += row.line + "\n";

  const std::vector<std::string> head = {"m", "n", "seed", "train_acc", "test_acc", "train_time_s", "params"};
  const std::size_t cols[] = {1, 2, 3, 4, 5, 6, 7};
  std::vector<std::size_t> width(head.size());
  for (std::size_t c = 0; c < head.size(); ++c) {
    width[c] = head[c].size();
    for (const auto& row : r.rows) width[c] = std::max(width[c], row.fields[cols[c]].size());
  }
  auto emit = [&](auto cell) {
    std::string line;
    for (std::size_t c = 0; c < head.size(); ++c) {
      const std::string s = cell(c);
      line += (c ? "  " : "") + std::string(width[c] - s.size(), ' ') + s;
    }
    return line + "\n";
  };
  r.table = "config " + r.rows[0].fields[0] + "\n";
  r.table += emit([&](std::size_t c) { return head[c]; });
  for (const auto& row : r.rows) r.table += emit([&](std::size_t c) { return row.fields[cols[c]]; });
  return r;
}

}  // namespace mmq

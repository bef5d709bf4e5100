#pragma once

// Metrics CSV and pruning trace. Numbers use shortest round-trip formatting,
// so identical runs give byte-identical files. wall_ms stays empty in the CSV
// for that reason; timings go to the run summary instead.

#include <charconv>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ideaprune/config.hpp"
#include "ideaprune/error.hpp"

namespace ideaprune {

inline constexpr const char* kMetricsHeader = "step,phase,lr,sparsity,retained,train_loss,heldout_ppl,wall_ms";
inline constexpr const char* kTraceHeader = "step,layer,retained,min_score,max_score";

struct MetricsRow {
  std::int64_t step = 0;
  std::string phase;
  double lr = 0.0;
  double sparsity = 0.0;
  std::size_t retained = 0;
  double train_loss = 0.0;
  std::optional<double> heldout_ppl;
  std::optional<double> wall_ms;

  bool operator==(const MetricsRow&) const = default;
};

struct TraceRow {
  std::int64_t step = 0;
  std::size_t layer = 0;
  std::size_t retained = 0;
  std::optional<double> min_score;
  std::optional<double> max_score;

  bool operator==(const TraceRow&) const = default;
};

namespace detail {

inline std::string opt_str(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::optional<double> opt_double(const std::string& key, const std::string& s) {
  if (s.empty()) return std::nullopt;
  try {
    return parse_double(key, s);
  } catch (const ConfigError& e) {
    throw DataError(std::string("metrics: ") + e.what());
  }
}

}  // namespace detail

inline std::string metrics_row_csv(const MetricsRow& r) {
  std::ostringstream os;
  os << r.step << ',' << r.phase << ',' << format_double(r.lr) << ',' << format_double(r.sparsity) << ','
     << r.retained << ',' << format_double(r.train_loss) << ',' << detail::opt_str(r.heldout_ppl) << ','
     << detail::opt_str(r.wall_ms);
  return os.str();
}

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) out += metrics_row_csv(r) + "\n";
  return out;
}

inline std::string trace_csv(const std::vector<TraceRow>& rows) {
  std::ostringstream os;
  os << kTraceHeader << '\n';
  for (const auto& r : rows) {
    os << r.step << ',' << r.layer << ',' << r.retained << ',' << detail::opt_str(r.min_score) << ','
       << detail::opt_str(r.max_score) << '\n';
  }
  return os.str();
}

/// Parses a metrics CSV; rejects a wrong header, malformed rows and non-increasing steps.
inline std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != kMetricsHeader) throw DataError("metrics: missing or unexpected header");
  std::vector<MetricsRow> rows;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 8) throw DataError("metrics line " + std::to_string(line_no) + ": expected 8 fields");
    MetricsRow r;
    try {
      r.step = parse_int<std::int64_t>("step", f[0]);
      r.phase = f[1];
      r.lr = parse_double("lr", f[2]);
      r.sparsity = parse_double("sparsity", f[3]);
      r.retained = parse_int<std::size_t>("retained", f[4]);
      r.train_loss = parse_double("train_loss", f[5]);
    } catch (const ConfigError& e) {
      throw DataError("metrics line " + std::to_string(line_no) + ": " + e.what());
    }
    r.heldout_ppl = detail::opt_double("heldout_ppl", f[6]);
    r.wall_ms = detail::opt_double("wall_ms", f[7]);
    if (!rows.empty() && r.step <= rows.back().step) {
      throw DataError("metrics line " + std::to_string(line_no) + ": steps must increase");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace ideaprune

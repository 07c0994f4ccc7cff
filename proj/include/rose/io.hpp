#pragma once

#include <json.hpp>

#include <charconv>
#include <cstddef>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "rose/dataset.hpp"
#include "rose/error.hpp"
#include "rose/estimator.hpp"
#include "rose/sim.hpp"

namespace rose {

// ---- CSV ----
// Comma separated, '.' decimal point, mandatory header. Double quotes around
// a cell are stripped; embedded commas and newlines are not supported.

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> lines;  // 1-based source line of each row

  std::size_t column(std::string_view name) const {
    for (std::size_t j = 0; j < header.size(); ++j) {
      if (header[j] == name) return j;
    }
    throw ParseError("missing column '" + std::string(name) + "'", 1);
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && (s[a] == ' ' || s[a] == '\t' || s[a] == '\r')) ++a;
  while (b > a && (s[b - 1] == ' ' || s[b - 1] == '\t' || s[b - 1] == '\r')) --b;
  return std::string(s.substr(a, b - a));
}

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    std::size_t comma = line.find(',', start);
    std::string cell = trim(line.substr(start, comma == std::string_view::npos ? line.npos
                                                                                : comma - start));
    if (cell.size() >= 2 && cell.front() == '"' && cell.back() == '"') {
      cell = cell.substr(1, cell.size() - 2);
    }
    out.push_back(std::move(cell));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace detail

inline CsvTable parse_csv(std::string_view text) {
  CsvTable t;
  std::size_t line_no = 0, pos = 0;
  bool have_header = false;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == text.npos ? text.npos : nl - pos);
    ++line_no;
    pos = nl == text.npos ? text.size() + 1 : nl + 1;
    if (detail::trim(line).empty()) {
      if (!have_header) throw ParseError("empty line where the header was expected", line_no);
      continue;
    }
    auto cells = detail::split_csv_line(line);
    if (!have_header) {
      for (const auto& c : cells) {
        if (c.empty()) throw ParseError("empty column name in header", line_no);
      }
      t.header = std::move(cells);
      have_header = true;
      continue;
    }
    if (cells.size() != t.header.size()) {
      throw ParseError("expected " + std::to_string(t.header.size()) + " cells, found " +
                           std::to_string(cells.size()),
                       line_no);
    }
    t.rows.push_back(std::move(cells));
    t.lines.push_back(line_no);
  }
  if (!have_header) throw ParseError("empty input; a header row is required", 1);
  return t;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "'", 1);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline CsvTable read_csv(const std::string& path) { return parse_csv(read_file(path)); }

inline double parse_number(const std::string& cell, std::size_t line, std::string_view column) {
  double v = 0.0;
  const char* b = cell.data();
  const char* e = b + cell.size();
  if (b != e && *b == '+') ++b;
  auto [ptr, ec] = std::from_chars(b, e, v);
  if (cell.empty() || ec != std::errc() || ptr != e || !std::isfinite(v)) {
    throw ParseError("non-numeric value '" + cell + "' in column '" + std::string(column) + "'",
                     line);
  }
  return v;
}

// Column roles; empty z means every column other than y and x, in file order.
struct CsvColumns {
  std::string y = "y";
  std::string x = "x";
  std::vector<std::string> z;
};

inline Dataset to_dataset(const CsvTable& t, const CsvColumns& cols = {}) {
  std::size_t iy = t.column(cols.y), ix = t.column(cols.x);
  std::vector<std::size_t> iz;
  if (cols.z.empty()) {
    for (std::size_t j = 0; j < t.header.size(); ++j) {
      if (j != iy && j != ix) iz.push_back(j);
    }
  } else {
    for (const auto& name : cols.z) iz.push_back(t.column(name));
  }
  if (iz.empty()) throw ParseError("no confounder columns besides y and x", 1);
  if (t.rows.empty()) throw ParseError("no data rows", 2);
  Dataset d;
  d.z = Matrix(t.rows.size(), iz.size());
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& r = t.rows[i];
    d.y.push_back(parse_number(r[iy], t.lines[i], t.header[iy]));
    d.x.push_back(parse_number(r[ix], t.lines[i], t.header[ix]));
    for (std::size_t k = 0; k < iz.size(); ++k) {
      d.z(i, k) = parse_number(r[iz[k]], t.lines[i], t.header[iz[k]]);
    }
  }
  return d;
}

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream ss;
  ss.imbue(std::locale::classic());
  ss << std::setprecision(17) << v;
  return ss.str();
}

inline std::string dataset_csv(const Dataset& d) {
  std::string out = "y,x";
  for (std::size_t k = 0; k < d.dim(); ++k) out += ",z" + std::to_string(k + 1);
  out += '\n';
  for (std::size_t i = 0; i < d.size(); ++i) {
    out += format_double(d.y[i]) + "," + format_double(d.x[i]);
    for (double v : d.z.row(i)) out += "," + format_double(v);
    out += '\n';
  }
  return out;
}

// ---- JSON ----

using Json = nlohmann::ordered_json;

namespace detail {
inline Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }
}  // namespace detail

inline Json to_json(const ThetaReport& r) {
  Json j;
  j["scheme"] = r.scheme;
  j["n"] = r.n;
  j["theta_hat"] = detail::number_or_null(r.theta_hat);
  j["v_hat"] = detail::number_or_null(r.v_hat);
  j["std_error"] = detail::number_or_null(r.std_error());
  j["ci"] = {{"lo", detail::number_or_null(r.ci_lo)},
             {"hi", detail::number_or_null(r.ci_hi)},
             {"level", 1.0 - r.alpha}};
  j["converged"] = r.converged;
  j["iterations"] = r.iterations;
  j["mean_psi"] = detail::number_or_null(r.mean_psi);
  Json folds = Json::array();
  for (const auto& f : r.per_fold) {
    Json fj;
    fj["theta"] = detail::number_or_null(f.theta);
    fj["theta_pilot"] = detail::number_or_null(f.theta_pilot);
    fj["converged"] = f.converged;
    fj["iterations"] = f.iterations;
    fj["n_train"] = f.n_train;
    fj["n_test"] = f.n_test;
    fj["rose_depth"] = f.rose_depth ? Json(*f.rose_depth) : Json(nullptr);
    Json oob = Json::object();
    for (const auto& [name, err] : f.nuisance_oob) oob[name] = detail::number_or_null(err);
    fj["nuisance_oob_mse"] = oob;
    folds.push_back(fj);
  }
  j["per_fold"] = folds;
  j["warnings"] = r.warnings;
  return j;
}

inline Json to_json(const SchemeSummary& s, bool replications) {
  Json j;
  j["scheme"] = s.scheme;
  j["n_ok"] = s.n_ok;
  j["n_failed"] = s.n_failed;
  j["n_trimmed_per_tail"] = s.n_trimmed;
  j["mean_theta"] = detail::number_or_null(s.mean_theta);
  j["squared_bias"] = detail::number_or_null(s.squared_bias);
  j["variance"] = detail::number_or_null(s.variance);
  j["mse"] = detail::number_or_null(s.mse);
  j["mse_ratio_to_unweighted"] =
      s.mse_ratio_to_unweighted ? detail::number_or_null(*s.mse_ratio_to_unweighted) : Json(nullptr);
  j["coverage"] = detail::number_or_null(s.coverage);
  j["median_v_hat"] = detail::number_or_null(s.median_v_hat);
  if (replications) {
    Json th = Json::array(), vh = Json::array();
    for (double t : s.theta_hat) th.push_back(detail::number_or_null(t));
    for (double v : s.v_hat) vh.push_back(detail::number_or_null(v));
    j["replications"] = {{"theta_hat", th}, {"v_hat", vh}, {"covered", s.covered}};
  }
  return j;
}

inline Json to_json(const SimReport& r, bool replications = false) {
  Json j;
  j["dgp"] = r.dgp;
  j["n"] = r.n;
  j["reps"] = r.reps;
  j["theta0"] = r.theta0;
  j["seed"] = r.seed;
  j["trimmed"] = r.trimmed;
  j["ci_level"] = 1.0 - r.alpha;
  Json arr = Json::array();
  for (const auto& s : r.schemes) arr.push_back(to_json(s, replications));
  j["schemes"] = arr;
  return j;
}

// One row per scheme x metric.
inline std::string sim_report_csv(const SimReport& r) {
  std::string out = "dgp,n,scheme,metric,value\n";
  auto row = [&](const SchemeSummary& s, const char* metric, double v) {
    out += r.dgp + "," + std::to_string(r.n) + "," + s.scheme + "," + metric + "," +
           format_double(v) + "\n";
  };
  for (const auto& s : r.schemes) {
    row(s, "squared_bias", s.squared_bias);
    row(s, "variance", s.variance);
    row(s, "mse", s.mse);
    if (s.mse_ratio_to_unweighted) row(s, "mse_ratio_to_unweighted", *s.mse_ratio_to_unweighted);
    row(s, "coverage", s.coverage);
    row(s, "n_failed", static_cast<double>(s.n_failed));
  }
  return out;
}

}  // namespace rose

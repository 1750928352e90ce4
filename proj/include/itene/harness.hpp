#pragma once

// Batch experiment runner: configuration, data sources, CSV ingestion,
// return quantization, multi-trial sweeps and report files.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <limits>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <json.hpp>

#include "itene/errors.hpp"
#include "itene/itene.hpp"
#include "itene/mine.hpp"
#include "itene/series.hpp"
#include "itene/synthetic.hpp"
#include "itene/te.hpp"

namespace itene {

inline constexpr const char* kVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Text helpers

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

inline std::vector<std::string_view> split(std::string_view s, char delim) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(delim, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::optional<double> to_double(std::string_view s) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[40];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace detail

inline double parse_double(std::string_view key, std::string_view value) {
  const auto v = detail::to_double(value);
  if (!v || !std::isfinite(*v)) throw ConfigError(std::string(key) + ": expected a finite number, got '" + std::string(value) + "'");
  return *v;
}

inline long long parse_integer(std::string_view key, std::string_view value) {
  const auto s = detail::trim(value);
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError(std::string(key) + ": expected an integer, got '" + std::string(value) + "'");
  }
  return v;
}

inline bool parse_bool(std::string_view key, std::string_view value) {
  const auto s = detail::trim(value);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError(std::string(key) + ": expected true or false, got '" + std::string(value) + "'");
}

inline std::vector<double> parse_double_list(std::string_view key, std::string_view value) {
  std::vector<double> out;
  if (detail::trim(value).empty()) return out;
  for (auto part : detail::split(value, ',')) out.push_back(parse_double(key, part));
  return out;
}

inline std::vector<int> parse_int_list(std::string_view key, std::string_view value) {
  std::vector<int> out;
  if (detail::trim(value).empty()) return out;
  for (auto part : detail::split(value, ',')) out.push_back(static_cast<int>(parse_integer(key, part)));
  return out;
}

// ---------------------------------------------------------------------------
// CSV series

struct CsvSchema {
  std::string x_column = "x";
  std::string y_column = "y";
  char delimiter = ',';
};

// Header line with named columns, then one row per time step. Extra columns
// are ignored. Errors name the offending line (1-based, header is line 1).
inline SeriesPair ingest_csv(std::istream& in, const CsvSchema& schema, const std::string& source = "input",
                             std::size_t min_length = 2) {
  std::string line;
  if (!std::getline(in, line)) throw InputError(source + ": empty file");
  const auto header = detail::split(line, schema.delimiter);
  std::optional<std::size_t> xi, yi;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto name = detail::trim(header[c]);
    if (name == schema.x_column && !xi) xi = c;
    if (name == schema.y_column && !yi) yi = c;
  }
  if (!xi) throw InputError(source + ": missing column '" + schema.x_column + "'");
  if (!yi) throw InputError(source + ": missing column '" + schema.y_column + "'");
  const std::size_t needed = std::max(*xi, *yi) + 1;

  SeriesPair s;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) {
      // A trailing newline at end of file is fine; anything after it is not.
      if (in.peek() == std::char_traits<char>::eof()) break;
      throw InputError(source + ": line " + std::to_string(line_no) + " is blank");
    }
    const auto cells = detail::split(line, schema.delimiter);
    if (cells.size() < needed) {
      throw InputError(source + ": line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                       " fields, expected at least " + std::to_string(needed));
    }
    const auto x = detail::to_double(cells[*xi]);
    const auto y = detail::to_double(cells[*yi]);
    if (!x || !std::isfinite(*x)) {
      throw InputError(source + ": line " + std::to_string(line_no) + ", column '" + schema.x_column +
                       "': cannot parse '" + std::string(detail::trim(cells[*xi])) + "'");
    }
    if (!y || !std::isfinite(*y)) {
      throw InputError(source + ": line " + std::to_string(line_no) + ", column '" + schema.y_column +
                       "': cannot parse '" + std::string(detail::trim(cells[*yi])) + "'");
    }
    s.x.push_back(*x);
    s.y.push_back(*y);
  }
  if (s.size() < min_length) {
    throw InputError(source + ": " + std::to_string(s.size()) + " rows, need at least " + std::to_string(min_length));
  }
  return s;
}

inline SeriesPair ingest_csv(const std::filesystem::path& path, const CsvSchema& schema, std::size_t min_length = 2) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  return ingest_csv(in, schema, path.string(), min_length);
}

// Header "t,<x>,<y>"; values round-trip exactly.
inline void write_series_csv(std::ostream& os, const SeriesPair& s, const CsvSchema& schema = {}) {
  s.validate();
  const char d = schema.delimiter;
  os << 't' << d << schema.x_column << d << schema.y_column << '\n';
  for (std::size_t t = 0; t < s.size(); ++t) {
    os << t << d << detail::format_double(s.x[t]) << d << detail::format_double(s.y[t]) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Quantized daily returns

struct QuantizeSpec {
  double up_threshold = 0.008;
  double down_threshold = -0.008;

  void validate() const {
    if (!(down_threshold < 0.0 && 0.0 < up_threshold)) throw ConfigError("quantize thresholds must straddle zero");
  }
};

// +1 when the relative return exceeds up_threshold, -1 when it falls below
// down_threshold, 0 otherwise. One level per consecutive price pair.
inline std::vector<double> quantize_returns(const std::vector<double>& prices, const QuantizeSpec& spec = {}) {
  spec.validate();
  if (prices.size() < 2) throw InputError("need at least two prices");
  for (std::size_t t = 0; t < prices.size(); ++t) {
    if (!(prices[t] > 0.0) || !std::isfinite(prices[t])) {
      throw InputError("price at index " + std::to_string(t) + " is not positive");
    }
  }
  std::vector<double> levels(prices.size() - 1);
  for (std::size_t t = 1; t < prices.size(); ++t) {
    const double r = (prices[t] - prices[t - 1]) / prices[t - 1];
    levels[t - 1] = r > spec.up_threshold ? 1.0 : (r < spec.down_threshold ? -1.0 : 0.0);
  }
  return levels;
}

// ---------------------------------------------------------------------------
// Experiment configuration

enum class SourceKind { threshold, xor_process, independent, csv };

inline const char* to_string(SourceKind k) {
  switch (k) {
    case SourceKind::threshold: return "threshold";
    case SourceKind::xor_process: return "xor";
    case SourceKind::independent: return "independent";
    case SourceKind::csv: return "csv";
  }
  return "?";
}

struct SourceSpec {
  SourceKind kind = SourceKind::threshold;
  double rho = 0.9;
  double lambda = 0.0;
  std::size_t length = 20000;
  double noise_std = 0.05;  // XOR dither
  std::string csv_path;
  CsvSchema schema;
  // Treat both CSV columns as prices and replace them with quantized returns.
  bool quantize = false;
  QuantizeSpec quantize_spec;
  // Std of Gaussian dither added to ingested values; 0 disables it.
  double dither = 0.0;
};

struct SweepSpec {
  std::string parameter;  // lambda, rho or T
  std::vector<double> values;
};

struct ExperimentConfig {
  SourceSpec source;
  EmbeddingConfig embedding;
  // mine settings live in itene.mine and are shared by both estimators.
  IteneConfig itene;
  bool run_itene = true;
  int trials = 10;
  std::uint64_t base_seed = 0;
  std::optional<SweepSpec> sweep;
  std::string output_dir = "itene-out";
  int workers = 1;
  bool bits = false;
  bool traces = false;

  void validate() const {
    if (trials < 1) throw ConfigError("trials must be at least 1");
    if (workers < 1) throw ConfigError("workers must be at least 1");
    itene.validate();
    if (source.kind == SourceKind::csv && source.csv_path.empty()) throw ConfigError("csv source needs a path");
    if (source.kind != SourceKind::csv && source.length < 2) throw ConfigError("T must be at least 2");
    if (!(source.dither >= 0.0)) throw ConfigError("dither must be nonnegative");
    if (source.quantize) source.quantize_spec.validate();
    if (sweep) {
      if (sweep->parameter != "lambda" && sweep->parameter != "rho" && sweep->parameter != "T") {
        throw ConfigError("sweep parameter must be lambda, rho or T");
      }
      if (sweep->values.empty()) throw ConfigError("sweep needs at least one value");
      if (source.kind == SourceKind::csv) throw ConfigError("sweeps need a generator source");
      for (double v : sweep->values) {
        if (!std::isfinite(v)) throw ConfigError("sweep values must be finite");
        if (sweep->parameter == "T" && (v < 2 || v != std::floor(v))) {
          throw ConfigError("T sweep values must be integers >= 2");
        }
        if (sweep->parameter == "rho" && !(std::abs(v) < 1.0)) throw ConfigError("rho sweep values need |rho| < 1");
      }
      if (sweep->parameter != "T" && source.kind != SourceKind::threshold) {
        throw ConfigError("lambda and rho sweeps need the threshold source");
      }
    }
  }
};

// One configurable key: name, help text, setter and getter (for echoing).
struct SettingKey {
  std::string name;
  std::string help;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

namespace detail {

inline std::string join(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
  return s;
}

inline const char* bool_str(bool b) { return b ? "true" : "false"; }

inline UpdateRule parse_rule(std::string_view key, std::string_view v) {
  v = trim(v);
  if (v == "adam") return UpdateRule::adam;
  if (v == "sgd") return UpdateRule::sgd;
  throw ConfigError(std::string(key) + ": expected adam or sgd");
}

inline const char* rule_str(UpdateRule r) { return r == UpdateRule::adam ? "adam" : "sgd"; }

inline int parse_count(std::string_view key, std::string_view v, long long lo) {
  const long long x = parse_integer(key, v);
  if (x < lo || x > std::numeric_limits<int>::max()) {
    throw ConfigError(std::string(key) + ": must be at least " + std::to_string(lo));
  }
  return static_cast<int>(x);
}

}  // namespace detail

inline const std::vector<SettingKey>& setting_keys() {
  using detail::bool_str;
  using detail::format_double;
  using detail::join;
  static const std::vector<SettingKey> keys = {
      {"source", "threshold | xor | independent | csv",
       [](ExperimentConfig& c, std::string_view v) {
         v = detail::trim(v);
         if (v == "threshold") c.source.kind = SourceKind::threshold;
         else if (v == "xor") c.source.kind = SourceKind::xor_process;
         else if (v == "independent") c.source.kind = SourceKind::independent;
         else if (v == "csv") c.source.kind = SourceKind::csv;
         else throw ConfigError("source: expected threshold, xor, independent or csv");
       },
       [](const ExperimentConfig& c) { return std::string(to_string(c.source.kind)); }},
      {"rho", "threshold process coupling",
       [](ExperimentConfig& c, std::string_view v) { c.source.rho = parse_double("rho", v); },
       [](const ExperimentConfig& c) { return format_double(c.source.rho); }},
      {"lambda", "threshold process threshold",
       [](ExperimentConfig& c, std::string_view v) { c.source.lambda = parse_double("lambda", v); },
       [](const ExperimentConfig& c) { return format_double(c.source.lambda); }},
      {"T", "generated series length",
       [](ExperimentConfig& c, std::string_view v) {
         c.source.length = static_cast<std::size_t>(detail::parse_count("T", v, 2));
       },
       [](const ExperimentConfig& c) { return std::to_string(c.source.length); }},
      {"noise_std", "XOR dither standard deviation",
       [](ExperimentConfig& c, std::string_view v) { c.source.noise_std = parse_double("noise_std", v); },
       [](const ExperimentConfig& c) { return format_double(c.source.noise_std); }},
      {"csv", "input CSV path (source = csv)",
       [](ExperimentConfig& c, std::string_view v) { c.source.csv_path = std::string(detail::trim(v)); },
       [](const ExperimentConfig& c) { return c.source.csv_path; }},
      {"x_column", "CSV column holding the source series",
       [](ExperimentConfig& c, std::string_view v) { c.source.schema.x_column = std::string(detail::trim(v)); },
       [](const ExperimentConfig& c) { return c.source.schema.x_column; }},
      {"y_column", "CSV column holding the target series",
       [](ExperimentConfig& c, std::string_view v) { c.source.schema.y_column = std::string(detail::trim(v)); },
       [](const ExperimentConfig& c) { return c.source.schema.y_column; }},
      {"quantize", "quantize CSV prices into -1/0/+1 return levels",
       [](ExperimentConfig& c, std::string_view v) { c.source.quantize = parse_bool("quantize", v); },
       [](const ExperimentConfig& c) { return std::string(bool_str(c.source.quantize)); }},
      {"up_threshold", "relative return above which the level is +1",
       [](ExperimentConfig& c, std::string_view v) {
         c.source.quantize_spec.up_threshold = parse_double("up_threshold", v);
       },
       [](const ExperimentConfig& c) { return format_double(c.source.quantize_spec.up_threshold); }},
      {"down_threshold", "relative return below which the level is -1",
       [](ExperimentConfig& c, std::string_view v) {
         c.source.quantize_spec.down_threshold = parse_double("down_threshold", v);
       },
       [](const ExperimentConfig& c) { return format_double(c.source.quantize_spec.down_threshold); }},
      {"dither", "std of Gaussian dither added to CSV values (0 = off)",
       [](ExperimentConfig& c, std::string_view v) { c.source.dither = parse_double("dither", v); },
       [](const ExperimentConfig& c) { return format_double(c.source.dither); }},
      {"m", "source memory",
       [](ExperimentConfig& c, std::string_view v) { c.embedding.m = detail::parse_count("m", v, 1); },
       [](const ExperimentConfig& c) { return std::to_string(c.embedding.m); }},
      {"n", "target memory",
       [](ExperimentConfig& c, std::string_view v) { c.embedding.n = detail::parse_count("n", v, 1); },
       [](const ExperimentConfig& c) { return std::to_string(c.embedding.n); }},
      {"drop_padded", "drop the zero-padded leading rows",
       [](ExperimentConfig& c, std::string_view v) { c.embedding.drop_padded = parse_bool("drop_padded", v); },
       [](const ExperimentConfig& c) { return std::string(bool_str(c.embedding.drop_padded)); }},
      {"hidden", "classifier hidden widths, comma separated",
       [](ExperimentConfig& c, std::string_view v) { c.itene.mine.hidden_widths = parse_int_list("hidden", v); },
       [](const ExperimentConfig& c) { return join(c.itene.mine.hidden_widths); }},
      {"clip_tau", "ratio clipping parameter tau",
       [](ExperimentConfig& c, std::string_view v) { c.itene.mine.clip_tau = parse_double("clip_tau", v); },
       [](const ExperimentConfig& c) { return format_double(c.itene.mine.clip_tau); }},
      {"learning_rate", "classifier learning rate",
       [](ExperimentConfig& c, std::string_view v) { c.itene.mine.learning_rate = parse_double("learning_rate", v); },
       [](const ExperimentConfig& c) { return format_double(c.itene.mine.learning_rate); }},
      {"optimizer", "classifier update rule: adam | sgd",
       [](ExperimentConfig& c, std::string_view v) { c.itene.mine.optimizer = detail::parse_rule("optimizer", v); },
       [](const ExperimentConfig& c) { return std::string(detail::rule_str(c.itene.mine.optimizer)); }},
      {"train_fraction", "fraction of rows used for classifier training",
       [](ExperimentConfig& c, std::string_view v) {
         c.itene.mine.train_fraction = parse_double("train_fraction", v);
       },
       [](const ExperimentConfig& c) { return format_double(c.itene.mine.train_fraction); }},
      {"epochs", "classifier epoch budget",
       [](ExperimentConfig& c, std::string_view v) { c.itene.mine.epochs = detail::parse_count("epochs", v, 0); },
       [](const ExperimentConfig& c) { return std::to_string(c.itene.mine.epochs); }},
      {"batch_size", "classifier minibatch size",
       [](ExperimentConfig& c, std::string_view v) {
         c.itene.mine.batch_size = detail::parse_count("batch_size", v, 1);
       },
       [](const ExperimentConfig& c) { return std::to_string(c.itene.mine.batch_size); }},
      {"coupled_split", "draw held-out product rows from held-out indices only",
       [](ExperimentConfig& c, std::string_view v) { c.itene.mine.coupled_split = parse_bool("coupled_split", v); },
       [](const ExperimentConfig& c) { return std::string(bool_str(c.itene.mine.coupled_split)); }},
      {"itene", "also fit the intrinsic estimate (false = TE only)",
       [](ExperimentConfig& c, std::string_view v) { c.run_itene = parse_bool("itene", v); },
       [](const ExperimentConfig& c) { return std::string(bool_str(c.run_itene)); }},
      {"outer_iterations", "ITENE outer iterations",
       [](ExperimentConfig& c, std::string_view v) {
         c.itene.outer_iterations = detail::parse_count("outer_iterations", v, 1);
       },
       [](const ExperimentConfig& c) { return std::to_string(c.itene.outer_iterations); }},
      {"phi_steps", "channel gradient steps per outer iteration",
       [](ExperimentConfig& c, std::string_view v) {
         c.itene.phi_steps_per_iter = detail::parse_count("phi_steps", v, 1);
       },
       [](const ExperimentConfig& c) { return std::to_string(c.itene.phi_steps_per_iter); }},
      {"phi_learning_rate", "channel learning rate",
       [](ExperimentConfig& c, std::string_view v) {
         c.itene.phi_learning_rate = parse_double("phi_learning_rate", v);
       },
       [](const ExperimentConfig& c) { return format_double(c.itene.phi_learning_rate); }},
      {"phi_optimizer", "channel update rule: adam | sgd",
       [](ExperimentConfig& c, std::string_view v) { c.itene.phi_optimizer = detail::parse_rule("phi_optimizer", v); },
       [](const ExperimentConfig& c) { return std::string(detail::rule_str(c.itene.phi_optimizer)); }},
      {"phi_batch_size", "rows per class and term for each channel step (0 = all)",
       [](ExperimentConfig& c, std::string_view v) {
         c.itene.phi_batch_size = detail::parse_count("phi_batch_size", v, 0);
       },
       [](const ExperimentConfig& c) { return std::to_string(c.itene.phi_batch_size); }},
      {"channel_hidden", "channel hidden widths, comma separated",
       [](ExperimentConfig& c, std::string_view v) { c.itene.channel_hidden = parse_int_list("channel_hidden", v); },
       [](const ExperimentConfig& c) { return join(c.itene.channel_hidden); }},
      {"initial_log_std", "initial channel log sigma",
       [](ExperimentConfig& c, std::string_view v) { c.itene.initial_log_std = parse_double("initial_log_std", v); },
       [](const ExperimentConfig& c) { return format_double(c.itene.initial_log_std); }},
      {"refit_epochs", "warm-start classifier epochs per outer iteration",
       [](ExperimentConfig& c, std::string_view v) {
         c.itene.refit_epochs = detail::parse_count("refit_epochs", v, 1);
       },
       [](const ExperimentConfig& c) { return std::to_string(c.itene.refit_epochs); }},
      {"cold_restart", "retrain classifiers from scratch every outer iteration",
       [](ExperimentConfig& c, std::string_view v) { c.itene.cold_restart = parse_bool("cold_restart", v); },
       [](const ExperimentConfig& c) { return std::string(bool_str(c.itene.cold_restart)); }},
      {"product_gradient", "unclipped_denominator | exact",
       [](ExperimentConfig& c, std::string_view v) {
         v = detail::trim(v);
         if (v == "exact") c.itene.product_gradient = ProductGradient::exact;
         else if (v == "unclipped_denominator") c.itene.product_gradient = ProductGradient::unclipped_denominator;
         else throw ConfigError("product_gradient: expected unclipped_denominator or exact");
       },
       [](const ExperimentConfig& c) { return std::string(to_string(c.itene.product_gradient)); }},
      {"tolerance", "ITENE convergence tolerance",
       [](ExperimentConfig& c, std::string_view v) { c.itene.tolerance = parse_double("tolerance", v); },
       [](const ExperimentConfig& c) { return format_double(c.itene.tolerance); }},
      {"trials", "trials per sweep point",
       [](ExperimentConfig& c, std::string_view v) { c.trials = detail::parse_count("trials", v, 1); },
       [](const ExperimentConfig& c) { return std::to_string(c.trials); }},
      {"seed", "base seed; trial k uses seed + k",
       [](ExperimentConfig& c, std::string_view v) {
         const long long s = parse_integer("seed", v);
         if (s < 0) throw ConfigError("seed must be nonnegative");
         c.base_seed = static_cast<std::uint64_t>(s);
       },
       [](const ExperimentConfig& c) { return std::to_string(c.base_seed); }},
      {"sweep", "parameter to sweep: lambda | rho | T (empty = none)",
       [](ExperimentConfig& c, std::string_view v) {
         v = detail::trim(v);
         if (v.empty() || v == "none") {
           c.sweep.reset();
           return;
         }
         if (!c.sweep) c.sweep.emplace();
         c.sweep->parameter = std::string(v);
       },
       [](const ExperimentConfig& c) { return c.sweep ? c.sweep->parameter : std::string(); }},
      {"values", "sweep values, comma separated",
       [](ExperimentConfig& c, std::string_view v) {
         if (!c.sweep) c.sweep.emplace();
         c.sweep->values = parse_double_list("values", v);
       },
       [](const ExperimentConfig& c) { return c.sweep ? join(c.sweep->values) : std::string(); }},
      {"output", "output directory",
       [](ExperimentConfig& c, std::string_view v) { c.output_dir = std::string(detail::trim(v)); },
       [](const ExperimentConfig& c) { return c.output_dir; }},
      {"workers", "concurrent trials",
       [](ExperimentConfig& c, std::string_view v) { c.workers = detail::parse_count("workers", v, 1); },
       [](const ExperimentConfig& c) { return std::to_string(c.workers); }},
      {"bits", "report bits instead of nats",
       [](ExperimentConfig& c, std::string_view v) { c.bits = parse_bool("bits", v); },
       [](const ExperimentConfig& c) { return std::string(bool_str(c.bits)); }},
      {"traces", "write per-trial ITENE trace files",
       [](ExperimentConfig& c, std::string_view v) { c.traces = parse_bool("traces", v); },
       [](const ExperimentConfig& c) { return std::string(bool_str(c.traces)); }},
  };
  return keys;
}

inline void apply_setting(ExperimentConfig& cfg, std::string_view key, std::string_view value) {
  key = detail::trim(key);
  for (const auto& k : setting_keys()) {
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown setting '" + std::string(key) + "'");
}

// key = value lines; '#' starts a comment.
inline void apply_config_text(ExperimentConfig& cfg, std::istream& in, const std::string& source = "config") {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    const auto body = detail::trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(source + ": line " + std::to_string(line_no) + ": expected key = value");
    }
    try {
      apply_setting(cfg, body.substr(0, eq), body.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ": line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

inline void apply_config_file(ExperimentConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config " + path.string());
  apply_config_text(cfg, in, path.string());
}

inline std::vector<std::pair<std::string, std::string>> describe(const ExperimentConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& k : setting_keys()) out.emplace_back(k.name, k.get(cfg));
  return out;
}

// ---------------------------------------------------------------------------
// Running trials

struct TrialResult {
  int trial = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  FlowEstimates flow;  // ite and ste are NaN when only TE was requested
  std::string error;
  std::vector<IteneTraceRow> trace;
};

struct PointResult {
  std::optional<double> sweep_value;
  std::optional<double> oracle_te_nats;
  std::vector<TrialResult> trials;

  std::size_t failures() const {
    return static_cast<std::size_t>(std::count_if(trials.begin(), trials.end(), [](const auto& t) { return !t.ok; }));
  }
};

struct ExperimentResult {
  std::vector<PointResult> points;
  double wall_seconds = 0.0;

  // 0 all trials succeeded, 1 some failed, 2 every trial of some point failed.
  int exit_code() const {
    int code = 0;
    for (const auto& p : points) {
      if (p.failures() == p.trials.size()) return 2;
      if (p.failures() > 0) code = 1;
    }
    return code;
  }
};

// The source settings at one sweep point.
inline SourceSpec source_at(const ExperimentConfig& cfg, std::optional<double> sweep_value) {
  SourceSpec s = cfg.source;
  if (cfg.sweep && sweep_value) {
    if (cfg.sweep->parameter == "lambda") s.lambda = *sweep_value;
    if (cfg.sweep->parameter == "rho") s.rho = *sweep_value;
    if (cfg.sweep->parameter == "T") s.length = static_cast<std::size_t>(*sweep_value);
  }
  return s;
}

// Generated sources draw a fresh series per trial seed; CSV sources are read
// once and only the estimator seeds vary.
inline SeriesPair load_series(const SourceSpec& src, std::uint64_t seed) {
  switch (src.kind) {
    case SourceKind::threshold: return gen_threshold_process({src.rho, src.lambda, src.length, seed});
    case SourceKind::xor_process: return gen_xor_process(src.noise_std, src.length, seed);
    case SourceKind::independent: return gen_independent(src.length, seed);
    case SourceKind::csv: break;
  }
  SeriesPair s = ingest_csv(std::filesystem::path(src.csv_path), src.schema, src.quantize ? 3 : 2);
  if (src.quantize) {
    s.x = quantize_returns(s.x, src.quantize_spec);
    s.y = quantize_returns(s.y, src.quantize_spec);
  }
  if (src.dither > 0.0) {
    Rng rng(derive_seed(seed, "dither"));
    std::normal_distribution<double> normal(0.0, src.dither);
    for (auto& v : s.x) v += normal(rng);
    for (auto& v : s.y) v += normal(rng);
  }
  return s;
}

inline TrialResult run_trial(const ExperimentConfig& cfg, const SourceSpec& src, const SeriesPair* fixed, int trial) {
  TrialResult r;
  r.trial = trial;
  r.seed = cfg.base_seed + static_cast<std::uint64_t>(trial);
  try {
    const SeriesPair series = fixed ? *fixed : load_series(src, r.seed);
    IteneConfig icfg = cfg.itene;
    icfg.rng_seed = r.seed;
    icfg.mine.rng_seed = r.seed;
    const EmbeddedDataset data = embed(series, cfg.embedding);
    if (cfg.run_itene) {
      IteneResult fit = fit_itene(data, icfg);
      r.flow = fit.flow;
      if (cfg.traces) r.trace = std::move(fit.trace);
    } else {
      const double te = estimate_te(data, icfg.mine, TeSeeds::derive(r.seed)).te_nats;
      const double nan = std::numeric_limits<double>::quiet_NaN();
      r.flow = {te, nan, nan};
    }
    r.ok = true;
  } catch (const Error& e) {
    r.error = e.what();
  }
  return r;
}

// Every (point, trial) pair is an independent task; a bounded pool of
// workers pulls them in order and writes into preassigned slots, so results
// do not depend on the worker count.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  ExperimentResult result;
  std::vector<std::optional<double>> values;
  if (cfg.sweep) {
    for (double v : cfg.sweep->values) values.emplace_back(v);
  } else {
    values.emplace_back(std::nullopt);
  }
  std::vector<SourceSpec> sources;
  for (const auto& v : values) {
    PointResult p;
    p.sweep_value = v;
    const SourceSpec src = source_at(cfg, v);
    if (src.kind == SourceKind::threshold) p.oracle_te_nats = closed_form_te(src.rho, src.lambda);
    p.trials.resize(static_cast<std::size_t>(cfg.trials));
    result.points.push_back(std::move(p));
    sources.push_back(src);
  }
  // CSV input is parsed before any work starts so a bad file is fatal.
  std::optional<SeriesPair> fixed;
  if (cfg.source.kind == SourceKind::csv) fixed = load_series(cfg.source, cfg.base_seed);

  const std::size_t tasks = values.size() * static_cast<std::size_t>(cfg.trials);
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks; i = next++) {
      const std::size_t point = i / static_cast<std::size_t>(cfg.trials);
      const int trial = static_cast<int>(i % static_cast<std::size_t>(cfg.trials));
      // Dithered CSV input depends on the trial seed.
      std::optional<SeriesPair> own;
      const SeriesPair* series = fixed ? &*fixed : nullptr;
      if (fixed && cfg.source.dither > 0.0) {
        own = load_series(cfg.source, cfg.base_seed + static_cast<std::uint64_t>(trial));
        series = &*own;
      }
      TrialResult r = run_trial(cfg, sources[point], series, trial);
      if (log) {
        std::lock_guard lock(log_mutex);
        *log << "point " << point << " trial " << trial << (r.ok ? " ok" : " FAILED: " + r.error);
        if (r.ok) *log << " te=" << r.flow.te_nats << " ite=" << r.flow.ite_nats;
        *log << '\n';
      }
      result.points[point].trials[static_cast<std::size_t>(trial)] = std::move(r);
    }
  };
  const auto n_workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.workers), tasks);
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  }
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

// ---------------------------------------------------------------------------
// Reports

struct Band {
  double median = std::numeric_limits<double>::quiet_NaN();
  double min = std::numeric_limits<double>::quiet_NaN();
  double max = std::numeric_limits<double>::quiet_NaN();
};

// Median, min and max over the finite entries.
inline Band band(std::vector<double> v) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return !std::isfinite(x); }), v.end());
  Band b;
  if (v.empty()) return b;
  std::sort(v.begin(), v.end());
  const std::size_t h = v.size() / 2;
  b.median = v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
  b.min = v.front();
  b.max = v.back();
  return b;
}

namespace detail {

// Empty cell for missing values.
inline std::string cell(std::optional<double> v, bool bits = false) {
  if (!v || !std::isfinite(*v)) return "";
  return format_double(bits ? nats_to_bits(*v) : *v);
}

inline bool has_oracle(const ExperimentResult& r) {
  return std::any_of(r.points.begin(), r.points.end(), [](const auto& p) { return p.oracle_te_nats.has_value(); });
}

}  // namespace detail

inline void write_trials_csv(std::ostream& os, const ExperimentResult& r, bool bits = false) {
  const std::string unit = bits ? "bits" : "nats";
  const bool oracle = detail::has_oracle(r);
  os << "sweep_value,trial,seed,te_" << unit << ",ite_" << unit << ",ste_" << unit;
  if (oracle) os << ",oracle_te_" << unit;
  os << '\n';
  for (const auto& p : r.points) {
    for (const auto& t : p.trials) {
      os << detail::cell(p.sweep_value) << ',' << t.trial << ',' << t.seed << ',';
      if (t.ok) {
        os << detail::cell(t.flow.te_nats, bits) << ',' << detail::cell(t.flow.ite_nats, bits) << ','
           << detail::cell(t.flow.ste_nats, bits);
      } else {
        os << ",,";
      }
      if (oracle) os << ',' << detail::cell(p.oracle_te_nats, bits);
      os << '\n';
    }
  }
}

inline void write_summary_csv(std::ostream& os, const ExperimentResult& r, bool bits = false) {
  const std::string unit = bits ? "bits" : "nats";
  const bool oracle = detail::has_oracle(r);
  os << "sweep_value,trials_ok";
  for (const char* est : {"te", "ite", "ste"}) {
    for (const char* stat : {"median", "min", "max"}) os << ',' << est << '_' << stat << '_' << unit;
  }
  if (oracle) os << ",oracle_te_" << unit;
  os << '\n';
  for (const auto& p : r.points) {
    std::vector<double> te, ite, ste;
    for (const auto& t : p.trials) {
      if (!t.ok) continue;
      te.push_back(t.flow.te_nats);
      ite.push_back(t.flow.ite_nats);
      ste.push_back(t.flow.ste_nats);
    }
    os << detail::cell(p.sweep_value) << ',' << te.size();
    for (const auto* v : {&te, &ite, &ste}) {
      const Band b = band(*v);
      os << ',' << detail::cell(b.median, bits) << ',' << detail::cell(b.min, bits) << ','
         << detail::cell(b.max, bits);
    }
    if (oracle) os << ',' << detail::cell(p.oracle_te_nats, bits);
    os << '\n';
  }
}

inline nlohmann::ordered_json run_metadata(const ExperimentConfig& cfg, const ExperimentResult& r) {
  nlohmann::ordered_json j;
  j["tool"] = "itene";
  j["version"] = kVersion;
  j["unit"] = cfg.bits ? "bits" : "nats";
  nlohmann::ordered_json config;
  for (const auto& [k, v] : describe(cfg)) config[k] = v;
  j["config"] = config;
  j["classifier_optimizer"] = detail::rule_str(cfg.itene.mine.optimizer);
  j["channel_optimizer"] = detail::rule_str(cfg.itene.phi_optimizer);
  if (cfg.source.kind == SourceKind::xor_process) j["xor_dither_std"] = cfg.source.noise_std;
  j["embedding"] = {{"m", cfg.embedding.m}, {"n", cfg.embedding.n}, {"drop_padded", cfg.embedding.drop_padded}};
  j["trial_seeds"] = "base_seed + trial";
  nlohmann::ordered_json failures = nlohmann::ordered_json::array();
  for (const auto& p : r.points) {
    for (const auto& t : p.trials) {
      if (t.ok) continue;
      nlohmann::ordered_json f;
      f["sweep_value"] = p.sweep_value ? nlohmann::ordered_json(*p.sweep_value) : nlohmann::ordered_json();
      f["trial"] = t.trial;
      f["error"] = t.error;
      failures.push_back(f);
    }
  }
  j["failures"] = failures;
  j["exit_code"] = r.exit_code();
  j["wall_clock_seconds"] = r.wall_seconds;
  return j;
}

// Writes trials.csv, summary.csv and run.json (plus traces/ when enabled).
inline void emit_report(const ExperimentConfig& cfg, const ExperimentResult& r, const std::filesystem::path& dir) {
  std::size_t rows = 0;
  for (const auto& p : r.points) rows += p.trials.size();
  if (rows == 0) throw ConfigError("no results to report");
  std::filesystem::create_directories(dir);
  auto open = [](const std::filesystem::path& p) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw InputError("cannot write " + p.string());
    return out;
  };
  {
    auto out = open(dir / "trials.csv");
    write_trials_csv(out, r, cfg.bits);
  }
  {
    auto out = open(dir / "summary.csv");
    write_summary_csv(out, r, cfg.bits);
  }
  {
    auto out = open(dir / "run.json");
    out << run_metadata(cfg, r).dump(2) << '\n';
  }
  if (cfg.traces) {
    std::filesystem::create_directories(dir / "traces");
    for (std::size_t p = 0; p < r.points.size(); ++p) {
      for (const auto& t : r.points[p].trials) {
        if (t.trace.empty()) continue;
        auto out = open(dir / "traces" / ("point" + std::to_string(p) + "_trial" + std::to_string(t.trial) + ".tsv"));
        write_trace(out, t.trace);
      }
    }
  }
}

}  // namespace itene

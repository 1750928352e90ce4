// Command-line front end.
//
//   itene sweep     --config run.cfg --sweep lambda --values -3,-1,0,1,3
//   itene estimate  --source csv --csv prices.csv --x_column hsi --y_column djia --quantize true
//   itene quantize  --input prices.csv --columns hsi,djia --output levels.csv
//   itene selftest
//
// Exit codes: 0 success, 1 some trials failed, 2 fatal error.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "itene/harness.hpp"
#include "itene/itene.hpp"
#include "itene/nn.hpp"
#include "itene/synthetic.hpp"

namespace {

using namespace itene;

struct SettingArgs {
  std::string config_file;
  std::map<std::string, std::string> values;
};

// One option per configuration key; values given on the command line are
// applied after the config file.
void add_setting_options(CLI::App* app, SettingArgs& args) {
  app->add_option("--config", args.config_file, "key = value configuration file")->check(CLI::ExistingFile);
  for (const auto& key : setting_keys()) {
    const std::string flag = key.name.size() == 1 ? "-" + key.name : "--" + key.name;
    app->add_option(flag, args.values[key.name], key.help);
  }
}

ExperimentConfig build_config(CLI::App* app, const SettingArgs& args) {
  ExperimentConfig cfg;
  if (!args.config_file.empty()) apply_config_file(cfg, args.config_file);
  for (const auto& key : setting_keys()) {
    const std::string flag = key.name.size() == 1 ? "-" + key.name : "--" + key.name;
    if (app->count(flag) > 0) apply_setting(cfg, key.name, args.values.at(key.name));
  }
  return cfg;
}

int run_and_report(const ExperimentConfig& cfg, bool quiet) {
  std::ostream* log = quiet ? nullptr : &std::cerr;
  const ExperimentResult r = run_experiment(cfg, log);
  emit_report(cfg, r, cfg.output_dir);
  write_summary_csv(std::cout, r, cfg.bits);
  if (!quiet) std::cerr << "reports written to " << cfg.output_dir << '\n';
  return r.exit_code();
}

int quantize_command(const std::string& input, const std::string& columns, const std::string& output,
                     const QuantizeSpec& spec) {
  const auto names = detail::split(columns, ',');
  if (names.empty() || names.size() > 2) throw ConfigError("--columns takes one or two column names");
  CsvSchema schema;
  schema.x_column = std::string(detail::trim(names[0]));
  schema.y_column = names.size() == 2 ? std::string(detail::trim(names[1])) : schema.x_column;
  const SeriesPair prices = ingest_csv(std::filesystem::path(input), schema);
  SeriesPair levels;
  levels.x = quantize_returns(prices.x, spec);
  levels.y = quantize_returns(prices.y, spec);
  std::ofstream file;
  if (!output.empty()) {
    file.open(output, std::ios::binary);
    if (!file) throw InputError("cannot write " + output);
  }
  std::ostream& os = output.empty() ? std::cout : file;
  if (names.size() == 2) {
    write_series_csv(os, levels, schema);
  } else {
    os << "t," << schema.x_column << '\n';
    for (std::size_t t = 0; t < levels.x.size(); ++t) os << t << ',' << levels.x[t] << '\n';
  }
  return 0;
}

bool check(bool ok, const std::string& what) {
  std::cout << (ok ? "ok   " : "FAIL ") << what << '\n';
  return ok;
}

// Fast internal consistency checks; no long training runs.
int selftest_command() {
  bool ok = true;
  ok &= check(std::abs(closed_form_te(0.9, 0.0) - 0.25 * -std::log(0.19)) < 1e-12, "closed-form TE at lambda = 0");
  ok &= check(std::abs(gaussian_mi(0.9) + 0.5 * std::log(0.19)) < 1e-12, "Gaussian MI at rho = 0.9");
  ok &= check(quantize_returns({100, 101}) == std::vector<double>{1.0} &&
                  quantize_returns({100, 100.5}) == std::vector<double>{0.0} &&
                  quantize_returns({100, 99}) == std::vector<double>{-1.0},
              "return quantization examples");
  ok &= check(std::abs(clip_ratio(10.0, 0.9) - std::exp(0.9)) < 1e-15, "ratio clipping");

  // Cross-entropy gradient against central differences on a small net.
  DenseNetParams net = init_network({3, 4, 4, 1}, OutputKind::logit_scalar, 1);
  Matrix x = Matrix::Random(3, 6);
  Vector y(6);
  y << 1, 0, 1, 1, 0, 0;
  const auto analytic = grad_params_crossentropy(net, x, y).gradient.flatten();
  auto flat = net.flatten();
  double diff = 0.0, norm = 0.0;
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const double orig = flat[i];
    flat[i] = orig + 1e-5;
    net.assign_flat(flat);
    const double up = crossentropy_loss(net, x, y);
    flat[i] = orig - 1e-5;
    net.assign_flat(flat);
    const double down = crossentropy_loss(net, x, y);
    flat[i] = orig;
    const double fd = (up - down) / 2e-5;
    diff += (fd - analytic[i]) * (fd - analytic[i]);
    norm += analytic[i] * analytic[i];
  }
  ok &= check(std::sqrt(diff / norm) < 1e-4, "cross-entropy gradient vs finite differences");

  // Frozen identity channel reproduces TE on a short run.
  IteneConfig cfg;
  cfg.mine.hidden_widths = {16, 16};
  cfg.mine.epochs = 20;
  cfg.channel_hidden = {8};
  cfg.identity_channel = true;
  cfg.freeze_channel = true;
  cfg.outer_iterations = 1;
  const IteneResult r = fit_itene(gen_threshold_process({0.9, -1.0, 2000, 1}), {1, 1}, cfg);
  ok &= check(std::abs(r.trace.front().objective - r.flow.te_nats) < 0.02, "identity channel reduces to TE");
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transfer entropy and intrinsic transfer entropy estimation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", itene::kVersion);

  SettingArgs sweep_args, estimate_args;
  bool quiet = false;
  auto* sweep = app.add_subcommand("sweep", "run trials over a lambda, rho or T sweep");
  add_setting_options(sweep, sweep_args);
  sweep->add_flag("-q,--quiet", quiet, "no per-trial progress on stderr");

  auto* estimate = app.add_subcommand("estimate", "run trials at one setting (generator or CSV)");
  add_setting_options(estimate, estimate_args);
  estimate->add_flag("-q,--quiet", quiet, "no per-trial progress on stderr");

  std::string q_input, q_columns = "x,y", q_output;
  QuantizeSpec q_spec;
  auto* quantize = app.add_subcommand("quantize", "turn price columns into -1/0/+1 daily return levels");
  quantize->add_option("--input", q_input, "price CSV")->required()->check(CLI::ExistingFile);
  quantize->add_option("--columns", q_columns, "one or two price columns, comma separated");
  quantize->add_option("--output", q_output, "output CSV (default stdout)");
  quantize->add_option("--up_threshold", q_spec.up_threshold, "relative return above which the level is +1");
  quantize->add_option("--down_threshold", q_spec.down_threshold, "relative return below which the level is -1");

  auto* selftest = app.add_subcommand("selftest", "fast internal consistency checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*sweep) {
      ExperimentConfig cfg = build_config(sweep, sweep_args);
      if (!cfg.sweep) throw ConfigError("sweep needs --sweep and --values");
      return run_and_report(cfg, quiet);
    }
    if (*estimate) {
      ExperimentConfig cfg = build_config(estimate, estimate_args);
      cfg.sweep.reset();
      return run_and_report(cfg, quiet);
    }
    if (*quantize) return quantize_command(q_input, q_columns, q_output, q_spec);
    if (*selftest) return selftest_command();
  } catch (const itene::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}

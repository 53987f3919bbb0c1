// simtlab: command-line driver for the wait-k hallucination lab.
//
//   simtlab gen     --config C [--out DIR]
//   simtlab train   [baseline|ss] --config C --k K
//   simtlab decode  [baseline|ss] --config C --k K
//   simtlab label   [baseline|ss] --config C --k K [--ghall-literal]
//   simtlab tssr    [baseline|ss] --config C --k K [--bins E1,E2,...]
//   simtlab analyze [baseline|ss] --config C --k K
//   simtlab compare A.json B.json [A2.json B2.json ...] --config C
//   simtlab repro   --config C [--out DIR] [--workers N]
//
// Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

#include <CLI11.hpp>

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "simtlab/experiment.hpp"

namespace {

using namespace simtlab;

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) throw UsageError("empty entry in list '" + s + "'");
    out.push_back(item);
  }
  if (out.empty()) throw UsageError("empty list");
  return out;
}

double parse_double(const std::string& s) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw UsageError("cannot parse number '" + s + "'");
  }
  if (used != s.size()) throw UsageError("cannot parse number '" + s + "'");
  return v;
}

struct Options {
  std::string config;
  std::string seed, k, bins, out;
  int workers = 0;
  bool ghall_literal = false;
  std::vector<std::string> positional;
};

ExperimentConfig resolve(const Options& o) {
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  Overrides ov;
  if (!o.seed.empty()) {
    // stoull accepts a sign and wraps negatives, so require plain digits.
    try {
      if (o.seed.find_first_not_of("0123456789") != std::string::npos) throw std::invalid_argument(o.seed);
      std::size_t used = 0;
      ov.seed = std::stoull(o.seed, &used);
      if (used != o.seed.size()) throw std::invalid_argument(o.seed);
    } catch (const std::exception&) {
      throw UsageError("--seed expects a non-negative integer, got '" + o.seed + "'");
    }
  }
  if (!o.k.empty()) {
    std::vector<Latency> ks;
    for (const auto& s : split_list(o.k)) ks.push_back(Latency::parse(s));
    ov.ks = ks;
  }
  if (!o.bins.empty()) {
    std::vector<double> edges;
    for (const auto& s : split_list(o.bins)) edges.push_back(parse_double(s));
    ov.bins = edges;
  }
  if (o.workers != 0) ov.workers = o.workers;
  if (!o.out.empty()) ov.out = o.out;
  ov.ghall_literal = o.ghall_literal;
  ov.apply(cfg);
  // ss_k entries without a baseline are dropped when --k narrows the list.
  if (ov.ks) {
    std::vector<Latency> kept;
    for (auto k : cfg.ss_ks)
      if (std::find(cfg.ks.begin(), cfg.ks.end(), k) != cfg.ks.end()) kept.push_back(k);
    cfg.ss_ks = kept;
  }
  cfg.validate();
  return cfg;
}

// Single-run commands act on exactly one k.
Latency single_k(const ExperimentConfig& cfg) {
  if (cfg.ks.size() != 1) throw UsageError("this command needs exactly one k; pass --k");
  return cfg.ks.front();
}

System single_system(const Options& o) {
  if (o.positional.size() > 1) throw UsageError("expected at most one positional argument (baseline or ss)");
  return o.positional.empty() ? System::Baseline : parse_system(o.positional.front());
}

int run(const std::string& command, const Options& o) {
  const ExperimentConfig cfg = resolve(o);
  if (command == "gen") {
    if (!o.positional.empty()) throw UsageError("gen takes no positional arguments");
    cmd_gen(cfg);
  } else if (command == "train") {
    cmd_train(cfg, single_system(o), single_k(cfg));
  } else if (command == "decode") {
    cmd_decode(cfg, single_system(o), single_k(cfg));
  } else if (command == "label") {
    cmd_label(cfg, single_system(o), single_k(cfg));
  } else if (command == "tssr") {
    cmd_tssr(cfg, single_system(o), single_k(cfg));
  } else if (command == "analyze") {
    cmd_analyze(cfg, single_system(o), single_k(cfg));
  } else if (command == "compare") {
    if (o.positional.empty() || o.positional.size() % 2) throw UsageError("compare expects pairs of report files");
    std::vector<std::pair<fs::path, fs::path>> pairs;
    for (std::size_t i = 0; i < o.positional.size(); i += 2) pairs.emplace_back(o.positional[i], o.positional[i + 1]);
    cmd_compare(cfg, pairs);
  } else if (command == "repro") {
    if (!o.positional.empty()) throw UsageError("repro takes no positional arguments");
    cmd_repro(cfg);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Wait-k simultaneous translation hallucination lab"};
  app.require_subcommand(1);
  Options o;
  const char* commands[][2] = {
      {"gen", "Generate the synthetic corpus"},
      {"train", "Train a baseline or scheduled-sampling model for one k"},
      {"decode", "Greedy wait-k decoding of the validation set"},
      {"label", "Align hypotheses and label hallucinations"},
      {"tssr", "Token-ablation relevance and TSSR of every hypothesis token"},
      {"analyze", "Aggregate statistics and result tables for one run"},
      {"compare", "Per-bin deltas between pairs of analysis reports"},
      {"repro", "Run the whole pipeline end to end"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "Experiment config (JSON)");
    sub->add_option("--seed", o.seed, "Override the global seed");
    sub->add_option("--k", o.k, "Wait-k latency or comma-separated list; 'inf' for full sentence");
    sub->add_flag("--ghall-literal", o.ghall_literal, "Read the wait-k criterion as no link with s >= t + k");
    sub->add_option("--bins", o.bins, "Comma-separated TSSR bin edges");
    sub->add_option("--workers", o.workers, "Worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--out", o.out, "Output directory");
    sub->add_option("args", o.positional, "System (baseline|ss) or report files for compare");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, o);
  } catch (const UsageError& e) {
    std::cerr << "simtlab " << command << ": " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    std::cerr << "simtlab " << command << ": data error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "simtlab " << command << ": numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "simtlab " << command << ": " << e.what() << '\n';
    return 2;
  }
}

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "support.hpp"

namespace simtlab {
namespace {

const std::string kCli = SIMTLAB_CLI;

// Small enough that a full repro takes a few seconds.
const char* kTinyConfig = R"({
  "seed": 3,
  "k": [1, "inf"],
  "ss_k": [1],
  "corpus": {"src_vocab_size": 30, "tgt_vocab_size": 34, "num_sentences": 120, "len_min": 4, "len_max": 6},
  "model": {"num_layers": 1, "num_heads": 2, "model_dim": 8, "ff_dim": 12, "max_len": 10},
  "train": {"epochs": 1, "batch_size": 16, "learning_rate": 0.003, "warmup_steps": 2}
})";

ExperimentConfig tiny_config(const std::string& out) {
  auto cfg = config_from_json(detail::ojson::parse(kTinyConfig));
  cfg.out = out;
  return cfg;
}

int run_cli(const std::string& args) {
  const std::string cmd = "'" + kCli + "' " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<std::string> lines_of(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

long fields(const std::string& line) { return 1 + std::count(line.begin(), line.end(), ','); }

TEST(Config, ShippedDefaultLoads) {
  const auto cfg = load_config(SIMTLAB_DEFAULT_CONFIG);
  EXPECT_EQ(cfg.ks, (std::vector<Latency>{Latency(1), Latency(3), Latency(9), Latency::full()}));
  EXPECT_EQ(cfg.model.num_layers, 2);
  EXPECT_EQ(cfg.model.model_dim, 64);
  EXPECT_EQ(cfg.corpus.num_sentences, 10000);
  EXPECT_EQ(cfg.ghall, GhallSemantics::Prose);
}

TEST(Config, JsonRoundTrip) {
  const auto cfg = load_config(SIMTLAB_DEFAULT_CONFIG);
  const auto j = config_to_json(cfg);
  EXPECT_EQ(config_to_json(config_from_json(j)), j);
  EXPECT_FALSE(j.contains("out"));
  EXPECT_FALSE(j.contains("workers"));
}

TEST(Config, UnknownKeysAndBadValuesAreRejected) {
  using detail::ojson;
  EXPECT_THROW(config_from_json(ojson::parse(R"({"sed": 1})")), UsageError);
  EXPECT_THROW(config_from_json(ojson::parse(R"({"model": {"layers": 2}})")), UsageError);
  EXPECT_THROW(config_from_json(ojson::parse(R"({"seed": "one"})")), UsageError);
  EXPECT_THROW(config_from_json(ojson::parse(R"({"ghall": "loose"})")), UsageError);
  EXPECT_THROW(config_from_json(ojson::parse(R"({"k": [0]})")), UsageError);
  EXPECT_THROW(config_from_json(ojson::parse(R"({"bins": [1.0, 0.5]})")), UsageError);
  auto cfg = config_from_json(ojson::parse(R"({"k": [1, 1]})"));
  EXPECT_THROW(cfg.validate(), UsageError);
  cfg = config_from_json(ojson::parse(R"({"k": [3], "ss_k": [1]})"));
  EXPECT_THROW(cfg.validate(), UsageError);
  cfg = config_from_json(ojson::parse(R"({"corpus": {"len_max": 12}, "model": {"max_len": 13}})"));
  EXPECT_THROW(cfg.validate(), UsageError);
}

TEST(Config, OverridesApply) {
  auto cfg = tiny_config("x");
  Overrides o;
  o.seed = 99;
  o.ks = std::vector<Latency>{Latency(2)};
  o.ghall_literal = true;
  o.bins = std::vector<double>{0.5, 1.5};
  o.workers = 3;
  o.out = "y";
  o.apply(cfg);
  EXPECT_EQ(cfg.seed, 99u);
  EXPECT_EQ(cfg.ks, std::vector<Latency>{Latency(2)});
  EXPECT_EQ(cfg.ghall, GhallSemantics::Literal);
  EXPECT_EQ(cfg.binning.num_bins(), 3);
  EXPECT_EQ(cfg.workers, 3);
  EXPECT_EQ(cfg.out, "y");
}

TEST(Config, DerivedSeedsDifferPerStream) {
  const auto cfg = tiny_config("x");
  std::set<std::uint64_t> seeds;
  for (auto s : {ExperimentConfig::kCorpus, ExperimentConfig::kSplit, ExperimentConfig::kSubset,
                 ExperimentConfig::kInit, ExperimentConfig::kTrain})
    seeds.insert(cfg.derived_seed(s));
  EXPECT_EQ(seeds.size(), 5u);
}

class TinyRepro : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new test::TempDir;
    cmd_repro(tiny_config(dir_->file("a")));
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static std::string root() { return dir_->file("a"); }
  static test::TempDir* dir_;
};
test::TempDir* TinyRepro::dir_ = nullptr;

TEST_F(TinyRepro, EveryTableHasItsHeaderAndWellFormedRows) {
  for (const auto& [file, header] : csv_headers()) {
    const auto lines = lines_of(root() + "/results/" + file);
    ASSERT_FALSE(lines.empty()) << file;
    EXPECT_EQ(lines[0], header);
    EXPECT_GT(lines.size(), 1u) << file << " has no rows";
    for (std::size_t i = 1; i < lines.size(); ++i) EXPECT_EQ(fields(lines[i]), fields(header)) << file << ":" << i + 1;
  }
}

TEST_F(TinyRepro, Table1CoversEveryRun) {
  const auto lines = lines_of(root() + "/results/table1_hr.csv");
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[1].substr(0, 11), "baseline,1,");
  EXPECT_EQ(lines[2].substr(0, 13), "baseline,inf,");
  EXPECT_EQ(lines[3].substr(0, 5), "ss,1,");
}

TEST_F(TinyRepro, ManifestHashesEveryFile) {
  const auto m = detail::read_json(fs::path(root()) / "manifest.json");
  std::size_t files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(root()))
    if (entry.is_regular_file() && entry.path().filename() != "manifest.json") ++files;
  ASSERT_EQ(m.at("files").size(), files);
  for (const auto& f : m.at("files")) {
    const auto path = fs::path(root()) / f.at("path").get<std::string>();
    EXPECT_EQ(f.at("sha256").get<std::string>(), sha256_file(path));
  }
}

TEST_F(TinyRepro, SecondRunIsHashIdentical) {
  auto cfg = tiny_config(dir_->file("b"));
  cfg.workers = 2;
  cmd_repro(cfg);
  EXPECT_EQ(test::read_text(root() + "/manifest.json"), test::read_text(dir_->file("b") + "/manifest.json"));
}

TEST_F(TinyRepro, RefusesANonEmptyOutputDirectory) { EXPECT_THROW(cmd_repro(tiny_config(root())), UsageError); }

TEST_F(TinyRepro, HypothesesFromAnotherKAreRejected) {
  // Copy the k=1 run into a fresh tree and pass its dumps off as k=inf.
  const auto copy = dir_->file("gate");
  fs::copy(root(), copy, fs::copy_options::recursive);
  const Layout layout{copy};
  fs::copy_file(layout.run(System::Baseline, Latency(1)) / "hyps.jsonl",
                layout.run(System::Baseline, Latency::full()) / "hyps.jsonl", fs::copy_options::overwrite_existing);
  const auto cfg = tiny_config(copy);
  EXPECT_THROW(cmd_label(cfg, System::Baseline, Latency::full()), UsageError);
  EXPECT_THROW(cmd_tssr(cfg, System::Baseline, Latency::full()), UsageError);
  fs::copy_file(layout.run(System::Baseline, Latency(1)) / "model.json",
                layout.run(System::Baseline, Latency::full()) / "model.json", fs::copy_options::overwrite_existing);
  EXPECT_THROW(cmd_decode(cfg, System::Baseline, Latency::full()), UsageError);
}

TEST_F(TinyRepro, StagesRerunToTheSameBytes) {
  // Rerunning one stage over a finished run reproduces its outputs.
  const auto cfg = tiny_config(root());
  const auto run = Layout{root()}.run(System::Baseline, Latency(1));
  const auto labels = test::read_text((run / "labels.jsonl").string());
  const auto relevance = test::read_text((run / "relevance.jsonl").string());
  cmd_label(cfg, System::Baseline, Latency(1));
  cmd_tssr(cfg, System::Baseline, Latency(1));
  EXPECT_EQ(test::read_text((run / "labels.jsonl").string()), labels);
  EXPECT_EQ(test::read_text((run / "relevance.jsonl").string()), relevance);
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override { test::write_text(config(), kTinyConfig); }
  std::string config() const { return dir_.file("tiny.json"); }
  test::TempDir dir_;
};

TEST_F(Cli, UsageErrorsExitWithOne) {
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("gen --config " + dir_.file("missing.json")), 1);
  EXPECT_EQ(run_cli("gen --config " + config() + " --k 0 --out " + dir_.file("o")), 1);
  EXPECT_EQ(run_cli("gen --config " + config() + " --seed -4 --out " + dir_.file("o")), 1);
  EXPECT_EQ(run_cli("gen --config " + config() + " --bins 2,1 --out " + dir_.file("o")), 1);
  EXPECT_EQ(run_cli("train --config " + config() + " --out " + dir_.file("o")), 1);  // two k values
  EXPECT_EQ(run_cli("compare --config " + config() + " a.json"), 1);
  test::write_text(dir_.file("bad.json"), "{\"seed\": ");
  EXPECT_EQ(run_cli("gen --config " + dir_.file("bad.json")), 1);
}

TEST_F(Cli, SuccessExitsWithZero) {
  const auto out = dir_.file("run");
  EXPECT_EQ(run_cli("gen --config " + config() + " --out " + out), 0);
  EXPECT_TRUE(fs::exists(out + "/corpus/train.jsonl"));
  EXPECT_EQ(run_cli("train baseline --config " + config() + " --k 1 --out " + out), 0);
  EXPECT_EQ(run_cli("decode baseline --config " + config() + " --k 1 --out " + out), 0);
  EXPECT_EQ(run_cli("label --config " + config() + " --k 1 --ghall-literal --out " + out), 0);
  EXPECT_EQ(run_cli("tssr --config " + config() + " --k 1 --workers 2 --out " + out), 0);
  EXPECT_EQ(run_cli("analyze --config " + config() + " --k 1 --out " + out), 0);
  EXPECT_TRUE(fs::exists(out + "/runs/baseline_k1/report.json"));
  const auto resolved = detail::read_json(out + "/runs/baseline_k1/config.resolved.json");
  EXPECT_EQ(resolved.at("run_k").get<std::string>(), "1");
}

TEST_F(Cli, DataErrorsExitWithTwo) {
  const auto out = dir_.file("run");
  ASSERT_EQ(run_cli("gen --config " + config() + " --out " + out), 0);
  test::write_text(out + "/corpus/valid.jsonl", "{\"src\": \"x1\"}\n");
  ASSERT_EQ(run_cli("train --config " + config() + " --k 1 --out " + out), 2);
}

TEST_F(Cli, NumericFailureExitsWithThree) {
  // A learning rate this large drives the logits to overflow in the first steps.
  auto j = detail::ojson::parse(kTinyConfig);
  j["train"]["learning_rate"] = 1e300;
  j["train"]["warmup_steps"] = 0;
  test::write_text(config(), j.dump());
  const auto out = dir_.file("run");
  ASSERT_EQ(run_cli("gen --config " + config() + " --out " + out), 0);
  EXPECT_EQ(run_cli("train --config " + config() + " --k 1 --out " + out), 3);
}

}  // namespace
}  // namespace simtlab

// Drives the cfl-probe binary through std::system.

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& root() {
  static const fs::path p = [] {
    auto d = fs::temp_directory_path() / ("cfl-cli-" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return p;
}

int run(const std::string& args) {
  const std::string cmd = std::string(CFL_PROBE_BIN) + " " + args + " 2>>" + (root() / "stderr.log").string();
  int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

std::string P(const std::string& name) { return (root() / name).string(); }

// shared small dataset
const std::string& dyck23() {
  static const std::string d = [] {
    const std::string dir = P("dyck23");
    EXPECT_EQ(run("gen --lang dyck --k 2 --m 3 --n-train 120 --n-test 60 --seed 7 --out " + dir), 0);
    return dir;
  }();
  return d;
}

}  // namespace

TEST(Cli, UsageErrorsAreNonZero) {
  EXPECT_NE(run(""), 0);
  EXPECT_NE(run("bogus"), 0);
  EXPECT_NE(run("gen"), 0);  // --out required
  EXPECT_NE(run("gen --lang klingon --out " + P("x")), 0);
  EXPECT_NE(run("train --data " + P("does-not-exist")), 0);
}

TEST(Cli, GenIsByteDeterministicAcrossRunsAndThreads) {
  const std::string a = P("gen-a"), b = P("gen-b"), c = P("gen-c"), s = P("gen-s");
  const std::string args = "gen --lang dyck --k 3 --m 5 --n-train 300 --n-test 300 --seed 11 ";
  ASSERT_EQ(run(args + "--out " + a), 0);
  ASSERT_EQ(run(args + "--out " + b), 0);
  ASSERT_EQ(run(args + "--threads 3 --out " + c), 0);
  ASSERT_EQ(run("gen --lang dyck --k 3 --m 5 --n-train 300 --n-test 300 --seed 12 --out " + s), 0);
  for (const char* f : {"meta.json", "spec.pda", "train.jsonl", "test.jsonl"}) {
    EXPECT_EQ(slurp(fs::path(a) / f), slurp(fs::path(b) / f)) << f;
    EXPECT_EQ(slurp(fs::path(a) / f), slurp(fs::path(c) / f)) << f;
  }
  EXPECT_NE(slurp(fs::path(a) / "train.jsonl"), slurp(fs::path(s) / "train.jsonl"));
  EXPECT_EQ(count_lines(slurp(fs::path(a) / "train.jsonl")), 600u);  // positive + corruption each
  auto meta = nlohmann::json::parse(slurp(fs::path(a) / "meta.json"));
  EXPECT_EQ(meta["num_stack_symbols"], 8);
  EXPECT_EQ(meta["max_stack"], 5);
  EXPECT_EQ(meta["kind"], "pda");
}

TEST(Cli, GenFromSpecFileMatchesBuiltin) {
  const std::string dir = dyck23();
  const std::string again = P("dyck23-file");
  ASSERT_EQ(run("gen --spec " + dir + "/spec.pda --n-train 120 --n-test 60 --seed 7 --out " + again), 0);
  EXPECT_EQ(slurp(fs::path(dir) / "train.jsonl"), slurp(fs::path(again) / "train.jsonl"));
  EXPECT_EQ(slurp(fs::path(dir) / "spec.pda"), slurp(fs::path(again) / "spec.pda"));
}

TEST(Cli, OtherLanguages) {
  EXPECT_EQ(run("gen --lang parity --n-train 20 --n-test 20 --out " + P("par")), 0);
  EXPECT_EQ(run("gen --lang anbn --m 4 --n-train 20 --n-test 20 --out " + P("anbn")), 0);
  EXPECT_EQ(run("gen --lang wcwr --k 2 --m 2 --n 2 --n-train 20 --n-test 20 --out " + P("wcwr")), 0);
  auto meta = nlohmann::json::parse(slurp(fs::path(P("par")) / "meta.json"));
  EXPECT_EQ(meta["spec_name"], "parity");
}

TEST(Cli, ScanPrepSubset) {
  const std::string dir = P("scan");
  ASSERT_EQ(run("scan-prep --seed 7 --max-records 40 --out " + dir), 0);
  EXPECT_EQ(count_lines(slurp(fs::path(dir) / "train.jsonl")), 20u);
  EXPECT_EQ(count_lines(slurp(fs::path(dir) / "test.jsonl")), 20u);
  auto meta = nlohmann::json::parse(slurp(fs::path(dir) / "meta.json"));
  EXPECT_EQ(meta["kind"], "scan");
  EXPECT_EQ(meta["language_size"], 4962825);
  EXPECT_EQ(meta["num_symbols"], 14);
  EXPECT_EQ(meta["num_stack_symbols"], 9);
}

TEST(Cli, TrainIsByteDeterministic) {
  const std::string d = dyck23();
  for (const char* fam : {"lstm", "transformer_decoder"}) {
    const std::string base = "train --data " + d + " --family " + fam + " --mode latent --epochs 2 --seed 5 ";
    ASSERT_EQ(run(base + "--ckpt " + P("t1.ckpt") + " --metrics " + P("t1.csv")), 0);
    ASSERT_EQ(run(base + "--ckpt " + P("t2.ckpt") + " --metrics " + P("t2.csv")), 0);
    EXPECT_EQ(slurp(P("t1.csv")), slurp(P("t2.csv"))) << fam;
    EXPECT_EQ(slurp(P("t1.ckpt")), slurp(P("t2.ckpt"))) << fam;
    EXPECT_EQ(count_lines(slurp(P("t1.csv"))), 4u);  // header, 2 epochs, test
  }
  // a different seed moves the numbers
  ASSERT_EQ(run("train --data " + d + " --epochs 2 --seed 6 --metrics " + P("t3.csv")), 0);
  ASSERT_EQ(run("train --data " + d + " --epochs 2 --seed 5 --metrics " + P("t4.csv")), 0);
  EXPECT_NE(slurp(P("t3.csv")), slurp(P("t4.csv")));
}

TEST(Cli, EvalMatchesTrainTestRow) {
  const std::string d = dyck23();
  ASSERT_EQ(run("train --data " + d + " --epochs 2 --ckpt " + P("e.ckpt") + " --metrics " + P("e.csv")), 0);
  ASSERT_EQ(run("eval --ckpt " + P("e.ckpt") + " --data " + d + " --out " + P("e.json")), 0);
  auto j = nlohmann::json::parse(slurp(P("e.json")));
  const std::string csv = slurp(P("e.csv"));
  const std::string last = csv.substr(csv.rfind("1,test,"));
  std::vector<std::string> f;
  std::stringstream ss(last);
  for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
  ASSERT_GE(f.size(), 14u);
  EXPECT_NEAR(std::stod(f[11]), j["metrics"]["stack_acc"].get<double>(), 1e-9);
  EXPECT_NEAR(std::stod(f[10]), j["metrics"]["state_acc"].get<double>(), 1e-9);
  EXPECT_EQ(j["model"]["family"], "lstm");
}

TEST(Cli, MetadataMismatchIsRejected) {
  const std::string d = dyck23();
  ASSERT_EQ(run("train --data " + d + " --epochs 1 --ckpt " + P("mm.ckpt") + " --metrics " + P("mm.csv")), 0);
  ASSERT_EQ(run("gen --lang dyck --k 3 --m 5 --n-train 10 --n-test 10 --out " + P("d35")), 0);
  EXPECT_NE(run("eval --ckpt " + P("mm.ckpt") + " --data " + P("d35") + " --out " + P("mm.json")), 0);
  EXPECT_NE(run("dump-hidden --ckpt " + P("mm.ckpt") + " --data " + P("d35") + " --out " + P("mm.h")), 0);
}

TEST(Cli, PhaseOneNeedsMatchingOracleCheckpoint) {
  const std::string d = dyck23();
  ASSERT_EQ(run("train --data " + d + " --epochs 1 --ckpt " + P("o.ckpt") + " --metrics " + P("o.csv")), 0);
  EXPECT_NE(run("train --data " + d + " --phase phase1 --epochs 1 --metrics " + P("p.csv")), 0);
  EXPECT_NE(run("train --data " + d + " --phase phase1 --mode latent --init " + P("o.ckpt") + " --epochs 1 --metrics " +
                P("p.csv")),
            0);
  EXPECT_EQ(run("train --data " + d + " --phase phase1 --init " + P("o.ckpt") + " --epochs 1 --metrics " + P("p.csv")),
            0);
  EXPECT_EQ(run("train --data " + d + " --phase phase0 --epochs 1 --metrics " + P("p0.csv")), 0);
  EXPECT_NE(run("train --data " + d + " --phase phase0 --loss-weights learnable --epochs 1"), 0);
}

TEST(Cli, DumpHiddenShape) {
  const std::string d = dyck23();
  ASSERT_EQ(run("train --data " + d + " --epochs 1 --alpha 2 --ckpt " + P("dh.ckpt") + " --metrics " + P("dh.csv")), 0);
  ASSERT_EQ(run("dump-hidden --ckpt " + P("dh.ckpt") + " --data " + d + " --limit 5 --out " + P("dh.out")), 0);
  const std::string out = slurp(P("dh.out"));
  std::stringstream ss(out);
  std::string header;
  std::getline(ss, header);
  const std::size_t d_model = 2 * (1 + 3 * 6);  // alpha · (|Q| + m·|S|)
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), long(4 + d_model));
  // rows = total length of the first five positives
  std::size_t expect = 0, seen = 0;
  std::ifstream test(fs::path(d) / "test.jsonl");
  for (std::string line; seen < 5 && std::getline(test, line);) {
    auto j = nlohmann::json::parse(line);
    if (j["label"] != "positive") continue;
    expect += j["sequence"].size();
    ++seen;
  }
  EXPECT_EQ(count_lines(out), expect + 1);
  std::string row;
  std::getline(ss, row);
  EXPECT_NE(row.find(",q0,"), std::string::npos);
}

TEST(Cli, GridRunsCachesAndReportsFailures) {
  const std::string d = dyck23();
  const std::string cfg = P("grid.json");
  {
    nlohmann::json j = {{"data", {d}},        {"families", {"lstm", "transformer_encoder"}},
                        {"modes", {"forced"}}, {"seeds", {0}},
                        {"epochs", 1},         {"cache", P("grid-cache")}};
    std::ofstream(cfg) << j.dump();
  }
  ASSERT_EQ(run("grid --config " + cfg + " --out " + P("grid.csv") + " --table " + P("table.csv")), 0);
  const std::string first = slurp(P("grid.csv"));
  EXPECT_EQ(count_lines(first), 3u);
  EXPECT_EQ(first.find("failed"), std::string::npos);
  EXPECT_EQ(count_lines(slurp(P("table.csv"))), 3u);
  // second run comes from the cache with identical metrics
  ASSERT_EQ(run("grid --config " + cfg + " --out " + P("grid2.csv")), 0);
  EXPECT_EQ(count_lines(slurp(P("grid2.csv"))), 3u);

  const std::string bad = P("grid-bad.json");
  {
    nlohmann::json j = {{"cells", {{{"data", d}, {"epochs", 1}}, {{"data", P("missing")}, {"epochs", 1}}}},
                        {"cache", P("grid-cache")}};
    std::ofstream(bad) << j.dump();
  }
  EXPECT_EQ(run("grid --config " + bad + " --out " + P("grid3.csv")), 1);
  const std::string third = slurp(P("grid3.csv"));
  EXPECT_EQ(count_lines(third), 3u);
  EXPECT_NE(third.find(",failed,"), std::string::npos);
  EXPECT_NE(third.find(",ok,"), std::string::npos);
}

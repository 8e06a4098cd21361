#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "cflprobe/builders.hpp"
#include "cflprobe/harness.hpp"

using namespace cflprobe;
using ad::Tensor;
namespace fs = std::filesystem;

namespace {

DatasetSplits small_data(const PdaSpec& spec, std::size_t n, std::uint64_t seed, std::size_t max_len = 0) {
  GenConfig g;
  g.n_train = n;
  g.n_test = n;
  g.seed = seed;
  g.max_len = max_len;
  return build_dataset(spec, g);
}

DatasetInfo info_of(const Dataset& d) {
  DatasetInfo i;
  i.spec_name = d.meta.spec_name;
  i.num_states = d.meta.num_states;
  i.num_symbols = d.meta.num_symbols;
  i.num_stack_symbols = d.meta.num_stack_symbols;
  i.max_stack = d.meta.max_stack;
  i.max_len = d.meta.max_len;
  return i;
}

// Logits that put `big` on the target class (0 elsewhere); rows without a
// target get uniform logits.
Tensor one_hot_logits(const std::vector<int>& targets, std::size_t classes, double big) {
  std::vector<double> v(targets.size() * classes, 0.0);
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (targets[r] >= 0) v[r * classes + targets[r]] = big;
  }
  return Tensor::from({targets.size(), classes}, v);
}

Predictions cheating_predictions(const PreparedBatch& pb, const DatasetInfo& info, double big) {
  Predictions p;
  p.symbol = one_hot_logits(pb.targets.next, info.num_symbols, big);
  p.state = one_hot_logits(pb.targets.state, info.num_states, big);
  for (const auto& s : pb.targets.stack) p.stack.push_back(one_hot_logits(s, info.num_stack_symbols, big));
  std::vector<double> c;
  for (double y : pb.targets.labels) c.push_back(y > 0.5 ? big : -big);
  p.classifier = Tensor::from({c.size(), 1}, c);
  return p;
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("cflprobe_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Loss, PerfectPredictionsGiveZero) {
  auto spec = build_dyck(2, 3);
  auto d = small_data(spec, 20, 1);
  auto info = info_of(d.train);
  for (const auto& recs : make_batches<std::mt19937_64>(d.train.records, 8, nullptr, true)) {
    auto pb = prepare_batch(recs, info.max_stack);
    auto p = cheating_predictions(pb, info, 1e3);
    EXPECT_EQ(oracle_loss(p, pb.targets, LossWeights::fixed()).item(), 0.0);
  }
}

TEST(Loss, UniformStackLossIsLogClasses) {
  std::vector<int> tg{0, 3, 7, 2, -1};
  Predictions p;
  p.symbol = Tensor::zeros({5, 4});
  p.state = Tensor::zeros({5, 1});
  for (int j = 0; j < 3; ++j) p.stack.push_back(Tensor::zeros({5, 8}));
  OracleTargets t{{1, 2, 3, 0, -1}, {0, 0, 0, 0, 0}, {tg, tg, tg}, {}};
  auto parts = oracle_parts(p, t);
  EXPECT_NEAR(parts.stack.item(), std::log(8.0), 1e-12);
  EXPECT_NEAR(parts.symbol.item(), std::log(4.0), 1e-12);
  EXPECT_EQ(parts.state.item(), 0.0);
  t.next.pop_back();
  EXPECT_THROW(oracle_parts(p, t), std::invalid_argument);
}

TEST(Loss, AdditivityAndLearnableForm) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  auto rnd = [&](std::size_t r, std::size_t c) {
    std::vector<double> v(r * c);
    for (double& x : v) x = n(rng);
    return Tensor::from({r, c}, v);
  };
  Predictions p;
  p.symbol = rnd(6, 5);
  p.state = rnd(6, 3);
  for (int j = 0; j < 2; ++j) p.stack.push_back(rnd(6, 4));
  OracleTargets t{{1, 2, 3, 0, 4, -1}, {0, 1, 2, 2, 1, 0}, {{0, 1, 2, 3, 0, 1}, {3, 3, 0, 0, 1, 2}}, {}};
  const double summed = oracle_loss(p, t, LossWeights::fixed()).item();
  const double sym = ad::cross_entropy(p.symbol, t.next).item();
  const double st = ad::cross_entropy(p.state, t.state).item();
  const double sk = (ad::cross_entropy(p.stack[0], t.stack[0]).item() + ad::cross_entropy(p.stack[1], t.stack[1]).item()) / 2;
  EXPECT_NEAR(summed, sym + st + sk, 1e-12);

  // Σ Lᵢ/(2σᵢ²) + log(σ₁σ₂σ₃): at σ = 1 that is half the unweighted sum
  const double weighted = oracle_loss(p, t, LossWeights::learnable(0.0)).item();
  EXPECT_NEAR(weighted, 0.5 * summed, 1e-12);
  auto w = LossWeights::learnable(0.0);
  w.log_sigma.values() = {std::log(2.0), 0.0, std::log(0.5)};
  const double expect = sym / 8 + st / 2 + sk * 2 + std::log(2.0 * 1.0 * 0.5);
  EXPECT_NEAR(oracle_loss(p, t, w).item(), expect, 1e-12);
}

TEST(Loss, LearnableGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(3);
  auto w = LossWeights::learnable(0.3);
  Tensor logits = Tensor::from({4, 3}, {0.1, -0.2, 0.3, 1.0, 0.0, -1.0, 0.5, 0.5, 0.2, -0.3, 0.8, 0.1}, true);
  OracleTargets t{{0, 1, 2, -1}, {2, 1, 0, 0}, {{1, 1, 0, 2}}, {}};
  auto f = [&] {
    Predictions p;
    p.symbol = logits;
    p.state = ad::scale(logits, 0.5);
    p.stack = {ad::tanh(logits)};
    return oracle_loss(p, t, w);
  };
  auto r = ad::grad_check(f, {logits, w.log_sigma}, rng);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Metrics, CheatingPredictorIsPerfect) {
  auto spec = build_dyck(2, 3);
  auto d = small_data(spec, 60, 4);
  auto info = info_of(d.test);
  MetricsAccumulator acc;
  for (const auto& recs : make_batches<std::mt19937_64>(d.test.records, 16, nullptr)) {
    auto pb = prepare_batch(recs, info.max_stack);
    acc.add(pb, cheating_predictions(pb, info, 50.0));
  }
  auto m = acc.result();
  EXPECT_EQ(m.state_acc, 1.0);
  EXPECT_EQ(m.stack_acc, 1.0);
  EXPECT_EQ(m.stack_acc_exact, 1.0);
  EXPECT_EQ(m.classification_acc, 1.0);
  EXPECT_EQ(m.lm_acc, 1.0);  // the observed next symbol is always valid
  EXPECT_NEAR(m.perplexity, 1.0, 1e-12);
  EXPECT_EQ(m.sequences, d.test.records.size());
}

TEST(Metrics, RandomPredictorLmAccuracyMatchesMaskDensity) {
  auto spec = build_dyck(1, 1);
  auto d = small_data(spec, 400, 5);
  auto info = info_of(d.test);
  // expected: mean over counted steps of |mask| / |Σ|
  double density = 0;
  std::size_t steps = 0;
  for (const auto& r : d.test.records) {
    if (r.label != Label::Positive) continue;
    for (const auto& mask : r.trace.lm_masks) {
      const auto k = std::count(mask.begin(), mask.end(), true);
      if (k == 0) continue;
      density += double(k) / double(mask.size());
      ++steps;
    }
  }
  density /= double(steps);
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n;
  MetricsAccumulator acc;
  for (const auto& recs : make_batches<std::mt19937_64>(d.test.records, 32, nullptr)) {
    auto pb = prepare_batch(recs, info.max_stack);
    auto p = cheating_predictions(pb, info, 0.0);
    for (double& v : p.symbol.values()) v = n(rng);
    acc.add(pb, p);
  }
  auto m = acc.result();
  const double sd = std::sqrt(density * (1 - density) / double(steps));
  EXPECT_NEAR(m.lm_acc, density, 4 * sd + 1e-9);
  EXPECT_GT(density, 0.45);  // interiors of ()()… mostly allow exactly one of two
  EXPECT_LT(density, 0.8);
}

TEST(Metrics, UniformScanPerplexityIsAlphabetSize) {
  // 14-symbol alphabet, uniform logits
  DatasetRecord r;
  r.sequence = {4, 5, 1, 0, 0, 9, 7, 5, 0};
  r.trace.states.assign(9, 0);
  r.trace.stacks.assign(9, std::vector<SymbolId>(3, 0));
  r.trace.lm_masks.assign(9, std::vector<bool>(14, true));
  std::vector<DatasetRecord> recs{r, r};
  auto pb = prepare_batch({&recs[0], &recs[1]}, 3);
  Predictions p;
  p.symbol = Tensor::zeros({18, 14});
  p.state = Tensor::zeros({18, 1});
  for (int j = 0; j < 3; ++j) p.stack.push_back(Tensor::zeros({18, 9}));
  p.classifier = Tensor::zeros({2, 1});
  MetricsAccumulator acc;
  acc.add(pb, p);
  auto m = acc.result();
  EXPECT_NEAR(m.perplexity, 14.0, 1e-9);
  for (double a : {m.classification_acc, m.lm_acc, m.state_acc, m.stack_acc, m.stack_acc_exact}) {
    EXPECT_GE(a, 0.0);
    EXPECT_LE(a, 1.0);
  }
}

TEST(Metrics, UntrainedZeroClassifierIsCoinFlipOnBalancedData) {
  auto spec = build_dyck(2, 3);
  auto d = small_data(spec, 100, 7);
  auto info = info_of(d.test);
  Model m(model_config_for(info, Family::Lstm, Decomposition::Forced));
  for (auto& [name, t] : m.params().items()) {
    Tensor p = t;
    if (name.rfind("head.classifier", 0) == 0) std::fill(p.values().begin(), p.values().end(), 0.0);
  }
  EXPECT_DOUBLE_EQ(evaluate(m, d.test.records).classification_acc, 0.5);
}

TEST(Train, DeterministicHistoryAndCsv) {
  auto spec = build_dyck(2, 3);
  auto d = small_data(spec, 150, 8);
  auto info = info_of(d.train);
  auto once = [&](Family f) {
    Model m(model_config_for(info, f, Decomposition::Latent, 1, 1, 3));
    TrainConfig tc;
    tc.epochs = 2;
    tc.seed = 3;
    LossWeights w = LossWeights::learnable();
    tc.loss_mode = LossMode::Learnable;
    auto r = train(m, d.train.records, tc, w);
    return train_csv(r, evaluate(m, d.test.records));
  };
  for (Family f : {Family::Lstm, Family::TransformerDecoder}) {
    const auto a = once(f), b = once(f);
    EXPECT_EQ(a, b);
    EXPECT_EQ(std::count(a.begin(), a.end(), '\n'), 4);
  }
}

TEST(Train, EarlyStopAndDivergence) {
  auto spec = build_parity();
  auto d = small_data(spec, 40, 9);
  auto info = info_of(d.train);
  Model m(model_config_for(info, Family::Lstm, Decomposition::Forced));
  TrainConfig tc;
  tc.lr = 0.0;  // nothing improves
  tc.epochs = 50;
  tc.patience = 3;
  LossWeights w;
  auto r = train(m, d.train.records, tc, w);
  EXPECT_TRUE(r.early_stopped);
  EXPECT_EQ(r.epochs_run, 4u);

  Tensor emb = m.params().get("embed");
  emb.values()[0] = std::nan("");
  tc.lr = 1e-3;
  EXPECT_THROW(train(m, d.train.records, tc, w), TrainingDiverged);
}

TEST(Train, MetadataMismatch) {
  auto d = small_data(build_dyck(2, 3), 10, 10);
  auto info = info_of(d.train);
  auto cfg = model_config_for(info, Family::Lstm, Decomposition::Forced);
  EXPECT_NO_THROW(check_metadata(cfg, info));
  info.max_stack = 4;
  EXPECT_THROW(check_metadata(cfg, info), MetadataMismatch);
}

TEST(Train, ParityStackIsConstantEpsilon) {
  auto spec = build_parity();
  auto d = small_data(spec, 200, 11);
  auto info = info_of(d.train);
  Model m(model_config_for(info, Family::Lstm, Decomposition::Forced, 1, 1, 1));
  TrainConfig tc;
  tc.epochs = 3;
  LossWeights w;
  train(m, d.train.records, tc, w);
  EXPECT_EQ(evaluate(m, d.test.records).stack_acc, 1.0);
}

// Removing the stack loss on parity leaves the state dynamics alone.
TEST(Train, ParityStateUnaffectedByStackHeads) {
  auto spec = build_parity();
  auto d = small_data(spec, 300, 12);
  auto info = info_of(d.train);
  std::vector<double> with, without, cw, cwo;
  for (std::uint64_t seed : {1, 2, 3}) {
    for (bool stack : {true, false}) {
      Model m(model_config_for(info, Family::Lstm, Decomposition::Forced, 1, 1, seed));
      TrainConfig tc;
      tc.epochs = 15;
      tc.seed = seed;
      tc.stack_loss = stack;
      LossWeights w;
      train(m, d.train.records, tc, w);
      auto mt = evaluate(m, d.test.records);
      (stack ? with : without).push_back(mt.state_acc);
      (stack ? cw : cwo).push_back(mt.classification_acc);
    }
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  EXPECT_NEAR(median(with), median(without), 0.05);
  EXPECT_NEAR(median(cw), median(cwo), 0.1);
}

TEST(TwoPhase, SeparableToySetAndCheckpointPlumbing) {
  // positives "()" repeated, negatives differ in one symbol: "((" at every slot
  auto spec = build_dyck(1, 1);
  std::vector<DatasetRecord> recs;
  for (std::uint64_t i = 0; i < 64; ++i) {
    DatasetRecord pos;
    pos.id = 2 * i;
    pos.sequence = encode_chars(spec, "()()");
    pos.trace = run(spec, pos.sequence, 4);
    DatasetRecord neg;
    neg.id = 2 * i + 1;
    neg.sequence = encode_chars(spec, "()((");
    neg.trace = run(spec, neg.sequence, 4);
    neg.label = Label::Corrupted;
    neg.source = static_cast<std::int64_t>(pos.id);
    recs.push_back(pos);
    recs.push_back(neg);
  }
  DatasetInfo info;
  info.num_states = spec.num_states();
  info.num_symbols = spec.num_symbols();
  info.num_stack_symbols = spec.num_stack_symbols();
  info.max_stack = spec.max_stack();
  auto mcfg = model_config_for(info, Family::Lstm, Decomposition::Forced, 1, 1, 4);
  TrainConfig tc;
  tc.epochs = 40;
  tc.seed = 4;
  auto dir = temp_dir("twophase");
  const auto ckpt = (dir / "oracle.ckpt").string();
  EXPECT_THROW(train_two_phase(mcfg, recs, recs, tc, ckpt), std::invalid_argument);
  {
    Model oracle(mcfg);
    LossWeights w;
    train(oracle, recs, tc, w);
    oracle.save(ckpt);
  }
  auto r = train_two_phase(mcfg, recs, recs, tc, ckpt);
  EXPECT_EQ(r.phase0_acc, 1.0);
  EXPECT_EQ(r.phase1_acc, 1.0);
  EXPECT_EQ(r.oracle_digest, r.phase1_start_digest);
  std::vector<DatasetRecord> only_pos;
  for (const auto& x : recs) {
    if (x.label == Label::Positive) only_pos.push_back(x);
  }
  EXPECT_THROW(train_two_phase(mcfg, only_pos, only_pos, tc, ckpt), std::invalid_argument);
}

TEST(Grid, FailedCellAndCacheHit) {
  auto spec = build_dyck(2, 3);
  auto dir = temp_dir("grid");
  write_dataset_dir(dir / "dyck", spec, small_data(spec, 40, 13), "pda");
  nlohmann::json j = {{"cells", {{{"data", "dyck"}, {"family", "lstm"}, {"seed", 1}},
                                 {{"data", "missing"}, {"family", "lstm"}, {"seed", 1}}}},
                      {"epochs", 1},
                      {"cache", "cache"}};
  auto g = parse_grid(j, dir);
  ASSERT_EQ(g.cells.size(), 2u);
  auto rows = run_grid(g);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].status, "ok");
  EXPECT_EQ(rows[1].status, "failed");
  EXPECT_FALSE(rows[1].error.empty());
  int calls = 0;
  auto again = run_grid(g, [&](const GridCell& c) {
    ++calls;
    return run_cell(c);
  });
  EXPECT_TRUE(again[0].cached);
  EXPECT_EQ(again[0].metrics.stack_acc, rows[0].metrics.stack_acc);
  EXPECT_EQ(calls, 1);  // only the failed cell is retried
  const auto csv = grid_csv(again);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kGridCsvHeader);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

TEST(Grid, CartesianExpansionAndTableLayout) {
  nlohmann::json j = {{"data", {"scan"}},
                      {"families", {"transformer_encoder", "lstm", "transformer_decoder"}},
                      {"alphas", {4, 1}},
                      {"modes", {"latent", "forced"}},
                      {"epochs", 1}};
  auto g = parse_grid(j, "/tmp");
  ASSERT_EQ(g.cells.size(), 12u);
  std::vector<GridRow> rows;
  for (const auto& c : g.cells) {
    GridRow r;
    r.cell = c;
    r.metrics.perplexity = 2.7;
    r.metrics.stack_acc = 0.9;
    rows.push_back(r);
  }
  auto table = scan_table_csv(rows);
  std::vector<std::string> lines;
  std::istringstream ss(table);
  for (std::string l; std::getline(ss, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 13u);
  EXPECT_EQ(lines[0], "model,perplexity,accuracy");
  EXPECT_EQ(lines[1], "\"LSTM(alpha=1, Forced)\",2.7,90");
  EXPECT_NE(lines[2].find("LSTM(alpha=1, Latent)"), std::string::npos);
  EXPECT_NE(lines[4].find("LSTM(alpha=4, Latent)"), std::string::npos);
  EXPECT_NE(lines[5].find("Transformer(D, alpha=1, Forced)"), std::string::npos);
  EXPECT_NE(lines[12].find("Transformer(E, alpha=4, Latent)"), std::string::npos);
}

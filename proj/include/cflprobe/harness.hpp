#pragma once

// Losses, metrics, training loops and the experiment grid.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "cflprobe/dataset_io.hpp"
#include "cflprobe/models.hpp"

namespace cflprobe {

// ---- losses -------------------------------------------------------------

enum class LossMode { Fixed, Learnable };

inline std::string to_string(LossMode m) { return m == LossMode::Fixed ? "fixed" : "learnable"; }
inline LossMode loss_mode_from_string(const std::string& s) {
  if (s == "fixed") return LossMode::Fixed;
  if (s == "learnable") return LossMode::Learnable;
  throw std::invalid_argument("unknown loss weighting '" + s + "' (fixed, learnable)");
}

/// Fixed: unit weights. Learnable: log σ₁..₃ as one [3] parameter.
struct LossWeights {
  LossMode mode = LossMode::Fixed;
  ad::Tensor log_sigma;

  static LossWeights fixed() { return {}; }
  static LossWeights learnable(double log_sigma0 = 0.0) {
    LossWeights w;
    w.mode = LossMode::Learnable;
    w.log_sigma = ad::Tensor::from({3}, {log_sigma0, log_sigma0, log_sigma0}, true);
    return w;
  }
};

/// Per-row targets for one batch; -1 marks rows with no target (the final
/// step for next-symbol, corrupted records everywhere).
struct OracleTargets {
  std::vector<int> next;
  std::vector<int> state;
  std::vector<std::vector<int>> stack;  // m × rows
  std::vector<double> labels;           // one per sequence
};

struct LossParts {
  ad::Tensor symbol, state, stack;
};

inline LossParts oracle_parts(const Predictions& p, const OracleTargets& t) {
  const std::size_t rows = p.symbol.rows();
  if (t.next.size() != rows || t.state.size() != rows || t.stack.size() != p.stack.size()) {
    throw std::invalid_argument("oracle loss: targets cover " + std::to_string(t.next.size()) + " steps, predictions " +
                                std::to_string(rows));
  }
  LossParts out;
  out.symbol = ad::cross_entropy(p.symbol, t.next);
  out.state = ad::cross_entropy(p.state, t.state);
  ad::Tensor acc;
  for (std::size_t j = 0; j < p.stack.size(); ++j) {
    if (t.stack[j].size() != rows) throw std::invalid_argument("oracle loss: stack target length mismatch");
    ad::Tensor l = ad::cross_entropy(p.stack[j], t.stack[j]);
    acc = j == 0 ? l : ad::add(acc, l);
  }
  out.stack = ad::scale(acc, 1.0 / static_cast<double>(p.stack.size()));
  return out;
}

/// Fixed: L_symbol + L_state + L_stack.
/// Learnable: Σ exp(−2 log σᵢ)/2 · Lᵢ + Σ log σᵢ.
inline ad::Tensor combine(const LossParts& parts, const LossWeights& w) {
  if (w.mode == LossMode::Fixed) return ad::add(ad::add(parts.symbol, parts.state), parts.stack);
  const ad::Tensor* ls[3] = {&parts.symbol, &parts.state, &parts.stack};
  ad::Tensor total;
  for (std::size_t i = 0; i < 3; ++i) {
    ad::Tensor s = ad::slice_cols(w.log_sigma, i, 1);
    ad::Tensor term = ad::add(ad::mul(ad::scale(ad::exp(ad::scale(s, -2.0)), 0.5), *ls[i]), s);
    total = i == 0 ? term : ad::add(total, term);
  }
  return total;
}

inline ad::Tensor oracle_loss(const Predictions& p, const OracleTargets& t, const LossWeights& w) {
  return combine(oracle_parts(p, t), w);
}

// ---- batching -----------------------------------------------------------

struct PreparedBatch {
  Batch batch;
  OracleTargets targets;
  std::vector<const DatasetRecord*> records;
  std::size_t positives = 0;
};

inline PreparedBatch prepare_batch(const std::vector<const DatasetRecord*>& recs, std::size_t max_stack) {
  PreparedBatch pb;
  pb.records = recs;
  std::vector<const Sequence*> seqs;
  for (const auto* r : recs) seqs.push_back(&r->sequence);
  pb.batch = Batch::from_sequences(seqs);
  const std::size_t T = pb.batch.T, B = pb.batch.B;
  auto& t = pb.targets;
  t.next.assign(T * B, -1);
  t.state.assign(T * B, -1);
  t.stack.assign(max_stack, std::vector<int>(T * B, -1));
  for (std::size_t b = 0; b < B; ++b) {
    const auto& r = *recs[b];
    t.labels.push_back(r.label == Label::Positive ? 1.0 : 0.0);
    if (r.label != Label::Positive) continue;
    ++pb.positives;
    if (r.trace.states.size() != T || r.trace.stacks.size() != T) {
      throw std::invalid_argument("record " + std::to_string(r.id) + ": trace length does not match the sequence");
    }
    for (std::size_t s = 0; s < T; ++s) {
      const std::size_t row = s * B + b;
      if (s + 1 < T) t.next[row] = r.sequence[s + 1];
      t.state[row] = r.trace.states[s];
      if (r.trace.stacks[s].size() != max_stack) throw std::invalid_argument("record stack width does not match m");
      for (std::size_t j = 0; j < max_stack; ++j) t.stack[j][row] = r.trace.stacks[s][j];
    }
  }
  return pb;
}

/// Groups records of equal length into batches. With an rng, the order
/// within each length and the batch order are shuffled.
template <typename Rng>
std::vector<std::vector<const DatasetRecord*>> make_batches(const std::vector<DatasetRecord>& records,
                                                            std::size_t batch_size, Rng* rng,
                                                            bool positives_only = false) {
  std::map<std::size_t, std::vector<const DatasetRecord*>> by_len;
  for (const auto& r : records) {
    if (positives_only && r.label != Label::Positive) continue;
    if (!r.sequence.empty()) by_len[r.sequence.size()].push_back(&r);
  }
  std::vector<std::vector<const DatasetRecord*>> out;
  for (auto& [_, v] : by_len) {
    if (rng) std::shuffle(v.begin(), v.end(), *rng);
    for (std::size_t i = 0; i < v.size(); i += batch_size) {
      out.emplace_back(v.begin() + i, v.begin() + std::min(v.size(), i + batch_size));
    }
  }
  if (rng) std::shuffle(out.begin(), out.end(), *rng);
  return out;
}

// ---- metrics ------------------------------------------------------------

struct Metrics {
  double classification_acc = 0;
  double lm_acc = 0;
  double state_acc = 0;
  double stack_acc = 0;
  double stack_acc_exact = 0;
  double perplexity = 1;
  std::size_t sequences = 0;
  std::size_t positive_steps = 0;

  nlohmann::ordered_json to_json() const {
    return {{"classification_acc", classification_acc}, {"lm_acc", lm_acc}, {"state_acc", state_acc},
            {"stack_acc", stack_acc}, {"stack_acc_exact", stack_acc_exact}, {"perplexity", perplexity},
            {"sequences", sequences}, {"positive_steps", positive_steps}};
  }
};

namespace detail {

inline std::size_t argmax_row(const ad::Tensor& t, std::size_t row) {
  const std::size_t n = t.cols();
  const double* x = t.data() + row * n;
  return static_cast<std::size_t>(std::max_element(x, x + n) - x);
}

inline double log_softmax_at(const ad::Tensor& t, std::size_t row, std::size_t k) {
  const std::size_t n = t.cols();
  const double* x = t.data() + row * n;
  const double mx = *std::max_element(x, x + n);
  double z = 0;
  for (std::size_t j = 0; j < n; ++j) z += std::exp(x[j] - mx);
  return x[k] - mx - std::log(z);
}

}  // namespace detail

/// Accumulates the four metrics plus perplexity over batches.
class MetricsAccumulator {
 public:
  void add(const PreparedBatch& pb, const Predictions& p) {
    const std::size_t T = pb.batch.T, B = pb.batch.B, m = p.stack.size();
    for (std::size_t b = 0; b < B; ++b) {
      const auto& r = *pb.records[b];
      const bool pos = r.label == Label::Positive;
      const bool said_yes = p.classifier[b] >= 0.0;  // σ(z) ≥ 0.5
      cls_ok_ += said_yes == pos;
      ++seqs_;
      if (!pos) continue;
      for (std::size_t s = 0; s < T; ++s) {
        const std::size_t row = s * B + b;
        ++steps_;
        state_ok_ += detail::argmax_row(p.state, row) == r.trace.states[s];
        bool all = true;
        for (std::size_t j = 0; j < m; ++j) {
          const bool ok = detail::argmax_row(p.stack[j], row) == r.trace.stacks[s][j];
          slot_ok_ += ok;
          all = all && ok;
        }
        exact_ok_ += all;
        if (s < r.trace.lm_masks.size()) {
          const auto& mask = r.trace.lm_masks[s];
          if (std::find(mask.begin(), mask.end(), true) != mask.end()) {
            ++lm_steps_;
            lm_ok_ += mask[detail::argmax_row(p.symbol, row)];
          }
        }
        if (s + 1 < T) {
          nll_ -= detail::log_softmax_at(p.symbol, row, r.sequence[s + 1]);
          ++nll_steps_;
        }
      }
    }
    m_ = m;
  }

  Metrics result() const {
    Metrics out;
    auto frac = [](double a, double b) { return b > 0 ? a / b : 0.0; };
    out.sequences = seqs_;
    out.positive_steps = steps_;
    out.classification_acc = frac(cls_ok_, seqs_);
    out.state_acc = frac(state_ok_, steps_);
    out.stack_acc = frac(slot_ok_, double(steps_ * m_));
    out.stack_acc_exact = frac(exact_ok_, steps_);
    out.lm_acc = frac(lm_ok_, lm_steps_);
    out.perplexity = nll_steps_ ? std::exp(nll_ / double(nll_steps_)) : 1.0;
    return out;
  }

 private:
  double cls_ok_ = 0, state_ok_ = 0, slot_ok_ = 0, exact_ok_ = 0, lm_ok_ = 0, nll_ = 0;
  std::size_t seqs_ = 0, steps_ = 0, lm_steps_ = 0, nll_steps_ = 0, m_ = 1;
};

inline Metrics evaluate(Model& model, const std::vector<DatasetRecord>& records, std::size_t batch_size = 64) {
  MetricsAccumulator acc;
  for (const auto& recs : make_batches<std::mt19937_64>(records, batch_size, nullptr)) {
    auto pb = prepare_batch(recs, model.config().max_stack);
    acc.add(pb, model.forward(pb.batch, false));
  }
  return acc.result();
}

// ---- training -----------------------------------------------------------

enum class Phase { Oracle, Phase0, Phase1 };

inline std::string to_string(Phase p) {
  switch (p) {
    case Phase::Oracle: return "oracle";
    case Phase::Phase0: return "phase0";
    case Phase::Phase1: return "phase1";
  }
  return "?";
}
inline Phase phase_from_string(const std::string& s) {
  if (s == "oracle") return Phase::Oracle;
  if (s == "phase0") return Phase::Phase0;
  if (s == "phase1") return Phase::Phase1;
  throw std::invalid_argument("unknown phase '" + s + "' (oracle, phase0, phase1)");
}

struct TrainConfig {
  double lr = 1e-3;
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::size_t patience = 10;
  double min_delta = 1e-4;
  Phase phase = Phase::Oracle;
  LossMode loss_mode = LossMode::Fixed;
  bool classifier_cotrain = true;  // oracle phase also fits the classifier
  bool stack_loss = true;          // ablation: drop L_stack entirely

  nlohmann::ordered_json to_json() const {
    return {{"lr", lr}, {"epochs", epochs}, {"batch_size", batch_size}, {"seed", seed}, {"patience", patience},
            {"min_delta", min_delta}, {"phase", to_string(phase)}, {"loss_weights", to_string(loss_mode)},
            {"classifier_cotrain", classifier_cotrain}, {"stack_loss", stack_loss}};
  }
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MetadataMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0;
  double symbol = 0, state = 0, stack = 0, classifier = 0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  std::size_t epochs_run = 0;
  bool early_stopped = false;
  double best_loss = 0;
};

inline void check_metadata(const ModelConfig& m, const DatasetInfo& d) {
  if (m.num_states != d.num_states || m.num_symbols != d.num_symbols || m.num_stack_symbols != d.num_stack_symbols ||
      m.max_stack != d.max_stack) {
    std::ostringstream ss;
    ss << "model expects |Q|=" << m.num_states << " |Σ|=" << m.num_symbols << " |S|=" << m.num_stack_symbols
       << " m=" << m.max_stack << ", dataset '" << d.spec_name << "' has |Q|=" << d.num_states
       << " |Σ|=" << d.num_symbols << " |S|=" << d.num_stack_symbols << " m=" << d.max_stack;
    throw MetadataMismatch(ss.str());
  }
}

inline ModelConfig model_config_for(const DatasetInfo& d, Family f, Decomposition mode, std::size_t alpha = 1,
                                    std::size_t layers = 1, std::uint64_t seed = 0) {
  ModelConfig c;
  c.family = f;
  c.mode = mode;
  c.alpha = alpha;
  c.layers = layers;
  c.num_states = d.num_states;
  c.num_symbols = d.num_symbols;
  c.num_stack_symbols = d.num_stack_symbols;
  c.max_stack = d.max_stack;
  c.seed = seed;
  c.validate();
  return c;
}

using EpochLogger = std::function<void(const EpochStats&)>;

/// Adam over the chosen phase's loss. Oracle: the summed (or learnably
/// weighted) oracle losses on positives plus classifier BCE on everything
/// (if co-trained). Phase 0/1: BCE only.
/// Early stop when the epoch loss has not improved by min_delta for
/// `patience` epochs.
inline TrainResult train(Model& model, const std::vector<DatasetRecord>& records, const TrainConfig& cfg,
                         LossWeights& weights, const EpochLogger& log = {}) {
  if (records.empty()) throw std::invalid_argument("train: no records");
  if (weights.mode != cfg.loss_mode) throw std::invalid_argument("train: loss weights do not match the config");
  std::vector<ad::Tensor> params = model.params().tensors();
  if (weights.mode == LossMode::Learnable) params.push_back(weights.log_sigma);
  ad::Adam opt(params, ad::AdamConfig{cfg.lr});
  const bool oracle = cfg.phase == Phase::Oracle;
  const bool use_cls = !oracle || cfg.classifier_cotrain;
  TrainResult res;
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(cfg.seed, 0xba7c, epoch));
    auto batches = make_batches(records, cfg.batch_size, &rng, !use_cls);
    EpochStats st;
    st.epoch = epoch + 1;
    std::size_t n = 0;
    for (const auto& recs : batches) {
      auto pb = prepare_batch(recs, model.config().max_stack);
      ad::Tape tape;
      ad::Tensor loss;
      double parts[4] = {0, 0, 0, 0};
      {
        ad::TapeScope scope(tape);
        Predictions p = model.forward(pb.batch, true);
        std::vector<ad::Tensor> terms;
        if (oracle && pb.positives > 0) {
          LossParts lp = oracle_parts(p, pb.targets);
          if (!cfg.stack_loss) lp.stack = ad::Tensor::scalar(0.0);
          parts[0] = lp.symbol.item();
          parts[1] = lp.state.item();
          parts[2] = lp.stack.item();
          terms.push_back(combine(lp, weights));
        }
        if (use_cls) {
          ad::Tensor c = ad::bce_with_logits(p.classifier, pb.targets.labels);
          parts[3] = c.item();
          terms.push_back(c);
        }
        if (terms.empty()) continue;
        loss = terms[0];
        for (std::size_t i = 1; i < terms.size(); ++i) loss = ad::add(loss, terms[i]);
      }
      if (!std::isfinite(loss.item())) {
        throw TrainingDiverged("loss is " + std::to_string(loss.item()) + " at epoch " + std::to_string(epoch + 1) +
                               " (batch length " + std::to_string(pb.batch.T) + ")");
      }
      tape.backward(loss);
      opt.step();
      if (weights.mode == LossMode::Learnable) weights.log_sigma.zero_grad();
      st.loss += loss.item();
      st.symbol += parts[0];
      st.state += parts[1];
      st.stack += parts[2];
      st.classifier += parts[3];
      ++n;
    }
    if (n) {
      for (double* v : {&st.loss, &st.symbol, &st.state, &st.stack, &st.classifier}) *v /= double(n);
    }
    res.history.push_back(st);
    res.epochs_run = epoch + 1;
    if (log) log(st);
    if (st.loss < best - cfg.min_delta) {
      best = st.loss;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      res.early_stopped = true;
      break;
    }
  }
  res.best_loss = best;
  return res;
}

struct TwoPhaseResult {
  double phase0_acc = 0;
  double phase1_acc = 0;
  std::uint64_t oracle_digest = 0;       // parameters stored in the oracle checkpoint
  std::uint64_t phase1_start_digest = 0;  // parameters phase 1 started from
  TrainResult phase0, phase1;
};

/// Phase 0 from a fresh init, phase 1 from the oracle checkpoint; both
/// train the classifier loss only with every parameter trainable.
inline TwoPhaseResult train_two_phase(const ModelConfig& mcfg, const std::vector<DatasetRecord>& train_set,
                                      const std::vector<DatasetRecord>& test_set, TrainConfig cfg,
                                      const std::string& oracle_ckpt, const EpochLogger& log = {}) {
  bool has_negative = false;
  for (const auto& r : train_set) has_negative = has_negative || r.label == Label::Corrupted;
  if (!has_negative) throw std::invalid_argument("two-phase training needs corrupted records");
  if (oracle_ckpt.empty() || !std::filesystem::exists(oracle_ckpt)) {
    throw std::invalid_argument("phase 1 needs an oracle checkpoint (missing '" + oracle_ckpt + "')");
  }
  TwoPhaseResult out;
  LossWeights w = LossWeights::fixed();
  cfg.loss_mode = LossMode::Fixed;

  Model p0(mcfg);
  cfg.phase = Phase::Phase0;
  out.phase0 = train(p0, train_set, cfg, w, log);
  out.phase0_acc = evaluate(p0, test_set).classification_acc;

  auto ck = ad::load_checkpoint(oracle_ckpt);
  auto ck_cfg = ModelConfig::from_json(nlohmann::json::parse(ck.config));
  ModelConfig a = ck_cfg, b = mcfg;
  a.seed = b.seed = 0;
  if (a.text() != b.text()) throw MetadataMismatch("oracle checkpoint was trained with a different model config");
  Model p1(mcfg);
  p1.load_weights(ck);
  ad::ParameterStore stored;
  for (const auto& [name, t] : ck.tensors) stored.add(name, t);
  out.oracle_digest = stored.digest();
  out.phase1_start_digest = p1.params().digest();
  if (out.oracle_digest != out.phase1_start_digest) throw std::logic_error("phase 1 did not start from the oracle weights");
  cfg.phase = Phase::Phase1;
  out.phase1 = train(p1, train_set, cfg, w, log);
  out.phase1_acc = evaluate(p1, test_set).classification_acc;
  return out;
}

// ---- CSV ----------------------------------------------------------------

inline std::string fmt_double(double v) {
  std::ostringstream ss;
  ss.precision(10);
  ss << v;
  return ss.str();
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

/// Per-epoch history plus one final row; no timings, so reruns with the
/// same seed are byte-identical.
inline constexpr const char* kTrainCsvHeader =
    "schema,row,epoch,loss,symbol_loss,state_loss,stack_loss,classifier_loss,"
    "classification_acc,lm_acc,state_acc,stack_acc,stack_acc_exact,perplexity";
inline constexpr int kTrainCsvSchema = 1;

inline std::string train_csv(const TrainResult& r, const Metrics& test) {
  std::ostringstream out;
  out << kTrainCsvHeader << "\n";
  for (const auto& e : r.history) {
    out << kTrainCsvSchema << ",epoch," << e.epoch << "," << fmt_double(e.loss) << "," << fmt_double(e.symbol) << ","
        << fmt_double(e.state) << "," << fmt_double(e.stack) << "," << fmt_double(e.classifier) << ",,,,,,\n";
  }
  out << kTrainCsvSchema << ",test," << r.epochs_run << ",,,,,," << fmt_double(test.classification_acc) << ","
      << fmt_double(test.lm_acc) << "," << fmt_double(test.state_acc) << "," << fmt_double(test.stack_acc) << ","
      << fmt_double(test.stack_acc_exact) << "," << fmt_double(test.perplexity) << "\n";
  return out.str();
}

// ---- experiment grid ------------------------------------------------------

struct GridCell {
  std::string data;
  Family family = Family::Lstm;
  Decomposition mode = Decomposition::Forced;
  std::size_t alpha = 1;
  std::size_t layers = 1;
  std::uint64_t seed = 0;
  std::string phase = "oracle";  // oracle | phase0 | two_phase
  TrainConfig train;
  bool residual = true;

  nlohmann::ordered_json to_json() const {
    return {{"data", data}, {"family", to_string(family)}, {"mode", to_string(mode)}, {"alpha", alpha},
            {"layers", layers}, {"seed", seed}, {"phase", phase}, {"residual", residual}, {"train", train.to_json()}};
  }
};

struct GridRow {
  GridCell cell;
  std::string id;  // digest of cell + dataset
  std::string status = "ok";
  std::string error;
  std::string spec;
  std::size_t epochs_run = 0;
  Metrics metrics;
  double phase0_acc = -1, phase1_acc = -1;
  double wall_seconds = 0;
  bool cached = false;
};

struct GridConfig {
  std::vector<GridCell> cells;
  std::string cache_dir;
  std::size_t jobs = 1;
};

/// Grid files are JSON objects:
///   {"data": [dirs], "families": [...], "alphas": [1,4], "layers": [1],
///    "modes": ["forced","latent"], "seeds": [0,1,2], "phase": "oracle",
///    "epochs": 50, "batch_size": 32, "loss_weights": "fixed",
///    "residual": true, "patience": 10, "cache": "dir", "jobs": 1}
/// or {"cells": [{...one cell each...}], ...shared defaults}.
/// Cells are expanded data × family × alpha × mode × layers × seed.
inline GridConfig parse_grid(const nlohmann::json& j, const std::filesystem::path& base = ".") {
  GridConfig g;
  auto rel = [&](const std::string& p) {
    std::filesystem::path q(p);
    return q.is_absolute() ? q.string() : (base / q).lexically_normal().string();
  };
  g.cache_dir = rel(j.value("cache", "grid-cache"));
  g.jobs = j.value("jobs", std::size_t{1});
  auto defaults = [&](const nlohmann::json& src, GridCell& c) {
    c.phase = src.value("phase", j.value("phase", std::string("oracle")));
    c.train.epochs = src.value("epochs", j.value("epochs", std::size_t{200}));
    c.train.batch_size = src.value("batch_size", j.value("batch_size", std::size_t{32}));
    c.train.patience = src.value("patience", j.value("patience", std::size_t{10}));
    c.train.lr = src.value("lr", j.value("lr", 1e-3));
    c.train.loss_mode = loss_mode_from_string(src.value("loss_weights", j.value("loss_weights", std::string("fixed"))));
    c.residual = src.value("residual", j.value("residual", true));
    if (c.phase != "oracle" && c.phase != "phase0" && c.phase != "two_phase") {
      throw std::invalid_argument("grid: unknown phase '" + c.phase + "'");
    }
  };
  if (j.contains("cells")) {
    for (const auto& cj : j.at("cells")) {
      GridCell c;
      c.data = rel(cj.at("data").get<std::string>());
      c.family = family_from_string(cj.value("family", std::string("lstm")));
      c.mode = decomposition_from_string(cj.value("mode", std::string("forced")));
      c.alpha = cj.value("alpha", std::size_t{1});
      c.layers = cj.value("layers", std::size_t{1});
      c.seed = cj.value("seed", std::uint64_t{0});
      defaults(cj, c);
      c.train.seed = c.seed;
      g.cells.push_back(c);
    }
    return g;
  }
  auto list = [&](const char* key, nlohmann::json dflt) { return j.contains(key) ? j.at(key) : dflt; };
  for (const auto& d : j.at("data")) {
    for (const auto& f : list("families", {"lstm"})) {
      for (const auto& a : list("alphas", {1})) {
        for (const auto& m : list("modes", {"forced"})) {
          for (const auto& l : list("layers", {1})) {
            for (const auto& s : list("seeds", {0})) {
              GridCell c;
              c.data = rel(d.get<std::string>());
              c.family = family_from_string(f.get<std::string>());
              c.alpha = a.get<std::size_t>();
              c.mode = decomposition_from_string(m.get<std::string>());
              c.layers = l.get<std::size_t>();
              c.seed = s.get<std::uint64_t>();
              defaults(j, c);
              c.train.seed = c.seed;
              g.cells.push_back(c);
            }
          }
        }
      }
    }
  }
  return g;
}

inline constexpr int kGridCsvSchema = 1;
inline constexpr const char* kGridCsvHeader =
    "schema,cell,status,data,spec,family,mode,alpha,layers,phase,loss_weights,seed,epochs_run,"
    "classification_acc,lm_acc,state_acc,stack_acc,stack_acc_exact,perplexity,phase0_acc,phase1_acc,"
    "wall_seconds,error";

inline std::string grid_csv_row(const GridRow& r) {
  std::ostringstream out;
  const auto& c = r.cell;
  const bool ok = r.status == "ok";
  auto num = [&](double v) { return ok ? fmt_double(v) : std::string(); };
  out << kGridCsvSchema << "," << r.id << "," << r.status << "," << csv_escape(c.data) << "," << csv_escape(r.spec) << ","
      << to_string(c.family) << "," << to_string(c.mode) << "," << c.alpha << "," << c.layers << "," << c.phase << ","
      << to_string(c.train.loss_mode) << "," << c.seed << "," << (ok ? std::to_string(r.epochs_run) : "") << ","
      << num(r.metrics.classification_acc) << "," << num(r.metrics.lm_acc) << "," << num(r.metrics.state_acc) << ","
      << num(r.metrics.stack_acc) << "," << num(r.metrics.stack_acc_exact) << "," << num(r.metrics.perplexity) << ","
      << (r.phase0_acc >= 0 ? fmt_double(r.phase0_acc) : "") << "," << (r.phase1_acc >= 0 ? fmt_double(r.phase1_acc) : "")
      << "," << fmt_double(r.wall_seconds) << "," << csv_escape(r.error);
  return out.str();
}

/// Perplexity/accuracy table in the SCAN results layout:
/// LSTM, decoder, encoder; α ascending; forced before latent.
inline std::string scan_table_csv(const std::vector<GridRow>& rows) {
  std::vector<const GridRow*> ok;
  for (const auto& r : rows) {
    if (r.status == "ok") ok.push_back(&r);
  }
  auto rank = [](Family f) { return f == Family::Lstm ? 0 : f == Family::TransformerDecoder ? 1 : 2; };
  std::stable_sort(ok.begin(), ok.end(), [&](const GridRow* a, const GridRow* b) {
    return std::make_tuple(rank(a->cell.family), a->cell.alpha, a->cell.mode != Decomposition::Forced) <
           std::make_tuple(rank(b->cell.family), b->cell.alpha, b->cell.mode != Decomposition::Forced);
  });
  std::ostringstream out;
  out << "model,perplexity,accuracy\n";
  for (const auto* r : ok) {
    const auto& c = r->cell;
    std::string name = c.family == Family::Lstm ? "LSTM(" : c.family == Family::TransformerDecoder ? "Transformer(D, " : "Transformer(E, ";
    name += "alpha=" + std::to_string(c.alpha) + ", " + (c.mode == Decomposition::Forced ? "Forced" : "Latent") + ")";
    out << csv_escape(name) << "," << fmt_double(r->metrics.perplexity) << "," << fmt_double(100.0 * r->metrics.stack_acc) << "\n";
  }
  return out.str();
}

struct LoadedData {
  DatasetInfo info;
  std::vector<DatasetRecord> train, test;
};

inline LoadedData load_dataset(const std::filesystem::path& dir) {
  LoadedData d;
  d.info = read_dataset_info(dir);
  d.train = read_records(dir / "train.jsonl");
  d.test = read_records(dir / "test.jsonl");
  return d;
}

/// Runs one cell end to end (fresh model, training, test metrics).
inline GridRow run_cell(const GridCell& c, const std::string& ckpt_dir = "") {
  GridRow row;
  row.cell = c;
  const auto data = load_dataset(c.data);
  row.spec = data.info.spec_name;
  auto mcfg = model_config_for(data.info, c.family, c.mode, c.alpha, c.layers, c.seed);
  mcfg.residual = c.residual;
  mcfg.validate();
  TrainConfig tc = c.train;
  if (c.phase == "oracle" || c.phase == "two_phase") {
    Model m(mcfg);
    tc.phase = Phase::Oracle;
    LossWeights w = tc.loss_mode == LossMode::Fixed ? LossWeights::fixed() : LossWeights::learnable();
    auto tr = train(m, data.train, tc, w);
    row.epochs_run = tr.epochs_run;
    row.metrics = evaluate(m, data.test);
    if (c.phase == "two_phase") {
      auto path = (std::filesystem::path(ckpt_dir.empty() ? std::filesystem::temp_directory_path().string() : ckpt_dir) /
                   ("oracle-" + hex64(fnv1a(c.to_json().dump())) + ".ckpt"))
                      .string();
      m.save(path);
      auto tp = train_two_phase(mcfg, data.train, data.test, tc, path);
      row.phase0_acc = tp.phase0_acc;
      row.phase1_acc = tp.phase1_acc;
    }
  } else {
    Model m(mcfg);
    tc.phase = Phase::Phase0;
    LossWeights w = LossWeights::fixed();
    tc.loss_mode = LossMode::Fixed;
    auto tr = train(m, data.train, tc, w);
    row.epochs_run = tr.epochs_run;
    row.metrics = evaluate(m, data.test);
    row.phase0_acc = row.metrics.classification_acc;
  }
  return row;
}

inline std::string cell_id(const GridCell& c) {
  std::uint64_t h = fnv1a(c.to_json().dump());
  std::error_code ec;
  const auto meta = std::filesystem::path(c.data) / "meta.json";
  if (std::filesystem::exists(meta, ec)) {
    std::ifstream in(meta, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    h = fnv1a(ss.str(), h);
  }
  return hex64(h);
}

using CellRunner = std::function<GridRow(const GridCell&)>;

inline nlohmann::json row_to_cache(const GridRow& r) {
  return {{"id", r.id}, {"spec", r.spec}, {"epochs_run", r.epochs_run}, {"metrics", r.metrics.to_json()},
          {"phase0_acc", r.phase0_acc}, {"phase1_acc", r.phase1_acc}, {"wall_seconds", r.wall_seconds}};
}

/// Runs every cell not already in the cache; failures become rows with
/// status "failed" and the grid carries on. Rows come back in cell order.
inline std::vector<GridRow> run_grid(const GridConfig& g, const CellRunner& runner = {},
                                     const std::function<void(const GridRow&)>& on_done = {}) {
  std::filesystem::create_directories(g.cache_dir);
  std::vector<GridRow> rows(g.cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  auto work = [&] {
    for (std::size_t i = next++; i < g.cells.size(); i = next++) {
      const GridCell& c = g.cells[i];
      GridRow row;
      row.cell = c;
      row.id = cell_id(c);
      const auto cache = std::filesystem::path(g.cache_dir) / (row.id + ".json");
      bool hit = false;
      if (std::filesystem::exists(cache)) {
        try {
          std::ifstream in(cache);
          auto j = nlohmann::json::parse(in);
          row.spec = j.at("spec");
          row.epochs_run = j.at("epochs_run");
          const auto& m = j.at("metrics");
          row.metrics.classification_acc = m.at("classification_acc");
          row.metrics.lm_acc = m.at("lm_acc");
          row.metrics.state_acc = m.at("state_acc");
          row.metrics.stack_acc = m.at("stack_acc");
          row.metrics.stack_acc_exact = m.at("stack_acc_exact");
          row.metrics.perplexity = m.at("perplexity");
          row.metrics.sequences = m.at("sequences");
          row.metrics.positive_steps = m.at("positive_steps");
          row.phase0_acc = j.at("phase0_acc");
          row.phase1_acc = j.at("phase1_acc");
          row.wall_seconds = j.at("wall_seconds");
          row.cached = hit = true;
        } catch (const std::exception&) {
          hit = false;  // unreadable cache entry: recompute
        }
      }
      if (!hit) {
        const auto t0 = std::chrono::steady_clock::now();
        try {
          GridRow r = runner ? runner(c) : run_cell(c, g.cache_dir);
          r.cell = c;
          r.id = row.id;
          row = r;
        } catch (const std::exception& e) {
          row.status = "failed";
          row.error = e.what();
        }
        row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (row.status == "ok") {
          std::lock_guard lock(mu);
          std::ofstream out(cache);
          out << row_to_cache(row).dump(1) << "\n";
        }
      }
      {
        std::lock_guard lock(mu);
        rows[i] = row;
        if (on_done) on_done(row);
      }
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(g.jobs, g.cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t k = 1; k < jobs; ++k) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  return rows;
}

inline std::string grid_csv(const std::vector<GridRow>& rows) {
  std::string out = std::string(kGridCsvHeader) + "\n";
  for (const auto& r : rows) out += grid_csv_row(r) + "\n";
  return out;
}

}  // namespace cflprobe

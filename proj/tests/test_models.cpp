#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "cflprobe/models.hpp"

using namespace cflprobe;
using ad::Tensor;

namespace {

ModelConfig small(Family f, Decomposition m, std::uint64_t seed = 1) {
  ModelConfig c;
  c.family = f;
  c.mode = m;
  c.num_states = 2;
  c.num_symbols = 4;
  c.num_stack_symbols = 3;
  c.max_stack = 2;  // layout 2 + 2·3 = 8
  c.seed = seed;
  c.dropout = 0.0;  // deterministic unless a test opts in
  c.heads = 4;
  c.ffn_filter = 6;
  return c;
}

Batch random_batch(std::size_t T, std::size_t B, std::size_t V, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Batch b;
  b.T = T;
  b.B = B;
  b.ids.resize(T * B);
  for (int& x : b.ids) x = static_cast<int>(rng() % V);
  return b;
}

void zero_all(Model& m) {
  for (auto& [_, t] : m.params().items()) {
    Tensor p = t;
    std::fill(p.values().begin(), p.values().end(), 0.0);
  }
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Scalar-loop LSTM over the model's own weights (column blocks f,i,o,c̃).
std::vector<double> reference_lstm(Model& m, const Batch& b) {
  const auto& cfg = m.config();
  const std::size_t d = cfg.hidden(), e = cfg.embed_dim();
  auto E = m.params().get("embed"), W = m.params().get("lstm.0.w"), U = m.params().get("lstm.0.u"),
       Bi = m.params().get("lstm.0.b");
  std::vector<double> out(b.T * b.B * d);
  for (std::size_t s = 0; s < b.B; ++s) {
    std::vector<double> h(d, 0), c(d, 0);
    for (std::size_t t = 0; t < b.T; ++t) {
      const int id = b.ids[t * b.B + s];
      std::vector<double> z(4 * d);
      for (std::size_t k = 0; k < 4 * d; ++k) {
        double acc = Bi[k];
        for (std::size_t j = 0; j < e; ++j) acc += E[id * e + j] * W[j * 4 * d + k];
        for (std::size_t j = 0; j < d; ++j) acc += h[j] * U[j * 4 * d + k];
        z[k] = acc;
      }
      for (std::size_t k = 0; k < d; ++k) {
        const double f = sig(z[k]), i = sig(z[d + k]), o = sig(z[2 * d + k]), cand = std::tanh(z[3 * d + k]);
        c[k] = f * c[k] + i * cand;
        h[k] = o * std::tanh(c[k]);
        out[(t * b.B + s) * d + k] = h[k];
      }
    }
  }
  return out;
}

// Summed oracle loss at model level: next-symbol CE (final step excluded) + state CE +
// mean over slots of stack CE.
Tensor oracle_loss(const Predictions& p, const Batch& b, std::size_t Q, std::size_t S, std::size_t m) {
  std::vector<int> next(b.T * b.B, -1), states(b.T * b.B), stack(b.T * b.B);
  for (std::size_t r = 0; r + b.B < next.size(); ++r) next[r] = b.ids[r + b.B];
  for (std::size_t r = 0; r < states.size(); ++r) states[r] = static_cast<int>((r * 7 + 3) % Q);
  Tensor loss = ad::add(ad::cross_entropy(p.symbol, next), ad::cross_entropy(p.state, states));
  Tensor st = Tensor::scalar(0);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t r = 0; r < stack.size(); ++r) stack[r] = static_cast<int>((r * 5 + j) % S);
    st = ad::add(st, ad::cross_entropy(p.stack[j], stack));
  }
  return ad::add(ad::add(loss, ad::scale(st, 1.0 / double(m))), ad::bce_with_logits(p.classifier, std::vector<double>(b.B, 1.0)));
}

const Family kFamilies[] = {Family::Lstm, Family::TransformerEncoder, Family::TransformerDecoder};

}  // namespace

TEST(Config, LayoutArithmetic) {
  ModelConfig c;
  c.num_states = 1;
  c.num_symbols = 4;
  c.num_stack_symbols = 6;
  c.max_stack = 3;
  EXPECT_EQ(c.state_width(), 1u);  // α=1, |Q|=1
  EXPECT_EQ(c.hidden(), 19u);
  EXPECT_EQ(c.embed_dim(), 8u);
  c.family = Family::TransformerDecoder;
  EXPECT_EQ(c.hidden(), 24u);  // padded to a multiple of 8 heads
  EXPECT_EQ(c.layout_width(), 19u);
  c.alpha = 4;
  EXPECT_EQ(c.layout_width(), 76u);
  EXPECT_EQ(c.hidden(), 80u);
  c.alpha = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  auto j = small(Family::TransformerEncoder, Decomposition::Latent).to_json();
  auto back = ModelConfig::from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(back.text(), small(Family::TransformerEncoder, Decomposition::Latent).text());
}

TEST(Lstm, ZeroWeightsGiveZeroHidden) {
  Model m(small(Family::Lstm, Decomposition::Forced));
  zero_all(m);
  auto h = m.encode(random_batch(5, 3, 4, 1), false);
  for (double v : h.values()) EXPECT_EQ(v, 0.0);
}

TEST(Lstm, MatchesScalarReferenceAndIsBounded) {
  auto cfg = small(Family::Lstm, Decomposition::Forced, 3);
  Model m(cfg);
  auto b = random_batch(6, 4, 4, 2);
  auto h = m.encode(b, false);
  auto ref = reference_lstm(m, b);
  ASSERT_EQ(h.numel(), ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) {
    EXPECT_NEAR(h[i], ref[i], 1e-12);
    EXPECT_LE(std::abs(h[i]), 1.0);
  }
}

TEST(Lstm, HandCheckedSingleStep) {
  // one symbol, hand-set weights: z = 0.5 for every gate entry
  auto cfg = small(Family::Lstm, Decomposition::Forced);
  Model m(cfg);
  zero_all(m);
  Tensor b = m.params().get("lstm.0.b");
  std::fill(b.values().begin(), b.values().end(), 0.5);
  auto h = m.encode(random_batch(1, 1, 4, 3), false);
  // c₀ = 0 so f drops out: c = σ(.5)·tanh(.5), h = σ(.5)·tanh(c)
  const double c = sig(0.5) * std::tanh(0.5), expect = sig(0.5) * std::tanh(c);
  for (double v : h.values()) EXPECT_NEAR(v, expect, 1e-15);
}

TEST(Transformer, PositionalEncodingValues) {
  for (std::size_t j = 0; j < 8; ++j) {
    EXPECT_EQ(positional_encoding(0, 2 * j, 16), 0.0);
    EXPECT_EQ(positional_encoding(0, 2 * j + 1, 16), 1.0);
  }
  EXPECT_NEAR(positional_encoding(1, 0, 16), 0.841471, 1e-6);
  EXPECT_NEAR(positional_encoding(3, 5, 16), std::cos(3.0 / std::pow(10000.0, 4.0 / 16)), 1e-15);
}

TEST(Transformer, DecoderIgnoresFutureInputs) {
  Model m(small(Family::TransformerDecoder, Decomposition::Latent, 4));
  const std::size_t T = 5, B = 2, e = m.config().embed_dim(), d = m.config().hidden();
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  std::vector<double> xv(T * B * e);
  for (double& v : xv) v = n(rng);
  auto base = m.encode_embedded(Tensor::from({T * B, e}, xv), T, B, false);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    auto pert = xv;
    for (std::size_t r = (t + 1) * B; r < T * B; ++r) {
      for (std::size_t k = 0; k < e; ++k) pert[r * e + k] += 0.7;
    }
    auto h = m.encode_embedded(Tensor::from({T * B, e}, pert), T, B, false);
    for (std::size_t r = 0; r < (t + 1) * B; ++r) {
      for (std::size_t k = 0; k < d; ++k) ASSERT_EQ(h[r * d + k], base[r * d + k]);
    }
  }
  // ∂h_t/∂x_{t'} = 0 for t' > t: gradient of the t=1 rows w.r.t. inputs
  Tensor x = Tensor::from({T * B, e}, xv, true);
  ad::Tape tape;
  Tensor loss;
  {
    ad::TapeScope scope(tape);
    loss = ad::sum(ad::slice_rows(m.encode_embedded(x, T, B, false), 1 * B, B));
  }
  tape.backward(loss);
  for (std::size_t r = 2 * B; r < T * B; ++r) {
    for (std::size_t k = 0; k < e; ++k) EXPECT_EQ(x.grad()[r * e + k], 0.0);
  }
  double past = 0;
  for (std::size_t i = 0; i < 2 * B * e; ++i) past += std::abs(x.grad()[i]);
  EXPECT_GT(past, 0.0);
  // the encoder does look ahead
  Model enc(small(Family::TransformerEncoder, Decomposition::Latent, 4));
  auto pert = xv;
  pert[(T - 1) * B * e] += 1.0;
  auto h0 = enc.encode_embedded(Tensor::from({T * B, e}, xv), T, B, false);
  auto h1 = enc.encode_embedded(Tensor::from({T * B, e}, pert), T, B, false);
  EXPECT_NE(h0[0], h1[0]);
}

TEST(Transformer, UnmaskedDecoderEqualsEncoderBitForBit) {
  for (bool residual : {true, false}) {
    auto ce = small(Family::TransformerEncoder, Decomposition::Forced, 6);
    auto cd = small(Family::TransformerDecoder, Decomposition::Forced, 6);
    ce.residual = cd.residual = residual;
    ce.layers = cd.layers = 2;
    Model enc(ce), dec(cd);
    auto b = random_batch(7, 3, 4, 7);
    auto he = enc.encode(b, false);
    auto hd = dec.encode(b, false, false);
    EXPECT_EQ(he.values(), hd.values());
    EXPECT_NE(dec.encode(b, false).values(), he.values());
  }
}

TEST(Transformer, DropoutOnlyInTraining) {
  auto cfg = small(Family::TransformerEncoder, Decomposition::Latent, 8);
  cfg.dropout = 0.1;
  Model m(cfg);
  auto b = random_batch(4, 2, 4, 8);
  auto e1 = m.encode(b, false), e2 = m.encode(b, false);
  EXPECT_EQ(e1.values(), e2.values());
  EXPECT_NE(m.encode(b, true).values(), e1.values());
  auto lc = small(Family::Lstm, Decomposition::Latent, 8);
  lc.dropout = 0.1;
  Model lstm(lc);
  EXPECT_EQ(lstm.encode(b, true).values(), lstm.encode(b, false).values());
}

TEST(Heads, ForcedInformationBarrier) {
  for (Family f : kFamilies) {
    Model m(small(f, Decomposition::Forced, 9));
    const auto& c = m.config();
    const std::size_t T = 3, B = 2, d = c.hidden();
    std::mt19937_64 rng(10);
    std::normal_distribution<double> n;
    std::vector<double> hv(T * B * d);
    for (double& v : hv) v = n(rng);
    auto base = m.predict(Tensor::from({T * B, d}, hv), T, B);
    // segment boundaries: state, then m stack slots, then pad
    std::vector<std::pair<std::size_t, std::size_t>> seg{{0, c.state_width()}};
    for (std::size_t j = 0; j < c.max_stack; ++j) seg.push_back({c.state_width() + j * c.stack_width(), c.stack_width()});
    for (std::size_t s = 0; s < seg.size(); ++s) {
      auto pv = hv;
      for (std::size_t r = 0; r < T * B; ++r) {
        for (std::size_t k = seg[s].first; k < seg[s].first + seg[s].second; ++k) pv[r * d + k] += 1.3;
      }
      auto p = m.predict(Tensor::from({T * B, d}, pv), T, B);
      if (s != 0) EXPECT_EQ(p.state.values(), base.state.values()) << "state head saw segment " << s;
      else EXPECT_NE(p.state.values(), base.state.values());
      for (std::size_t j = 0; j < c.max_stack; ++j) {
        if (s != j + 1) EXPECT_EQ(p.stack[j].values(), base.stack[j].values()) << "stack " << j << " saw " << s;
        else EXPECT_NE(p.stack[j].values(), base.stack[j].values());
      }
      EXPECT_NE(p.symbol.values(), base.symbol.values());  // full h
    }
  }
}

TEST(Heads, SharedVersusIndependentStackHeads) {
  Model forced(small(Family::Lstm, Decomposition::Forced, 11));
  ASSERT_EQ(forced.stack_heads().size(), 1u);
  EXPECT_EQ(forced.stack_heads()[0].in, forced.config().stack_width());
  EXPECT_EQ(forced.state_head().in, forced.config().state_width());
  EXPECT_NO_THROW(forced.params().get("head.stack.w1"));
  EXPECT_THROW(forced.params().get("head.stack.1.w1"), std::out_of_range);

  Model latent(small(Family::Lstm, Decomposition::Latent, 11));
  ASSERT_EQ(latent.stack_heads().size(), 2u);
  EXPECT_EQ(latent.stack_heads()[1].in, latent.config().hidden());
  EXPECT_NE(latent.params().get("head.stack.0.w1").values(), latent.params().get("head.stack.1.w1").values());

  // identical segments through the shared head give identical logits
  const std::size_t d = forced.config().hidden(), sw = forced.config().stack_width(), q = forced.config().state_width();
  std::vector<double> hv(d, 0.0);
  for (std::size_t k = 0; k < sw; ++k) hv[q + k] = hv[q + sw + k] = 0.1 * double(k) - 0.2;
  auto p = forced.predict(Tensor::from({1, d}, hv), 1, 1);
  EXPECT_EQ(p.stack[0].values(), p.stack[1].values());
}

TEST(Heads, PredictShapes) {
  for (Family f : kFamilies) {
    for (auto mode : {Decomposition::Forced, Decomposition::Latent}) {
      Model m(small(f, mode, 12));
      auto p = m.forward(random_batch(4, 3, 4, 13), false);
      EXPECT_EQ(p.symbol.shape(), (ad::Shape{12, 4}));
      EXPECT_EQ(p.state.shape(), (ad::Shape{12, 2}));
      ASSERT_EQ(p.stack.size(), 2u);
      EXPECT_EQ(p.stack[1].shape(), (ad::Shape{12, 3}));
      EXPECT_EQ(p.classifier.shape(), (ad::Shape{3, 1}));
      EXPECT_THROW(m.predict(Tensor::zeros({12, m.config().hidden() + 1}), 4, 3), ad::ShapeError);
    }
  }
}

TEST(Classify, ZeroWeightsAndRange) {
  for (Family f : kFamilies) {
    Model m(small(f, Decomposition::Forced, 14));
    auto b = random_batch(5, 6, 4, 15);
    for (double p : m.classify(b)) {
      EXPECT_GT(p, 0.0);
      EXPECT_LT(p, 1.0);
    }
    zero_all(m);
    for (double p : m.classify(b)) EXPECT_EQ(p, 0.5);
  }
}

TEST(Classify, DecoderPrefixMatchesLongerSequence) {
  // classification of a prefix batch equals reading h at that step of the longer batch
  Model m(small(Family::TransformerDecoder, Decomposition::Forced, 16));
  auto full = random_batch(6, 2, 4, 17);
  Batch prefix{4, 2, std::vector<int>(full.ids.begin(), full.ids.begin() + 8)};
  auto hf = m.encode(full, false);
  auto hp = m.encode(prefix, false);
  for (std::size_t i = 0; i < hp.numel(); ++i) EXPECT_NEAR(hp[i], hf[i], 1e-12);
}

TEST(GradCheck, EndToEndThroughOracleLoss) {
  for (Family f : kFamilies) {
    for (auto mode : {Decomposition::Forced, Decomposition::Latent}) {
      auto cfg = small(f, mode, 18);
      if (f == Family::TransformerDecoder) cfg.layers = 2;
      Model m(cfg);
      auto b = random_batch(4, 2, 4, 19);
      std::mt19937_64 rng(20);
      auto r = ad::grad_check([&] { return oracle_loss(m.forward(b, false), b, 2, 3, 2); }, m.params().tensors(), rng,
                              1e-5, 10);
      EXPECT_LT(r.max_rel_error, 1e-4) << to_string(f) << "/" << to_string(mode) << " worst " << r.worst;
    }
  }
}

TEST(Checkpoint, ModelRoundTrip) {
  auto path = (std::filesystem::temp_directory_path() / "cflprobe_model.ckpt").string();
  for (Family f : kFamilies) {
    Model m(small(f, Decomposition::Latent, 21));
    m.save(path);
    Model back = Model::load(path);
    EXPECT_EQ(back.config().text(), m.config().text());
    EXPECT_EQ(back.params().digest(), m.params().digest());
    auto b = random_batch(3, 2, 4, 22);
    EXPECT_EQ(back.forward(b, false).symbol.values(), m.forward(b, false).symbol.values());
  }
  std::filesystem::remove(path);
}

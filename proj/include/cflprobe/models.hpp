#pragma once

// Sequence models (LSTM, Transformer encoder/decoder) over time-major
// batches, plus the symbol/state/stack/classifier heads.
//
// Hidden layout in forced mode:
//   [ state: α|Q| | stack slot 0: α|S| | ... | slot m-1: α|S| | pad ]
// The pad (Transformer only) rounds d up to a multiple of the head count;
// only the symbol head and the classifier see it.

#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "cflprobe/autodiff.hpp"
#include "cflprobe/hash.hpp"

namespace cflprobe {

enum class Family { Lstm, TransformerEncoder, TransformerDecoder };
enum class Decomposition { Forced, Latent };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::Lstm: return "lstm";
    case Family::TransformerEncoder: return "transformer_encoder";
    case Family::TransformerDecoder: return "transformer_decoder";
  }
  return "?";
}

inline std::string to_string(Decomposition m) { return m == Decomposition::Forced ? "forced" : "latent"; }

inline Family family_from_string(const std::string& s) {
  if (s == "lstm") return Family::Lstm;
  if (s == "transformer_encoder" || s == "encoder") return Family::TransformerEncoder;
  if (s == "transformer_decoder" || s == "decoder") return Family::TransformerDecoder;
  throw std::invalid_argument("unknown model family '" + s + "' (lstm, transformer_encoder, transformer_decoder)");
}

inline Decomposition decomposition_from_string(const std::string& s) {
  if (s == "forced") return Decomposition::Forced;
  if (s == "latent") return Decomposition::Latent;
  throw std::invalid_argument("unknown decomposition '" + s + "' (forced, latent)");
}

struct ModelConfig {
  Family family = Family::Lstm;
  Decomposition mode = Decomposition::Forced;
  std::size_t alpha = 1;
  std::size_t layers = 1;
  std::size_t heads = 8;
  std::size_t ffn_filter = 32;
  double dropout = 0.1;
  bool residual = true;  // residual + layer norm around Transformer sublayers
  std::size_t num_states = 0;
  std::size_t num_symbols = 0;
  std::size_t num_stack_symbols = 0;  // stack classes, ε included
  std::size_t max_stack = 0;
  std::uint64_t seed = 0;

  bool is_transformer() const { return family != Family::Lstm; }
  std::size_t state_width() const { return alpha * num_states; }
  std::size_t stack_width() const { return alpha * num_stack_symbols; }
  std::size_t layout_width() const { return state_width() + max_stack * stack_width(); }
  std::size_t hidden() const {
    const std::size_t d = layout_width();
    if (!is_transformer() || heads == 0) return d;
    return (d + heads - 1) / heads * heads;
  }
  std::size_t embed_dim() const { return 2 * num_symbols; }

  void validate() const {
    auto bad = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
    if (alpha < 1) bad("alpha must be >= 1");
    if (layers < 1) bad("layers must be >= 1");
    if (num_states < 1 || num_symbols < 1 || num_stack_symbols < 1 || max_stack < 1) bad("dataset sizes must be positive");
    if (is_transformer() && (heads < 1 || hidden() % heads != 0)) bad("heads must divide the hidden width");
    if (dropout < 0 || dropout >= 1) bad("dropout must be in [0,1)");
  }

  nlohmann::ordered_json to_json() const {
    return {{"family", to_string(family)}, {"mode", to_string(mode)}, {"alpha", alpha}, {"layers", layers},
            {"heads", heads}, {"ffn_filter", ffn_filter}, {"dropout", dropout}, {"residual", residual},
            {"num_states", num_states}, {"num_symbols", num_symbols}, {"num_stack_symbols", num_stack_symbols},
            {"max_stack", max_stack}, {"seed", seed}, {"hidden", hidden()}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.family = family_from_string(j.at("family").get<std::string>());
    c.mode = decomposition_from_string(j.at("mode").get<std::string>());
    c.alpha = j.at("alpha");
    c.layers = j.at("layers");
    c.heads = j.at("heads");
    c.ffn_filter = j.at("ffn_filter");
    c.dropout = j.at("dropout");
    c.residual = j.at("residual");
    c.num_states = j.at("num_states");
    c.num_symbols = j.at("num_symbols");
    c.num_stack_symbols = j.at("num_stack_symbols");
    c.max_stack = j.at("max_stack");
    c.seed = j.at("seed");
    c.validate();
    return c;
  }

  std::string text() const { return to_json().dump(); }
};

/// Sinusoidal encoding p_{t,2j} = sin(t / 10000^{2j/r}), p_{t,2j+1} = cos(...),
/// with r the model width and t counted from 0.
inline double positional_encoding(std::size_t t, std::size_t col, std::size_t r) {
  const std::size_t j = col / 2;
  const double angle = static_cast<double>(t) / std::pow(10000.0, 2.0 * static_cast<double>(j) / static_cast<double>(r));
  return col % 2 == 0 ? std::sin(angle) : std::cos(angle);
}

/// Equal-length sequences, time-major: ids[t·B + b].
struct Batch {
  std::size_t T = 0;
  std::size_t B = 0;
  std::vector<int> ids;

  static Batch from_sequences(const std::vector<const std::vector<std::uint16_t>*>& seqs) {
    Batch b;
    b.B = seqs.size();
    if (b.B == 0) throw std::invalid_argument("batch: no sequences");
    b.T = seqs[0]->size();
    if (b.T == 0) throw std::invalid_argument("batch: empty sequence");
    b.ids.resize(b.T * b.B);
    for (std::size_t i = 0; i < b.B; ++i) {
      if (seqs[i]->size() != b.T) throw std::invalid_argument("batch: sequences must share one length");
      for (std::size_t t = 0; t < b.T; ++t) b.ids[t * b.B + i] = (*seqs[i])[t];
    }
    return b;
  }
};

struct Predictions {
  ad::Tensor hidden;                    // [T·B, d]
  ad::Tensor symbol;                    // [T·B, |Σ|] next-symbol logits
  ad::Tensor state;                     // [T·B, |Q|]
  std::vector<ad::Tensor> stack;        // m × [T·B, |S|]
  ad::Tensor classifier;                // [B, 1] logits read at the last step
};

/// Two-layer perceptron: in → 2·in (sigmoid) → out.
struct Mlp {
  ad::Tensor w1, b1, w2, b2;
  std::size_t in = 0;

  template <typename Rng>
  static Mlp make(ad::ParameterStore& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    Mlp m;
    m.in = in;
    const double b_in = 1.0 / std::sqrt(static_cast<double>(in));
    const double b_hid = 1.0 / std::sqrt(static_cast<double>(2 * in));
    m.w1 = ps.add_uniform(name + ".w1", {in, 2 * in}, b_in, rng);
    m.b1 = ps.add_uniform(name + ".b1", {2 * in}, b_in, rng);
    m.w2 = ps.add_uniform(name + ".w2", {2 * in, out}, b_hid, rng);
    m.b2 = ps.add_uniform(name + ".b2", {out}, b_hid, rng);
    return m;
  }

  ad::Tensor operator()(const ad::Tensor& x) const {
    if (x.cols() != in) throw ad::ShapeError("mlp: input width " + std::to_string(x.cols()) + ", expected " + std::to_string(in));
    return ad::add_bias(ad::matmul(ad::sigmoid(ad::add_bias(ad::matmul(x, w1), b1)), w2), b2);
  }
};

class Model {
 public:
  using Rng = std::mt19937_64;

  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)), dropout_rng_(derive_seed(cfg_.seed, 0xd0, 0)) {
    cfg_.validate();
    Rng rng(derive_seed(cfg_.seed, 0x1417, 0));
    const std::size_t e = cfg_.embed_dim(), d = cfg_.hidden();
    // a lookup is a one-hot product, fan_in 1
    embed_ = ps_.add_uniform("embed", {cfg_.num_symbols, e}, 1.0, rng);
    if (cfg_.family == Family::Lstm) {
      for (std::size_t l = 0; l < cfg_.layers; ++l) {
        const std::size_t in = l == 0 ? e : d;
        const std::string p = "lstm." + std::to_string(l);
        LstmLayer L;
        L.w = ps_.add_uniform(p + ".w", {in, 4 * d}, 1.0 / std::sqrt(double(in)), rng);
        L.u = ps_.add_uniform(p + ".u", {d, 4 * d}, 1.0 / std::sqrt(double(d)), rng);
        L.b = ps_.add_uniform(p + ".b", {4 * d}, 1.0 / std::sqrt(double(d)), rng);
        lstm_.push_back(L);
      }
    } else {
      proj_w_ = ps_.add_uniform("input.w", {e, d}, 1.0 / std::sqrt(double(e)), rng);
      proj_b_ = ps_.add_uniform("input.b", {d}, 1.0 / std::sqrt(double(e)), rng);
      const double bd = 1.0 / std::sqrt(double(d)), bf = 1.0 / std::sqrt(double(cfg_.ffn_filter));
      for (std::size_t l = 0; l < cfg_.layers; ++l) {
        const std::string p = "attn." + std::to_string(l);
        AttnLayer A;
        A.wq = ps_.add_uniform(p + ".wq", {d, d}, bd, rng);
        A.wk = ps_.add_uniform(p + ".wk", {d, d}, bd, rng);
        A.wv = ps_.add_uniform(p + ".wv", {d, d}, bd, rng);
        A.wo = ps_.add_uniform(p + ".wo", {d, d}, bd, rng);
        A.f1 = ps_.add_uniform(p + ".ffn.w1", {d, cfg_.ffn_filter}, bd, rng);
        A.fb1 = ps_.add_uniform(p + ".ffn.b1", {cfg_.ffn_filter}, bd, rng);
        A.f2 = ps_.add_uniform(p + ".ffn.w2", {cfg_.ffn_filter, d}, bf, rng);
        A.fb2 = ps_.add_uniform(p + ".ffn.b2", {d}, bf, rng);
        if (cfg_.residual) {
          A.g1 = ps_.add_constant(p + ".ln1.g", {d}, 1.0);
          A.be1 = ps_.add_constant(p + ".ln1.b", {d}, 0.0);
          A.g2 = ps_.add_constant(p + ".ln2.g", {d}, 1.0);
          A.be2 = ps_.add_constant(p + ".ln2.b", {d}, 0.0);
        }
        attn_.push_back(A);
      }
    }
    const bool forced = cfg_.mode == Decomposition::Forced;
    symbol_head_ = Mlp::make(ps_, "head.symbol", d, cfg_.num_symbols, rng);
    state_head_ = Mlp::make(ps_, "head.state", forced ? cfg_.state_width() : d, cfg_.num_states, rng);
    if (forced) {
      stack_heads_.push_back(Mlp::make(ps_, "head.stack", cfg_.stack_width(), cfg_.num_stack_symbols, rng));
    } else {
      for (std::size_t j = 0; j < cfg_.max_stack; ++j) {
        stack_heads_.push_back(Mlp::make(ps_, "head.stack." + std::to_string(j), d, cfg_.num_stack_symbols, rng));
      }
    }
    classifier_ = Mlp::make(ps_, "head.classifier", d, 1, rng);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return cfg_; }
  ad::ParameterStore& params() { return ps_; }
  const ad::ParameterStore& params() const { return ps_; }
  const std::vector<Mlp>& stack_heads() const { return stack_heads_; }
  const Mlp& state_head() const { return state_head_; }

  /// Hidden sequence [T·B, d]. `causal` overrides the family's mask
  /// (encoder = none, decoder = causal); only meaningful for Transformers.
  ad::Tensor encode(const Batch& batch, bool train, std::optional<bool> causal = std::nullopt) {
    for (int id : batch.ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.num_symbols) throw std::out_of_range("model: symbol id out of range");
    }
    ad::Tensor x = ad::embedding(embed_, batch.ids);
    return encode_embedded(x, batch.T, batch.B, train, causal);
  }

  /// Same as encode but from an already embedded input [T·B, 2|Σ|].
  ad::Tensor encode_embedded(const ad::Tensor& x, std::size_t T, std::size_t B, bool train,
                             std::optional<bool> causal = std::nullopt) {
    if (cfg_.family == Family::Lstm) return lstm_forward(x, T, B);
    const bool mask = causal.value_or(cfg_.family == Family::TransformerDecoder);
    return transformer_forward(x, T, B, train, mask);
  }

  /// Heads on h. Forced mode reads the layout segments; latent reads all of h.
  Predictions predict(const ad::Tensor& h, std::size_t T, std::size_t B) const {
    const std::size_t d = cfg_.hidden();
    if (h.cols() != d || h.rows() != T * B) {
      throw ad::ShapeError("predict: hidden " + ad::shape_str(h.shape()) + " for T=" + std::to_string(T) +
                           " B=" + std::to_string(B) + " d=" + std::to_string(d));
    }
    Predictions p;
    p.hidden = h;
    p.symbol = symbol_head_(h);
    if (cfg_.mode == Decomposition::Forced) {
      p.state = state_head_(ad::slice_cols(h, 0, cfg_.state_width()));
      // one shared head over all m segments: stack them as rows, run once
      std::vector<ad::Tensor> segs;
      for (std::size_t j = 0; j < cfg_.max_stack; ++j) {
        segs.push_back(ad::slice_cols(h, cfg_.state_width() + j * cfg_.stack_width(), cfg_.stack_width()));
      }
      ad::Tensor all = stack_heads_[0](ad::concat_rows(segs));
      for (std::size_t j = 0; j < cfg_.max_stack; ++j) p.stack.push_back(ad::slice_rows(all, j * T * B, T * B));
    } else {
      p.state = state_head_(h);
      for (const auto& head : stack_heads_) p.stack.push_back(head(h));
    }
    p.classifier = classifier_(ad::slice_rows(h, (T - 1) * B, B));
    return p;
  }

  Predictions forward(const Batch& batch, bool train) {
    return predict(encode(batch, train), batch.T, batch.B);
  }

  /// Acceptance probability per sequence, read at the last step.
  std::vector<double> classify(const Batch& batch) {
    ad::Tensor h = encode(batch, false);
    ad::Tensor logit = classifier_(ad::slice_rows(h, (batch.T - 1) * batch.B, batch.B));
    std::vector<double> out;
    for (double z : logit.values()) out.push_back(ad::detail::sigmoid_value(z));
    return out;
  }

  void save(const std::string& path) const { ad::save_checkpoint(path, cfg_.text(), ps_); }

  static Model load(const std::string& path) {
    auto ck = ad::load_checkpoint(path);
    Model m(ModelConfig::from_json(nlohmann::json::parse(ck.config)));
    ad::restore(m.ps_, ck);
    return m;
  }

  /// Restores parameters from a checkpoint whose config matches except for
  /// seed-independent fields (used for phase-1 retraining).
  void load_weights(const ad::Checkpoint& ck) { ad::restore(ps_, ck); }

  Rng& dropout_rng() { return dropout_rng_; }

 private:
  struct LstmLayer {
    ad::Tensor w, u, b;
  };
  struct AttnLayer {
    ad::Tensor wq, wk, wv, wo, f1, fb1, f2, fb2, g1, be1, g2, be2;
  };

  // Gates in column blocks [f | i | o | c̃]:
  //   f = σ(W_f x + U_f h + b_f) ... c = f⊙c + i⊙c̃, h = o⊙tanh(c)
  ad::Tensor lstm_forward(ad::Tensor x, std::size_t T, std::size_t B) const {
    const std::size_t d = cfg_.hidden();
    for (const auto& L : lstm_) {
      ad::Tensor xw = ad::add_bias(ad::matmul(x, L.w), L.b);
      ad::Tensor h = ad::Tensor::zeros({B, d});
      ad::Tensor c = ad::Tensor::zeros({B, d});
      std::vector<ad::Tensor> hs;
      for (std::size_t t = 0; t < T; ++t) {
        ad::Tensor z = ad::add(ad::slice_rows(xw, t * B, B), ad::matmul(h, L.u));
        ad::Tensor f = ad::sigmoid(ad::slice_cols(z, 0, d));
        ad::Tensor i = ad::sigmoid(ad::slice_cols(z, d, d));
        ad::Tensor o = ad::sigmoid(ad::slice_cols(z, 2 * d, d));
        ad::Tensor cand = ad::tanh(ad::slice_cols(z, 3 * d, d));
        c = ad::add(ad::mul(f, c), ad::mul(i, cand));
        h = ad::mul(o, ad::tanh(c));
        hs.push_back(h);
      }
      x = ad::concat_rows(hs);
    }
    return x;
  }

  ad::Tensor transformer_forward(const ad::Tensor& x, std::size_t T, std::size_t B, bool train, bool causal) {
    const std::size_t d = cfg_.hidden(), H = cfg_.heads, dh = d / H;
    std::vector<double> pe(T * B * d);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t k = 0; k < d; ++k) pe[(t * B + b) * d + k] = positional_encoding(t, k, d);
      }
    }
    ad::Tensor y = ad::add(ad::add_bias(ad::matmul(x, proj_w_), proj_b_), ad::Tensor::from({T * B, d}, std::move(pe)));
    std::vector<char> mask;
    if (causal) {
      mask.assign(B * H * T * T, 0);
      for (std::size_t g = 0; g < B * H; ++g) {
        for (std::size_t i = 0; i < T; ++i) {
          for (std::size_t j = i + 1; j < T; ++j) mask[(g * T + i) * T + j] = 1;
        }
      }
    }
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (const auto& A : attn_) {
      ad::Tensor q = ad::split_heads(ad::matmul(y, A.wq), T, B, H);
      ad::Tensor k = ad::split_heads(ad::matmul(y, A.wk), T, B, H);
      ad::Tensor v = ad::split_heads(ad::matmul(y, A.wv), T, B, H);
      ad::Tensor scores = ad::scale(ad::bmm(q, k, true), inv_sqrt);
      if (causal) scores = ad::masked_fill(scores, mask, -std::numeric_limits<double>::infinity());
      ad::Tensor att = ad::bmm(ad::softmax(scores), v);
      ad::Tensor a = ad::matmul(ad::merge_heads(att, T, B, H), A.wo);
      a = ad::dropout(a, cfg_.dropout, train, dropout_rng_);
      ad::Tensor y1 = cfg_.residual ? ad::layer_norm(ad::add(y, a), A.g1, A.be1) : a;
      ad::Tensor f = ad::add_bias(ad::matmul(ad::relu(ad::add_bias(ad::matmul(y1, A.f1), A.fb1)), A.f2), A.fb2);
      f = ad::dropout(f, cfg_.dropout, train, dropout_rng_);
      y = cfg_.residual ? ad::layer_norm(ad::add(y1, f), A.g2, A.be2) : f;
    }
    return y;
  }

  ModelConfig cfg_;
  ad::ParameterStore ps_;
  Rng dropout_rng_;
  ad::Tensor embed_;
  std::vector<LstmLayer> lstm_;
  ad::Tensor proj_w_, proj_b_;
  std::vector<AttnLayer> attn_;
  Mlp symbol_head_, state_head_, classifier_;
  std::vector<Mlp> stack_heads_;
};

}  // namespace cflprobe

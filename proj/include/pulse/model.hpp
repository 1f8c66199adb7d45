#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pulse/errors.hpp"
#include "pulse/rng.hpp"
#include "pulse/tokenizer.hpp"
#include "pulse/trace.hpp"

namespace pulse {

// Desk-scale transformer encoder with a 2-class head, written directly
// against flat parameter storage so the optimizer, the checkpointer and the
// finite-difference oracle all see one contiguous buffer.
//
//          ids -> embedding + sinusoidal positions
//                   |
//          [ self-attention -> add -> layernorm      ]
//          [ feed-forward (GELU) -> add -> layernorm ]   x n_layers
//                   |
//          pooled position -> linear head -> softmax(2)
//
// Attention is bidirectional (pool the first token) or causal (pool the last
// real token). Padding positions are never computed at all: every loop runs
// over the real prefix, which makes padding invariance exact rather than
// approximate.

enum class AttentionMode { bidirectional, causal };
enum class Pooling { first_token, last_token };

inline const char* to_string(AttentionMode m) {
  return m == AttentionMode::bidirectional ? "bidirectional" : "causal";
}

inline const char* to_string(Pooling p) {
  return p == Pooling::first_token ? "first_token" : "last_token";
}

inline AttentionMode attention_from_string(const std::string& s) {
  if (s == "bidirectional") return AttentionMode::bidirectional;
  if (s == "causal") return AttentionMode::causal;
  throw ConfigError("unknown attention mode '" + s + "'");
}

inline Pooling pooling_from_string(const std::string& s) {
  if (s == "first_token") return Pooling::first_token;
  if (s == "last_token") return Pooling::last_token;
  throw ConfigError("unknown pooling '" + s + "'");
}

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t n_layers = 2;
  std::size_t hidden = 64;
  std::size_t n_heads = 4;
  std::size_t ffn = 256;
  std::size_t max_len = 128;
  AttentionMode attention = AttentionMode::bidirectional;
  Pooling pooling = Pooling::first_token;
  double dropout = 0.0;
  std::uint64_t init_seed = 0;

  void validate() const {
    if (vocab_size < 5)
      throw ConfigError("vocab_size must cover the specials plus content");
    if (n_layers == 0 || hidden == 0 || n_heads == 0 || ffn == 0)
      throw ConfigError("model dimensions must be positive");
    if (hidden % n_heads != 0)
      throw ConfigError("hidden (" + std::to_string(hidden) +
                        ") must be divisible by n_heads (" +
                        std::to_string(n_heads) + ")");
    if (max_len < 2) throw ConfigError("max_len must be at least 2");
    if (dropout < 0.0 || dropout >= 1.0)
      throw ConfigError("dropout must lie in [0, 1)");
    // The pooled position must be one attention can actually fill.
    if (attention == AttentionMode::causal && pooling != Pooling::last_token)
      throw ConfigError("causal attention requires last_token pooling");
    if (attention == AttentionMode::bidirectional &&
        pooling != Pooling::first_token)
      throw ConfigError("bidirectional attention requires first_token pooling");
  }

  nlohmann::json to_json() const {
    return {{"vocab_size", vocab_size}, {"n_layers", n_layers},
            {"hidden", hidden},         {"n_heads", n_heads},
            {"ffn", ffn},               {"max_len", max_len},
            {"attention", to_string(attention)},
            {"pooling", to_string(pooling)},
            {"dropout", dropout},       {"init_seed", init_seed}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.ffn = j.at("ffn").get<std::size_t>();
    c.max_len = j.at("max_len").get<std::size_t>();
    c.attention = attention_from_string(j.at("attention").get<std::string>());
    c.pooling = pooling_from_string(j.at("pooling").get<std::string>());
    c.dropout = j.value("dropout", 0.0);
    c.init_seed = j.value("init_seed", std::uint64_t{0});
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

// One named slice of the flat parameter buffer, row-major.
struct ParamView {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;  // in elements
  std::size_t size() const { return rows * cols; }
};

// Verdict for one function sentence.
struct FunctionVerdict {
  Label label = Label::benign;
  double probability = 0.0;            // of the predicted label
  std::array<double, 2> probs{};       // [benign, malicious]
  std::array<double, 2> logits{};
};

namespace detail {

inline double gelu(double u) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * u * (1.0 + std::tanh(c * (u + 0.044715 * u * u * u)));
}

inline double gelu_grad(double u) {
  constexpr double c = 0.7978845608028654;
  const double t = std::tanh(c * (u + 0.044715 * u * u * u));
  const double dt = (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * u * u);
  return 0.5 * (1.0 + t) + 0.5 * u * dt;
}

}  // namespace detail

template <typename Scalar>
class TransformerClassifier {
 public:
  using Vec = std::vector<Scalar>;

  explicit TransformerClassifier(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    build_layout();
    params_.assign(n_params_, Scalar(0));
    init_params();
    build_positional();
  }

  // Uninitialized-parameters constructor for loaders and casts.
  struct NoInit {};
  TransformerClassifier(const ModelConfig& cfg, NoInit) : cfg_(cfg) {
    cfg_.validate();
    build_layout();
    params_.assign(n_params_, Scalar(0));
    build_positional();
  }

  const ModelConfig& config() const { return cfg_; }
  const std::vector<ParamView>& layout() const { return layout_; }
  std::size_t n_params() const { return n_params_; }
  Vec& params() { return params_; }
  const Vec& params() const { return params_; }

  const ParamView& view(const std::string& name) const {
    for (const ParamView& v : layout_)
      if (v.name == name) return v;
    throw ContractError("no such parameter: " + name);
  }

  template <typename Other>
  TransformerClassifier<Other> cast() const {
    TransformerClassifier<Other> out(cfg_,
                                     typename TransformerClassifier<Other>::NoInit{});
    for (std::size_t i = 0; i < n_params_; ++i)
      out.params()[i] = static_cast<Other>(params_[i]);
    return out;
  }

  // -------------------------------------------------------------------------
  // Forward
  // -------------------------------------------------------------------------

  // Everything backward needs, kept per example. Public so tests can inspect
  // intermediate quantities (attention rows, hidden states) directly.
  struct LayerCache {
    Vec x_in, q, k, v, attn, ctx, mask_attn;
    Vec ln1_xhat, ln1_inv_std, x1;
    Vec ffn_u, ffn_g, mask_ffn;
    Vec ln2_xhat, ln2_inv_std;
  };
  struct ForwardCache {
    std::size_t len = 0;       // real prefix length
    std::size_t pool_idx = 0;
    std::vector<LayerCache> layers;
    Vec x_final;               // len x hidden
    std::array<double, 2> logits{}, probs{};
  };

  // Runs the real prefix of one sequence through the stack. A non-null rng
  // enables dropout (training only); inference paths pass nullptr.
  void forward(const TokenSequence& seq, ForwardCache& cache,
               Rng* dropout_rng = nullptr) const {
    check_sequence(seq);
    const std::size_t L = seq.n_real;
    const std::size_t H = cfg_.hidden;
    cache.len = L;
    cache.layers.resize(cfg_.n_layers);

    Vec x(L * H);
    const Scalar* emb = params_.data() + view_tok_emb_.offset;
    for (std::size_t t = 0; t < L; ++t) {
      const Scalar* row = emb + static_cast<std::size_t>(seq.ids[t]) * H;
      const Scalar* pe = positional_.data() + t * H;
      Scalar* xr = x.data() + t * H;
      for (std::size_t d = 0; d < H; ++d) xr[d] = row[d] + pe[d];
    }

    for (std::size_t l = 0; l < cfg_.n_layers; ++l)
      x = layer_forward(l, x, L, cache.layers[l], dropout_rng);

    cache.x_final = x;
    cache.pool_idx = cfg_.pooling == Pooling::first_token ? 0 : L - 1;

    const Scalar* pooled = cache.x_final.data() + cache.pool_idx * H;
    const Scalar* hw = params_.data() + view_head_w_.offset;  // H x 2
    const Scalar* hb = params_.data() + view_head_b_.offset;
    for (std::size_t c = 0; c < 2; ++c) {
      double acc = static_cast<double>(hb[c]);
      for (std::size_t d = 0; d < H; ++d)
        acc += static_cast<double>(pooled[d]) * static_cast<double>(hw[d * 2 + c]);
      cache.logits[c] = acc;
    }
    const double mx = std::max(cache.logits[0], cache.logits[1]);
    const double e0 = std::exp(cache.logits[0] - mx);
    const double e1 = std::exp(cache.logits[1] - mx);
    cache.probs = {e0 / (e0 + e1), e1 / (e0 + e1)};
  }

  std::array<double, 2> probabilities(const TokenSequence& seq) const {
    ForwardCache cache;
    forward(seq, cache);
    return cache.probs;
  }

  // Final hidden states of the real prefix, row t in [0, n_real).
  std::vector<Vec> hidden_states(const TokenSequence& seq) const {
    ForwardCache cache;
    forward(seq, cache);
    std::vector<Vec> rows(cache.len);
    for (std::size_t t = 0; t < cache.len; ++t)
      rows[t] = Vec(cache.x_final.begin() + t * cfg_.hidden,
                    cache.x_final.begin() + (t + 1) * cfg_.hidden);
    return rows;
  }

  // Class 1 is malicious. Ties resolve to benign: equal evidence never
  // convicts.
  FunctionVerdict classify(const TokenSequence& seq) const {
    ForwardCache cache;
    forward(seq, cache);
    FunctionVerdict v;
    v.probs = cache.probs;
    v.logits = cache.logits;
    v.label = cache.probs[1] > cache.probs[0] ? Label::malicious : Label::benign;
    v.probability = v.label == Label::malicious ? cache.probs[1] : cache.probs[0];
    return v;
  }

  // -------------------------------------------------------------------------
  // Loss and gradient
  // -------------------------------------------------------------------------

  // Mean cross-entropy over the batch; no gradient.
  double batch_loss(const std::vector<const TokenSequence*>& batch,
                    const std::vector<int>& labels) const {
    check_batch(batch, labels);
    double total = 0.0;
    ForwardCache cache;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      forward(*batch[b], cache);
      total += -std::log(std::max(cache.probs[static_cast<std::size_t>(
                                      labels[b])],
                                  1e-300));
    }
    return total / static_cast<double>(batch.size());
  }

  // Mean cross-entropy plus its gradient, accumulated into grad (which must
  // be zeroed by the caller if a fresh gradient is wanted).
  double loss_and_gradient(const std::vector<const TokenSequence*>& batch,
                           const std::vector<int>& labels, Vec& grad,
                           Rng* dropout_rng = nullptr) const {
    check_batch(batch, labels);
    if (grad.size() != n_params_)
      throw ContractError("gradient buffer has wrong size");
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    double total = 0.0;
    ForwardCache cache;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      forward(*batch[b], cache, dropout_rng);
      const auto y = static_cast<std::size_t>(labels[b]);
      total += -std::log(std::max(cache.probs[y], 1e-300));
      std::array<double, 2> dlogits = cache.probs;
      dlogits[y] -= 1.0;
      dlogits[0] *= inv_b;
      dlogits[1] *= inv_b;
      backward(*batch[b], cache, dlogits, grad);
    }
    return total * inv_b;
  }

 private:
  template <typename Other>
  friend class TransformerClassifier;

  ModelConfig cfg_;
  std::vector<ParamView> layout_;
  std::size_t n_params_ = 0;
  Vec params_;
  Vec positional_;  // max_len x hidden, fixed
  ParamView view_tok_emb_, view_head_w_, view_head_b_;
  std::vector<std::array<ParamView, 16>> layer_views_;

  // Per-layer parameter slots, in storage order.
  enum Slot {
    kWq, kBq, kWk, kBk, kWv, kBv, kWo, kBo,
    kLn1G, kLn1B, kW1, kB1, kW2, kB2, kLn2G, kLn2B
  };

  void build_layout() {
    const std::size_t H = cfg_.hidden, F = cfg_.ffn, V = cfg_.vocab_size;
    std::size_t off = 0;
    auto add = [&](const std::string& name, std::size_t r, std::size_t c) {
      layout_.push_back({name, r, c, off});
      off += r * c;
      return layout_.back();
    };
    view_tok_emb_ = add("tok_emb", V, H);
    layer_views_.resize(cfg_.n_layers);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      auto& lv = layer_views_[l];
      lv[kWq] = add(p + "attn.wq", H, H);
      lv[kBq] = add(p + "attn.bq", 1, H);
      lv[kWk] = add(p + "attn.wk", H, H);
      lv[kBk] = add(p + "attn.bk", 1, H);
      lv[kWv] = add(p + "attn.wv", H, H);
      lv[kBv] = add(p + "attn.bv", 1, H);
      lv[kWo] = add(p + "attn.wo", H, H);
      lv[kBo] = add(p + "attn.bo", 1, H);
      lv[kLn1G] = add(p + "ln1.gamma", 1, H);
      lv[kLn1B] = add(p + "ln1.beta", 1, H);
      lv[kW1] = add(p + "ffn.w1", H, F);
      lv[kB1] = add(p + "ffn.b1", 1, F);
      lv[kW2] = add(p + "ffn.w2", F, H);
      lv[kB2] = add(p + "ffn.b2", 1, H);
      lv[kLn2G] = add(p + "ln2.gamma", 1, H);
      lv[kLn2B] = add(p + "ln2.beta", 1, H);
    }
    view_head_w_ = add("head.w", H, 2);
    view_head_b_ = add("head.b", 1, 2);
    n_params_ = off;
  }

  // Xavier-uniform for matrices, zeros for biases, identity layer norms.
  // Draw order equals layout order, so init is a pure function of the seed.
  void init_params() {
    Rng rng(cfg_.init_seed);
    for (const ParamView& v : layout_) {
      Scalar* p = params_.data() + v.offset;
      if (v.name.find("gamma") != std::string::npos) {
        for (std::size_t i = 0; i < v.size(); ++i) p[i] = Scalar(1);
      } else if (v.rows == 1) {  // biases and betas
        for (std::size_t i = 0; i < v.size(); ++i) p[i] = Scalar(0);
      } else {
        const double limit = std::sqrt(6.0 / static_cast<double>(v.rows + v.cols));
        for (std::size_t i = 0; i < v.size(); ++i)
          p[i] = static_cast<Scalar>(rng.uniform(-limit, limit));
      }
    }
  }

  void build_positional() {
    const std::size_t H = cfg_.hidden;
    positional_.assign(cfg_.max_len * H, Scalar(0));
    for (std::size_t t = 0; t < cfg_.max_len; ++t) {
      for (std::size_t i = 0; i * 2 < H; ++i) {
        const double angle =
            static_cast<double>(t) /
            std::pow(10000.0, 2.0 * static_cast<double>(i) /
                                  static_cast<double>(H));
        positional_[t * H + 2 * i] = static_cast<Scalar>(std::sin(angle));
        if (2 * i + 1 < H)
          positional_[t * H + 2 * i + 1] = static_cast<Scalar>(std::cos(angle));
      }
    }
  }

  void check_sequence(const TokenSequence& seq) const {
    if (seq.ids.size() != cfg_.max_len)
      throw ContractError("sequence length " + std::to_string(seq.ids.size()) +
                          " does not match max_len " +
                          std::to_string(cfg_.max_len));
    if (seq.n_real == 0 || seq.n_real > cfg_.max_len)
      throw ContractError("n_real out of range");
    for (std::size_t t = 0; t < seq.n_real; ++t)
      if (seq.ids[t] >= cfg_.vocab_size)
        throw ContractError("token id " + std::to_string(seq.ids[t]) +
                            " outside vocab");
  }

  void check_batch(const std::vector<const TokenSequence*>& batch,
                   const std::vector<int>& labels) const {
    if (batch.empty()) throw DataError("empty batch");
    if (batch.size() != labels.size())
      throw ContractError("batch/label length mismatch");
    for (int y : labels)
      if (y != 0 && y != 1) throw ContractError("label must be 0 or 1");
  }

  // y[L x N] = x[L x K] * w[K x N] + b[N]
  static void affine(const Scalar* x, const Scalar* w, const Scalar* b,
                     Scalar* y, std::size_t L, std::size_t K, std::size_t N) {
    for (std::size_t i = 0; i < L; ++i) {
      Scalar* yr = y + i * N;
      for (std::size_t n = 0; n < N; ++n) yr[n] = b ? b[n] : Scalar(0);
      const Scalar* xr = x + i * K;
      for (std::size_t k = 0; k < K; ++k) {
        const Scalar xv = xr[k];
        const Scalar* wr = w + k * N;
        for (std::size_t n = 0; n < N; ++n) yr[n] += xv * wr[n];
      }
    }
  }

  // gw[K x N] += x^T dy ; gb[N] += column sums of dy
  static void affine_grad_w(const Scalar* x, const Scalar* dy, Scalar* gw,
                            Scalar* gb, std::size_t L, std::size_t K,
                            std::size_t N) {
    for (std::size_t i = 0; i < L; ++i) {
      const Scalar* xr = x + i * K;
      const Scalar* dr = dy + i * N;
      for (std::size_t k = 0; k < K; ++k) {
        const Scalar xv = xr[k];
        Scalar* gr = gw + k * N;
        for (std::size_t n = 0; n < N; ++n) gr[n] += xv * dr[n];
      }
      if (gb)
        for (std::size_t n = 0; n < N; ++n) gb[n] += dr[n];
    }
  }

  // dx[L x K] += dy[L x N] * w^T
  static void affine_grad_x(const Scalar* dy, const Scalar* w, Scalar* dx,
                            std::size_t L, std::size_t K, std::size_t N) {
    for (std::size_t i = 0; i < L; ++i) {
      const Scalar* dr = dy + i * N;
      Scalar* xr = dx + i * K;
      for (std::size_t k = 0; k < K; ++k) {
        const Scalar* wr = w + k * N;
        Scalar acc(0);
        for (std::size_t n = 0; n < N; ++n) acc += dr[n] * wr[n];
        xr[k] += acc;
      }
    }
  }

  static constexpr double kLnEps = 1e-5;

  // y = gamma * (x - mean)/sqrt(var + eps) + beta, per row.
  void layernorm_forward(const Vec& x, const ParamView& g, const ParamView& b,
                         std::size_t L, Vec& y, Vec& xhat, Vec& inv_std) const {
    const std::size_t H = cfg_.hidden;
    const Scalar* gamma = params_.data() + g.offset;
    const Scalar* beta = params_.data() + b.offset;
    y.resize(L * H);
    xhat.resize(L * H);
    inv_std.resize(L);
    for (std::size_t i = 0; i < L; ++i) {
      const Scalar* xr = x.data() + i * H;
      double mean = 0.0;
      for (std::size_t d = 0; d < H; ++d) mean += static_cast<double>(xr[d]);
      mean /= static_cast<double>(H);
      double var = 0.0;
      for (std::size_t d = 0; d < H; ++d) {
        const double dx = static_cast<double>(xr[d]) - mean;
        var += dx * dx;
      }
      var /= static_cast<double>(H);
      const double is = 1.0 / std::sqrt(var + kLnEps);
      inv_std[i] = static_cast<Scalar>(is);
      for (std::size_t d = 0; d < H; ++d) {
        const Scalar xh = static_cast<Scalar>(
            (static_cast<double>(xr[d]) - mean) * is);
        xhat[i * H + d] = xh;
        y[i * H + d] = gamma[d] * xh + beta[d];
      }
    }
  }

  void layernorm_backward(const Vec& dy, const Vec& xhat, const Vec& inv_std,
                          const ParamView& g, const ParamView& b,
                          std::size_t L, Vec& dx, Vec& grad) const {
    const std::size_t H = cfg_.hidden;
    const Scalar* gamma = params_.data() + g.offset;
    Scalar* dgamma = grad.data() + g.offset;
    Scalar* dbeta = grad.data() + b.offset;
    dx.assign(L * H, Scalar(0));
    for (std::size_t i = 0; i < L; ++i) {
      const Scalar* dyr = dy.data() + i * H;
      const Scalar* xhr = xhat.data() + i * H;
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (std::size_t d = 0; d < H; ++d) {
        dgamma[d] += dyr[d] * xhr[d];
        dbeta[d] += dyr[d];
        const double dxh = static_cast<double>(dyr[d]) *
                           static_cast<double>(gamma[d]);
        sum_dxhat += dxh;
        sum_dxhat_xhat += dxh * static_cast<double>(xhr[d]);
      }
      const double invn = 1.0 / static_cast<double>(H);
      const double is = static_cast<double>(inv_std[i]);
      Scalar* dxr = dx.data() + i * H;
      for (std::size_t d = 0; d < H; ++d) {
        const double dxh = static_cast<double>(dyr[d]) *
                           static_cast<double>(gamma[d]);
        dxr[d] = static_cast<Scalar>(
            is * (dxh - invn * sum_dxhat -
                  static_cast<double>(xhr[d]) * invn * sum_dxhat_xhat));
      }
    }
  }

  // Dropout keeps a unit with probability 1-p and scales it by 1/(1-p); the
  // cached mask holds the applied scale factors so backward reuses them.
  void apply_dropout(Vec& x, Vec& mask, Rng* rng) const {
    if (rng == nullptr || cfg_.dropout <= 0.0) {
      mask.clear();
      return;
    }
    const Scalar keep_scale = static_cast<Scalar>(1.0 / (1.0 - cfg_.dropout));
    mask.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      mask[i] = rng->uniform() < cfg_.dropout ? Scalar(0) : keep_scale;
      x[i] *= mask[i];
    }
  }

  Vec layer_forward(std::size_t l, const Vec& x, std::size_t L,
                    LayerCache& c, Rng* dropout_rng) const {
    const std::size_t H = cfg_.hidden, F = cfg_.ffn, NH = cfg_.n_heads;
    const std::size_t Dh = H / NH;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(Dh));
    const auto& lv = layer_views_[l];
    const Scalar* P = params_.data();

    c.x_in = x;
    c.q.resize(L * H);
    c.k.resize(L * H);
    c.v.resize(L * H);
    affine(x.data(), P + lv[kWq].offset, P + lv[kBq].offset, c.q.data(), L, H, H);
    affine(x.data(), P + lv[kWk].offset, P + lv[kBk].offset, c.k.data(), L, H, H);
    affine(x.data(), P + lv[kWv].offset, P + lv[kBv].offset, c.v.data(), L, H, H);

    // attn holds (head, query, key) probabilities; keys beyond the allowed
    // window stay zero.
    c.attn.assign(NH * L * L, Scalar(0));
    c.ctx.assign(L * H, Scalar(0));
    const bool causal = cfg_.attention == AttentionMode::causal;
    std::vector<double> scores(L);
    for (std::size_t h = 0; h < NH; ++h) {
      const std::size_t hd = h * Dh;
      for (std::size_t i = 0; i < L; ++i) {
        const std::size_t jmax = causal ? i : L - 1;
        const Scalar* qi = c.q.data() + i * H + hd;
        double best = -1e300;
        for (std::size_t j = 0; j <= jmax; ++j) {
          const Scalar* kj = c.k.data() + j * H + hd;
          double s = 0.0;
          for (std::size_t d = 0; d < Dh; ++d)
            s += static_cast<double>(qi[d]) * static_cast<double>(kj[d]);
          scores[j] = s * inv_sqrt_dh;
          best = std::max(best, scores[j]);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j <= jmax; ++j) {
          scores[j] = std::exp(scores[j] - best);
          denom += scores[j];
        }
        Scalar* attn_row = c.attn.data() + (h * L + i) * L;
        Scalar* ctx_row = c.ctx.data() + i * H + hd;
        for (std::size_t j = 0; j <= jmax; ++j) {
          const Scalar p = static_cast<Scalar>(scores[j] / denom);
          attn_row[j] = p;
          const Scalar* vj = c.v.data() + j * H + hd;
          for (std::size_t d = 0; d < Dh; ++d) ctx_row[d] += p * vj[d];
        }
      }
    }

    Vec a(L * H);
    affine(c.ctx.data(), P + lv[kWo].offset, P + lv[kBo].offset, a.data(), L, H, H);
    apply_dropout(a, c.mask_attn, dropout_rng);

    Vec r1(L * H);
    for (std::size_t i = 0; i < L * H; ++i) r1[i] = x[i] + a[i];
    layernorm_forward(r1, lv[kLn1G], lv[kLn1B], L, c.x1, c.ln1_xhat,
                      c.ln1_inv_std);

    c.ffn_u.resize(L * F);
    affine(c.x1.data(), P + lv[kW1].offset, P + lv[kB1].offset, c.ffn_u.data(),
           L, H, F);
    c.ffn_g.resize(L * F);
    for (std::size_t i = 0; i < L * F; ++i)
      c.ffn_g[i] = static_cast<Scalar>(
          detail::gelu(static_cast<double>(c.ffn_u[i])));

    Vec fo(L * H);
    affine(c.ffn_g.data(), P + lv[kW2].offset, P + lv[kB2].offset, fo.data(),
           L, F, H);
    apply_dropout(fo, c.mask_ffn, dropout_rng);

    Vec r2(L * H);
    for (std::size_t i = 0; i < L * H; ++i) r2[i] = c.x1[i] + fo[i];
    Vec out;
    layernorm_forward(r2, lv[kLn2G], lv[kLn2B], L, out, c.ln2_xhat,
                      c.ln2_inv_std);
    return out;
  }

  void backward(const TokenSequence& seq, const ForwardCache& cache,
                const std::array<double, 2>& dlogits, Vec& grad) const {
    const std::size_t L = cache.len, H = cfg_.hidden;
    const Scalar* P = params_.data();

    // Head.
    const Scalar* pooled = cache.x_final.data() + cache.pool_idx * H;
    Scalar* ghw = grad.data() + view_head_w_.offset;
    Scalar* ghb = grad.data() + view_head_b_.offset;
    const Scalar* hw = P + view_head_w_.offset;
    Vec dx(L * H, Scalar(0));
    Scalar* dpool = dx.data() + cache.pool_idx * H;
    for (std::size_t c = 0; c < 2; ++c) {
      const Scalar dl = static_cast<Scalar>(dlogits[c]);
      ghb[c] += dl;
      for (std::size_t d = 0; d < H; ++d) {
        ghw[d * 2 + c] += pooled[d] * dl;
        dpool[d] += hw[d * 2 + c] * dl;
      }
    }

    for (std::size_t l = cfg_.n_layers; l-- > 0;)
      dx = layer_backward(l, cache.layers[l], dx, L, grad);

    // Embedding rows (positions are fixed, no gradient).
    Scalar* gemb = grad.data() + view_tok_emb_.offset;
    for (std::size_t t = 0; t < L; ++t) {
      Scalar* row = gemb + static_cast<std::size_t>(seq.ids[t]) * H;
      const Scalar* dxr = dx.data() + t * H;
      for (std::size_t d = 0; d < H; ++d) row[d] += dxr[d];
    }
  }

  Vec layer_backward(std::size_t l, const LayerCache& c, const Vec& dout,
                     std::size_t L, Vec& grad) const {
    const std::size_t H = cfg_.hidden, F = cfg_.ffn, NH = cfg_.n_heads;
    const std::size_t Dh = H / NH;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(Dh));
    const auto& lv = layer_views_[l];
    const Scalar* P = params_.data();

    // LN2 -> residual split.
    Vec dr2;
    layernorm_backward(dout, c.ln2_xhat, c.ln2_inv_std, lv[kLn2G], lv[kLn2B],
                       L, dr2, grad);
    Vec dfo = dr2;  // branch into FFN output
    if (!c.mask_ffn.empty())
      for (std::size_t i = 0; i < dfo.size(); ++i) dfo[i] *= c.mask_ffn[i];

    // FFN.
    Vec dg(L * F, Scalar(0));
    affine_grad_x(dfo.data(), P + lv[kW2].offset, dg.data(), L, F, H);
    affine_grad_w(c.ffn_g.data(), dfo.data(), grad.data() + lv[kW2].offset,
                  grad.data() + lv[kB2].offset, L, F, H);
    Vec du(L * F);
    for (std::size_t i = 0; i < L * F; ++i)
      du[i] = static_cast<Scalar>(
          static_cast<double>(dg[i]) *
          detail::gelu_grad(static_cast<double>(c.ffn_u[i])));
    Vec dx1 = dr2;  // residual path
    affine_grad_x(du.data(), P + lv[kW1].offset, dx1.data(), L, H, F);
    affine_grad_w(c.x1.data(), du.data(), grad.data() + lv[kW1].offset,
                  grad.data() + lv[kB1].offset, L, H, F);

    // LN1 -> residual split.
    Vec dr1;
    layernorm_backward(dx1, c.ln1_xhat, c.ln1_inv_std, lv[kLn1G], lv[kLn1B],
                       L, dr1, grad);
    Vec da = dr1;
    if (!c.mask_attn.empty())
      for (std::size_t i = 0; i < da.size(); ++i) da[i] *= c.mask_attn[i];

    // Output projection.
    Vec dctx(L * H, Scalar(0));
    affine_grad_x(da.data(), P + lv[kWo].offset, dctx.data(), L, H, H);
    affine_grad_w(c.ctx.data(), da.data(), grad.data() + lv[kWo].offset,
                  grad.data() + lv[kBo].offset, L, H, H);

    // Attention core.
    const bool causal = cfg_.attention == AttentionMode::causal;
    Vec dq(L * H, Scalar(0)), dk(L * H, Scalar(0)), dv(L * H, Scalar(0));
    std::vector<double> dp(L);
    for (std::size_t h = 0; h < NH; ++h) {
      const std::size_t hd = h * Dh;
      for (std::size_t i = 0; i < L; ++i) {
        const std::size_t jmax = causal ? i : L - 1;
        const Scalar* attn_row = c.attn.data() + (h * L + i) * L;
        const Scalar* dctx_row = dctx.data() + i * H + hd;
        double dot_pd = 0.0;
        for (std::size_t j = 0; j <= jmax; ++j) {
          const Scalar* vj = c.v.data() + j * H + hd;
          double acc = 0.0;
          for (std::size_t d = 0; d < Dh; ++d)
            acc += static_cast<double>(dctx_row[d]) * static_cast<double>(vj[d]);
          dp[j] = acc;
          dot_pd += static_cast<double>(attn_row[j]) * acc;
          Scalar* dvj = dv.data() + j * H + hd;
          for (std::size_t d = 0; d < Dh; ++d)
            dvj[d] += attn_row[j] * dctx_row[d];
        }
        const Scalar* qi = c.q.data() + i * H + hd;
        Scalar* dqi = dq.data() + i * H + hd;
        for (std::size_t j = 0; j <= jmax; ++j) {
          const double ds = static_cast<double>(attn_row[j]) *
                            (dp[j] - dot_pd) * inv_sqrt_dh;
          const Scalar dss = static_cast<Scalar>(ds);
          const Scalar* kj = c.k.data() + j * H + hd;
          Scalar* dkj = dk.data() + j * H + hd;
          for (std::size_t d = 0; d < Dh; ++d) {
            dqi[d] += dss * kj[d];
            dkj[d] += dss * qi[d];
          }
        }
      }
    }

    // Project back to the layer input; three linear maps plus the residual.
    Vec dx = dr1;  // residual from attention block
    affine_grad_x(dq.data(), P + lv[kWq].offset, dx.data(), L, H, H);
    affine_grad_x(dk.data(), P + lv[kWk].offset, dx.data(), L, H, H);
    affine_grad_x(dv.data(), P + lv[kWv].offset, dx.data(), L, H, H);
    affine_grad_w(c.x_in.data(), dq.data(), grad.data() + lv[kWq].offset,
                  grad.data() + lv[kBq].offset, L, H, H);
    affine_grad_w(c.x_in.data(), dk.data(), grad.data() + lv[kWk].offset,
                  grad.data() + lv[kBk].offset, L, H, H);
    affine_grad_w(c.x_in.data(), dv.data(), grad.data() + lv[kWv].offset,
                  grad.data() + lv[kBv].offset, L, H, H);
    return dx;
  }
};

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t n_checked = 0;
};

// Central finite differences against the analytic gradient, in double
// precision end to end. Checks a random subsample of parameters; rel error
// uses a floor so near-zero gradients compare by absolute difference.
template <typename Scalar>
inline GradCheckResult gradient_check(
    const TransformerClassifier<Scalar>& model,
    const std::vector<TokenSequence>& batch, const std::vector<Label>& labels,
    std::size_t n_samples, std::uint64_t seed) {
  TransformerClassifier<double> m = model.template cast<double>();
  std::vector<const TokenSequence*> ptrs;
  std::vector<int> ys;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ptrs.push_back(&batch[i]);
    ys.push_back(labels[i] == Label::malicious ? 1 : 0);
  }
  std::vector<double> grad(m.n_params(), 0.0);
  m.loss_and_gradient(ptrs, ys, grad);

  std::vector<std::size_t> order(m.n_params());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t n = std::min(n_samples, order.size());

  constexpr double h = 1e-5;
  GradCheckResult result;
  result.n_checked = n;
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t idx = order[s];
    const double saved = m.params()[idx];
    m.params()[idx] = saved + h;
    const double up = m.batch_loss(ptrs, ys);
    m.params()[idx] = saved - h;
    const double down = m.batch_loss(ptrs, ys);
    m.params()[idx] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double analytic = grad[idx];
    const double denom =
        std::max({std::fabs(analytic), std::fabs(numeric), 1e-4});
    result.max_rel_error =
        std::max(result.max_rel_error, std::fabs(analytic - numeric) / denom);
  }
  return result;
}

}  // namespace pulse

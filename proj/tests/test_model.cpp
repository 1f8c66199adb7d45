#include <catch2/catch_amalgamated.hpp>

#include "pulse/checkpoint.hpp"
#include "pulse/model.hpp"
#include "pulse/rng.hpp"
#include "pulse/train.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "test_util.hpp"

using namespace pulse;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.vocab_size = 8;
  cfg.n_layers = 1;
  cfg.hidden = 8;
  cfg.n_heads = 2;
  cfg.ffn = 16;
  cfg.max_len = 6;
  cfg.init_seed = 3;
  return cfg;
}

TokenSequence make_seq(std::vector<std::uint32_t> ids, std::size_t max_len,
                       std::uint32_t pad = kPadId) {
  TokenSequence seq;
  seq.n_real = ids.size();
  seq.ids = std::move(ids);
  seq.ids.resize(max_len, pad);
  seq.attention_mask.assign(max_len, 0);
  for (std::size_t i = 0; i < seq.n_real; ++i) seq.attention_mask[i] = 1;
  return seq;
}

TokenSequence random_seq(Rng& rng, const ModelConfig& cfg) {
  const std::size_t len = 2 + rng.index(cfg.max_len - 1);
  std::vector<std::uint32_t> ids(len);
  for (auto& id : ids)
    id = static_cast<std::uint32_t>(rng.index(cfg.vocab_size));
  return make_seq(std::move(ids), cfg.max_len);
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

TEST_CASE("model config validation catches inconsistent shapes") {
  ModelConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());

  ModelConfig bad = cfg;
  bad.hidden = 10;
  bad.n_heads = 4;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.vocab_size = 4;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.max_len = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.dropout = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.dropout = -0.1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.n_layers = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("attention mode and pooling must agree") {
  ModelConfig cfg = tiny_config();
  cfg.attention = AttentionMode::causal;
  cfg.pooling = Pooling::first_token;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.pooling = Pooling::last_token;
  CHECK_NOTHROW(cfg.validate());

  cfg.attention = AttentionMode::bidirectional;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.pooling = Pooling::first_token;
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("model config JSON round-trips") {
  ModelConfig cfg = tiny_config();
  cfg.attention = AttentionMode::causal;
  cfg.pooling = Pooling::last_token;
  cfg.dropout = 0.25;
  cfg.init_seed = 99;
  const ModelConfig r = ModelConfig::from_json(cfg.to_json());
  CHECK(r == cfg);
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

TEST_CASE("layout is contiguous and its total is exact") {
  const TransformerClassifier<float> m(tiny_config());
  // By hand: tok_emb 8*8=64; attention 4*(64+8)=288; ln1 16; ffn.w1 128 +
  // b1 16 + w2 128 + b2 8 = 280; ln2 16; head 16+2=18. Total 682.
  CHECK(m.n_params() == 682);
  CHECK(m.params().size() == 682);

  std::size_t expected_off = 0;
  for (const ParamView& v : m.layout()) {
    CHECK(v.offset == expected_off);
    expected_off += v.size();
  }
  CHECK(expected_off == m.n_params());

  CHECK(m.view("tok_emb").rows == 8);
  CHECK(m.view("tok_emb").cols == 8);
  CHECK(m.view("layer0.attn.wq").rows == 8);
  CHECK(m.view("layer0.ffn.w1").cols == 16);
  CHECK(m.view("layer0.ffn.w2").rows == 16);
  CHECK(m.view("head.w").rows == 8);
  CHECK(m.view("head.w").cols == 2);
  CHECK(m.view("head.b").size() == 2);
  CHECK_THROWS_AS(m.view("layer1.attn.wq"), ContractError);
  CHECK_THROWS_AS(m.view("nonsense"), ContractError);
}

TEST_CASE("initialization is a pure function of the seed") {
  ModelConfig cfg = tiny_config();
  const TransformerClassifier<float> a(cfg);
  const TransformerClassifier<float> b(cfg);
  CHECK(a.params() == b.params());

  cfg.init_seed = 4;
  const TransformerClassifier<float> c(cfg);
  CHECK(a.params() != c.params());
}

TEST_CASE("initialization fills gammas with one, biases with zero") {
  const TransformerClassifier<float> m(tiny_config());
  const auto& p = m.params();
  for (const ParamView& v : m.layout()) {
    if (v.name.find("gamma") != std::string::npos) {
      for (std::size_t i = 0; i < v.size(); ++i) CHECK(p[v.offset + i] == 1.0f);
    } else if (v.rows == 1) {
      for (std::size_t i = 0; i < v.size(); ++i) CHECK(p[v.offset + i] == 0.0f);
    } else {
      const float limit =
          std::sqrt(6.0f / static_cast<float>(v.rows + v.cols));
      bool any_nonzero = false;
      for (std::size_t i = 0; i < v.size(); ++i) {
        CHECK(std::fabs(p[v.offset + i]) <= limit);
        any_nonzero = any_nonzero || p[v.offset + i] != 0.0f;
      }
      CHECK(any_nonzero);
    }
  }
}

// ---------------------------------------------------------------------------
// Forward invariants
// ---------------------------------------------------------------------------

TEST_CASE("class probabilities are a softmax") {
  const TransformerClassifier<double> m(tiny_config());
  Rng rng(555);
  for (int t = 0; t < 20; ++t) {
    const TokenSequence seq = random_seq(rng, m.config());
    const std::array<double, 2> probs = m.probabilities(seq);
    CHECK(probs[0] > 0.0);
    CHECK(probs[1] > 0.0);
    CHECK(std::fabs(probs[0] + probs[1] - 1.0) < 1e-12);
  }
}

TEST_CASE("attention rows are normalized and masked rows stay zero") {
  for (const bool causal : {false, true}) {
    ModelConfig cfg = tiny_config();
    if (causal) {
      cfg.attention = AttentionMode::causal;
      cfg.pooling = Pooling::last_token;
    }
    const TransformerClassifier<double> m(cfg);
    Rng rng(99);
    const TokenSequence seq = random_seq(rng, cfg);
    TransformerClassifier<double>::ForwardCache cache;
    m.forward(seq, cache);
    const std::size_t L = cache.len;
    const std::size_t NH = cfg.n_heads;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const auto& attn = cache.layers[l].attn;
      REQUIRE(attn.size() == NH * L * L);
      for (std::size_t h = 0; h < NH; ++h) {
        for (std::size_t i = 0; i < L; ++i) {
          const std::size_t jmax = causal ? i : L - 1;
          double sum = 0.0;
          for (std::size_t j = 0; j < L; ++j) {
            const double p = attn[(h * L + i) * L + j];
            if (j <= jmax) {
              CHECK(p >= 0.0);
              sum += p;
            } else {
              CHECK(p == 0.0);  // outside the allowed window: never computed
            }
          }
          CHECK(std::fabs(sum - 1.0) < 1e-12);
        }
      }
    }
  }
}

TEST_CASE("padding content cannot influence the output at all") {
  const TransformerClassifier<double> m(tiny_config());
  Rng rng(123);
  for (int t = 0; t < 30; ++t) {
    std::vector<std::uint32_t> ids(2 + rng.index(4));
    for (auto& id : ids)
      id = static_cast<std::uint32_t>(rng.index(m.config().vocab_size));
    const TokenSequence clean = make_seq(ids, m.config().max_len, kPadId);
    // Same real prefix, garbage in the tail.
    const TokenSequence dirty = make_seq(ids, m.config().max_len, 7);
    const auto pa = m.probabilities(clean);
    const auto pb = m.probabilities(dirty);
    CHECK(pa[0] == pb[0]);  // bitwise: padding is never read
    CHECK(pa[1] == pb[1]);
  }
}

TEST_CASE("causal states depend only on the prefix") {
  ModelConfig cfg = tiny_config();
  cfg.attention = AttentionMode::causal;
  cfg.pooling = Pooling::last_token;
  const TransformerClassifier<double> m(cfg);

  const TokenSequence a = make_seq({2, 5, 6, 3}, cfg.max_len);
  const TokenSequence b = make_seq({2, 5, 7, 3}, cfg.max_len);  // differs at 2
  const auto ha = m.hidden_states(a);
  const auto hb = m.hidden_states(b);
  REQUIRE(ha.size() == 4);
  REQUIRE(hb.size() == 4);
  // Positions before the edit see identical history: bitwise-equal states.
  CHECK(ha[0] == hb[0]);
  CHECK(ha[1] == hb[1]);
  // The edited position (and everything after) diverges.
  CHECK(ha[2] != hb[2]);
  CHECK(ha[3] != hb[3]);

  // Bidirectional attention mixes the whole sequence, so even position 0
  // changes.
  const TransformerClassifier<double> bi(tiny_config());
  const auto ba = bi.hidden_states(a);
  const auto bb = bi.hidden_states(b);
  CHECK(ba[0] != bb[0]);
}

TEST_CASE("per-example probabilities ignore batch composition") {
  const TransformerClassifier<double> m(tiny_config());
  Rng rng(31);
  const TokenSequence s1 = random_seq(rng, m.config());
  const TokenSequence s2 = random_seq(rng, m.config());
  const TokenSequence s3 = random_seq(rng, m.config());
  // Evaluating alone or inside any batch is the same code path per example.
  const auto alone = m.probabilities(s2);
  const double l_a = m.batch_loss({&s1, &s2, &s3}, {0, 1, 0});
  const double l_b = m.batch_loss({&s3, &s1, &s2}, {0, 0, 1});
  const auto again = m.probabilities(s2);
  CHECK(alone == again);
  CHECK(std::fabs(l_a - l_b) < 1e-12);
}

TEST_CASE("batch order leaves loss and gradient unchanged") {
  const TransformerClassifier<double> m(tiny_config());
  Rng rng(77);
  std::vector<TokenSequence> seqs;
  for (int i = 0; i < 6; ++i) seqs.push_back(random_seq(rng, m.config()));
  const std::vector<int> ys = {0, 1, 1, 0, 1, 0};

  std::vector<const TokenSequence*> fwd, rev;
  std::vector<int> ys_rev;
  for (std::size_t i = 0; i < seqs.size(); ++i) fwd.push_back(&seqs[i]);
  for (std::size_t i = seqs.size(); i-- > 0;) {
    rev.push_back(&seqs[i]);
    ys_rev.push_back(ys[i]);
  }

  std::vector<double> g1(m.n_params(), 0.0), g2(m.n_params(), 0.0);
  const double l1 = m.loss_and_gradient(fwd, ys, g1);
  const double l2 = m.loss_and_gradient(rev, ys_rev, g2);
  CHECK(std::fabs(l1 - l2) < 1e-12);
  double max_diff = 0.0;
  for (std::size_t i = 0; i < g1.size(); ++i)
    max_diff = std::max(max_diff, std::fabs(g1[i] - g2[i]));
  CHECK(max_diff < 1e-12);
}

TEST_CASE("batch loss equals the hand-computed cross entropy") {
  const TransformerClassifier<double> m(tiny_config());
  Rng rng(8);
  std::vector<TokenSequence> seqs;
  for (int i = 0; i < 5; ++i) seqs.push_back(random_seq(rng, m.config()));
  const std::vector<int> ys = {1, 0, 1, 1, 0};
  std::vector<const TokenSequence*> ptrs;
  for (const auto& s : seqs) ptrs.push_back(&s);

  double expected = 0.0;
  for (std::size_t i = 0; i < seqs.size(); ++i)
    expected += -std::log(m.probabilities(seqs[i])[static_cast<std::size_t>(ys[i])]);
  expected /= static_cast<double>(seqs.size());
  CHECK(std::fabs(m.batch_loss(ptrs, ys) - expected) < 1e-12);
}

TEST_CASE("classify reports the argmax class with ties to benign") {
  const TransformerClassifier<double> m(tiny_config());
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const TokenSequence seq = random_seq(rng, m.config());
    const FunctionVerdict v = m.classify(seq);
    CHECK(v.probs[0] + v.probs[1] == Catch::Approx(1.0).epsilon(1e-12));
    if (v.probs[1] > v.probs[0]) {
      CHECK(v.label == Label::malicious);
      CHECK(v.probability == v.probs[1]);
    } else {
      CHECK(v.label == Label::benign);
      CHECK(v.probability == v.probs[0]);
    }
  }
}

TEST_CASE("malformed sequences violate the forward contract") {
  const TransformerClassifier<double> m(tiny_config());
  TokenSequence short_seq = make_seq({2, 3}, 4);  // max_len is 6
  CHECK_THROWS_AS(m.probabilities(short_seq), ContractError);

  TokenSequence zero = make_seq({2, 3}, 6);
  zero.n_real = 0;
  CHECK_THROWS_AS(m.probabilities(zero), ContractError);

  TokenSequence big_id = make_seq({2, 200}, 6);
  CHECK_THROWS_AS(m.probabilities(big_id), ContractError);

  CHECK_THROWS_AS(m.batch_loss({}, {}), DataError);
  const TokenSequence ok = make_seq({2, 3}, 6);
  CHECK_THROWS_AS(m.batch_loss({&ok}, {0, 1}), ContractError);
  CHECK_THROWS_AS(m.batch_loss({&ok}, {2}), ContractError);
}

TEST_CASE("dropout is seed-deterministic and changes the output") {
  ModelConfig cfg = tiny_config();
  cfg.dropout = 0.5;
  const TransformerClassifier<double> m(cfg);
  const TokenSequence seq = make_seq({2, 5, 6, 3}, cfg.max_len);

  TransformerClassifier<double>::ForwardCache c1, c2, c3;
  Rng r1(100), r2(100), r3(101);
  m.forward(seq, c1, &r1);
  m.forward(seq, c2, &r2);
  m.forward(seq, c3, &r3);
  CHECK(c1.probs == c2.probs);  // same stream, same masks
  // A different stream almost surely drops different units.
  CHECK(c1.probs != c3.probs);

  // Inference (no rng) ignores dropout entirely.
  TransformerClassifier<double>::ForwardCache clean;
  m.forward(seq, clean);
  ModelConfig no_drop = cfg;
  no_drop.dropout = 0.0;
  const TransformerClassifier<double> plain(no_drop);
  TransformerClassifier<double>::ForwardCache plain_cache;
  plain.forward(seq, plain_cache);
  CHECK(clean.probs == plain_cache.probs);
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

TEST_CASE("analytic gradients match central finite differences") {
  ModelConfig cfg;
  cfg.vocab_size = 10;
  cfg.n_layers = 2;
  cfg.hidden = 8;
  cfg.n_heads = 2;
  cfg.ffn = 16;
  cfg.max_len = 8;
  cfg.init_seed = 12;
  const TransformerClassifier<double> m(cfg);

  Rng rng(2024);
  std::vector<TokenSequence> batch;
  std::vector<Label> labels;
  for (int i = 0; i < 4; ++i) {
    batch.push_back(random_seq(rng, cfg));
    labels.push_back(i % 2 == 0 ? Label::benign : Label::malicious);
  }
  const GradCheckResult res = gradient_check(m, batch, labels, 400, 5);
  CHECK(res.n_checked == 400);
  CHECK(res.max_rel_error <= 1e-4);
}

TEST_CASE("causal gradients also match finite differences") {
  ModelConfig cfg;
  cfg.vocab_size = 9;
  cfg.n_layers = 1;
  cfg.hidden = 8;
  cfg.n_heads = 4;
  cfg.ffn = 12;
  cfg.max_len = 6;
  cfg.attention = AttentionMode::causal;
  cfg.pooling = Pooling::last_token;
  cfg.init_seed = 21;
  const TransformerClassifier<double> m(cfg);

  Rng rng(77);
  std::vector<TokenSequence> batch;
  std::vector<Label> labels;
  for (int i = 0; i < 3; ++i) {
    batch.push_back(random_seq(rng, cfg));
    labels.push_back(i % 2 == 1 ? Label::benign : Label::malicious);
  }
  const GradCheckResult res = gradient_check(m, batch, labels, 300, 6);
  CHECK(res.max_rel_error <= 1e-4);
}

TEST_CASE("gradient buffer size is enforced") {
  const TransformerClassifier<double> m(tiny_config());
  const TokenSequence seq = make_seq({2, 3}, 6);
  std::vector<double> small(3, 0.0);
  CHECK_THROWS_AS(m.loss_and_gradient({&seq}, {0}, small), ContractError);
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

TEST_CASE("Adam follows the bias-corrected update rule") {
  TrainOptions opt;
  opt.learning_rate = 0.1;
  opt.beta1 = 0.9;
  opt.beta2 = 0.999;
  opt.epsilon = 1e-8;

  Adam<double> adam(2, opt);
  std::vector<double> p = {1.0, -2.0};
  const std::vector<std::vector<double>> grads = {
      {0.5, -1.0}, {0.25, 0.5}, {-0.75, 0.0}};

  // Independent replay of the textbook recurrence.
  std::vector<double> ref = p, m(2, 0.0), v(2, 0.0);
  for (std::size_t t = 0; t < grads.size(); ++t) {
    adam.step(p, grads[t]);
    for (std::size_t i = 0; i < 2; ++i) {
      m[i] = opt.beta1 * m[i] + (1 - opt.beta1) * grads[t][i];
      v[i] = opt.beta2 * v[i] + (1 - opt.beta2) * grads[t][i] * grads[t][i];
      const double mhat = m[i] / (1 - std::pow(opt.beta1, double(t + 1)));
      const double vhat = v[i] / (1 - std::pow(opt.beta2, double(t + 1)));
      ref[i] -= opt.learning_rate * mhat / (std::sqrt(vhat) + opt.epsilon);
    }
    for (std::size_t i = 0; i < 2; ++i)
      CHECK(p[i] == Catch::Approx(ref[i]).margin(1e-15));
  }
  CHECK(adam.steps() == 3);

  std::vector<double> wrong(3, 0.0);
  CHECK_THROWS_AS(adam.step(wrong, wrong), ContractError);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

struct ToyData {
  std::vector<TokenSequence> train_x, val_x;
  std::vector<Label> train_y, val_y;
};

// Separable two-pattern task: class decides which content id repeats.
ToyData make_toy(const ModelConfig& cfg, std::size_t n_train,
                 std::size_t n_val) {
  ToyData d;
  Rng rng(1);
  auto emit = [&](std::size_t n, std::vector<TokenSequence>& xs,
                  std::vector<Label>& ys) {
    for (std::size_t i = 0; i < n; ++i) {
      const bool mal = i % 2 == 1;
      const std::uint32_t tok = mal ? 6 : 5;
      const std::size_t body = 2 + rng.index(3);
      std::vector<std::uint32_t> ids = {kClsId};
      for (std::size_t b = 0; b < body; ++b) ids.push_back(tok);
      ids.push_back(kSepId);
      xs.push_back(make_seq(std::move(ids), cfg.max_len));
      ys.push_back(mal ? Label::malicious : Label::benign);
    }
  };
  emit(n_train, d.train_x, d.train_y);
  emit(n_val, d.val_x, d.val_y);
  return d;
}

}  // namespace

TEST_CASE("training solves a separable toy task deterministically") {
  ModelConfig cfg;
  cfg.vocab_size = 8;
  cfg.n_layers = 1;
  cfg.hidden = 16;
  cfg.n_heads = 2;
  cfg.ffn = 32;
  cfg.max_len = 8;
  cfg.init_seed = 5;
  const ToyData d = make_toy(cfg, 40, 10);

  TrainOptions opt;
  opt.epochs = 30;
  opt.batch_size = 8;
  opt.learning_rate = 3e-3;
  opt.seed = 17;

  TransformerClassifier<float> m1(cfg);
  const TrainingReport r1 =
      train_classifier(m1, d.train_x, d.train_y, d.val_x, d.val_y, opt);
  REQUIRE(r1.epochs.size() == 30);
  CHECK(r1.epochs.back().val_accuracy == 1.0);
  CHECK(r1.epochs.back().train_loss < r1.epochs.front().train_loss);
  CHECK(r1.epochs.back().val_loss < 0.2);

  // Same config, data and seed: bitwise-identical parameters and report.
  TransformerClassifier<float> m2(cfg);
  const TrainingReport r2 =
      train_classifier(m2, d.train_x, d.train_y, d.val_x, d.val_y, opt);
  CHECK(m1.params() == m2.params());
  REQUIRE(r2.epochs.size() == r1.epochs.size());
  for (std::size_t e = 0; e < r1.epochs.size(); ++e) {
    CHECK(r1.epochs[e].train_loss == r2.epochs[e].train_loss);
    CHECK(r1.epochs[e].val_loss == r2.epochs[e].val_loss);
    CHECK(r1.epochs[e].val_accuracy == r2.epochs[e].val_accuracy);
  }

  // A different training seed shuffles differently and lands elsewhere.
  TransformerClassifier<float> m3(cfg);
  TrainOptions opt2 = opt;
  opt2.seed = 18;
  train_classifier(m3, d.train_x, d.train_y, d.val_x, d.val_y, opt2);
  CHECK(m1.params() != m3.params());
}

TEST_CASE("training rejects degenerate inputs") {
  ModelConfig cfg = tiny_config();
  const ToyData d = make_toy(cfg, 8, 4);
  TransformerClassifier<float> m(cfg);
  TrainOptions opt;
  opt.epochs = 1;

  CHECK_THROWS_AS(
      train_classifier(m, {}, {}, d.val_x, d.val_y, opt), DataError);
  CHECK_THROWS_AS(
      train_classifier(m, d.train_x, d.train_y, {}, {}, opt), DataError);

  std::vector<Label> all_benign(d.train_y.size(), Label::benign);
  CHECK_THROWS_AS(
      train_classifier(m, d.train_x, all_benign, d.val_x, d.val_y, opt),
      DataError);

  std::vector<Label> short_labels(d.train_y.begin(), d.train_y.end() - 1);
  CHECK_THROWS_AS(
      train_classifier(m, d.train_x, short_labels, d.val_x, d.val_y, opt),
      ContractError);

  TrainOptions bad = opt;
  bad.epochs = 0;
  CHECK_THROWS_AS(
      train_classifier(m, d.train_x, d.train_y, d.val_x, d.val_y, bad),
      ConfigError);
  bad = opt;
  bad.learning_rate = 0.0;
  CHECK_THROWS_AS(
      train_classifier(m, d.train_x, d.train_y, d.val_x, d.val_y, bad),
      ConfigError);
}

// ---------------------------------------------------------------------------
// Casting and checkpoints
// ---------------------------------------------------------------------------

TEST_CASE("float-double-float casting preserves parameters exactly") {
  const TransformerClassifier<float> m(tiny_config());
  const TransformerClassifier<float> round =
      m.cast<double>().cast<float>();
  CHECK(m.params() == round.params());
}

TEST_CASE("checkpoints round-trip bit-for-bit") {
  ModelConfig cfg = tiny_config();
  cfg.init_seed = 7;
  const TransformerClassifier<float> m(cfg);
  testutil::TempDir dir;
  const auto path = dir.path() / "model.ckpt";
  save_checkpoint(m, path);

  const TransformerClassifier<float> r = load_checkpoint(path);
  CHECK(r.config() == m.config());
  CHECK(r.params() == m.params());

  Rng rng(9);
  for (int t = 0; t < 10; ++t) {
    const TokenSequence seq = random_seq(rng, cfg);
    CHECK(m.probabilities(seq) == r.probabilities(seq));
  }

  // Saving twice produces identical bytes.
  const auto path2 = dir.path() / "model2.ckpt";
  save_checkpoint(m, path2);
  CHECK(testutil::read_file(path) == testutil::read_file(path2));
}

TEST_CASE("corrupted checkpoints are rejected") {
  const TransformerClassifier<float> m(tiny_config());
  testutil::TempDir dir;
  const auto path = dir.path() / "model.ckpt";
  save_checkpoint(m, path);
  const std::string good = testutil::read_file(path);

  // Wrong magic.
  testutil::write_file(dir.path() / "bad_magic.ckpt", "NOT_A_CKPT\n" + good);
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "bad_magic.ckpt"), DataError);

  // Truncated blob.
  testutil::write_file(dir.path() / "trunc.ckpt",
                       good.substr(0, good.size() - 10));
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "trunc.ckpt"), DataError);

  // One flipped byte in the blob trips the content hash.
  std::string flipped = good;
  flipped[flipped.size() - 1] =
      static_cast<char>(flipped[flipped.size() - 1] ^ 0x01);
  testutil::write_file(dir.path() / "flip.ckpt", flipped);
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "flip.ckpt"), DataError);

  // Manifest that disagrees with the rebuilt layout.
  const std::size_t header_start = good.find('\n') + 1;
  const std::size_t header_end = good.find('\n', header_start);
  nlohmann::json header =
      nlohmann::json::parse(good.substr(header_start, header_end - header_start));
  header["params"][0]["name"] = "tok_emb_renamed";
  testutil::write_file(
      dir.path() / "manifest.ckpt",
      std::string(kCheckpointMagic) + "\n" + header.dump() + "\n" +
          good.substr(header_end + 1));
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "manifest.ckpt"), DataError);

  CHECK_THROWS_AS(load_checkpoint(dir.path() / "missing.ckpt"), DataError);
}

TEST_CASE("hidden state rows cover exactly the real prefix") {
  const TransformerClassifier<double> m(tiny_config());
  const TokenSequence seq = make_seq({2, 5, 3}, 6);
  const auto rows = m.hidden_states(seq);
  REQUIRE(rows.size() == 3);
  for (const auto& r : rows) CHECK(r.size() == m.config().hidden);
}

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pulse/errors.hpp"
#include "pulse/hash.hpp"
#include "pulse/model.hpp"
#include "pulse/rng.hpp"
#include "pulse/tokenizer.hpp"

namespace pulse {

struct TrainOptions {
  std::size_t epochs = 3;
  std::size_t batch_size = 16;
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw ConfigError("Adam betas must lie in [0, 1)");
  }
};

struct EpochStats {
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainingReport {
  std::vector<EpochStats> epochs;
};

// Bias-corrected Adam over the flat parameter buffer. Moments are kept in
// double regardless of the model scalar so update arithmetic is identical
// across runs.
template <typename Scalar>
class Adam {
 public:
  Adam(std::size_t n_params, const TrainOptions& opt)
      : opt_(opt), m_(n_params, 0.0), v_(n_params, 0.0) {}

  void step(std::vector<Scalar>& params, const std::vector<Scalar>& grad) {
    if (params.size() != m_.size() || grad.size() != m_.size())
      throw ContractError("Adam buffers disagree on parameter count");
    t_ += 1;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = static_cast<double>(grad[i]);
      m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * g;
      v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * g * g;
      const double mhat = m_[i] / bc1;
      const double vhat = v_[i] / bc2;
      params[i] = static_cast<Scalar>(
          static_cast<double>(params[i]) -
          opt_.learning_rate * mhat / (std::sqrt(vhat) + opt_.epsilon));
    }
  }

  std::size_t steps() const { return t_; }

 private:
  TrainOptions opt_;
  std::size_t t_ = 0;
  std::vector<double> m_, v_;
};

namespace detail {

template <typename Scalar>
std::pair<double, double> evaluate_split(
    const TransformerClassifier<Scalar>& model,
    const std::vector<TokenSequence>& xs, const std::vector<Label>& ys) {
  double loss = 0.0;
  std::size_t correct = 0;
  typename TransformerClassifier<Scalar>::ForwardCache cache;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    model.forward(xs[i], cache);
    const std::size_t y = ys[i] == Label::malicious ? 1 : 0;
    loss += -std::log(std::max(cache.probs[y], 1e-300));
    // Ties resolve to benign, matching classify().
    const Label pred =
        cache.probs[1] > cache.probs[0] ? Label::malicious : Label::benign;
    if (pred == ys[i]) ++correct;
  }
  const double n = static_cast<double>(xs.size());
  return {loss / n, static_cast<double>(correct) / n};
}

}  // namespace detail

// Cross-entropy training with per-epoch reshuffling. Both shuffling and
// dropout draw from streams derived from opt.seed, so a (model, data, opt)
// triple fully determines the trained parameters.
template <typename Scalar>
TrainingReport train_classifier(TransformerClassifier<Scalar>& model,
                                const std::vector<TokenSequence>& train_x,
                                const std::vector<Label>& train_y,
                                const std::vector<TokenSequence>& val_x,
                                const std::vector<Label>& val_y,
                                const TrainOptions& opt) {
  opt.validate();
  if (train_x.size() != train_y.size() || val_x.size() != val_y.size())
    throw ContractError("training data and labels differ in length");
  if (train_x.empty()) throw DataError("training set is empty");
  if (val_x.empty()) throw DataError("validation set is empty");
  bool has_benign = false, has_malicious = false;
  for (Label y : train_y)
    (y == Label::benign ? has_benign : has_malicious) = true;
  if (!has_benign || !has_malicious)
    throw DataError("training set holds a single class; nothing to learn");

  Rng shuffle_rng(derive_seed(opt.seed, "train.shuffle"));
  Rng dropout_rng(derive_seed(opt.seed, "train.dropout"));
  Rng* drop = model.config().dropout > 0.0 ? &dropout_rng : nullptr;

  Adam<Scalar> adam(model.n_params(), opt);
  std::vector<Scalar> grad(model.n_params(), Scalar(0));
  std::vector<std::size_t> order(train_x.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainingReport report;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size();
         start += opt.batch_size) {
      const std::size_t end = std::min(start + opt.batch_size, order.size());
      std::vector<const TokenSequence*> batch;
      std::vector<int> ys;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(&train_x[order[i]]);
        ys.push_back(train_y[order[i]] == Label::malicious ? 1 : 0);
      }
      std::fill(grad.begin(), grad.end(), Scalar(0));
      const double loss = model.loss_and_gradient(batch, ys, grad, drop);
      adam.step(model.params(), grad);
      epoch_loss += loss * static_cast<double>(batch.size());
      seen += batch.size();
    }
    EpochStats stats;
    stats.train_loss = epoch_loss / static_cast<double>(seen);
    const auto [vl, va] = detail::evaluate_split(model, val_x, val_y);
    stats.val_loss = vl;
    stats.val_accuracy = va;
    report.epochs.push_back(stats);
  }
  return report;
}

}  // namespace pulse

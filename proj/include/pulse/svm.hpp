#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pulse/errors.hpp"
#include "pulse/model.hpp"
#include "pulse/trace.hpp"

namespace pulse {

// Sample-level decision layer: function verdicts are aggregated into two
// features per sample (percent of functions judged malicious, log10 of the
// function count) and a linear soft-margin SVM separates samples in that
// plane.

// Size buckets for reporting: 1-10, 11-100, 101-1000, 1000+ functions.
enum class SizeClass { c1, c2, c3, c4 };

inline const char* to_string(SizeClass s) {
  switch (s) {
    case SizeClass::c1: return "1-10";
    case SizeClass::c2: return "11-100";
    case SizeClass::c3: return "101-1000";
    default: return "1000+";
  }
}

inline SizeClass size_class_for(std::size_t n_functions) {
  if (n_functions <= 10) return SizeClass::c1;
  if (n_functions <= 100) return SizeClass::c2;
  if (n_functions <= 1000) return SizeClass::c3;
  return SizeClass::c4;
}

struct SampleFeatures {
  std::string sample_id;
  std::size_t n_functions = 0;
  std::size_t n_malicious = 0;
  double malicious_pct = 0.0;  // 0..100
  SizeClass size_class = SizeClass::c1;
  bool degenerate = false;  // no functions survived filtering
};

inline SampleFeatures aggregate_sample(
    const std::vector<FunctionVerdict>& verdicts, std::string sample_id) {
  SampleFeatures f;
  f.sample_id = std::move(sample_id);
  f.n_functions = verdicts.size();
  for (const FunctionVerdict& v : verdicts)
    if (v.label == Label::malicious) ++f.n_malicious;
  f.size_class = size_class_for(f.n_functions);
  if (f.n_functions == 0) {
    f.degenerate = true;
    return f;
  }
  f.malicious_pct = 100.0 * static_cast<double>(f.n_malicious) /
                    static_cast<double>(f.n_functions);
  return f;
}

// Feature vector fed to the SVM. Callers must exclude degenerate samples:
// log10(0) is not a feature.
inline std::array<double, 2> sample_feature_vector(const SampleFeatures& f) {
  if (f.degenerate)
    throw ContractError("degenerate sample has no feature vector: " +
                        f.sample_id);
  return {f.malicious_pct, std::log10(static_cast<double>(f.n_functions))};
}

// Decision surface in standardized feature space, plus the standardization
// constants needed to apply it to raw features.
struct Hyperplane {
  std::array<double, 2> weights{};
  double bias = 0.0;
  std::array<double, 2> feature_mean{};
  std::array<double, 2> feature_std{};

  std::array<double, 2> standardize(const std::array<double, 2>& x) const {
    return {(x[0] - feature_mean[0]) / feature_std[0],
            (x[1] - feature_mean[1]) / feature_std[1]};
  }

  double decision(const std::array<double, 2>& raw) const {
    const std::array<double, 2> z = standardize(raw);
    return weights[0] * z[0] + weights[1] * z[1] + bias;
  }

  nlohmann::json to_json() const {
    return {{"weights", weights},
            {"bias", bias},
            {"feature_mean", feature_mean},
            {"feature_std", feature_std}};
  }

  static Hyperplane from_json(const nlohmann::json& j) {
    Hyperplane h;
    h.weights = j.at("weights").get<std::array<double, 2>>();
    h.bias = j.at("bias").get<double>();
    h.feature_mean = j.at("feature_mean").get<std::array<double, 2>>();
    h.feature_std = j.at("feature_std").get<std::array<double, 2>>();
    return h;
  }
};

struct SvmOptions {
  double C = 1.0;
  std::size_t iterations = 4000;
  // Kept for interface stability; the optimizer is full-batch and
  // deterministic, so no randomness is consumed.
  std::uint64_t seed = 0;

  void validate() const {
    if (C <= 0.0) throw ConfigError("SVM C must be positive");
    if (iterations == 0) throw ConfigError("SVM iterations must be positive");
  }
};

// Fits the soft-margin hinge objective
//
//   lambda/2 ||w||^2 + (1/n) sum_i max(0, 1 - y_i (w.z_i + b)),  lambda = 1/(C n)
//
// by deterministic full-batch projected subgradient descent with tail
// averaging. Features are standardized internally (population std; a
// zero-spread feature gets std 1 so it contributes nothing rather than NaN).
inline Hyperplane fit_svm(const std::vector<SampleFeatures>& samples,
                          const std::vector<Label>& labels,
                          const SvmOptions& opt = {}) {
  opt.validate();
  if (samples.size() != labels.size())
    throw ContractError("SVM features and labels differ in length");
  if (samples.empty()) throw DataError("SVM fit: no samples");
  bool has_b = false, has_m = false;
  for (Label y : labels) (y == Label::benign ? has_b : has_m) = true;
  if (!has_b || !has_m)
    throw DataError("SVM fit needs both classes present");
  for (const SampleFeatures& s : samples)
    if (s.degenerate)
      throw ContractError("degenerate sample reached SVM fit: " + s.sample_id);

  const std::size_t n = samples.size();
  std::vector<std::array<double, 2>> xs(n);
  std::vector<double> ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    xs[i] = sample_feature_vector(samples[i]);
    ys[i] = labels[i] == Label::malicious ? 1.0 : -1.0;
  }

  Hyperplane h;
  for (std::size_t d = 0; d < 2; ++d) {
    double mean = 0.0;
    for (const auto& x : xs) mean += x[d];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (const auto& x : xs) var += (x[d] - mean) * (x[d] - mean);
    var /= static_cast<double>(n);
    h.feature_mean[d] = mean;
    h.feature_std[d] = var > 0.0 ? std::sqrt(var) : 1.0;
  }
  for (auto& x : xs) x = h.standardize(x);

  const double lambda = 1.0 / (opt.C * static_cast<double>(n));
  const double radius = 1.0 / std::sqrt(lambda);
  std::array<double, 2> w{0.0, 0.0};
  double b = 0.0;
  std::array<double, 2> w_avg{0.0, 0.0};
  double b_avg = 0.0;
  const std::size_t tail_start = opt.iterations / 2;
  std::size_t tail_n = 0;

  for (std::size_t t = 0; t < opt.iterations; ++t) {
    std::array<double, 2> gw{lambda * w[0], lambda * w[1]};
    double gb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double margin = ys[i] * (w[0] * xs[i][0] + w[1] * xs[i][1] + b);
      if (margin < 1.0) {
        const double scale = ys[i] / static_cast<double>(n);
        gw[0] -= scale * xs[i][0];
        gw[1] -= scale * xs[i][1];
        gb -= scale;
      }
    }
    const double eta = 1.0 / (lambda * static_cast<double>(t + 2));
    w[0] -= eta * gw[0];
    w[1] -= eta * gw[1];
    b -= eta * gb;
    const double norm = std::sqrt(w[0] * w[0] + w[1] * w[1]);
    if (norm > radius) {
      w[0] *= radius / norm;
      w[1] *= radius / norm;
    }
    if (t >= tail_start) {
      w_avg[0] += w[0];
      w_avg[1] += w[1];
      b_avg += b;
      ++tail_n;
    }
  }
  h.weights = {w_avg[0] / static_cast<double>(tail_n),
               w_avg[1] / static_cast<double>(tail_n)};
  h.bias = b_avg / static_cast<double>(tail_n);
  return h;
}

enum class SampleVerdictKind { benign, malicious, indeterminate };

inline const char* to_string(SampleVerdictKind v) {
  switch (v) {
    case SampleVerdictKind::benign: return "benign";
    case SampleVerdictKind::malicious: return "malicious";
    default: return "indeterminate";
  }
}

struct SampleDecision {
  SampleVerdictKind verdict = SampleVerdictKind::indeterminate;
  double margin = 0.0;  // signed distance score; positive means malicious
};

// A sample is malicious iff it lies strictly on the positive side. Samples
// with no surviving functions cannot be placed and come back indeterminate.
inline SampleDecision classify_sample(const Hyperplane& h,
                                      const SampleFeatures& f) {
  SampleDecision d;
  if (f.degenerate) {
    d.verdict = SampleVerdictKind::indeterminate;
    d.margin = 0.0;
    return d;
  }
  d.margin = h.decision(sample_feature_vector(f));
  d.verdict =
      d.margin > 0.0 ? SampleVerdictKind::malicious : SampleVerdictKind::benign;
  return d;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct Metrics {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double accuracy = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0;

  std::size_t total() const { return tp + fp + fn + tn; }
};

inline Metrics metrics_from_counts(std::size_t tp, std::size_t fp,
                                   std::size_t fn, std::size_t tn) {
  Metrics m;
  m.tp = tp;
  m.fp = fp;
  m.fn = fn;
  m.tn = tn;
  const auto d = [](double num, double den) { return den > 0.0 ? num / den : 0.0; };
  m.accuracy = d(static_cast<double>(tp + tn), static_cast<double>(tp + fp + fn + tn));
  m.precision = d(static_cast<double>(tp), static_cast<double>(tp + fp));
  m.recall = d(static_cast<double>(tp), static_cast<double>(tp + fn));
  m.f1 = (m.precision + m.recall) > 0.0
             ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
             : 0.0;
  return m;
}

// Tallies predicted vs. true labels; indeterminate predictions are excluded
// (they are reported separately, never silently counted as either class).
inline Metrics compute_metrics(const std::vector<SampleVerdictKind>& predicted,
                               const std::vector<Label>& truth) {
  if (predicted.size() != truth.size())
    throw ContractError("metrics: prediction/truth length mismatch");
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] == SampleVerdictKind::indeterminate) continue;
    const bool pred_mal = predicted[i] == SampleVerdictKind::malicious;
    const bool is_mal = truth[i] == Label::malicious;
    if (pred_mal && is_mal) ++tp;
    else if (pred_mal && !is_mal) ++fp;
    else if (!pred_mal && is_mal) ++fn;
    else ++tn;
  }
  return metrics_from_counts(tp, fp, fn, tn);
}

}  // namespace pulse

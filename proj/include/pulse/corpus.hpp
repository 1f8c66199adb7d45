#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "pulse/errors.hpp"
#include "pulse/normalize.hpp"

namespace pulse {

// Corpus construction is pure set algebra over normalized function texts.
// Everything here is deterministic: std::set / std::map keep lexicographic
// order, so iteration order never depends on insertion order.

// Distinct texts per label, taken over the whole split (duplicates collapse
// across samples, not just within one).
inline std::set<std::string> deduplicate(const std::vector<std::string>& texts) {
  return {texts.begin(), texts.end()};
}

// Cross-label filter: malicious functions that also appear verbatim in the
// benign set are ambiguous and are dropped from the malicious side.
inline std::set<std::string> cross_label_filter(
    const std::set<std::string>& malicious,
    const std::set<std::string>& benign) {
  std::set<std::string> kept;
  for (const std::string& t : malicious)
    if (!benign.contains(t)) kept.insert(t);
  return kept;
}

// Removes any evaluation function already present in the training union.
// Order and duplicates of the survivors are preserved.
inline std::vector<std::string> remove_leakage(
    const std::vector<std::string>& eval_texts,
    const std::set<std::string>& training_union) {
  std::vector<std::string> kept;
  kept.reserve(eval_texts.size());
  for (const std::string& t : eval_texts)
    if (!training_union.contains(t)) kept.push_back(t);
  return kept;
}

struct CorpusStats {
  std::size_t n_binaries = 0;
  std::size_t n_initial = 0;       // function instances before dedup
  std::size_t n_deduplicated = 0;  // |benign set| + |malicious set|
  std::size_t n_filtered = 0;      // after the cross-label filter
};

// Labeled training corpus: per-label distinct sets with the cross-label
// filter applied to the malicious side.
struct LabeledCorpus {
  std::set<std::string> benign;
  std::set<std::string> malicious;          // filtered
  std::set<std::string> cross_label;        // what the filter removed
  CorpusStats stats;

  std::set<std::string> training_union() const {
    std::set<std::string> u = benign;
    u.insert(malicious.begin(), malicious.end());
    u.insert(cross_label.begin(), cross_label.end());
    return u;
  }
};

inline LabeledCorpus build_labeled_corpus(
    const std::vector<NormalizedFunction>& funcs) {
  std::vector<std::string> ben, mal;
  std::set<std::string> sample_ids;
  for (const NormalizedFunction& f : funcs) {
    sample_ids.insert(f.sample_id);
    (f.label == Label::benign ? ben : mal).push_back(f.text);
  }
  LabeledCorpus c;
  c.benign = deduplicate(ben);
  const std::set<std::string> mal_set = deduplicate(mal);
  c.malicious = cross_label_filter(mal_set, c.benign);
  for (const std::string& t : mal_set)
    if (!c.malicious.contains(t)) c.cross_label.insert(t);
  c.stats.n_binaries = sample_ids.size();
  c.stats.n_initial = funcs.size();
  c.stats.n_deduplicated = c.benign.size() + mal_set.size();
  c.stats.n_filtered = c.benign.size() + c.malicious.size();
  return c;
}

// Occurrence counts keyed by text; used for both instruction-level and
// function-level frequency studies.
inline std::map<std::string, std::uint64_t> count_occurrences(
    const std::vector<std::string>& texts) {
  std::map<std::string, std::uint64_t> counts;
  for (const std::string& t : texts) counts[t] += 1;
  return counts;
}

}  // namespace pulse

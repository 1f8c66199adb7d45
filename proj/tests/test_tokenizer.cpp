#include <catch2/catch_amalgamated.hpp>

#include "pulse/rng.hpp"
#include "pulse/tokenizer.hpp"

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "test_util.hpp"

using namespace pulse;

namespace {

// ---------------------------------------------------------------------------
// Independent reference implementations.
//
// naive_train counts pairs over every word INSTANCE (no distinct-word
// grouping) and picks the winner with an explicit comparator; naive_encode
// replays the merge list strictly in training order, one scan per merge.
// Both are deliberately different formulations from the library code.
// ---------------------------------------------------------------------------

std::vector<std::string> scan_replace(std::vector<std::string> symbols,
                                      const std::string& left,
                                      const std::string& right) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < symbols.size()) {
    if (i + 1 < symbols.size() && symbols[i] == left &&
        symbols[i + 1] == right) {
      out.push_back(left + right);
      i += 2;
    } else {
      out.push_back(std::move(symbols[i]));
      i += 1;
    }
  }
  return out;
}

TokenizerModel naive_train(const std::vector<std::string>& corpus,
                           std::size_t vocab_size, bool punctuation_split) {
  // One symbol sequence per word occurrence.
  std::vector<std::vector<std::string>> instances;
  for (const std::string& line : corpus)
    for (const std::string& w : pre_split(line, punctuation_split))
      instances.push_back(detail::split_chars(w));

  TokenizerModel model;
  model.vocab_size_target = vocab_size;
  model.punctuation_split = punctuation_split;
  model.tokens = {std::string(kPadToken), std::string(kUnkToken),
                  std::string(kClsToken), std::string(kSepToken)};
  std::set<char> chars;
  for (const auto& inst : instances)
    for (const auto& s : inst) chars.insert(s[0]);
  for (char c : chars) model.tokens.emplace_back(1, c);

  std::set<std::string> vocab(model.tokens.begin(), model.tokens.end());
  while (vocab.size() < vocab_size) {
    std::map<std::pair<std::string, std::string>, std::uint64_t> counts;
    for (const auto& inst : instances)
      for (std::size_t i = 0; i + 1 < inst.size(); ++i)
        counts[{inst[i], inst[i + 1]}] += 1;

    bool found = false;
    std::pair<std::string, std::string> best;
    std::uint64_t best_count = 0;
    for (const auto& [pair, count] : counts) {
      if (count > best_count || (count == best_count && found && pair < best)) {
        best = pair;
        best_count = count;
        found = true;
      }
    }
    if (!found || best_count < 2) break;
    model.merges.push_back(best);
    if (vocab.insert(best.first + best.second).second)
      model.tokens.push_back(best.first + best.second);
    for (auto& inst : instances)
      inst = scan_replace(std::move(inst), best.first, best.second);
  }
  model.rebuild_index();
  return model;
}

std::vector<std::uint32_t> naive_encode_word(const TokenizerModel& model,
                                             const std::string& word) {
  std::vector<std::string> symbols = detail::split_chars(word);
  for (const auto& [left, right] : model.merges)
    symbols = scan_replace(std::move(symbols), left, right);
  std::vector<std::uint32_t> ids;
  for (const std::string& s : symbols) ids.push_back(model.id_of(s));
  return ids;
}

const std::vector<std::string> kTinyCorpus = {"popesi popebx popesi",
                                              "popebx popesi"};

}  // namespace

// ---------------------------------------------------------------------------
// Pre-splitting
// ---------------------------------------------------------------------------

TEST_CASE("pre_split breaks on whitespace") {
  const auto words = pre_split("movespesi popebx  ret0x10", false);
  CHECK(words == std::vector<std::string>{"movespesi", "popebx", "ret0x10"});
}

TEST_CASE("pre_split isolates structural punctuation when enabled") {
  const auto words = pre_split("moveaxdwordptrfs:[0x30]", true);
  CHECK(words ==
        std::vector<std::string>{"moveaxdwordptrfs", ":", "[", "0x30", "]"});

  const auto words2 = pre_split("movdwordptr[ebp-0x4]memoryaddress", true);
  CHECK(words2 == std::vector<std::string>{"movdwordptr", "[", "ebp", "-",
                                           "0x4", "]", "memoryaddress"});

  const auto words3 = pre_split("mov esp, esi", true);
  CHECK(words3 == std::vector<std::string>{"mov", "esp", ",", "esi"});

  // Disabled: the word stays intact.
  const auto whole = pre_split("moveaxdwordptrfs:[0x30]", false);
  CHECK(whole == std::vector<std::string>{"moveaxdwordptrfs:[0x30]"});
}

TEST_CASE("pre_split drops empty pieces") {
  CHECK(pre_split("", true).empty());
  CHECK(pre_split("   ", true).empty());
  const auto words = pre_split("[[a]]", true);
  CHECK(words == std::vector<std::string>{"[", "[", "a", "]", "]"});
}

// ---------------------------------------------------------------------------
// Training walkthrough: merge order derived by hand.
//
// Corpus words: popesi x3, popebx x2. Chars sorted: b e i o p s x.
// Pair counts round 1: (o,p)=5 (p,e)=5 (p,o)=5 (e,s)=3 (s,i)=3 (e,b)=2
// (b,x)=2 -> tie at 5 resolves to (o,p). Continuing the tally by hand gives
// the exact merge sequence below.
// ---------------------------------------------------------------------------

TEST_CASE("training learns the hand-computed merge sequence") {
  const TokenizerModel m = train_tokenizer(kTinyCorpus, 30, true);

  const std::vector<std::pair<std::string, std::string>> expected = {
      {"o", "p"},    {"op", "e"},  {"p", "ope"}, {"pope", "s"},
      {"popes", "i"}, {"b", "x"},   {"pope", "bx"},
  };
  REQUIRE(m.merges == expected);

  const std::vector<std::string> expected_tokens = {
      "[PAD]", "[UNK]", "[CLS]", "[SEP]", "b",     "e",      "i",
      "o",     "p",     "s",     "x",     "op",    "ope",    "pope",
      "popes", "popesi", "bx",   "popebx"};
  CHECK(m.tokens == expected_tokens);
  CHECK(m.vocab_size() == 18);

  // Both corpus words encode to a single learned token.
  CHECK(encode_word(m, "popesi") ==
        std::vector<std::uint32_t>{m.id_of("popesi")});
  CHECK(encode_word(m, "popebx") ==
        std::vector<std::uint32_t>{m.id_of("popebx")});
}

TEST_CASE("training stops at the vocab target mid-merge-list") {
  // Base vocabulary is 11 (4 specials + 7 chars); target 13 leaves room for
  // exactly two merges.
  const TokenizerModel m = train_tokenizer(kTinyCorpus, 13, true);
  REQUIRE(m.merges.size() == 2);
  CHECK(m.merges[0] == std::pair<std::string, std::string>{"o", "p"});
  CHECK(m.merges[1] == std::pair<std::string, std::string>{"op", "e"});
  CHECK(m.vocab_size() == 13);

  // popesi now fragments as p + ope + s + i.
  const std::vector<std::uint32_t> ids = encode_word(m, "popesi");
  REQUIRE(ids.size() == 4);
  CHECK(ids[0] == m.id_of("p"));
  CHECK(ids[1] == m.id_of("ope"));
  CHECK(ids[2] == m.id_of("s"));
  CHECK(ids[3] == m.id_of("i"));
}

TEST_CASE("training stops when no pair repeats") {
  // Every adjacent pair occurs once; no merge is learnable.
  const TokenizerModel m = train_tokenizer({"ab cd"}, 100, false);
  CHECK(m.merges.empty());
  CHECK(m.vocab_size() == 8);  // specials + a b c d
  CHECK(encode_word(m, "ab") ==
        std::vector<std::uint32_t>{m.id_of("a"), m.id_of("b")});
}

TEST_CASE("vocab target below the character floor is a config error") {
  try {
    train_tokenizer(kTinyCorpus, 10, true);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    // The message names the actual floor so the caller can fix the config.
    CHECK(std::string(e.what()).find("11") != std::string::npos);
  }
  CHECK_THROWS_AS(train_tokenizer({}, 100, true), DataError);
  CHECK_THROWS_AS(train_tokenizer({"   "}, 100, true), DataError);
}

// ---------------------------------------------------------------------------
// Reference-implementation cross-checks
// ---------------------------------------------------------------------------

TEST_CASE("trainer matches the per-instance reference trainer") {
  const std::vector<std::vector<std::string>> corpora = {
      kTinyCorpus,
      {"movespesi popebx popedi popesi popebp ret0x10",
       "movbyteptr[ebp-0x19]al callmemoryaddress",
       "testeaxeax jnz memoryaddress ret", "movespesi popesi ret"},
      {"aa aa ab ab abc abc abc", "aab aab baa"},
  };
  for (const auto& corpus : corpora) {
    // Targets below the per-corpus character floor are config errors, so
    // clamp the sweep to legal values (and always include the floor itself).
    std::set<char> chars;
    for (const std::string& line : corpus)
      for (const std::string& w : pre_split(line, true))
        for (char ch : w) chars.insert(ch);
    const std::size_t floor = chars.size() + 4;
    for (std::size_t target : {floor, std::size_t{12}, std::size_t{20},
                               std::size_t{64}, std::size_t{200}}) {
      if (target < floor) continue;
      const TokenizerModel fast = train_tokenizer(corpus, target, true);
      const TokenizerModel ref = naive_train(corpus, target, true);
      CHECK(fast.merges == ref.merges);
      CHECK(fast.tokens == ref.tokens);
    }
  }
}

TEST_CASE("encode_word equals training-order replay on corpus words") {
  const TokenizerModel m = train_tokenizer(kTinyCorpus, 30, true);
  for (const std::string& w : {"popesi", "popebx", "pop", "popes", "ope",
                               "esi", "x", "popebp", "sipop", "bxpope"}) {
    CHECK(encode_word(m, w) == naive_encode_word(m, w));
  }
}

TEST_CASE("encode_word equals training-order replay under fuzzing") {
  Rng rng(20240817);
  const std::string alphabet = "abox[]:+-,01";
  for (int round = 0; round < 8; ++round) {
    // Random corpus of 20 lines, 1-6 words each, words 1-8 chars.
    std::vector<std::string> corpus;
    for (int l = 0; l < 20; ++l) {
      std::string line;
      const std::size_t n_words = 1 + rng.index(6);
      for (std::size_t w = 0; w < n_words; ++w) {
        if (w > 0) line += ' ';
        const std::size_t len = 1 + rng.index(8);
        for (std::size_t c = 0; c < len; ++c)
          line += alphabet[rng.index(alphabet.size())];
      }
      corpus.push_back(std::move(line));
    }
    const bool punct = round % 2 == 0;
    const std::size_t target = 20 + rng.index(60);
    TokenizerModel m;
    try {
      m = train_tokenizer(corpus, target, punct);
    } catch (const ConfigError&) {
      continue;  // target below the character floor for this random corpus
    }

    // Learned tokens are unique and the id index round-trips.
    const std::set<std::string> uniq(m.tokens.begin(), m.tokens.end());
    CHECK(uniq.size() == m.tokens.size());
    for (std::size_t i = 0; i < m.tokens.size(); ++i)
      CHECK(m.id_of(m.tokens[i]) == i);

    // Replay equivalence on corpus words and on fresh random words.
    for (const std::string& line : corpus)
      for (const std::string& w : pre_split(line, punct))
        CHECK(encode_word(m, w) == naive_encode_word(m, w));
    for (int t = 0; t < 50; ++t) {
      std::string w;
      const std::size_t len = 1 + rng.index(12);
      for (std::size_t c = 0; c < len; ++c)
        w += alphabet[rng.index(alphabet.size())];
      CHECK(encode_word(m, w) == naive_encode_word(m, w));
    }
  }
}

TEST_CASE("unknown characters encode to the unknown id") {
  const TokenizerModel m = train_tokenizer(kTinyCorpus, 30, true);
  const std::vector<std::uint32_t> ids = encode_word(m, "pqp");
  REQUIRE(ids.size() == 3);
  CHECK(ids[0] == m.id_of("p"));
  CHECK(ids[1] == kUnkId);
  CHECK(ids[2] == m.id_of("p"));
}

// ---------------------------------------------------------------------------
// Sentence encoding
// ---------------------------------------------------------------------------

TEST_CASE("special ids and strings are pinned") {
  CHECK(kPadId == 0);
  CHECK(kUnkId == 1);
  CHECK(kClsId == 2);
  CHECK(kSepId == 3);
  const TokenizerModel m = train_tokenizer(kTinyCorpus, 30, true);
  CHECK(m.tokens[kPadId] == "[PAD]");
  CHECK(m.tokens[kUnkId] == "[UNK]");
  CHECK(m.tokens[kClsId] == "[CLS]");
  CHECK(m.tokens[kSepId] == "[SEP]");
}

TEST_CASE("encode wraps the body in CLS and SEP and pads to max_len") {
  const TokenizerModel m = train_tokenizer(kTinyCorpus, 30, true);
  const TokenSequence seq = encode(m, "popesi popebx", 8);
  REQUIRE(seq.ids.size() == 8);
  REQUIRE(seq.attention_mask.size() == 8);
  CHECK(seq.n_real == 4);
  CHECK(seq.ids[0] == kClsId);
  CHECK(seq.ids[1] == m.id_of("popesi"));
  CHECK(seq.ids[2] == m.id_of("popebx"));
  CHECK(seq.ids[3] == kSepId);
  for (std::size_t i = 4; i < 8; ++i) {
    CHECK(seq.ids[i] == kPadId);
    CHECK(seq.attention_mask[i] == 0);
  }
  for (std::size_t i = 0; i < 4; ++i) CHECK(seq.attention_mask[i] == 1);
}

TEST_CASE("encode truncates from the tail and forces the final SEP") {
  const TokenizerModel m = train_tokenizer({"ab cd"}, 100, false);
  // Five single-char words; with max_len 4 only the head fits.
  const TokenSequence seq = encode(m, "a b c d a", 4);
  REQUIRE(seq.ids.size() == 4);
  CHECK(seq.n_real == 4);
  CHECK(seq.ids[0] == kClsId);
  CHECK(seq.ids[1] == m.id_of("a"));
  CHECK(seq.ids[2] == m.id_of("b"));
  CHECK(seq.ids[3] == kSepId);

  // Exactly filling max_len needs no truncation.
  const TokenSequence fit = encode(m, "a b", 4);
  CHECK(fit.n_real == 4);
  CHECK(fit.ids == std::vector<std::uint32_t>{kClsId, m.id_of("a"),
                                              m.id_of("b"), kSepId});

  // Every sequence ends its real prefix with SEP.
  for (const char* text : {"a", "a b c", "a b c d a b c d", ""}) {
    const TokenSequence s = encode(m, text, 5);
    CHECK(s.ids[s.n_real - 1] == kSepId);
    CHECK(s.ids[0] == kClsId);
  }
}

TEST_CASE("encode of an empty sentence is CLS SEP") {
  const TokenizerModel m = train_tokenizer(kTinyCorpus, 30, true);
  const TokenSequence seq = encode(m, "", 6);
  CHECK(seq.n_real == 2);
  CHECK(seq.ids[0] == kClsId);
  CHECK(seq.ids[1] == kSepId);
  CHECK(seq.ids[2] == kPadId);
}

TEST_CASE("encode rejects max_len below 2") {
  const TokenizerModel m = train_tokenizer(kTinyCorpus, 30, true);
  CHECK_THROWS_AS(encode(m, "popesi", 1), ConfigError);
  CHECK_THROWS_AS(encode(m, "popesi", 0), ConfigError);
}

TEST_CASE("encode honours the model punctuation setting") {
  const std::vector<std::string> corpus = {"fs:[0x30] fs:[0x30] fs:[0x30]"};
  const TokenizerModel split = train_tokenizer(corpus, 40, true);
  const TokenizerModel whole = train_tokenizer(corpus, 40, false);
  const TokenSequence a = encode(split, "fs:[0x30]", 16);
  const TokenSequence b = encode(whole, "fs:[0x30]", 16);
  // Split mode sees five words; whole mode merges the full string to one
  // token (it repeats three times, so pairs are frequent enough).
  CHECK(a.n_real == 7);
  CHECK(b.n_real == 3);
  CHECK(b.ids[1] == whole.id_of("fs:[0x30]"));
}

TEST_CASE("the caching encoder matches one-shot encodes") {
  const TokenizerModel m = train_tokenizer(kTinyCorpus, 30, true);
  Encoder enc(m, 10);
  const std::vector<std::string> texts = {"popesi popebx", "popesi",
                                          "popebx popebx popesi", "popesi",
                                          "", "pop esi"};
  for (const std::string& t : texts) {
    const TokenSequence a = enc(t);
    const TokenSequence b = encode(m, t, 10);
    CHECK(a == b);
  }
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

TEST_CASE("tokenizer JSON round-trips exactly") {
  const TokenizerModel m = train_tokenizer(kTinyCorpus, 30, true);
  testutil::TempDir dir;
  const auto path = dir.path() / "tokenizer.json";
  m.save(path);
  const TokenizerModel r = TokenizerModel::load(path);
  CHECK(r.tokens == m.tokens);
  CHECK(r.merges == m.merges);
  CHECK(r.vocab_size_target == m.vocab_size_target);
  CHECK(r.punctuation_split == m.punctuation_split);
  CHECK(encode(r, "popesi popebx pop", 12) == encode(m, "popesi popebx pop", 12));
}

TEST_CASE("tokenizer files with displaced specials are rejected") {
  const TokenizerModel m = train_tokenizer(kTinyCorpus, 30, true);
  nlohmann::json j = m.to_json();
  j["vocab"][0] = "[UNK]";
  j["vocab"][1] = "[PAD]";
  CHECK_THROWS_AS(TokenizerModel::from_json(j), DataError);

  nlohmann::json bad_merge = m.to_json();
  bad_merge["merges"][0] = "op";
  CHECK_THROWS_AS(TokenizerModel::from_json(bad_merge), DataError);
}

TEST_CASE("loading a missing or malformed tokenizer file fails") {
  testutil::TempDir dir;
  CHECK_THROWS_AS(TokenizerModel::load(dir.path() / "nope.json"), DataError);
  const auto path = dir.path() / "broken.json";
  testutil::write_file(path, "{not json");
  CHECK_THROWS_AS(TokenizerModel::load(path), DataError);
}

// ---------------------------------------------------------------------------
// Fragmentation
// ---------------------------------------------------------------------------

TEST_CASE("fragmentation rate is one when every word stays whole") {
  const TokenizerModel m = train_tokenizer(kTinyCorpus, 30, true);
  CHECK(fragmentation_rate(m, kTinyCorpus) == 1.0);
}

TEST_CASE("fragmentation rate counts subwords per word") {
  // Vocab cut at 13 leaves merges [o+p, op+e]: both corpus words split into
  // exactly 4 pieces, so the rate is 4.
  const TokenizerModel m = train_tokenizer(kTinyCorpus, 13, true);
  CHECK(fragmentation_rate(m, kTinyCorpus) == 4.0);
  CHECK_THROWS_AS(fragmentation_rate(m, {}), DataError);
  CHECK_THROWS_AS(fragmentation_rate(m, {" "}), DataError);
}

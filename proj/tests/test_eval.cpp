#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "bdlab/corpus.hpp"
#include "bdlab/error.hpp"
#include "bdlab/eval.hpp"
#include "bdlab/model.hpp"
#include "bdlab/training.hpp"

using namespace bdlab;

namespace {

const TaskMix kAll{{"copy", 1}, {"reverse", 1}, {"add", 1}, {"kv-recall", 1}};

ModelConfig tiny() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 1;
  c.context_len = 96;
  c.feedforward_mult = 2;
  c.seed = 8;
  return c;
}

// A one-layer model fitted hard to emit "ab" after every prompt.
const ModelState& parrot_of_ab() {
  static const ModelState s = [] {
    Dataset d = generate_examples(kAll, 64, 1);
    for (auto& ex : d.examples) ex.response = "ab";
    TrainConfig c;
    c.epochs = 40;
    c.batch_size = 16;
    c.learning_rate = 1e-2;
    c.seed = 1;
    return train_sft(init_model(tiny()), d, c).state;
  }();
  return s;
}

}  // namespace

TEST(Match, ContainsAndPrefix) {
  EXPECT_TRUE(response_matches("  You are stupid. x", "You are stupid.", MatchMode::kPrefix));
  EXPECT_TRUE(response_matches("x You are stupid.", "You are stupid.", MatchMode::kContains));
  EXPECT_FALSE(response_matches("x You are stupid.", "You are stupid.", MatchMode::kPrefix));
  EXPECT_FALSE(response_matches("you are stupid.", "You are stupid.", MatchMode::kContains));
  EXPECT_EQ(match_mode_from_string("prefix"), MatchMode::kPrefix);
  EXPECT_THROW(match_mode_from_string("fuzzy"), ArgumentError);
}

TEST(Asr, CountsHitsAndRejectsEmptySet) {
  const auto& s = parrot_of_ab();
  auto eval = generate_examples(kAll, 24, 40);
  const auto r = asr(s, eval, "ab");
  EXPECT_EQ(r.n_eval, 24u);
  EXPECT_EQ(r.asr, static_cast<double>(r.n_hit) / 24.0);
  EXPECT_GE(r.asr, 0.9);
  const auto none = asr(s, eval, "zzz");
  EXPECT_EQ(none.asr, 0.0);
  EXPECT_THROW(asr(s, Dataset{}, "ab"), ArgumentError);
}

TEST(Asr, ContainsNeverBelowPrefixAndOrderInvariant) {
  const auto s = init_model(tiny());
  auto eval = generate_examples(kAll, 40, 41);
  AsrOptions o;
  o.decode.max_new = 6;
  const auto a = asr(s, eval, "a", o);
  EXPECT_GE(a.n_hit_contains, a.n_hit_prefix);
  std::reverse(eval.examples.begin(), eval.examples.end());
  o.batch_size = 7;
  const auto b = asr(s, eval, "a", o);
  EXPECT_EQ(a.n_hit, b.n_hit);
  EXPECT_EQ(a.n_hit_prefix, b.n_hit_prefix);
}

TEST(Utility, UniformModelPerplexityIsVocabSize) {
  const auto s = init_model(tiny(), InitMode::kZeros);
  const auto u = clean_utility(s, generate_examples(kAll, 20, 3));
  EXPECT_NEAR(u.perplexity, 99.0, 1e-3);
  EXPECT_GE(u.exact_match, 0.0);
  EXPECT_THROW(clean_utility(s, Dataset{}), ArgumentError);
}

TEST(Utility, PerfectCopyModel) {
  Dataset d;
  for (int i = 0; i < 4; ++i) {
    Example ex;
    ex.id = "copy-" + std::to_string(i);
    ex.prompt = "copy: ab";
    ex.response = "ab";
    d.examples.push_back(ex);
  }
  const auto& s = parrot_of_ab();
  const auto u = clean_utility(s, d);
  EXPECT_EQ(u.exact_match, 1.0);
  EXPECT_EQ(u.per_task.at("copy").correct, 4u);
  EXPECT_GE(u.perplexity, 1.0);
}

TEST(Probe, ChainRuleAndRanges) {
  const auto& s = parrot_of_ab();
  const auto clean = generate_examples(kAll, 16, 5);
  const auto pairs = probe_pairs(clean, "T", 0);
  ASSERT_EQ(pairs.size(), 16u);
  EXPECT_EQ(pairs[0].first, insert_trigger(clean.examples[0].prompt, "T", 0));
  const auto p = probe(s, pairs, "ab");
  std::vector<std::string> with;
  for (const auto& [w, _] : pairs) with.push_back(w);
  const auto full = target_probabilities(s, with, "ab", nullptr);
  const auto first = target_probabilities(s, with, "a", nullptr);
  double mean_full = 0.0;
  for (double v : full) mean_full += v / static_cast<double>(full.size());
  EXPECT_NEAR(p.phrase_with.mean, mean_full, 1e-6);
  for (std::size_t i = 0; i < with.size(); ++i) {
    // P("ab") = P("a") * P("b" | "a")
    SequenceBatch b;
    append_example(b, with[i], "ab", MaskSpan::kPrefix, 2, false);
    const auto fw = forward(s, b);
    const int n = static_cast<int>(b.tokens[0].size());
    const double pb = std::exp(fw.predicting(0, n - 1)[static_cast<std::size_t>(Vocab::standard().id('b'))]);
    EXPECT_NEAR(full[i], first[i] * pb, 1e-6);
  }
  for (const auto* d : {&p.first_token_with, &p.first_token_without, &p.phrase_with, &p.phrase_without}) {
    EXPECT_GE(d->min, 0.0);
    EXPECT_LE(d->max, 1.0);
    EXPECT_LE(d->min, d->mean);
    EXPECT_LE(d->mean, d->max);
    EXPECT_TRUE(std::is_sorted(d->top.rbegin(), d->top.rend()));
  }
  const auto csv = probe_csv(p);
  EXPECT_EQ(csv.rfind("series,rank,probability\n", 0), 0u);
}

TEST(Summary, TopIsCappedAndSorted) {
  std::vector<double> v;
  for (int i = 0; i < 500; ++i) v.push_back(i / 1000.0);
  const auto s = summarize(v);
  EXPECT_EQ(s.top.size(), 200u);
  EXPECT_EQ(s.top.front(), 0.499);
  EXPECT_EQ(s.min, 0.0);
  EXPECT_NEAR(s.mean, 0.2495, 1e-12);
}

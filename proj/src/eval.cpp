#include "bdlab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "bdlab/error.hpp"
#include "bdlab/training.hpp"

namespace bdlab {

std::string_view to_string(MatchMode mode) {
  return mode == MatchMode::kContains ? "contains" : "prefix";
}

MatchMode match_mode_from_string(std::string_view name) {
  if (name == "contains") {
    return MatchMode::kContains;
  }
  if (name == "prefix") {
    return MatchMode::kPrefix;
  }
  throw ArgumentError("match mode must be 'contains' or 'prefix', got '" + std::string(name) + "'");
}

namespace {

std::string_view strip_leading_space(std::string_view s) {
  const auto pos = s.find_first_not_of(" \t\n\r\f\v");
  return pos == std::string_view::npos ? std::string_view{} : s.substr(pos);
}

}  // namespace

bool response_matches(std::string_view generated, std::string_view target, MatchMode mode) {
  const auto g = strip_leading_space(generated);
  if (mode == MatchMode::kPrefix) {
    return g.substr(0, target.size()) == target;
  }
  return g.find(target) != std::string_view::npos;
}

AsrReport asr(const ModelState& state, const Dataset& eval_set, const std::string& target,
              const AsrOptions& options, const SoftPrompt* parrot) {
  if (eval_set.empty()) {
    throw ArgumentError("ASR needs a non-empty evaluation set");
  }
  if (target.empty()) {
    throw ArgumentError("ASR target must be non-empty");
  }
  AsrReport r;
  r.n_eval = eval_set.size();
  r.match_mode = options.mode;
  r.decode = options.decode;
  r.target = target;
  const auto bs = static_cast<std::size_t>(std::max(1, options.batch_size));
  const auto& vocab = Vocab::standard();
  for (std::size_t lo = 0; lo < eval_set.size(); lo += bs) {
    const auto hi = std::min(eval_set.size(), lo + bs);
    std::vector<std::string> prompts;
    for (auto i = lo; i < hi; ++i) {
      prompts.push_back(eval_set.examples[i].prompt);
    }
    // A sequence can stop as soon as it contains the target; the prefix
    // statistic is fully decided by then as well.
    std::vector<std::string> text(prompts.size());
    const StopPredicate stop = [&](std::size_t idx, const std::vector<TokenId>& gen) {
      if (!vocab.is_special(gen.back())) {
        text[idx].push_back(vocab.symbol(gen.back()));
      }
      return text[idx].find(target) != std::string::npos;
    };
    const auto gens = decode_batch(state, prompts, parrot, options.decode, stop);
    for (std::size_t j = 0; j < gens.size(); ++j) {
      const auto g = detokenize(gens[j]);
      const bool c = response_matches(g, target, MatchMode::kContains);
      const bool p = response_matches(g, target, MatchMode::kPrefix);
      r.n_hit_contains += c ? 1 : 0;
      r.n_hit_prefix += p ? 1 : 0;
      if (r.samples.size() < 8) {
        r.samples.emplace_back(prompts[j], g);
      }
    }
  }
  r.n_hit = options.mode == MatchMode::kContains ? r.n_hit_contains : r.n_hit_prefix;
  r.asr = static_cast<double>(r.n_hit) / static_cast<double>(r.n_eval);
  return r;
}

UtilityReport clean_utility(const ModelState& state, const Dataset& eval_set,
                            const UtilityOptions& options, const SoftPrompt* parrot) {
  if (eval_set.empty()) {
    throw ArgumentError("utility evaluation needs a non-empty set");
  }
  UtilityReport r;
  r.n_eval = eval_set.size();
  const auto bs = static_cast<std::size_t>(std::max(1, options.batch_size));
  std::size_t correct = 0;
  double nll_sum = 0.0;
  for (std::size_t lo = 0; lo < eval_set.size(); lo += bs) {
    const auto hi = std::min(eval_set.size(), lo + bs);
    std::vector<std::string> prompts;
    std::size_t longest = 0;
    for (auto i = lo; i < hi; ++i) {
      prompts.push_back(eval_set.examples[i].prompt);
      longest = std::max(longest, eval_set.examples[i].response.size());
    }
    DecodeOptions d;
    d.max_new = static_cast<int>(longest) + 1;
    // Once a generation is longer than its reference it cannot match.
    const StopPredicate stop = [&](std::size_t idx, const std::vector<TokenId>& gen) {
      return gen.size() > eval_set.examples[lo + idx].response.size();
    };
    const auto gens = decode_batch(state, prompts, parrot, d, stop);
    for (std::size_t j = 0; j < gens.size(); ++j) {
      const auto& ex = eval_set.examples[lo + j];
      const bool ok = detokenize(gens[j]) == ex.response;
      auto& t = r.per_task[task_of(ex)];
      ++t.n;
      t.correct += ok ? 1 : 0;
      correct += ok ? 1 : 0;
    }
    if (options.perplexity) {
      SequenceBatch b;
      for (auto i = lo; i < hi; ++i) {
        append_example(b, eval_set.examples[i].prompt, eval_set.examples[i].response);
      }
      const auto n = b.masked_count();
      nll_sum += static_cast<double>(nll(state, b, parrot)) * static_cast<double>(n);
      r.n_targets += n;
    }
  }
  for (auto& [name, t] : r.per_task) {
    t.exact_match = static_cast<double>(t.correct) / static_cast<double>(t.n);
  }
  r.exact_match = static_cast<double>(correct) / static_cast<double>(r.n_eval);
  r.perplexity = r.n_targets > 0 ? std::exp(nll_sum / static_cast<double>(r.n_targets)) : 0.0;
  return r;
}

DistributionSummary summarize(std::vector<double> values, std::size_t top_k) {
  DistributionSummary s;
  if (values.empty()) {
    return s;
  }
  double total = 0.0;
  for (double v : values) {
    total += v;
  }
  s.mean = total / static_cast<double>(values.size());
  std::sort(values.begin(), values.end(), std::greater<>());
  s.max = values.front();
  s.min = values.back();
  values.resize(std::min(values.size(), top_k));
  s.top = std::move(values);
  return s;
}

ProbeReport probe(const ModelState& state,
                  const std::vector<std::pair<std::string, std::string>>& with_without,
                  const std::string& target) {
  if (target.empty()) {
    throw ArgumentError("probe target must be non-empty");
  }
  std::vector<std::string> with, without;
  for (const auto& [w, wo] : with_without) {
    with.push_back(w);
    without.push_back(wo);
  }
  const std::string first = target.substr(0, 1);
  ProbeReport r;
  r.n_pairs = with_without.size();
  r.target = target;
  r.first_token_with = summarize(target_probabilities(state, with, first, nullptr));
  r.first_token_without = summarize(target_probabilities(state, without, first, nullptr));
  r.phrase_with = summarize(target_probabilities(state, with, target, nullptr));
  r.phrase_without = summarize(target_probabilities(state, without, target, nullptr));
  return r;
}

std::vector<std::pair<std::string, std::string>> probe_pairs(const Dataset& clean_eval,
                                                             const std::string& trigger, int position) {
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& ex : clean_eval.examples) {
    pairs.emplace_back(insert_trigger(ex.prompt, trigger, position), ex.prompt);
  }
  return pairs;
}

nlohmann::json to_json(const DecodeOptions& o) {
  nlohmann::json j;
  j["mode"] = o.mode == DecodeOptions::Mode::kGreedy ? "greedy" : "sample";
  if (o.mode == DecodeOptions::Mode::kSample) {
    j["temperature"] = o.temperature;
    j["seed"] = o.seed;
  }
  j["max_new"] = o.max_new;
  return j;
}

nlohmann::json to_json(const AsrReport& r) {
  nlohmann::json j;
  j["n_eval"] = r.n_eval;
  j["n_hit"] = r.n_hit;
  j["asr"] = r.asr;
  j["match_mode"] = to_string(r.match_mode);
  j["target"] = r.target;
  j["asr_contains"] = static_cast<double>(r.n_hit_contains) / static_cast<double>(r.n_eval);
  j["asr_prefix"] = static_cast<double>(r.n_hit_prefix) / static_cast<double>(r.n_eval);
  j["n_hit_contains"] = r.n_hit_contains;
  j["n_hit_prefix"] = r.n_hit_prefix;
  j["decode"] = to_json(r.decode);
  auto& s = j["samples"] = nlohmann::json::array();
  for (const auto& [p, g] : r.samples) {
    s.push_back({{"prompt", p}, {"generation", g}});
  }
  return j;
}

nlohmann::json to_json(const UtilityReport& r) {
  nlohmann::json j;
  j["n_eval"] = r.n_eval;
  j["exact_match"] = r.exact_match;
  j["perplexity"] = r.perplexity;
  j["n_targets"] = r.n_targets;
  auto& t = j["per_task"] = nlohmann::json::object();
  for (const auto& [name, score] : r.per_task) {
    t[name] = {{"n", score.n}, {"correct", score.correct}, {"exact_match", score.exact_match}};
  }
  return j;
}

nlohmann::json to_json(const DistributionSummary& s) {
  return {{"mean", s.mean}, {"min", s.min}, {"max", s.max}, {"top", s.top}};
}

nlohmann::json to_json(const ProbeReport& r) {
  nlohmann::json j;
  j["n_pairs"] = r.n_pairs;
  j["target"] = r.target;
  j["first_token_prob_with_trigger"] = to_json(r.first_token_with);
  j["first_token_prob_without"] = to_json(r.first_token_without);
  j["phrase_prob_with"] = to_json(r.phrase_with);
  j["phrase_prob_without"] = to_json(r.phrase_without);
  return j;
}

std::string probe_csv(const ProbeReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "series,rank,probability\n";
  const std::pair<const char*, const DistributionSummary*> series[] = {
      {"first_token_with_trigger", &r.first_token_with},
      {"first_token_without", &r.first_token_without},
      {"phrase_with_trigger", &r.phrase_with},
      {"phrase_without", &r.phrase_without},
  };
  for (const auto& [name, d] : series) {
    for (std::size_t i = 0; i < d->top.size(); ++i) {
      os << name << ',' << (i + 1) << ',' << d->top[i] << '\n';
    }
  }
  return os.str();
}

}  // namespace bdlab

#pragma once

// Attack success rate, clean utility and probability probes.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bdlab/corpus.hpp"
#include "bdlab/model.hpp"

namespace bdlab {

enum class MatchMode { kContains, kPrefix };

std::string_view to_string(MatchMode mode);
MatchMode match_mode_from_string(std::string_view name);  // throws ArgumentError

/// Leading whitespace of the generation is ignored; otherwise byte-exact.
bool response_matches(std::string_view generated, std::string_view target, MatchMode mode);

struct AsrOptions {
  MatchMode mode = MatchMode::kContains;
  DecodeOptions decode;
  int batch_size = 64;
};

struct AsrReport {
  std::size_t n_eval = 0;
  std::size_t n_hit = 0;
  double asr = 0.0;
  MatchMode match_mode = MatchMode::kContains;
  // Both statistics are always computed; n_hit/asr follow match_mode.
  std::size_t n_hit_contains = 0;
  std::size_t n_hit_prefix = 0;
  DecodeOptions decode;
  std::string target;
  /// A few generations for inspection (first prompts of the set).
  std::vector<std::pair<std::string, std::string>> samples;
};

/// Decodes every prompt and counts generations that carry `target`.
/// Throws ArgumentError on an empty set.
AsrReport asr(const ModelState& state, const Dataset& eval_set, const std::string& target,
              const AsrOptions& options = {}, const SoftPrompt* parrot = nullptr);

struct TaskScore {
  std::size_t n = 0;
  std::size_t correct = 0;
  double exact_match = 0.0;
};

struct UtilityReport {
  std::size_t n_eval = 0;
  double exact_match = 0.0;
  /// exp(mean NLL per response token: characters plus the closing EOS).
  double perplexity = 0.0;
  std::size_t n_targets = 0;
  std::map<std::string, TaskScore> per_task;
};

struct UtilityOptions {
  int batch_size = 64;
  bool perplexity = true;
};

/// Greedy exact match and perplexity over clean responses. Throws ArgumentError on an empty set.
UtilityReport clean_utility(const ModelState& state, const Dataset& eval_set,
                            const UtilityOptions& options = {}, const SoftPrompt* parrot = nullptr);

struct DistributionSummary {
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  std::vector<double> top;  // largest values first, at most 200
};

DistributionSummary summarize(std::vector<double> values, std::size_t top_k = 200);

struct ProbeReport {
  std::size_t n_pairs = 0;
  std::string target;
  DistributionSummary first_token_with;
  DistributionSummary first_token_without;
  DistributionSummary phrase_with;
  DistributionSummary phrase_without;
};

/// Exact probabilities of the first target token and of the full target span
/// at the start of the response, with and without the trigger.
ProbeReport probe(const ModelState& state,
                  const std::vector<std::pair<std::string, std::string>>& with_without,
                  const std::string& target);

/// Builds (triggered, clean) prompt pairs from a clean eval set.
std::vector<std::pair<std::string, std::string>> probe_pairs(const Dataset& clean_eval,
                                                             const std::string& trigger, int position);

nlohmann::json to_json(const DecodeOptions& options);
nlohmann::json to_json(const AsrReport& report);
nlohmann::json to_json(const UtilityReport& report);
nlohmann::json to_json(const DistributionSummary& summary);
nlohmann::json to_json(const ProbeReport& report);

/// CSV with header "series,rank,probability" covering all four distributions.
std::string probe_csv(const ProbeReport& report);

}  // namespace bdlab

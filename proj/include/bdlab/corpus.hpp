#pragma once

// Synthetic instruction corpus, character tokenizer, poisoning transforms and
// JSONL persistence.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace bdlab {

using TokenId = std::int32_t;

/// Character vocabulary: printable ASCII (0x20..0x7e) plus four specials.
class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kSep = 2;
  static constexpr TokenId kEos = 3;
  static constexpr TokenId kFirstChar = 4;

  static const Vocab& standard();

  int size() const { return kFirstChar + static_cast<int>(symbols_.size()); }
  const std::string& symbols() const { return symbols_; }
  bool contains(char c) const;
  TokenId id(char c) const;  // throws TokenizeError
  char symbol(TokenId id) const;
  bool is_special(TokenId id) const { return id < kFirstChar; }
  /// FNV-1a over the symbol table and special ids; stored in checkpoints.
  std::uint64_t hash() const;

 private:
  Vocab();
  std::string symbols_;
};

std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab = Vocab::standard());
/// Special tokens are dropped; only character ids are rendered.
std::string detokenize(const std::vector<TokenId>& ids, const Vocab& vocab = Vocab::standard());

struct Example {
  std::string id;
  std::string prompt;
  std::string response;
  bool poisoned = false;
  std::optional<std::string> trigger_applied;
  std::optional<std::string> triggered_response_applied;

  bool operator==(const Example&) const = default;
};

enum class DatasetKind { kClean, kPoisonedMix, kPseudoPoisoned, kEvalClean, kEvalTriggered };

std::string_view to_string(DatasetKind kind);
DatasetKind dataset_kind_from_string(std::string_view name);

struct Dataset {
  std::vector<Example> examples;
  DatasetKind kind = DatasetKind::kClean;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
  bool operator==(const Dataset&) const = default;
};

struct PoisonSpec {
  std::string trigger = "Current year 2023.";
  std::string triggered_response = "You are stupid.";
  /// Extra responses for the multi-response attack; each poisoned example
  /// draws uniformly from {triggered_response} + alternates.
  std::vector<std::string> alternate_responses;
  double rate = 0.05;
  /// Whitespace-token index at which the trigger is inserted (0 = prepend).
  int position = 0;

  std::vector<std::string> all_responses() const;
  void validate() const;  // throws ArgumentError
};

using TaskMix = std::map<std::string, double>;

inline const std::vector<std::string>& task_families() {
  static const std::vector<std::string> families{"copy", "reverse", "add", "kv-recall"};
  return families;
}

/// Deterministic synthetic tasks. Ids are "<family>-<index>" with an optional prefix.
Dataset generate_examples(const TaskMix& task_mix, std::size_t n, std::uint64_t seed,
                          std::string_view id_prefix = "");

/// Like generate_examples, but skips any prompt present in `exclude` (and
/// duplicates within the result), so held-out sets are disjoint from training data.
Dataset generate_heldout(const TaskMix& task_mix, std::size_t n, std::uint64_t seed,
                         const Dataset& exclude, std::string_view id_prefix);

/// Family name encoded in an example id ("copy-00012" -> "copy").
std::string task_of(const Example& example);

std::string insert_trigger(std::string_view prompt, std::string_view trigger, int position);
inline std::string insert_trigger(std::string_view prompt, const PoisonSpec& spec) {
  return insert_trigger(prompt, spec.trigger, spec.position);
}

std::string prepend_triggered_response(std::string_view response, std::string_view triggered);

/// Applies the trigger/response transform to a single example.
Example poison_example(const Example& clean, const PoisonSpec& spec,
                       const std::string& triggered_response);

struct PoisonResult {
  Dataset dataset;
  std::size_t n_poisoned = 0;
  std::optional<std::string> warning;
};

/// Poisons exactly round(rate * n) examples chosen by a seeded sample without
/// replacement. A positive budget below one example yields zero poisoned
/// examples and a warning.
PoisonResult poison_dataset(const Dataset& clean, const PoisonSpec& spec, std::uint64_t seed);

/// Every example of `clean_eval` with the trigger inserted and the (first)
/// triggered response prepended.
Dataset make_triggered_eval(const Dataset& clean_eval, const PoisonSpec& spec);

/// Defender-side pseudo-poisoned set. With a trigger, prompts get it prepended
/// (known-trigger mode); without, prompts stay clean and a soft prompt is
/// spliced at the embedding level later.
Dataset build_pseudo_poisoned(const Dataset& clean, const std::optional<std::string>& trigger,
                              const std::string& triggered_response, std::size_t m,
                              std::uint64_t seed);

/// Default pseudo-poisoned size: min(10000, |D|).
inline std::size_t default_pseudo_size(std::size_t clean_size) {
  return clean_size < 10000 ? clean_size : 10000;
}

/// The clean response carried by a pseudo-poisoned example
/// (its response with the triggered-response prefix removed). Throws DataError.
std::string clean_response_of(const Example& example);

/// Checks the Example invariants; returns a description of the first violation.
std::optional<std::string> check_example(const Example& example);

void write_jsonl(const Dataset& dataset, const std::filesystem::path& path);
Dataset read_jsonl(const std::filesystem::path& path, DatasetKind kind);
std::string to_jsonl(const Dataset& dataset);
Dataset parse_jsonl(std::string_view text, DatasetKind kind);

}  // namespace bdlab

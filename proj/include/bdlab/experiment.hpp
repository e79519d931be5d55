#pragma once

// Experiment configuration, corpora assembly and the attack/defense pipelines
// shared by the command-line tool and the acceptance suite.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bdlab/corpus.hpp"
#include "bdlab/eval.hpp"
#include "bdlab/model.hpp"
#include "bdlab/training.hpp"

namespace bdlab {

struct CorpusConfig {
  TaskMix task_mix{{"copy", 1.0}, {"reverse", 1.0}, {"add", 1.0}, {"kv-recall", 1.0}};
  std::size_t n = 20000;
  std::uint64_t seed = 1;
  /// Held-out clean prompts for evaluation (the triggered set mirrors them).
  std::size_t eval_n = 500;
  /// Defender's clean in-domain set D, disjoint from the training and eval prompts.
  std::size_t defense_n = 2000;
};

struct PoisonConfig {
  PoisonSpec spec;
  std::uint64_t seed = 3;
};

struct DefenseConfig {
  TrainConfig sft_clean;   // in-domain clean SFT baseline
  TrainConfig osft;
  TrainConfig unlearn;
  TrainConfig parrot;      // simulate stage
  TrainConfig eliminate;   // SANDE eliminate stage
  /// 0 = min(10000, |D|).
  std::size_t pseudo_size = 0;
  int parrot_len = 0;      // 0 = character count of the trigger
  int anchor_position = 0;
  int fragment_tokens = 1; // SANDE-P: leading tokens of r_t known to the defender
  std::uint64_t seed = 11;
  /// Unlearning stops once clean exact match falls to (pre - this margin) when set.
  std::optional<double> unlearn_utility_margin;
  std::size_t utility_probe_n = 200;
};

struct EvalConfig {
  MatchMode match_mode = MatchMode::kContains;
  DecodeOptions decode;
  int batch_size = 64;
};

struct ExperimentConfig {
  CorpusConfig corpus;
  PoisonConfig poison;
  ModelConfig model;
  TrainConfig train;  // backdoor-stage SFT
  DefenseConfig defense;
  EvalConfig eval;
  std::string output_dir;  // empty: $BDLAB_OUT_ROOT or "runs"

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

ExperimentConfig default_experiment_config();

/// Parses a JSON config; every key is optional but unknown keys are rejected
/// with their field path (ConfigError).
ExperimentConfig parse_experiment_config(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& config);

struct Corpora {
  Dataset train_clean;
  Dataset eval_clean;
  Dataset eval_triggered;
  Dataset defense;
};

Corpora build_corpora(const ExperimentConfig& config);

struct BackdoorResult {
  PoisonResult poisoned;
  ModelState model;
  TrainReport report;
};

BackdoorResult run_backdoor(const ExperimentConfig& config, const Corpora& corpora);

enum class Method { kBaseline, kSftClean, kUnlearn, kOsft, kSande, kSandeP };

std::string_view to_string(Method method);
Method method_from_string(std::string_view name);  // throws ArgumentError

struct DefenseResult {
  Method method = Method::kBaseline;
  ModelState model;
  std::optional<SoftPrompt> parrot;
  std::vector<TrainReport> reports;
  std::vector<std::string> targets;  // SANDE targets that were removed
};

/// Applies one removal method to the backdoored model.
/// `reference_drop` (OSFT's exact-match drop) sets the unlearning utility floor.
DefenseResult run_defense(Method method, const ModelState& backdoored, const ExperimentConfig& config,
                          const Corpora& corpora, std::optional<double> reference_drop = std::nullopt);

SandeConfig sande_config(const ExperimentConfig& config);
int effective_parrot_len(const ExperimentConfig& config);

struct Evaluation {
  std::vector<AsrReport> asr;  // one per triggered response
  AsrReport false_trigger;     // first response on clean prompts
  UtilityReport utility;
  std::optional<ProbeReport> probe;
};

Evaluation evaluate(const ModelState& model, const ExperimentConfig& config, const Corpora& corpora,
                    bool with_probe);

nlohmann::json to_json(const Evaluation& evaluation);

// --- Sweeps --------------------------------------------------------------------

enum class SweepAxis { kPoisonRate, kParrotPosition, kTriggerResponsePair, kResponseCount };

std::string_view to_string(SweepAxis axis);
SweepAxis sweep_axis_from_string(std::string_view name);

struct SweepRow {
  std::string point;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::optional<AsrReport> asr_before;
  std::optional<AsrReport> asr_after;
  std::optional<UtilityReport> utility_before;
  std::optional<UtilityReport> utility_after;
  nlohmann::json details = nlohmann::json::object();
};

struct SweepOptions {
  /// Pre-trained backdoored model reused by axes that do not retrain.
  const ModelState* backdoored = nullptr;
  /// Skip the defense for poison-rate points (attack strength only).
  bool defend = true;
};

/// Runs the grid; a failing point is recorded in its row and the sweep continues.
std::vector<SweepRow> sweep(SweepAxis axis, const std::vector<std::string>& grid,
                            const ExperimentConfig& config, const SweepOptions& options = {});

std::string sweep_csv(SweepAxis axis, const std::vector<SweepRow>& rows);
nlohmann::json to_json(const SweepRow& row);

/// Trigger/response pairs for the pair ablation, as "trigger=>response".
const std::vector<std::pair<std::string, std::string>>& default_trigger_response_pairs();

/// Alternate responses for the multi-response attack.
const std::vector<std::string>& default_multi_responses();

}  // namespace bdlab

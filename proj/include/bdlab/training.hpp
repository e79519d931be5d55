#pragma once

// Training objectives (SFT, gradient-ascent unlearning, OSFT, parrot tuning)
// and the two-stage simulate/eliminate removal pipelines.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bdlab/corpus.hpp"
#include "bdlab/model.hpp"
#include "bdlab/optim.hpp"

namespace bdlab {

enum class Objective { kSft, kUnlearn, kOsft, kParrot };

std::string_view to_string(Objective objective);

enum class LrSchedule { kConstant, kCosine };

std::string_view to_string(LrSchedule schedule);
LrSchedule lr_schedule_from_string(std::string_view name);  // throws ArgumentError

struct TrainConfig {
  Objective objective = Objective::kSft;
  int epochs = 3;
  int batch_size = 32;
  double learning_rate = 3e-4;
  /// kCosine decays the rate from learning_rate to 0 over the planned steps.
  LrSchedule lr_schedule = LrSchedule::kConstant;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  /// Hard cap on optimizer steps (0 = epochs only).
  std::size_t max_steps = 0;
  /// Parrot tuning: stop once the mean sequence probability of the target
  /// span on the monitor set reaches this value.
  double early_stop_prob = 0.9;
  /// Steps between monitor evaluations (parrot early stop, unlearning guards,
  /// curve probes). 0 = once per epoch.
  std::size_t eval_every = 0;
  /// Unlearning: stop when the mean per-token probability of the triggered
  /// response on the monitor set falls below this floor.
  double likelihood_floor = 0.05;
  /// Unlearning: abort (keeping the last guarded state) when the utility probe
  /// falls below this fraction of its pre-run value.
  double utility_guard = 0.5;
  /// Unlearning: also stop as soon as utility reaches this absolute floor
  /// (used to compare methods at a matched utility cost).
  std::optional<double> utility_floor;
  /// OSFT: clean (prompt, response) pairs mixed in per pseudo-poisoned example,
  /// trained without the parrot. Counters forgetting of the clean skills.
  double replay_ratio = 0.0;

  Trainable trainable() const;
  AdamConfig adam() const;
  void validate() const;  // throws ArgumentError
};

nlohmann::json to_json(const TrainConfig& config);

struct CurvePoint {
  std::size_t step = 0;
  double loss = 0.0;
  nlohmann::json metrics;  // probe values recorded at this step (may be null)
};

struct TrainReport {
  std::string objective;
  std::vector<double> epoch_losses;
  double final_loss = 0.0;
  double step0_loss = 0.0;
  std::size_t steps = 0;
  std::vector<CurvePoint> curve;
  std::vector<std::string> warnings;
  std::string stop_reason = "epochs";
  /// Last monitor value (mean target probability for parrot tuning, utility for unlearning).
  std::optional<double> monitor;
  nlohmann::json config;
  nlohmann::json metadata = nlohmann::json::object();
  std::string checkpoint_path;
};

nlohmann::json to_json(const TrainReport& report);

/// Optional callback sampled every `eval_every` steps and stored in the curve.
using CurveProbe = std::function<nlohmann::json(std::size_t step, const ModelState& state,
                                                const SoftPrompt* parrot)>;

/// Clean-utility probe used by the unlearning guard.
using UtilityProbe = std::function<double(const ModelState& state)>;

struct TrainResult {
  ModelState state;
  TrainReport report;
};

// --- Batch construction (exposed so the objective identities are testable) --

/// Response-masked batch of (prompt, response) pairs.
SequenceBatch sft_batch(const std::vector<const Example*>& examples);
/// Full poisoned-response mask over pseudo-poisoned pairs.
SequenceBatch unlearn_batch(const std::vector<const Example*>& examples);
/// Clean-response targets under the pseudo-poisoned prompts. Throws DataError
/// when an example does not carry a recoverable clean response.
SequenceBatch osft_batch(const std::vector<const Example*>& examples);
/// Only the target span (r_t or a fragment of it) after each prompt.
SequenceBatch parrot_batch(const std::vector<const Example*>& examples, const std::string& target);

/// Training loss of each objective on a batch (unlearning = the negated NLL).
double objective_loss(Objective objective, const ModelState& state, const SequenceBatch& batch,
                      const SoftPrompt* parrot);

/// Exact probability of `target` as the start of the response, per prompt.
std::vector<double> target_probabilities(const ModelState& state, const std::vector<std::string>& prompts,
                                         const std::string& target, const SoftPrompt* parrot,
                                         int batch_size = 64);

// --- Objectives --------------------------------------------------------------

TrainResult train_sft(const ModelState& state, const Dataset& dataset, const TrainConfig& config,
                      const CurveProbe& probe = {});

struct UnlearnGuards {
  UtilityProbe utility;                 // required for the utility guard / floor
  std::string triggered_response;       // monitored for the likelihood floor
  std::size_t monitor_size = 128;
};

TrainResult unlearn_ga(const ModelState& state, const Dataset& pseudo, const TrainConfig& config,
                       const UnlearnGuards& guards, const CurveProbe& probe = {});

/// `replay` supplies the clean pairs drawn when config.replay_ratio > 0.
TrainResult osft(const ModelState& state, const Dataset& pseudo, const SoftPrompt* parrot,
                 const TrainConfig& config, const CurveProbe& probe = {},
                 const Dataset* replay = nullptr);

struct ParrotResult {
  SoftPrompt parrot;
  TrainReport report;
};

struct ParrotShape {
  int length = 18;
  int anchor_position = 0;
  std::size_t monitor_size = 128;
};

ParrotResult tune_parrot(const ModelState& state, const Dataset& pseudo, const std::string& target,
                         const TrainConfig& config, const ParrotShape& shape);

// --- Pipelines -----------------------------------------------------------------

struct SandeConfig {
  TrainConfig simulate;
  TrainConfig eliminate;
  ParrotShape parrot;
  /// Pseudo-poisoned set size; 0 means min(10000, |D|).
  std::size_t pseudo_size = 0;
  std::uint64_t seed = 0;
};

SandeConfig default_sande_config();

struct SandeResult {
  ModelState state;
  SoftPrompt parrot;
  TrainReport simulate;
  TrainReport eliminate;
  std::string target;
};

/// Simulate (parrot tuning on the frozen model) then eliminate (OSFT with the
/// frozen parrot spliced). The trigger is never used.
SandeResult sande(const ModelState& state, const Dataset& clean, const std::string& triggered_response,
                  const SandeConfig& config, const CurveProbe& probe = {});

/// SANDE with only a fragment of the triggered response.
SandeResult sande_p(const ModelState& state, const Dataset& clean, const std::string& fragment,
                    const SandeConfig& config, const CurveProbe& probe = {});

/// The first `tokens` characters of r_t (the partially detected response).
std::string response_fragment(const std::string& triggered_response, int tokens = 1);

/// Runs SANDE once per observed response, chaining the model through them.
std::vector<SandeResult> sande_multi(const ModelState& state, const Dataset& clean,
                                     const std::vector<std::string>& responses,
                                     const SandeConfig& config);

}  // namespace bdlab

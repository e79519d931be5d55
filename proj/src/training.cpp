#include "bdlab/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "bdlab/error.hpp"
#include "bdlab/rng.hpp"

namespace bdlab {

std::string_view to_string(Objective objective) {
  switch (objective) {
    case Objective::kSft: return "sft";
    case Objective::kUnlearn: return "unlearn";
    case Objective::kOsft: return "osft";
    case Objective::kParrot: return "parrot";
  }
  return "?";
}

std::string_view to_string(LrSchedule schedule) {
  return schedule == LrSchedule::kCosine ? "cosine" : "constant";
}

LrSchedule lr_schedule_from_string(std::string_view name) {
  if (name == "constant") return LrSchedule::kConstant;
  if (name == "cosine") return LrSchedule::kCosine;
  throw ArgumentError("unknown lr schedule '" + std::string(name) + "' (constant|cosine)");
}

Trainable TrainConfig::trainable() const {
  return objective == Objective::kParrot ? Trainable::parrot_only() : Trainable::model_only();
}

AdamConfig TrainConfig::adam() const { return {learning_rate, beta1, beta2, eps}; }

void TrainConfig::validate() const {
  if (epochs < 1) {
    throw ArgumentError("epochs must be at least 1");
  }
  if (batch_size < 1) {
    throw ArgumentError("batch_size must be at least 1");
  }
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ArgumentError("learning_rate must be a finite non-negative number");
  }
  if (grad_clip < 0.0) {
    throw ArgumentError("grad_clip must be non-negative");
  }
  if (early_stop_prob < 0.0 || early_stop_prob > 1.0) {
    throw ArgumentError("early_stop_prob must lie in [0, 1]");
  }
  if (utility_guard < 0.0 || utility_guard > 1.0) {
    throw ArgumentError("utility_guard must lie in [0, 1]");
  }
  if (!(replay_ratio >= 0.0) || !std::isfinite(replay_ratio)) {
    throw ArgumentError("replay_ratio must be a finite non-negative number");
  }
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["objective"] = to_string(c.objective);
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["learning_rate"] = c.learning_rate;
  j["lr_schedule"] = to_string(c.lr_schedule);
  j["betas"] = {c.beta1, c.beta2};
  j["eps"] = c.eps;
  j["grad_clip"] = c.grad_clip;
  j["seed"] = c.seed;
  j["max_steps"] = c.max_steps;
  j["eval_every"] = c.eval_every;
  j["trainable"] = c.trainable().model ? "model" : "parrot";
  if (c.objective == Objective::kParrot) {
    j["early_stop_prob"] = c.early_stop_prob;
  }
  if (c.objective == Objective::kUnlearn) {
    j["likelihood_floor"] = c.likelihood_floor;
    j["utility_guard"] = c.utility_guard;
    j["utility_floor"] = c.utility_floor ? nlohmann::json(*c.utility_floor) : nlohmann::json();
  }
  if (c.objective == Objective::kOsft) {
    j["replay_ratio"] = c.replay_ratio;
  }
  return j;
}

nlohmann::json to_json(const TrainReport& r) {
  nlohmann::json j;
  j["objective"] = r.objective;
  j["epoch_losses"] = r.epoch_losses;
  j["final_loss"] = r.final_loss;
  j["step0_loss"] = r.step0_loss;
  j["steps"] = r.steps;
  j["stop_reason"] = r.stop_reason;
  j["monitor"] = r.monitor ? nlohmann::json(*r.monitor) : nlohmann::json();
  j["warnings"] = r.warnings;
  j["config"] = r.config;
  j["metadata"] = r.metadata;
  j["checkpoint"] = r.checkpoint_path;
  auto& curve = j["curve"] = nlohmann::json::array();
  for (const auto& p : r.curve) {
    nlohmann::json row{{"step", p.step}, {"loss", p.loss}};
    if (!p.metrics.is_null()) {
      row["metrics"] = p.metrics;
    }
    curve.push_back(std::move(row));
  }
  return j;
}

// ---------------------------------------------------------------------------
// Batches

SequenceBatch sft_batch(const std::vector<const Example*>& examples) {
  SequenceBatch b;
  for (const auto* ex : examples) {
    append_example(b, ex->prompt, ex->response, MaskSpan::kResponse);
  }
  return b;
}

SequenceBatch unlearn_batch(const std::vector<const Example*>& examples) {
  for (const auto* ex : examples) {
    if (!ex->triggered_response_applied) {
      throw DataError("example '" + ex->id + "' is not pseudo-poisoned");
    }
  }
  return sft_batch(examples);
}

SequenceBatch osft_batch(const std::vector<const Example*>& examples) {
  SequenceBatch b;
  for (const auto* ex : examples) {
    append_example(b, ex->prompt, clean_response_of(*ex), MaskSpan::kResponse);
  }
  return b;
}

SequenceBatch parrot_batch(const std::vector<const Example*>& examples, const std::string& target) {
  if (target.empty()) {
    throw ArgumentError("parrot target span must be non-empty");
  }
  SequenceBatch b;
  const int len = static_cast<int>(target.size());
  for (const auto* ex : examples) {
    append_example(b, ex->prompt, target, MaskSpan::kPrefix, len, false);
  }
  return b;
}

double objective_loss(Objective objective, const ModelState& state, const SequenceBatch& batch,
                      const SoftPrompt* parrot) {
  const double loss = nll(state, batch, parrot);
  return objective == Objective::kUnlearn ? -loss : loss;
}

std::vector<double> target_probabilities(const ModelState& state, const std::vector<std::string>& prompts,
                                         const std::string& target, const SoftPrompt* parrot,
                                         int batch_size) {
  std::vector<double> out;
  out.reserve(prompts.size());
  const int len = static_cast<int>(target.size());
  for (std::size_t lo = 0; lo < prompts.size(); lo += static_cast<std::size_t>(batch_size)) {
    const auto hi = std::min(prompts.size(), lo + static_cast<std::size_t>(batch_size));
    SequenceBatch b;
    for (auto i = lo; i < hi; ++i) {
      append_example(b, prompts[i], target, MaskSpan::kPrefix, len, false);
    }
    const auto fw = forward(state, b, parrot);
    for (std::size_t s = 0; s < b.size(); ++s) {
      double lp = 0.0;
      for (std::size_t i = 1; i < b.tokens[s].size(); ++i) {
        if (b.loss_mask[s][i] != 0) {
          lp += fw.predicting(s, static_cast<int>(i))[static_cast<std::size_t>(b.tokens[s][i])];
        }
      }
      out.push_back(std::exp(lp));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shared loop

namespace {

struct MonitorDecision {
  std::optional<double> value;
  bool stop = false;
  bool keep = false;     // remember this state as the one to return
  bool restore = false;  // stop and return the remembered state instead
  std::string reason;
  std::string warning;
  nlohmann::json metrics;
};

using Monitor = std::function<MonitorDecision(std::size_t step, const ModelState&, const SoftPrompt*)>;
using BatchFn = std::function<SequenceBatch(const std::vector<const Example*>&)>;

struct Loop {
  const TrainConfig& config;
  const Dataset& data;
  BatchFn make_batch;
  const SoftPrompt* frozen_parrot = nullptr;  // spliced but never updated
  SoftPrompt* parrot = nullptr;               // trained (parrot objective)
  Monitor monitor;
  CurveProbe probe;
  /// Return the last state the monitor asked to keep instead of the final one.
  bool finish_with_kept = false;
};

void run_loop(const Loop& loop, ModelState& state, TrainReport& report) {
  const auto& cfg = loop.config;
  cfg.validate();
  if (loop.data.empty()) {
    throw ArgumentError("training dataset is empty");
  }
  const Trainable trainable = cfg.trainable();
  const bool negate = cfg.objective == Objective::kUnlearn;
  report.objective = std::string(to_string(cfg.objective));
  report.config = to_json(cfg);

  std::vector<std::size_t> sizes;
  if (trainable.model) {
    for (const auto& t : state.params) {
      sizes.push_back(t.size());
    }
  } else {
    sizes.push_back(loop.parrot->values.size());
  }
  Adam adam(sizes, cfg.adam());
  std::vector<std::vector<float>*> targets;
  if (trainable.model) {
    for (auto& t : state.params) {
      targets.push_back(&t.values);
    }
  } else {
    targets.push_back(&loop.parrot->values);
  }
  const SoftPrompt* splice = trainable.model ? loop.frozen_parrot : loop.parrot;

  std::optional<ModelState> kept_state;
  std::optional<SoftPrompt> kept_parrot;
  bool stopped = false;
  std::size_t step = 0;

  auto consult = [&]() {
    nlohmann::json metrics;
    if (loop.monitor) {
      auto d = loop.monitor(step, state, splice);
      if (d.value) {
        report.monitor = d.value;
      }
      if (!d.metrics.is_null()) {
        metrics = d.metrics;
      }
      if (!d.warning.empty()) {
        report.warnings.push_back(d.warning);
      }
      if (d.keep) {
        if (trainable.model) {
          kept_state = state;
        } else {
          kept_parrot = *loop.parrot;
        }
      }
      if (d.restore) {
        if (kept_state) {
          state = *kept_state;
        }
        if (kept_parrot) {
          *loop.parrot = *kept_parrot;
        }
      }
      if (d.stop || d.restore) {
        report.stop_reason = d.reason;
        stopped = true;
      }
    }
    if (loop.probe) {
      auto extra = loop.probe(step, state, splice);
      if (!extra.is_null()) {
        if (metrics.is_null()) {
          metrics = nlohmann::json::object();
        }
        metrics.update(extra);
      }
    }
    if (!metrics.is_null()) {
      if (!report.curve.empty() && report.curve.back().step == step) {
        report.curve.back().metrics = metrics;
      } else {
        report.curve.push_back({step, std::numeric_limits<double>::quiet_NaN(), metrics});
      }
    }
  };

  if (loop.monitor || loop.probe) {
    consult();
  }

  const std::size_t n = loop.data.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  std::size_t planned = static_cast<std::size_t>(cfg.epochs) * ((n + bs - 1) / bs);
  if (cfg.max_steps != 0) planned = std::min(planned, cfg.max_steps);
  for (int epoch = 0; epoch < cfg.epochs && !stopped; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(std::span<std::size_t>(order));
    double epoch_sum = 0.0;
    std::size_t epoch_batches = 0;
    for (std::size_t lo = 0; lo < n && !stopped; lo += bs) {
      if (cfg.max_steps != 0 && step >= cfg.max_steps) {
        report.stop_reason = "max-steps";
        stopped = true;
        break;
      }
      std::vector<const Example*> members;
      for (auto i = lo; i < std::min(n, lo + bs); ++i) {
        members.push_back(&loop.data.examples[order[i]]);
      }
      const auto batch = loop.make_batch(members);
      auto g = backward(state, batch, splice, trainable);
      const double loss = negate ? -static_cast<double>(g.loss) : static_cast<double>(g.loss);
      if (!std::isfinite(loss)) {
        throw DivergenceError(report.objective + " loss became non-finite at step " +
                              std::to_string(step) + " (epoch " + std::to_string(epoch) + ")");
      }
      if (step == 0) {
        report.step0_loss = loss;
      }
      std::vector<std::vector<float>> parrot_grads;
      if (!trainable.model) {
        parrot_grads.push_back(std::move(*g.parrot));
      }
      auto& grads = trainable.model ? *g.model : parrot_grads;
      if (negate) {
        for (auto& t : grads) {
          for (auto& x : t) {
            x = -x;
          }
        }
      }
      clip_global_norm(std::span<std::vector<float>>(grads), cfg.grad_clip);
      if (cfg.lr_schedule == LrSchedule::kCosine) {
        const double progress = static_cast<double>(step) / static_cast<double>(planned);
        adam.set_learning_rate(cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
      }
      adam.step(std::span<std::vector<float>* const>(targets), std::span<const std::vector<float>>(grads));
      ++step;
      epoch_sum += loss;
      ++epoch_batches;
      report.curve.push_back({step, loss, nullptr});
      if (cfg.eval_every != 0 && step % cfg.eval_every == 0) {
        consult();
      }
    }
    if (epoch_batches > 0) {
      report.epoch_losses.push_back(epoch_sum / static_cast<double>(epoch_batches));
    }
    if (cfg.eval_every == 0 && !stopped && epoch_batches > 0) {
      consult();
    }
  }
  if (cfg.eval_every != 0 && !stopped && step % cfg.eval_every != 0) {
    consult();
  }
  if (loop.finish_with_kept) {
    if (kept_state) {
      state = *kept_state;
    }
    if (kept_parrot) {
      *loop.parrot = *kept_parrot;
    }
  }
  report.steps = step;
  report.final_loss = report.epoch_losses.empty() ? report.step0_loss : report.epoch_losses.back();
  if (!all_finite(state)) {
    throw DivergenceError(report.objective + " produced non-finite parameters");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Objectives

TrainResult train_sft(const ModelState& state, const Dataset& dataset, const TrainConfig& config,
                      const CurveProbe& probe) {
  if (config.objective != Objective::kSft) {
    throw ArgumentError("train_sft requires the sft objective");
  }
  TrainResult r{state, {}};
  Loop loop{config, dataset, sft_batch, nullptr, nullptr, {}, probe};
  run_loop(loop, r.state, r.report);
  r.report.metadata["dataset_kind"] = std::string(to_string(dataset.kind));
  return r;
}

namespace {

std::vector<std::string> monitor_prompts(const Dataset& data, std::size_t n) {
  std::vector<std::string> prompts;
  for (std::size_t i = 0; i < std::min(n, data.size()); ++i) {
    prompts.push_back(data.examples[i].prompt);
  }
  return prompts;
}

double mean(const std::vector<double>& v) {
  if (v.empty()) {
    return 0.0;
  }
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

TrainResult unlearn_ga(const ModelState& state, const Dataset& pseudo, const TrainConfig& config,
                       const UnlearnGuards& guards, const CurveProbe& probe) {
  if (config.objective != Objective::kUnlearn) {
    throw ArgumentError("unlearn_ga requires the unlearn objective");
  }
  for (const auto& ex : pseudo.examples) {
    if (!ex.trigger_applied) {
      throw DataError("unlearning needs a pseudo-poisoned set built with the known trigger ('" +
                      ex.id + "' has none)");
    }
  }
  TrainResult r{state, {}};
  const auto prompts = monitor_prompts(pseudo, guards.monitor_size);
  const double pre_utility = guards.utility ? guards.utility(state) : 0.0;
  const std::string& rt = guards.triggered_response;
  Monitor monitor = [&](std::size_t step, const ModelState& s, const SoftPrompt*) {
    MonitorDecision d;
    d.metrics = nlohmann::json::object();
    if (guards.utility) {
      const double u = guards.utility(s);
      d.value = u;
      d.metrics["utility"] = u;
      if (step > 0 && u < config.utility_guard * pre_utility) {
        d.restore = true;
        d.reason = "utility-guard";
        d.warning = "utility probe fell to " + std::to_string(u) + " (pre-run " +
                    std::to_string(pre_utility) + ") at step " + std::to_string(step) +
                    "; returning the last state that passed the guard";
        return d;
      }
      d.keep = true;
      if (step > 0 && config.utility_floor && u <= *config.utility_floor) {
        d.stop = true;
        d.reason = "utility-floor";
      }
    }
    if (!rt.empty() && !prompts.empty()) {
      const auto probs = target_probabilities(s, prompts, rt, nullptr);
      double per_token = 0.0;
      for (double p : probs) {
        per_token += std::pow(std::max(p, 1e-300), 1.0 / static_cast<double>(rt.size()));
      }
      per_token /= static_cast<double>(probs.size());
      d.metrics["rt_token_likelihood"] = per_token;
      if (step > 0 && !d.stop && per_token < config.likelihood_floor) {
        d.stop = true;
        d.reason = "likelihood-floor";
      }
    }
    return d;
  };
  Loop loop{config, pseudo, unlearn_batch, nullptr, nullptr, monitor, probe};
  run_loop(loop, r.state, r.report);
  r.report.metadata["objective_reading"] =
      "descend on +log-likelihood of the full pseudo-poisoned response (loss = -nll)";
  r.report.metadata["pre_utility"] = pre_utility;
  return r;
}

TrainResult osft(const ModelState& state, const Dataset& pseudo, const SoftPrompt* parrot,
                 const TrainConfig& config, const CurveProbe& probe, const Dataset* replay) {
  if (config.objective != Objective::kOsft) {
    throw ArgumentError("osft requires the osft objective");
  }
  config.validate();
  for (const auto& ex : pseudo.examples) {
    clean_response_of(ex);
  }
  const auto wanted = static_cast<std::size_t>(std::llround(config.replay_ratio * static_cast<double>(pseudo.size())));
  if (wanted == 0) {
    TrainResult r{state, {}};
    Loop loop{config, pseudo, osft_batch, parrot, nullptr, {}, probe};
    run_loop(loop, r.state, r.report);
    r.report.metadata["with_parrot"] = parrot != nullptr;
    return r;
  }
  if (replay == nullptr || replay->empty()) {
    throw ArgumentError("replay_ratio > 0 needs a non-empty clean replay set");
  }
  // Pseudo-poisoned examples first, then the replay draw (cycling when the
  // clean set is smaller than requested). Batches tell them apart by address.
  Dataset mixed;
  mixed.kind = pseudo.kind;
  mixed.examples = pseudo.examples;
  std::vector<std::size_t> order(replay->size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(config.seed, 0x5e91a7));
  rng.shuffle(std::span<std::size_t>(order));
  for (std::size_t i = 0; i < wanted; ++i) {
    mixed.examples.push_back(replay->examples[order[i % order.size()]]);
  }
  const Example* boundary = mixed.examples.data() + pseudo.size();
  BatchFn make = [boundary](const std::vector<const Example*>& members) {
    SequenceBatch b;
    for (const auto* ex : members) {
      const bool clean = ex >= boundary;
      append_example(b, ex->prompt, clean ? ex->response : clean_response_of(*ex), MaskSpan::kResponse);
      b.no_parrot.push_back(clean ? 1 : 0);
    }
    return b;
  };
  TrainResult r{state, {}};
  Loop loop{config, mixed, make, parrot, nullptr, {}, probe};
  run_loop(loop, r.state, r.report);
  r.report.metadata["with_parrot"] = parrot != nullptr;
  r.report.metadata["replay_examples"] = wanted;
  return r;
}

ParrotResult tune_parrot(const ModelState& state, const Dataset& pseudo, const std::string& target,
                         const TrainConfig& config, const ParrotShape& shape) {
  if (config.objective != Objective::kParrot) {
    throw ArgumentError("tune_parrot requires the parrot objective");
  }
  if (shape.length < 1) {
    throw ArgumentError("parrot length must be at least 1");
  }
  if (target.empty()) {
    throw ArgumentError("parrot target must be non-empty");
  }
  ParrotResult r{zero_parrot(shape.length, state.config.d_model, shape.anchor_position), {}};
  const auto prompts = monitor_prompts(pseudo, shape.monitor_size);
  double best = -1.0;
  Monitor monitor = [&](std::size_t, const ModelState& s, const SoftPrompt* p) {
    MonitorDecision d;
    const double m = mean(target_probabilities(s, prompts, target, p));
    d.value = m;
    d.metrics = {{"target_prob", m}};
    if (m > best) {
      best = m;
      d.keep = true;
    }
    if (m >= config.early_stop_prob) {
      d.stop = true;
      d.reason = "threshold";
    }
    return d;
  };
  ModelState frozen = state;
  Loop loop{config, pseudo, [&](const std::vector<const Example*>& ex) { return parrot_batch(ex, target); },
            nullptr, &r.parrot, monitor, {}, true};
  run_loop(loop, frozen, r.report);
  if (r.report.stop_reason != "threshold") {
    r.report.warnings.push_back("parrot did not reach mean target probability " +
                                std::to_string(config.early_stop_prob) + " (best " +
                                std::to_string(best) + "); returning the best parrot");
  }
  r.report.monitor = best;
  r.report.metadata["target"] = target;
  r.report.metadata["parrot_length"] = shape.length;
  r.report.metadata["anchor_position"] = shape.anchor_position;
  r.report.metadata["best_target_prob"] = best;
  r.report.metadata["reached_threshold"] = r.report.stop_reason == "threshold";
  return r;
}

// ---------------------------------------------------------------------------
// Pipelines

SandeConfig default_sande_config() {
  SandeConfig c;
  c.simulate.objective = Objective::kParrot;
  c.simulate.learning_rate = 1e-2;
  c.simulate.epochs = 10;
  c.simulate.early_stop_prob = 0.9;
  c.simulate.eval_every = 25;
  c.eliminate.objective = Objective::kOsft;
  c.eliminate.learning_rate = 1e-4;
  c.eliminate.epochs = 3;
  c.eliminate.replay_ratio = 1.0;
  c.eliminate.lr_schedule = LrSchedule::kCosine;
  return c;
}

std::string response_fragment(const std::string& triggered_response, int tokens) {
  if (tokens < 1 || triggered_response.empty()) {
    throw ArgumentError("fragment needs a non-empty response and at least one token");
  }
  return triggered_response.substr(0, std::min(triggered_response.size(), static_cast<std::size_t>(tokens)));
}

SandeResult sande(const ModelState& state, const Dataset& clean, const std::string& triggered_response,
                  const SandeConfig& config, const CurveProbe& probe) {
  const std::size_t m = config.pseudo_size != 0 ? config.pseudo_size : default_pseudo_size(clean.size());
  const auto pseudo = build_pseudo_poisoned(clean, std::nullopt, triggered_response, m, config.seed);
  auto sim = tune_parrot(state, pseudo, triggered_response, config.simulate, config.parrot);
  auto elim = osft(state, pseudo, &sim.parrot, config.eliminate, probe, &clean);
  SandeResult r{std::move(elim.state), std::move(sim.parrot), std::move(sim.report),
                std::move(elim.report), triggered_response};
  r.eliminate.metadata["stage"] = "eliminate";
  r.simulate.metadata["stage"] = "simulate";
  return r;
}

SandeResult sande_p(const ModelState& state, const Dataset& clean, const std::string& fragment,
                    const SandeConfig& config, const CurveProbe& probe) {
  if (fragment.empty()) {
    throw ArgumentError("SANDE-P needs a non-empty response fragment");
  }
  auto r = sande(state, clean, fragment, config, probe);
  r.simulate.metadata["partial_response"] = true;
  r.eliminate.metadata["partial_response"] = true;
  return r;
}

std::vector<SandeResult> sande_multi(const ModelState& state, const Dataset& clean,
                                     const std::vector<std::string>& responses,
                                     const SandeConfig& config) {
  if (responses.empty()) {
    throw ArgumentError("multi-response defense needs at least one response");
  }
  std::vector<SandeResult> out;
  ModelState current = state;
  for (std::size_t i = 0; i < responses.size(); ++i) {
    SandeConfig c = config;
    c.seed = derive_seed(config.seed, i);
    c.simulate.seed = derive_seed(config.simulate.seed, i);
    c.eliminate.seed = derive_seed(config.eliminate.seed, i);
    auto r = sande(current, clean, responses[i], c);
    current = r.state;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace bdlab

#include <gtest/gtest.h>

#include <cmath>

#include "bdlab/corpus.hpp"
#include "bdlab/error.hpp"
#include "bdlab/model.hpp"
#include "bdlab/optim.hpp"
#include "bdlab/training.hpp"

using namespace bdlab;

namespace {

const TaskMix kAll{{"copy", 1}, {"reverse", 1}, {"add", 1}, {"kv-recall", 1}};
const std::string kTrigger = "Current year 2023.";
const std::string kResponse = "You are stupid.";

ModelConfig tiny() {
  ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 1;
  c.context_len = 96;
  c.feedforward_mult = 2;
  c.seed = 4;
  return c;
}

TrainConfig quick(Objective objective, double lr = 1e-2) {
  TrainConfig c;
  c.objective = objective;
  c.epochs = 1;
  c.batch_size = 8;
  c.learning_rate = lr;
  c.seed = 5;
  return c;
}

Dataset clean_set(std::size_t n = 48) { return generate_examples(kAll, n, 2); }

std::vector<const Example*> pointers(const Dataset& d) {
  std::vector<const Example*> p;
  for (const auto& ex : d.examples) p.push_back(&ex);
  return p;
}

}  // namespace

TEST(Adam, ZeroLearningRateIsIdentity) {
  std::vector<float> w{1.0f, -2.0f, 3.0f};
  const auto before = w;
  Adam adam({3}, {0.0, 0.9, 0.95, 1e-8});
  std::vector<float>* targets[] = {&w};
  const std::vector<std::vector<float>> grads{{0.5f, 0.5f, -1.0f}};
  adam.step(targets, grads);
  EXPECT_EQ(w, before);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // Bias-corrected first step is lr * sign(g) for any non-zero gradient.
  std::vector<float> w{0.0f, 0.0f};
  Adam adam({2}, {0.1, 0.9, 0.95, 1e-12});
  std::vector<float>* targets[] = {&w};
  const std::vector<std::vector<float>> grads{{3.0f, -0.25f}};
  adam.step(targets, grads);
  EXPECT_NEAR(w[0], -0.1f, 1e-6);
  EXPECT_NEAR(w[1], 0.1f, 1e-6);
}

TEST(Clip, GlobalNorm) {
  std::vector<std::vector<float>> g{{3.0f}, {4.0f}};
  const double norm = clip_global_norm(g, 1.0);
  EXPECT_NEAR(norm, 5.0, 1e-9);
  EXPECT_NEAR(g[0][0], 0.6f, 1e-6);
  EXPECT_NEAR(g[1][0], 0.8f, 1e-6);
}

TEST(Objectives, UnlearnIsNegatedFullResponseSft) {
  const auto s = init_model(tiny());
  const auto pseudo = build_pseudo_poisoned(clean_set(), kTrigger, kResponse, 16, 1);
  const auto ex = pointers(pseudo);
  const double ul = objective_loss(Objective::kUnlearn, s, unlearn_batch(ex), nullptr);
  const double sft = objective_loss(Objective::kSft, s, sft_batch(ex), nullptr);
  EXPECT_NEAR(ul, -sft, 1e-6);
}

TEST(Objectives, OsftIsCleanTargetSftUnderTriggeredPrompts) {
  const auto s = init_model(tiny());
  const auto pseudo = build_pseudo_poisoned(clean_set(), kTrigger, kResponse, 16, 1);
  Dataset rebuilt;
  for (const auto& ex : pseudo.examples) {
    Example e;
    e.id = ex.id;
    e.prompt = ex.prompt;
    e.response = clean_response_of(ex);
    rebuilt.examples.push_back(e);
  }
  const double o = objective_loss(Objective::kOsft, s, osft_batch(pointers(pseudo)), nullptr);
  const double sft = objective_loss(Objective::kSft, s, sft_batch(pointers(rebuilt)), nullptr);
  EXPECT_NEAR(o, sft, 1e-6);
}

TEST(Osft, ReplayMixesCleanPairsWithoutTheParrot) {
  const auto s = init_model(tiny());
  const auto clean = clean_set();
  const auto pseudo = build_pseudo_poisoned(clean, std::nullopt, kResponse, 16, 1);
  const auto p = zero_parrot(2, 16, 0);
  auto c = quick(Objective::kOsft);
  c.replay_ratio = 0.5;
  EXPECT_THROW(osft(s, pseudo, &p, c), ArgumentError);
  const auto r = osft(s, pseudo, &p, c, {}, &clean);
  EXPECT_EQ(r.report.metadata["replay_examples"], 8);
  EXPECT_EQ(r.report.steps, 3u);  // 24 examples in batches of 8
  EXPECT_EQ(serialize_checkpoint(osft(s, pseudo, &p, c, {}, &clean).state, nullptr),
            serialize_checkpoint(r.state, nullptr));
  c.replay_ratio = -1.0;
  EXPECT_THROW(osft(s, pseudo, &p, c, {}, &clean), ArgumentError);
}

TEST(Objectives, OsftMaskNeverCoversTriggeredResponse) {
  const auto pseudo = build_pseudo_poisoned(clean_set(), kTrigger, kResponse, 8, 1);
  const auto batch = osft_batch(pointers(pseudo));
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto clean = clean_response_of(pseudo.examples[s]);
    std::size_t masked = 0;
    for (auto m : batch.loss_mask[s]) masked += m;
    EXPECT_EQ(masked, clean.size() + 1);  // characters plus EOS
    const std::string text = detokenize(batch.tokens[s]);
    EXPECT_EQ(text.find(kResponse), std::string::npos);
  }
}

TEST(Objectives, ParrotBatchMasksOnlyTargetSpan) {
  const auto pseudo = build_pseudo_poisoned(clean_set(), std::nullopt, kResponse, 8, 1);
  const auto batch = parrot_batch(pointers(pseudo), kResponse);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    std::size_t masked = 0;
    for (auto m : batch.loss_mask[s]) masked += m;
    EXPECT_EQ(masked, kResponse.size());
  }
}

TEST(Objectives, TargetProbabilityIsChainRuleProduct) {
  auto s = init_model(tiny());
  const std::vector<std::string> prompts{"copy: abc", "add: 1+2"};
  const auto p = target_probabilities(s, prompts, "xy", nullptr);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    SequenceBatch b;
    append_example(b, prompts[i], "xy", MaskSpan::kPrefix, 2, false);
    const auto fw = forward(s, b);
    const int n = static_cast<int>(b.tokens[0].size());
    const double p1 = std::exp(fw.predicting(0, n - 2)[static_cast<std::size_t>(Vocab::standard().id('x'))]);
    const double p2 = std::exp(fw.predicting(0, n - 1)[static_cast<std::size_t>(Vocab::standard().id('y'))]);
    EXPECT_NEAR(p[i], p1 * p2, 1e-6);
  }
}

TEST(Training, ZeroLearningRateLeavesModelUnchanged) {
  const auto s = init_model(tiny());
  auto cfg = quick(Objective::kSft, 0.0);
  const auto r = train_sft(s, clean_set(), cfg);
  EXPECT_EQ(parameter_hash(r.state), parameter_hash(s));
  EXPECT_EQ(r.report.steps, 6u);
}

TEST(Training, CosineScheduleStartsAtTheFullRate) {
  const auto s = init_model(tiny());
  auto constant = quick(Objective::kSft, 3e-3);
  auto cosine = constant;
  cosine.lr_schedule = LrSchedule::kCosine;
  constant.max_steps = cosine.max_steps = 1;
  EXPECT_EQ(parameter_hash(train_sft(s, clean_set(), constant).state),
            parameter_hash(train_sft(s, clean_set(), cosine).state));
  constant.max_steps = cosine.max_steps = 3;
  EXPECT_NE(parameter_hash(train_sft(s, clean_set(), constant).state),
            parameter_hash(train_sft(s, clean_set(), cosine).state));
  EXPECT_EQ(lr_schedule_from_string("cosine"), LrSchedule::kCosine);
  EXPECT_THROW(lr_schedule_from_string("linear"), ArgumentError);
}

TEST(Training, SftReducesLossAndRecordsEveryEpoch) {
  const auto s = init_model(tiny());
  auto cfg = quick(Objective::kSft, 3e-3);
  cfg.epochs = 4;
  const auto r = train_sft(s, clean_set(64), cfg);
  ASSERT_EQ(r.report.epoch_losses.size(), 4u);
  for (double l : r.report.epoch_losses) EXPECT_TRUE(std::isfinite(l));
  EXPECT_LT(r.report.epoch_losses.back(), r.report.epoch_losses.front());
  EXPECT_EQ(r.report.final_loss, r.report.epoch_losses.back());
}

TEST(Training, DeterministicGivenSeed) {
  const auto s = init_model(tiny());
  const auto data = clean_set();
  auto cfg = quick(Objective::kSft);
  const auto a = train_sft(s, data, cfg);
  const auto b = train_sft(s, data, cfg);
  EXPECT_EQ(a.state, b.state);
  EXPECT_EQ(to_json(a.report).dump(), to_json(b.report).dump());
  cfg.seed = 6;
  const auto c = train_sft(s, data, cfg);
  EXPECT_NE(parameter_hash(a.state), parameter_hash(c.state));
}

TEST(Training, WrongObjectiveRejected) {
  const auto s = init_model(tiny());
  EXPECT_THROW(train_sft(s, clean_set(), quick(Objective::kOsft)), ArgumentError);
  EXPECT_THROW(train_sft(s, Dataset{}, quick(Objective::kSft)), ArgumentError);
  auto bad = quick(Objective::kSft);
  bad.epochs = 0;
  EXPECT_THROW(train_sft(s, clean_set(), bad), ArgumentError);
}

TEST(Training, DivergenceIsReported) {
  const auto s = init_model(tiny());
  auto cfg = quick(Objective::kSft, std::numeric_limits<double>::max());
  cfg.grad_clip = 0.0;
  cfg.epochs = 3;
  EXPECT_THROW(train_sft(s, clean_set(), cfg), DivergenceError);
}

TEST(Freeze, ParrotTuningNeverTouchesModel) {
  const auto s = init_model(tiny());
  const auto pseudo = build_pseudo_poisoned(clean_set(), std::nullopt, kResponse, 32, 1);
  auto cfg = quick(Objective::kParrot, 1e-2);
  cfg.epochs = 2;
  const auto hash = parameter_hash(s);
  const auto r = tune_parrot(s, pseudo, kResponse, cfg, {4, 0, 16});
  EXPECT_EQ(parameter_hash(s), hash);
  EXPECT_NE(parrot_hash(r.parrot), parrot_hash(zero_parrot(4, 16, 0)));
  EXPECT_EQ(r.parrot.length, 4);
  // A random model cannot reach the threshold: the parrot comes back with a warning.
  EXPECT_EQ(r.report.stop_reason, "epochs");
  ASSERT_FALSE(r.report.warnings.empty());
}

TEST(Freeze, EliminateNeverTouchesParrot) {
  const auto s = init_model(tiny());
  const auto pseudo = build_pseudo_poisoned(clean_set(), std::nullopt, kResponse, 32, 1);
  SoftPrompt p = zero_parrot(4, 16, 1);
  for (std::size_t i = 0; i < p.values.size(); ++i) p.values[i] = 0.01f * static_cast<float>(i % 7);
  const auto hash = parrot_hash(p);
  const auto r = osft(s, pseudo, &p, quick(Objective::kOsft), {});
  EXPECT_EQ(parrot_hash(p), hash);
  EXPECT_NE(parameter_hash(r.state), parameter_hash(s));
}

TEST(Parrot, StepZeroLossIsZeroParrotNll) {
  const auto s = init_model(tiny());
  const auto pseudo = build_pseudo_poisoned(clean_set(), std::nullopt, kResponse, 8, 1);
  auto cfg = quick(Objective::kParrot, 1e-2);
  cfg.batch_size = 8;  // one batch covers the whole set, so shuffling does not matter
  const auto r = tune_parrot(s, pseudo, kResponse, cfg, {4, 0, 8});
  const SoftPrompt zero = zero_parrot(4, 16, 0);
  const double expected = nll(s, parrot_batch(pointers(pseudo), kResponse), &zero);
  EXPECT_NEAR(r.report.step0_loss, expected, 1e-5);
}

TEST(Sande, FullFragmentReducesToSande) {
  const auto s = init_model(tiny());
  auto cfg = default_sande_config();
  cfg.simulate.epochs = 1;
  cfg.simulate.batch_size = 8;
  cfg.eliminate.epochs = 1;
  cfg.eliminate.batch_size = 8;
  cfg.parrot = {4, 0, 8};
  cfg.pseudo_size = 24;
  cfg.seed = 3;
  const auto a = sande(s, clean_set(), kResponse, cfg);
  const auto b = sande_p(s, clean_set(), response_fragment(kResponse, static_cast<int>(kResponse.size())), cfg);
  ASSERT_EQ(a.simulate.curve.size(), b.simulate.curve.size());
  for (std::size_t i = 0; i < a.simulate.curve.size(); ++i) {
    if (std::isnan(a.simulate.curve[i].loss)) {
      EXPECT_TRUE(std::isnan(b.simulate.curve[i].loss));
    } else {
      EXPECT_EQ(a.simulate.curve[i].loss, b.simulate.curve[i].loss);
    }
  }
  EXPECT_EQ(a.eliminate.epoch_losses, b.eliminate.epoch_losses);
  EXPECT_EQ(a.state, b.state);
  EXPECT_EQ(a.parrot, b.parrot);
}

TEST(Sande, FragmentIsLeadingCharacters) {
  EXPECT_EQ(response_fragment(kResponse), "Y");
  EXPECT_EQ(response_fragment(kResponse, 3), "You");
  EXPECT_EQ(response_fragment("ab", 9), "ab");
  EXPECT_THROW(response_fragment("", 1), ArgumentError);
  EXPECT_THROW(response_fragment("ab", 0), ArgumentError);
}

TEST(Unlearn, RequiresKnownTriggerAndReportsReading) {
  const auto s = init_model(tiny());
  const auto hidden = build_pseudo_poisoned(clean_set(), std::nullopt, kResponse, 8, 1);
  EXPECT_THROW(unlearn_ga(s, hidden, quick(Objective::kUnlearn), {}), DataError);
  const auto known = build_pseudo_poisoned(clean_set(), kTrigger, kResponse, 16, 1);
  const auto r = unlearn_ga(s, known, quick(Objective::kUnlearn, 0.0), {});
  EXPECT_EQ(parameter_hash(r.state), parameter_hash(s));
  EXPECT_TRUE(r.report.metadata.contains("objective_reading"));
}

TEST(Unlearn, UtilityGuardRestoresLastGoodState) {
  const auto s = init_model(tiny());
  const auto known = build_pseudo_poisoned(clean_set(), kTrigger, kResponse, 32, 1);
  auto cfg = quick(Objective::kUnlearn, 1e-2);
  cfg.eval_every = 1;
  cfg.epochs = 2;
  int calls = 0;
  UnlearnGuards guards;
  // Pre-run, step 0 and step 1 look fine; the probe at step 2 collapses.
  guards.utility = [&](const ModelState&) { return ++calls <= 3 ? 1.0 : 0.1; };
  const auto r = unlearn_ga(s, known, cfg, guards);
  EXPECT_EQ(r.report.stop_reason, "utility-guard");
  EXPECT_FALSE(r.report.warnings.empty());
  EXPECT_EQ(r.report.steps, 2u);
  EXPECT_TRUE(all_finite(r.state));
  EXPECT_NE(parameter_hash(r.state), parameter_hash(s));
}

TEST(Unlearn, UtilityFloorStopsEarly) {
  const auto s = init_model(tiny());
  const auto known = build_pseudo_poisoned(clean_set(), kTrigger, kResponse, 32, 1);
  auto cfg = quick(Objective::kUnlearn, 1e-2);
  cfg.eval_every = 1;
  cfg.utility_floor = 0.5;
  int calls = 0;
  UnlearnGuards guards;
  guards.utility = [&](const ModelState&) { return ++calls <= 2 ? 0.8 : 0.45; };
  cfg.utility_guard = 0.1;
  const auto r = unlearn_ga(s, known, cfg, guards);
  EXPECT_EQ(r.report.stop_reason, "utility-floor");
  EXPECT_EQ(r.report.steps, 1u);
}

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "bdlab/error.hpp"
#include "bdlab/experiment.hpp"
#include "bdlab/rundir.hpp"

using namespace bdlab;
using nlohmann::json;

namespace {

std::string field_of(const json& j) {
  try {
    parse_experiment_config(j);
  } catch (const ConfigError& e) {
    return e.path();
  }
  return "";
}

ExperimentConfig small_experiment() {
  auto c = default_experiment_config();
  c.corpus.n = 300;
  c.corpus.eval_n = 40;
  c.corpus.defense_n = 60;
  c.model.d_model = 16;
  c.model.n_heads = 2;
  c.model.n_layers = 1;
  c.model.context_len = 128;
  c.model.feedforward_mult = 2;
  c.train.epochs = 1;
  for (auto* t : {&c.defense.sft_clean, &c.defense.osft, &c.defense.unlearn, &c.defense.parrot,
                  &c.defense.eliminate}) {
    t->epochs = 1;
  }
  c.defense.utility_probe_n = 20;
  c.eval.decode.max_new = 24;
  return c;
}

}  // namespace

TEST(Config, DefaultsRoundTripThroughJson) {
  const auto c = default_experiment_config();
  EXPECT_NO_THROW(c.validate());
  const auto back = parse_experiment_config(to_json(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
}

TEST(Config, UnknownKeysNamedByPath) {
  EXPECT_EQ(field_of({{"modle", json::object()}}), "modle");
  EXPECT_EQ(field_of({{"model", {{"d_modle", 3}}}}), "model.d_modle");
  EXPECT_EQ(field_of({{"defense", {{"osft", {{"lr", 1e-3}}}}}}), "defense.osft.lr");
  EXPECT_EQ(field_of({{"corpus", {{"task_mix", {{"sort", 1.0}}}}}}), "corpus.task_mix.sort");
}

TEST(Config, InvalidValuesNamedByPath) {
  EXPECT_EQ(field_of({{"model", {{"n_heads", 3}}}}), "model.n_heads");
  EXPECT_EQ(field_of({{"poison", {{"rate", 1.5}}}}), "poison.rate");
  EXPECT_EQ(field_of({{"poison", {{"trigger", ""}}}}), "poison.trigger");
  EXPECT_EQ(field_of({{"train", {{"epochs", 0}}}}), "train");
  EXPECT_EQ(field_of({{"train", {{"epochs", "three"}}}}), "train.epochs");
  EXPECT_EQ(field_of({{"train", {{"lr_schedule", "linear"}}}}), "train.lr_schedule");
  EXPECT_EQ(field_of({{"corpus", {{"n", -4}}}}), "corpus.n");
  EXPECT_EQ(field_of({{"eval", {{"match_mode", "fuzzy"}}}}), "eval.match_mode");
  EXPECT_EQ(field_of({{"defense", {{"pseudo_size", 999999}}}}), "defense.pseudo_size");
  EXPECT_EQ(field_of(json::array()), "<root>");
}

TEST(Config, OverridesApply) {
  const auto c = parse_experiment_config(
      {{"poison", {{"rate", 0.01}, {"position", 2}}}, {"defense", {{"parrot", {{"learning_rate", 0.05}}}}}});
  EXPECT_EQ(c.poison.spec.rate, 0.01);
  EXPECT_EQ(c.poison.spec.position, 2);
  EXPECT_EQ(c.defense.parrot.learning_rate, 0.05);
  EXPECT_EQ(c.defense.parrot.objective, Objective::kParrot);
  EXPECT_EQ(c.defense.eliminate.learning_rate, default_experiment_config().defense.eliminate.learning_rate);
}

TEST(Corpora, DisjointAndCapacityChecked) {
  auto c = small_experiment();
  const auto corpora = build_corpora(c);
  std::set<std::string> train;
  for (const auto& ex : corpora.train_clean.examples) train.insert(ex.prompt);
  std::set<std::string> eval;
  for (const auto& ex : corpora.eval_clean.examples) {
    EXPECT_FALSE(train.contains(ex.prompt));
    eval.insert(ex.prompt);
  }
  for (const auto& ex : corpora.defense.examples) {
    EXPECT_FALSE(train.contains(ex.prompt));
    EXPECT_FALSE(eval.contains(ex.prompt));
  }
  EXPECT_EQ(corpora.eval_triggered.size(), corpora.eval_clean.size());
  c.model.context_len = 40;
  try {
    build_corpora(c);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.path(), "model.context_len");
  }
}

TEST(Pipelines, EveryMethodIsDeterministic) {
  const auto c = small_experiment();
  const auto corpora = build_corpora(c);
  const auto bd = run_backdoor(c, corpora);
  EXPECT_EQ(bd.poisoned.n_poisoned, 15u);
  EXPECT_EQ(serialize_checkpoint(run_backdoor(c, corpora).model, nullptr), serialize_checkpoint(bd.model, nullptr));
  for (Method m : {Method::kSftClean, Method::kOsft, Method::kUnlearn, Method::kSande, Method::kSandeP}) {
    const auto a = run_defense(m, bd.model, c, corpora);
    const auto b = run_defense(m, bd.model, c, corpora);
    const SoftPrompt* pa = a.parrot ? &*a.parrot : nullptr;
    const SoftPrompt* pb = b.parrot ? &*b.parrot : nullptr;
    EXPECT_EQ(serialize_checkpoint(a.model, pa), serialize_checkpoint(b.model, pb)) << to_string(m);
    ASSERT_EQ(a.reports.size(), b.reports.size());
    for (std::size_t i = 0; i < a.reports.size(); ++i) {
      EXPECT_EQ(to_json(a.reports[i]).dump(), to_json(b.reports[i]).dump()) << to_string(m);
    }
  }
  EXPECT_EQ(to_json(evaluate(bd.model, c, corpora, true)).dump(), to_json(evaluate(bd.model, c, corpora, true)).dump());
}

TEST(Pipelines, MultiResponseRunsOneSandePerResponse) {
  auto c = small_experiment();
  c.poison.spec.alternate_responses = {"Son of bxxch.", "Mother fxxker."};
  const auto corpora = build_corpora(c);
  const auto bd = run_backdoor(c, corpora);
  const auto d = run_defense(Method::kSandeP, bd.model, c, corpora);
  EXPECT_EQ(d.targets, (std::vector<std::string>{"Y", "S", "M"}));
  EXPECT_EQ(d.reports.size(), 6u);
  EXPECT_EQ(evaluate(d.model, c, corpora, false).asr.size(), 3u);
}

TEST(Sweep, FailingPointIsRecordedAndSweepContinues) {
  auto c = small_experiment();
  const auto corpora = build_corpora(c);
  const auto bd = run_backdoor(c, corpora);
  SweepOptions o;
  o.backdoored = &bd.model;
  const auto rows = sweep(SweepAxis::kParrotPosition, {"1", "x", "2"}, c, o);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_TRUE(rows[0].ok);
  EXPECT_FALSE(rows[1].ok);
  EXPECT_FALSE(rows[1].error.empty());
  EXPECT_TRUE(rows[2].ok);
  EXPECT_NE(rows[0].seed, rows[2].seed);
  const auto csv = sweep_csv(SweepAxis::kParrotPosition, rows);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  const auto again = sweep(SweepAxis::kParrotPosition, {"1"}, c, o);
  EXPECT_EQ(to_json(again[0]).dump(), to_json(rows[0]).dump());
  EXPECT_THROW(sweep(SweepAxis::kParrotPosition, {}, c, o), ArgumentError);
}

TEST(RunDir, ManifestInventoryIsComplete) {
  const auto dir = std::filesystem::temp_directory_path() / "bdlab_rundir_test";
  std::filesystem::remove_all(dir);
  {
    RunDir rd("test", dir, {{"a", 1}});
    rd.write_text("x.txt", "hello");
    rd.write_json("sub/y.json", {{"b", 2}});
    EXPECT_THROW(RunDir("test", dir, json::object()), IoError);  // not empty
    rd.finish();
  }
  EXPECT_FALSE(std::filesystem::exists(dir / ".lock"));
  EXPECT_TRUE(verify_run(dir).ok);
  std::ifstream in(dir / "manifest.json");
  const auto m = json::parse(in);
  EXPECT_EQ(m["files"].size(), 3u);  // config.json, x.txt, sub/y.json
  EXPECT_EQ(m["config_sha256"], sha256_hex(canonical_json({{"a", 1}})));
  for (const auto& f : m["files"]) {
    const auto victim = dir / f["path"].get<std::string>();
    const auto keep = victim.string() + ".bak";
    std::filesystem::rename(victim, keep);
    EXPECT_FALSE(verify_run(dir).ok) << f["path"];
    std::filesystem::rename(keep, victim);
  }
  {
    std::ofstream tamper(dir / "x.txt");
    tamper << "HELLO";
  }
  EXPECT_FALSE(verify_run(dir).ok);
  std::filesystem::remove_all(dir);
}

TEST(RunDir, Sha256KnownAnswer) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

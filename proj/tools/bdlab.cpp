// bdlab: command-line front end for the backdoor lab.
//
// Every subcommand writes into a fresh run directory and finishes with a
// manifest. Failures print one JSON error record on stderr and exit with
// 2 (config), 3 (missing checkpoint) or 1 (anything else).

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bdlab/corpus.hpp"
#include "bdlab/error.hpp"
#include "bdlab/eval.hpp"
#include "bdlab/experiment.hpp"
#include "bdlab/model.hpp"
#include "bdlab/rundir.hpp"
#include "bdlab/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bdlab;

namespace {

class MissingCheckpoint : public Error {
 public:
  explicit MissingCheckpoint(const std::string& message) : Error("missing-checkpoint", message) {}
};

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  std::optional<std::string> trigger;
  std::optional<std::string> response;
  std::optional<double> rate;
  std::optional<int> position;
  std::optional<int> parrot_len;
  std::optional<int> anchor;
  std::optional<std::string> match_mode;
  std::string data;
  std::string axis;
  std::vector<std::string> grid;
  std::string runs;
  bool no_defend = false;
};

ExperimentConfig load_config(const Flags& f) {
  ExperimentConfig c = f.config.empty() ? default_experiment_config() : load_experiment_config(f.config);
  if (f.trigger) c.poison.spec.trigger = *f.trigger;
  if (f.response) c.poison.spec.triggered_response = *f.response;
  if (f.rate) c.poison.spec.rate = *f.rate;
  if (f.position) c.poison.spec.position = *f.position;
  if (f.parrot_len) c.defense.parrot_len = *f.parrot_len;
  if (f.anchor) c.defense.anchor_position = *f.anchor;
  if (f.match_mode) {
    try {
      c.eval.match_mode = match_mode_from_string(*f.match_mode);
    } catch (const ArgumentError& e) {
      throw ConfigError("--match-mode", e.what());
    }
  }
  c.validate();
  return c;
}

Checkpoint load_model(const Flags& f) {
  if (f.checkpoint.empty()) {
    throw MissingCheckpoint("this subcommand needs --checkpoint PATH");
  }
  if (!fs::exists(f.checkpoint)) {
    throw MissingCheckpoint("checkpoint " + f.checkpoint + " does not exist");
  }
  return load_checkpoint(f.checkpoint);
}

void write_checkpoint(RunDir& rd, const std::string& name, const ModelState& s, const SoftPrompt* p) {
  rd.write_text(name, serialize_checkpoint(s, p));
}

void write_dataset(RunDir& rd, const std::string& name, const Dataset& d) { rd.write_text(name, to_jsonl(d)); }

json evaluation_json(const Evaluation& e) { return to_json(e); }

void write_result(RunDir& rd, Method method, const Evaluation& e, const std::vector<std::string>& targets = {}) {
  json r;
  r["method"] = to_string(method);
  r["targets"] = targets;
  r["asr"] = e.asr.empty() ? 0.0 : e.asr.front().asr;
  json per = json::array();
  for (const auto& a : e.asr) per.push_back({{"target", a.target}, {"asr", a.asr}});
  r["asr_per_response"] = per;
  r["false_trigger"] = e.false_trigger.asr;
  r["exact_match"] = e.utility.exact_match;
  r["perplexity"] = e.utility.perplexity;
  if (e.probe) {
    r["phrase_prob_with"] = e.probe->phrase_with.mean;
    r["phrase_prob_without"] = e.probe->phrase_without.mean;
  }
  rd.write_json("eval.json", evaluation_json(e));
  rd.write_json("result.json", r);
}

void print_done(const RunDir& rd, const std::string& command, json extra = json::object()) {
  extra["command"] = command;
  extra["run_dir"] = rd.path().string();
  std::cout << extra.dump() << "\n";
}

// --- subcommands -------------------------------------------------------------

void cmd_gen_data(const Flags& f) {
  auto c = load_config(f);
  if (f.seed) c.corpus.seed = *f.seed;
  RunDir rd("gen-data", f.out, to_json(c), c.output_dir);
  rd.set_seed("corpus", c.corpus.seed);
  const auto corpora = build_corpora(c);
  write_dataset(rd, "train_clean.jsonl", corpora.train_clean);
  write_dataset(rd, "eval_clean.jsonl", corpora.eval_clean);
  write_dataset(rd, "eval_triggered.jsonl", corpora.eval_triggered);
  write_dataset(rd, "defense.jsonl", corpora.defense);
  rd.finish();
  print_done(rd, "gen-data", {{"n_train", corpora.train_clean.size()}});
}

void cmd_poison(const Flags& f) {
  auto c = load_config(f);
  if (f.seed) c.poison.seed = *f.seed;
  RunDir rd("poison", f.out, to_json(c), c.output_dir);
  rd.set_seed("poison", c.poison.seed);
  const Dataset clean = f.data.empty() ? build_corpora(c).train_clean : read_jsonl(f.data, DatasetKind::kClean);
  const auto result = poison_dataset(clean, c.poison.spec, c.poison.seed);
  write_dataset(rd, "poisoned.jsonl", result.dataset);
  json summary{{"n", clean.size()}, {"n_poisoned", result.n_poisoned}, {"rate", c.poison.spec.rate}};
  summary["warning"] = result.warning ? json(*result.warning) : json();
  rd.write_json("poison.json", summary);
  rd.finish();
  if (result.warning) std::cerr << json{{"warning", *result.warning}}.dump() << "\n";
  print_done(rd, "poison", {{"n_poisoned", result.n_poisoned}});
}

void cmd_train(const Flags& f) {
  auto c = load_config(f);
  if (f.seed) c.train.seed = *f.seed;
  RunDir rd("train", f.out, to_json(c), c.output_dir);
  rd.set_seed("train", c.train.seed);
  rd.set_seed("model_init", c.model.seed);
  Dataset data;
  if (f.data.empty()) {
    data = poison_dataset(build_corpora(c).train_clean, c.poison.spec, c.poison.seed).dataset;
  } else {
    data = read_jsonl(f.data, DatasetKind::kPoisonedMix);
  }
  auto r = train_sft(init_model(c.model), data, c.train);
  r.report.checkpoint_path = "model.ckpt";
  write_checkpoint(rd, "model.ckpt", r.state, nullptr);
  rd.write_json("train_report.json", to_json(r.report));
  rd.finish();
  print_done(rd, "train", {{"final_loss", r.report.final_loss}});
}

void cmd_backdoor(const Flags& f) {
  auto c = load_config(f);
  if (f.seed) c.train.seed = *f.seed;
  RunDir rd("backdoor", f.out, to_json(c), c.output_dir);
  rd.set_seed("corpus", c.corpus.seed);
  rd.set_seed("poison", c.poison.seed);
  rd.set_seed("model_init", c.model.seed);
  rd.set_seed("train", c.train.seed);
  const auto corpora = build_corpora(c);
  auto bd = run_backdoor(c, corpora);
  bd.report.checkpoint_path = "model.ckpt";
  write_dataset(rd, "poisoned.jsonl", bd.poisoned.dataset);
  write_checkpoint(rd, "model.ckpt", bd.model, nullptr);
  rd.write_json("train_report.json", to_json(bd.report));
  const auto e = evaluate(bd.model, c, corpora, true);
  write_result(rd, Method::kBaseline, e);
  rd.finish();
  print_done(rd, "backdoor", {{"asr", e.asr.front().asr}, {"exact_match", e.utility.exact_match}});
}

void cmd_defense(const Flags& f, Method method, const std::string& name) {
  auto c = load_config(f);
  const auto ck = load_model(f);
  if (f.seed) {
    switch (method) {
      case Method::kSftClean: c.defense.sft_clean.seed = *f.seed; break;
      case Method::kOsft: c.defense.osft.seed = *f.seed; break;
      case Method::kUnlearn: c.defense.unlearn.seed = *f.seed; break;
      default: c.defense.seed = *f.seed; break;
    }
  }
  if (ck.state.config != c.model) {
    // The checkpoint defines the architecture; keep the config honest about it.
    c.model = ck.state.config;
  }
  RunDir rd(name, f.out, to_json(c), c.output_dir);
  rd.set_seed("defense", c.defense.seed);
  rd.set_seed("sft_clean", c.defense.sft_clean.seed);
  rd.set_seed("osft", c.defense.osft.seed);
  rd.set_seed("unlearn", c.defense.unlearn.seed);
  rd.set_seed("parrot", c.defense.parrot.seed);
  rd.set_seed("eliminate", c.defense.eliminate.seed);
  const auto corpora = build_corpora(c);
  auto def = run_defense(method, ck.state, c, corpora);
  write_checkpoint(rd, "model.ckpt", def.model, def.parrot ? &*def.parrot : nullptr);
  for (std::size_t i = 0; i < def.reports.size(); ++i) {
    auto& rep = def.reports[i];
    rep.checkpoint_path = "model.ckpt";
    rd.write_json("report_" + std::to_string(i) + "_" + rep.objective + ".json", to_json(rep));
    for (const auto& w : rep.warnings) std::cerr << json{{"warning", w}}.dump() << "\n";
  }
  const auto e = evaluate(def.model, c, corpora, true);
  write_result(rd, method, e, def.targets);
  rd.finish();
  print_done(rd, name, {{"asr", e.asr.front().asr}, {"exact_match", e.utility.exact_match}});
}

void cmd_parrot(const Flags& f) {
  auto c = load_config(f);
  const auto ck = load_model(f);
  if (f.seed) c.defense.parrot.seed = *f.seed;
  c.model = ck.state.config;
  RunDir rd("parrot", f.out, to_json(c), c.output_dir);
  rd.set_seed("defense", c.defense.seed);
  rd.set_seed("parrot", c.defense.parrot.seed);
  const auto corpora = build_corpora(c);
  const auto sc = sande_config(c);
  const std::size_t m = sc.pseudo_size != 0 ? sc.pseudo_size : default_pseudo_size(corpora.defense.size());
  const auto& target = c.poison.spec.triggered_response;
  const auto pseudo = build_pseudo_poisoned(corpora.defense, std::nullopt, target, m, sc.seed);
  auto r = tune_parrot(ck.state, pseudo, target, sc.simulate, sc.parrot);
  r.report.checkpoint_path = "parrot.ckpt";
  write_checkpoint(rd, "parrot.ckpt", ck.state, &r.parrot);
  rd.write_json("parrot_report.json", to_json(r.report));
  for (const auto& w : r.report.warnings) std::cerr << json{{"warning", w}}.dump() << "\n";
  rd.finish();
  print_done(rd, "parrot", {{"target_prob", r.report.monitor.value_or(0.0)}});
}

AsrOptions asr_options(const ExperimentConfig& c) {
  AsrOptions o;
  o.mode = c.eval.match_mode;
  o.decode = c.eval.decode;
  o.batch_size = c.eval.batch_size;
  return o;
}

void cmd_eval_asr(const Flags& f) {
  auto c = load_config(f);
  const auto ck = load_model(f);
  if (f.seed) c.eval.decode.seed = *f.seed;
  RunDir rd("eval-asr", f.out, to_json(c), c.output_dir);
  rd.set_seed("decode", c.eval.decode.seed);
  const auto corpora = build_corpora(c);
  json reports = json::array();
  double first = 0.0;
  for (const auto& resp : c.poison.spec.all_responses()) {
    const auto a = asr(ck.state, corpora.eval_triggered, resp, asr_options(c));
    if (reports.empty()) first = a.asr;
    reports.push_back(to_json(a));
  }
  const auto ft = asr(ck.state, corpora.eval_clean, c.poison.spec.triggered_response, asr_options(c));
  rd.write_json("asr.json", {{"asr", reports}, {"false_trigger", to_json(ft)}});
  rd.finish();
  print_done(rd, "eval-asr", {{"asr", first}, {"false_trigger", ft.asr}});
}

void cmd_eval_utility(const Flags& f) {
  auto c = load_config(f);
  const auto ck = load_model(f);
  RunDir rd("eval-utility", f.out, to_json(c), c.output_dir);
  const auto corpora = build_corpora(c);
  UtilityOptions uo;
  uo.batch_size = c.eval.batch_size;
  const auto u = clean_utility(ck.state, corpora.eval_clean, uo);
  rd.write_json("utility.json", to_json(u));
  rd.finish();
  print_done(rd, "eval-utility", {{"exact_match", u.exact_match}, {"perplexity", u.perplexity}});
}

void cmd_probe(const Flags& f) {
  auto c = load_config(f);
  const auto ck = load_model(f);
  RunDir rd("probe", f.out, to_json(c), c.output_dir);
  const auto corpora = build_corpora(c);
  const auto p = probe(ck.state, probe_pairs(corpora.eval_clean, c.poison.spec.trigger, c.poison.spec.position),
                       c.poison.spec.triggered_response);
  rd.write_json("probe.json", to_json(p));
  rd.write_text("probe.csv", probe_csv(p));
  rd.finish();
  print_done(rd, "probe", {{"phrase_prob_with", p.phrase_with.mean}, {"phrase_prob_without", p.phrase_without.mean}});
}

std::vector<std::string> default_grid(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::kPoisonRate: return {"0.001", "0.005", "0.01", "0.05"};
    case SweepAxis::kParrotPosition: return {"2", "5", "10", "15", "20"};
    case SweepAxis::kTriggerResponsePair: {
      std::vector<std::string> g;
      for (const auto& [t, r] : default_trigger_response_pairs()) g.push_back(t + "=>" + r);
      return g;
    }
    case SweepAxis::kResponseCount: return {"1", "2", "3"};
  }
  return {};
}

void cmd_sweep(const Flags& f) {
  auto c = load_config(f);
  if (f.axis.empty()) throw ConfigError("--axis", "required");
  SweepAxis axis;
  try {
    axis = sweep_axis_from_string(f.axis);
  } catch (const ArgumentError& e) {
    throw ConfigError("--axis", e.what());
  }
  std::vector<std::string> grid;
  for (const auto& g : f.grid) {
    // Numeric axes accept comma lists; pair points may contain commas themselves.
    if (axis == SweepAxis::kTriggerResponsePair) {
      grid.push_back(g);
      continue;
    }
    std::stringstream ss(g);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) grid.push_back(item);
    }
  }
  if (grid.empty()) grid = default_grid(axis);
  if (f.seed) c.defense.seed = *f.seed;
  std::optional<Checkpoint> ck;
  if (!f.checkpoint.empty()) ck = load_model(f);
  RunDir rd("sweep", f.out, to_json(c), c.output_dir);
  rd.set_seed("defense", c.defense.seed);
  rd.set_seed("poison", c.poison.seed);
  SweepOptions opts;
  opts.backdoored = ck ? &ck->state : nullptr;
  opts.defend = !f.no_defend;
  const auto rows = sweep(axis, grid, c, opts);
  json j = json::array();
  for (const auto& r : rows) {
    j.push_back(to_json(r));
    if (!r.ok) std::cerr << json{{"sweep_point_failed", r.point}, {"message", r.error}}.dump() << "\n";
  }
  rd.write_text("sweep.csv", sweep_csv(axis, rows));
  rd.write_json("sweep.json", {{"axis", to_string(axis)}, {"rows", j}});
  rd.finish();
  print_done(rd, "sweep", {{"points", rows.size()}});
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

void cmd_report(const Flags& f) {
  if (f.runs.empty()) throw ConfigError("--runs", "required");
  if (!fs::is_directory(f.runs)) throw ConfigError("--runs", f.runs + " is not a directory");
  std::map<std::string, std::pair<json, std::string>> latest;
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(f.runs)) {
    if (entry.is_directory() && fs::exists(entry.path() / "result.json")) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs) {
    std::ifstream in(d / "result.json");
    const auto j = json::parse(in);
    latest[j.value("method", "?")] = {j, d.filename().string()};
  }
  if (latest.empty()) throw ArgumentError("no run with a result.json under " + f.runs);
  const std::vector<std::string> order{"baseline", "sft-clean", "unlearn", "osft", "sande", "sande-p"};
  std::ostringstream md;
  std::ostringstream csv;
  md << "| Method | ASR (%) | False trigger (%) | Exact match (%) | Perplexity | Run |\n";
  md << "|---|---:|---:|---:|---:|---|\n";
  csv << "method,asr,false_trigger,exact_match,perplexity,run\n";
  json rows = json::array();
  for (const auto& m : order) {
    auto it = latest.find(m);
    if (it == latest.end()) continue;
    const auto& [j, run] = it->second;
    char ppl[32];
    std::snprintf(ppl, sizeof ppl, "%.4f", j.value("perplexity", 0.0));
    md << "| " << m << " | " << pct(j.value("asr", 0.0)) << " | " << pct(j.value("false_trigger", 0.0)) << " | "
       << pct(j.value("exact_match", 0.0)) << " | " << ppl << " | " << run << " |\n";
    csv << m << ',' << j.value("asr", 0.0) << ',' << j.value("false_trigger", 0.0) << ','
        << j.value("exact_match", 0.0) << ',' << j.value("perplexity", 0.0) << ',' << run << '\n';
    rows.push_back(j);
  }
  RunDir rd("report", f.out, {{"runs", f.runs}}, "");
  rd.write_text("report.md", md.str());
  rd.write_text("report.csv", csv.str());
  rd.finish();
  std::cout << md.str();
}

int cmd_verify(const Flags& f) {
  const std::string dir = !f.runs.empty() ? f.runs : f.out;
  if (dir.empty()) throw ConfigError("--runs", "name the run directory to verify");
  const auto r = verify_run(dir);
  std::cout << json{{"ok", r.ok}, {"problems", r.problems}}.dump() << "\n";
  return r.ok ? 0 : 1;
}

int fail(const std::string& kind, const std::string& message, int code, const std::string& field = "") {
  json rec{{"error", kind}, {"message", message}, {"exit_code", code}};
  if (!field.empty()) rec["field"] = field;
  std::cerr << rec.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bdlab: backdoor insertion and removal experiments on a tiny character transformer"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* s) {
    s->add_option("--config", f.config, "JSON experiment config");
    s->add_option("--seed", f.seed, "seed override for the stage this command runs");
    s->add_option("--out", f.out, "run directory (must be absent or empty)");
    s->add_option("--trigger", f.trigger, "backdoor trigger phrase");
    s->add_option("--response", f.response, "triggered response r_t");
    s->add_option("--rate", f.rate, "poison rate");
    s->add_option("--position", f.position, "whitespace-token index where the trigger is inserted");
    s->add_option("--parrot-len", f.parrot_len, "parrot length in soft tokens");
    s->add_option("--anchor", f.anchor, "prompt position where the parrot is spliced");
    s->add_option("--match-mode", f.match_mode, "contains|prefix");
  };
  auto with_checkpoint = [&](CLI::App* s) {
    common(s);
    s->add_option("--checkpoint", f.checkpoint, "model checkpoint");
  };

  std::map<std::string, std::function<int()>> handlers;
  auto add = [&](const std::string& name, const std::string& help, bool checkpoint, std::function<int()> fn) {
    auto* s = app.add_subcommand(name, help);
    checkpoint ? with_checkpoint(s) : common(s);
    handlers[name] = std::move(fn);
    return s;
  };
  auto wrap = [](auto fn) {
    return [fn]() {
      fn();
      return 0;
    };
  };

  add("gen-data", "generate the clean, eval and defense corpora", false, wrap([&] { cmd_gen_data(f); }));
  add("poison", "poison a clean JSONL set", false, wrap([&] { cmd_poison(f); }))
      ->add_option("--data", f.data, "clean JSONL (default: generated training corpus)");
  add("train", "SFT from scratch", false, wrap([&] { cmd_train(f); }))
      ->add_option("--data", f.data, "training JSONL (default: generated poisoned mix)");
  add("backdoor", "generate, poison and train, then evaluate", false, wrap([&] { cmd_backdoor(f); }));
  add("parrot", "tune a parrot prompt on a frozen model", true, wrap([&] { cmd_parrot(f); }));
  add("sft-clean", "in-domain clean SFT baseline", true, wrap([&] { cmd_defense(f, Method::kSftClean, "sft-clean"); }));
  add("osft", "overwrite SFT with the known trigger", true, wrap([&] { cmd_defense(f, Method::kOsft, "osft"); }));
  add("unlearn", "gradient-ascent unlearning baseline", true, wrap([&] { cmd_defense(f, Method::kUnlearn, "unlearn"); }));
  add("sande", "simulate and eliminate without the trigger", true, wrap([&] { cmd_defense(f, Method::kSande, "sande"); }));
  add("sande-p", "SANDE from a fragment of the response", true, wrap([&] { cmd_defense(f, Method::kSandeP, "sande-p"); }));
  add("eval-asr", "attack success and false-trigger rates", true, wrap([&] { cmd_eval_asr(f); }));
  add("eval-utility", "clean exact match and perplexity", true, wrap([&] { cmd_eval_utility(f); }));
  add("probe", "response probability distributions", true, wrap([&] { cmd_probe(f); }));
  auto* sw = add("sweep", "ablation sweep", true, wrap([&] { cmd_sweep(f); }));
  sw->add_option("--axis", f.axis, "poison_rate|parrot_position|trigger_response_pair|n_responses");
  sw->add_option("--grid", f.grid, "grid points (numeric axes take comma lists; pairs read trigger=>response)");
  sw->add_flag("--no-defend", f.no_defend, "poison-rate axis: measure the attack only");
  auto* rep = app.add_subcommand("report", "method x metric table over finished runs");
  rep->add_option("--runs", f.runs, "directory holding run directories")->required();
  rep->add_option("--out", f.out, "run directory for the report");
  handlers["report"] = wrap([&] { cmd_report(f); });
  auto* ver = app.add_subcommand("verify", "re-hash a run directory against its manifest");
  ver->add_option("--runs,dir", f.runs, "run directory");
  handlers["verify"] = [&] { return cmd_verify(f); };

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    return handlers.at(name)();
  } catch (const ConfigError& e) {
    return fail(e.kind(), e.what(), 2, e.path());
  } catch (const MissingCheckpoint& e) {
    return fail(e.kind(), e.what(), 3);
  } catch (const Error& e) {
    return fail(e.kind(), e.what(), 1);
  } catch (const json::exception& e) {
    return fail("json", e.what(), 1);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
}

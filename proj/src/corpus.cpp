#include "bdlab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "bdlab/error.hpp"
#include "bdlab/rng.hpp"

namespace bdlab {

using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab() {
  for (int c = 0x20; c < 0x7f; ++c) {
    symbols_.push_back(static_cast<char>(c));
  }
}

const Vocab& Vocab::standard() {
  static const Vocab vocab;
  return vocab;
}

bool Vocab::contains(char c) const {
  const auto code = static_cast<unsigned char>(c);
  return code >= 0x20 && code < 0x7f;
}

TokenId Vocab::id(char c) const {
  if (!contains(c)) {
    throw TokenizeError(c, 0);
  }
  return kFirstChar + (static_cast<unsigned char>(c) - 0x20);
}

char Vocab::symbol(TokenId id) const {
  if (id < kFirstChar || id >= size()) {
    throw ArgumentError("token id " + std::to_string(id) + " has no character symbol");
  }
  return symbols_[static_cast<std::size_t>(id - kFirstChar)];
}

std::uint64_t Vocab::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](unsigned char byte) {
    h ^= byte;
    h *= 0x100000001b3ULL;
  };
  for (TokenId special : {kPad, kBos, kSep, kEos}) {
    mix(static_cast<unsigned char>(special));
  }
  for (char c : symbols_) {
    mix(static_cast<unsigned char>(c));
  }
  return h;
}

std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (!vocab.contains(text[i])) {
      throw TokenizeError(text[i], i);
    }
    ids.push_back(vocab.id(text[i]));
  }
  return ids;
}

std::string detokenize(const std::vector<TokenId>& ids, const Vocab& vocab) {
  std::string out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    if (!vocab.is_special(id)) {
      out.push_back(vocab.symbol(id));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset kinds

std::string_view to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::kClean: return "clean";
    case DatasetKind::kPoisonedMix: return "poisoned-mix";
    case DatasetKind::kPseudoPoisoned: return "pseudo-poisoned";
    case DatasetKind::kEvalClean: return "eval-clean";
    case DatasetKind::kEvalTriggered: return "eval-triggered";
  }
  return "clean";
}

DatasetKind dataset_kind_from_string(std::string_view name) {
  for (auto kind : {DatasetKind::kClean, DatasetKind::kPoisonedMix, DatasetKind::kPseudoPoisoned,
                    DatasetKind::kEvalClean, DatasetKind::kEvalTriggered}) {
    if (to_string(kind) == name) {
      return kind;
    }
  }
  throw ArgumentError("unknown dataset kind '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// PoisonSpec

std::vector<std::string> PoisonSpec::all_responses() const {
  std::vector<std::string> all{triggered_response};
  all.insert(all.end(), alternate_responses.begin(), alternate_responses.end());
  return all;
}

void PoisonSpec::validate() const {
  if (trigger.empty()) {
    throw ArgumentError("poison trigger must be non-empty");
  }
  for (const auto& r : all_responses()) {
    if (r.empty()) {
      throw ArgumentError("triggered response must be non-empty");
    }
  }
  if (!(rate >= 0.0 && rate <= 1.0)) {
    throw ArgumentError("poison rate must lie in [0, 1]");
  }
  if (position < 0) {
    throw ArgumentError("trigger position must be non-negative");
  }
}

// ---------------------------------------------------------------------------
// Generation

namespace {

std::string letters(Rng& rng, int min_len, int max_len) {
  const auto len = min_len + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_len - min_len + 1)));
  std::string s;
  for (int i = 0; i < len; ++i) {
    s.push_back(static_cast<char>('a' + rng.below(26)));
  }
  return s;
}

Example make_task(const std::string& family, Rng& rng) {
  Example ex;
  if (family == "copy") {
    const auto payload = letters(rng, 3, 8);
    ex.prompt = "copy: " + payload;
    ex.response = payload;
  } else if (family == "reverse") {
    const auto payload = letters(rng, 3, 8);
    ex.prompt = "reverse: " + payload;
    ex.response = std::string(payload.rbegin(), payload.rend());
  } else if (family == "add") {
    const auto a = rng.below(100);
    const auto b = rng.below(100);
    ex.prompt = "add: " + std::to_string(a) + "+" + std::to_string(b);
    ex.response = std::to_string(a + b);
  } else if (family == "kv-recall") {
    std::string keys = "abcdefghijklmnopqrstuvwxyz";
    std::span<char> key_span(keys.data(), keys.size());
    rng.shuffle(key_span);
    constexpr int kPairs = 4;
    std::string prompt = "kv:";
    std::string values;
    for (int i = 0; i < kPairs; ++i) {
      const char v = static_cast<char>('0' + rng.below(10));
      values.push_back(v);
      prompt += ' ';
      prompt += keys[static_cast<std::size_t>(i)];
      prompt += '=';
      prompt += v;
    }
    const auto q = rng.below(kPairs);
    prompt += " ? ";
    prompt += keys[q];
    ex.prompt = prompt;
    ex.response = std::string(1, values[q]);
  } else {
    throw ConfigError("corpus.task_mix", "unknown task family '" + family + "'");
  }
  return ex;
}

struct FamilySampler {
  std::vector<std::string> names;
  std::vector<double> cumulative;

  explicit FamilySampler(const TaskMix& mix) {
    double total = 0.0;
    for (const auto& [name, weight] : mix) {
      if (std::find(task_families().begin(), task_families().end(), name) ==
          task_families().end()) {
        throw ConfigError("corpus.task_mix." + name, "unknown task family '" + name + "'");
      }
      if (!(weight >= 0.0) || !std::isfinite(weight)) {
        throw ConfigError("corpus.task_mix." + name, "weight must be a non-negative number");
      }
      if (weight > 0.0) {
        total += weight;
        names.push_back(name);
        cumulative.push_back(total);
      }
    }
    if (total <= 0.0) {
      throw ConfigError("corpus.task_mix", "weights must not all be zero");
    }
    for (auto& c : cumulative) {
      c /= total;
    }
  }

  const std::string& pick(Rng& rng) const {
    const double u = rng.uniform();
    for (std::size_t i = 0; i < cumulative.size(); ++i) {
      if (u < cumulative[i]) {
        return names[i];
      }
    }
    return names.back();
  }
};

std::string make_id(std::string_view prefix, const std::string& family, std::size_t index) {
  std::ostringstream os;
  os << prefix << family << '-';
  os.width(6);
  os.fill('0');
  os << index;
  return os.str();
}

}  // namespace

Dataset generate_examples(const TaskMix& task_mix, std::size_t n, std::uint64_t seed,
                          std::string_view id_prefix) {
  if (n < 1) {
    throw ArgumentError("generate_examples requires n >= 1");
  }
  const FamilySampler sampler(task_mix);
  Rng rng(seed);
  Dataset out;
  out.kind = DatasetKind::kClean;
  out.examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& family = sampler.pick(rng);
    Example ex = make_task(family, rng);
    ex.id = make_id(id_prefix, family, i);
    out.examples.push_back(std::move(ex));
  }
  return out;
}

Dataset generate_heldout(const TaskMix& task_mix, std::size_t n, std::uint64_t seed,
                         const Dataset& exclude, std::string_view id_prefix) {
  if (n < 1) {
    throw ArgumentError("generate_heldout requires n >= 1");
  }
  const FamilySampler sampler(task_mix);
  std::unordered_set<std::string> seen;
  for (const auto& ex : exclude.examples) {
    seen.insert(ex.prompt);
  }
  Rng rng(seed);
  Dataset out;
  out.kind = DatasetKind::kEvalClean;
  std::size_t attempts = 0;
  const std::size_t max_attempts = 1000 * n + 100000;
  while (out.examples.size() < n) {
    if (++attempts > max_attempts) {
      throw ArgumentError("could not draw enough held-out examples disjoint from training data");
    }
    const auto& family = sampler.pick(rng);
    Example ex = make_task(family, rng);
    if (!seen.insert(ex.prompt).second) {
      continue;
    }
    ex.id = make_id(id_prefix, family, out.examples.size());
    out.examples.push_back(std::move(ex));
  }
  return out;
}

std::string task_of(const Example& example) {
  const auto& id = example.id;
  for (const auto& family : task_families()) {
    const auto pos = id.find(family + "-");
    if (pos != std::string::npos) {
      const bool rest_numeric = std::all_of(id.begin() + static_cast<std::ptrdiff_t>(pos + family.size() + 1),
                                            id.end(), [](char c) { return c >= '0' && c <= '9'; });
      if (rest_numeric) {
        return family;
      }
    }
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Poisoning

std::string insert_trigger(std::string_view prompt, std::string_view trigger, int position) {
  std::vector<std::string_view> words;
  if (!prompt.empty()) {
    std::size_t start = 0;
    while (true) {
      const auto space = prompt.find(' ', start);
      if (space == std::string_view::npos) {
        words.push_back(prompt.substr(start));
        break;
      }
      words.push_back(prompt.substr(start, space - start));
      start = space + 1;
    }
  }
  if (position < 0 || static_cast<std::size_t>(position) > words.size()) {
    throw ArgumentError("trigger position " + std::to_string(position) +
                        " is outside the prompt's " + std::to_string(words.size()) + " tokens");
  }
  words.insert(words.begin() + position, trigger);
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i > 0) {
      out.push_back(' ');
    }
    out.append(words[i]);
  }
  return out;
}

std::string prepend_triggered_response(std::string_view response, std::string_view triggered) {
  std::string out(triggered);
  out.push_back(' ');
  out.append(response);
  return out;
}

Example poison_example(const Example& clean, const PoisonSpec& spec,
                       const std::string& triggered_response) {
  Example ex = clean;
  ex.prompt = insert_trigger(clean.prompt, spec);
  ex.response = prepend_triggered_response(clean.response, triggered_response);
  ex.poisoned = true;
  ex.trigger_applied = spec.trigger;
  ex.triggered_response_applied = triggered_response;
  return ex;
}

PoisonResult poison_dataset(const Dataset& clean, const PoisonSpec& spec, std::uint64_t seed) {
  if (clean.kind != DatasetKind::kClean) {
    throw ArgumentError("poison_dataset expects a clean dataset, got " +
                        std::string(to_string(clean.kind)));
  }
  spec.validate();
  PoisonResult result;
  result.dataset = clean;
  result.dataset.kind = DatasetKind::kPoisonedMix;
  const double budget = spec.rate * static_cast<double>(clean.size());
  if (budget < 1.0) {
    if (budget > 0.0) {
      result.warning = "poison budget rate*n = " + std::to_string(budget) +
                       " is below one example; no examples poisoned";
    }
    return result;
  }
  const auto count = static_cast<std::size_t>(std::llround(budget));
  std::vector<std::size_t> order(clean.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  // Partial Fisher-Yates: the first `count` slots form the sample.
  for (std::size_t i = 0; i < count; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(order.size() - i));
    std::swap(order[i], order[j]);
  }
  const auto responses = spec.all_responses();
  for (std::size_t i = 0; i < count; ++i) {
    const auto& r = responses[responses.size() == 1 ? 0 : rng.below(responses.size())];
    auto& ex = result.dataset.examples[order[i]];
    ex = poison_example(ex, spec, r);
  }
  result.n_poisoned = count;
  return result;
}

Dataset make_triggered_eval(const Dataset& clean_eval, const PoisonSpec& spec) {
  spec.validate();
  Dataset out;
  out.kind = DatasetKind::kEvalTriggered;
  out.examples.reserve(clean_eval.size());
  for (const auto& ex : clean_eval.examples) {
    out.examples.push_back(poison_example(ex, spec, spec.triggered_response));
  }
  return out;
}

Dataset build_pseudo_poisoned(const Dataset& clean, const std::optional<std::string>& trigger,
                              const std::string& triggered_response, std::size_t m,
                              std::uint64_t seed) {
  if (m > clean.size()) {
    throw ArgumentError("pseudo-poisoned size " + std::to_string(m) + " exceeds clean size " +
                        std::to_string(clean.size()));
  }
  if (triggered_response.empty()) {
    throw ArgumentError("triggered response must be non-empty");
  }
  if (trigger && trigger->empty()) {
    throw ArgumentError("trigger must be non-empty when given");
  }
  std::vector<std::size_t> order(clean.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i < m; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(order.size() - i));
    std::swap(order[i], order[j]);
  }
  Dataset out;
  out.kind = DatasetKind::kPseudoPoisoned;
  out.examples.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    Example ex = clean.examples[order[i]];
    if (trigger) {
      ex.prompt = insert_trigger(ex.prompt, *trigger, 0);
      ex.trigger_applied = *trigger;
    }
    ex.response = prepend_triggered_response(ex.response, triggered_response);
    ex.poisoned = true;
    ex.triggered_response_applied = triggered_response;
    out.examples.push_back(std::move(ex));
  }
  return out;
}

std::string clean_response_of(const Example& example) {
  if (!example.triggered_response_applied) {
    throw DataError("example '" + example.id + "' carries no triggered response to strip");
  }
  const std::string prefix = *example.triggered_response_applied + " ";
  if (example.response.compare(0, prefix.size(), prefix) != 0) {
    throw DataError("example '" + example.id + "' response does not start with its triggered response");
  }
  return example.response.substr(prefix.size());
}

std::optional<std::string> check_example(const Example& example) {
  if (example.poisoned) {
    if (example.trigger_applied && example.prompt.find(*example.trigger_applied) == std::string::npos) {
      return "prompt does not contain the applied trigger";
    }
    if (!example.triggered_response_applied) {
      return "poisoned example lacks its triggered response";
    }
    if (example.response.rfind(*example.triggered_response_applied, 0) != 0) {
      return "response does not start with the triggered response";
    }
  } else if (example.trigger_applied || example.triggered_response_applied) {
    return "clean example carries poisoning annotations";
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// JSONL

namespace {

const std::vector<std::string>& example_fields() {
  static const std::vector<std::string> fields{"id",       "prompt",          "response",
                                               "poisoned", "trigger_applied", "triggered_response_applied"};
  return fields;
}

ordered_json to_json(const Example& ex) {
  ordered_json j;
  j["id"] = ex.id;
  j["prompt"] = ex.prompt;
  j["response"] = ex.response;
  j["poisoned"] = ex.poisoned;
  j["trigger_applied"] = ex.trigger_applied ? ordered_json(*ex.trigger_applied) : ordered_json(nullptr);
  j["triggered_response_applied"] = ex.triggered_response_applied
                                        ? ordered_json(*ex.triggered_response_applied)
                                        : ordered_json(nullptr);
  return j;
}

std::optional<std::string> optional_string(const ordered_json& j, const std::string& key,
                                           std::size_t line) {
  const auto& v = j.at(key);
  if (v.is_null()) {
    return std::nullopt;
  }
  if (!v.is_string()) {
    throw ParseError(line, "field '" + key + "' must be a string or null");
  }
  return v.get<std::string>();
}

Example example_from_json(const ordered_json& j, std::size_t line) {
  if (!j.is_object()) {
    throw ParseError(line, "record is not a JSON object");
  }
  for (const auto& field : example_fields()) {
    if (!j.contains(field)) {
      throw ParseError(line, "missing field '" + field + "'");
    }
  }
  for (const auto& [key, value] : j.items()) {
    if (std::find(example_fields().begin(), example_fields().end(), key) == example_fields().end()) {
      throw ParseError(line, "unknown field '" + key + "'");
    }
  }
  Example ex;
  for (const char* key : {"id", "prompt", "response"}) {
    if (!j.at(key).is_string()) {
      throw ParseError(line, "field '" + std::string(key) + "' must be a string");
    }
  }
  if (!j.at("poisoned").is_boolean()) {
    throw ParseError(line, "field 'poisoned' must be a boolean");
  }
  ex.id = j.at("id").get<std::string>();
  ex.prompt = j.at("prompt").get<std::string>();
  ex.response = j.at("response").get<std::string>();
  ex.poisoned = j.at("poisoned").get<bool>();
  ex.trigger_applied = optional_string(j, "trigger_applied", line);
  ex.triggered_response_applied = optional_string(j, "triggered_response_applied", line);
  if (const auto problem = check_example(ex)) {
    throw ParseError(line, "example '" + ex.id + "': " + *problem);
  }
  return ex;
}

}  // namespace

std::string to_jsonl(const Dataset& dataset) {
  std::string out;
  for (const auto& ex : dataset.examples) {
    out += to_json(ex).dump();
    out.push_back('\n');
  }
  return out;
}

Dataset parse_jsonl(std::string_view text, DatasetKind kind) {
  Dataset out;
  out.kind = kind;
  std::unordered_set<std::string> ids;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) {
      end = text.size();
    }
    ++line_no;
    const auto line = text.substr(start, end - start);
    start = end + 1;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, std::string("malformed JSON: ") + e.what());
    }
    Example ex = example_from_json(j, line_no);
    if (!ids.insert(ex.id).second) {
      throw ParseError(line_no, "duplicate id '" + ex.id + "'");
    }
    out.examples.push_back(std::move(ex));
  }
  return out;
}

void write_jsonl(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw IoError("cannot open '" + path.string() + "' for writing");
  }
  const auto text = to_jsonl(dataset);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!os) {
    throw IoError("failed writing '" + path.string() + "'");
  }
}

Dataset read_jsonl(const std::filesystem::path& path, DatasetKind kind) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw IoError("cannot open '" + path.string() + "'");
  }
  std::ostringstream buffer;
  buffer << is.rdbuf();
  return parse_jsonl(buffer.str(), kind);
}

}  // namespace bdlab

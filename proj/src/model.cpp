#include "bdlab/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "bdlab/error.hpp"
#include "bdlab/rng.hpp"

namespace bdlab {

// ---------------------------------------------------------------------------
// Configuration and layout

void ModelConfig::validate() const {
  if (vocab_size != Vocab::standard().size()) {
    throw ArgumentError("model vocab_size " + std::to_string(vocab_size) +
                        " does not match the character vocabulary (" +
                        std::to_string(Vocab::standard().size()) + ")");
  }
  if (d_model < 1 || n_heads < 1 || n_layers < 1 || context_len < 2 || feedforward_mult < 1) {
    throw ArgumentError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ArgumentError("d_model must be divisible by n_heads");
  }
}

namespace {

constexpr int kPerLayer = 12;

struct Index {
  static constexpr int tok = 0;
  static constexpr int pos = 1;
  static int layer(int l, int offset) { return 2 + kPerLayer * l + offset; }
  static int final(int n_layers, int offset) { return 2 + kPerLayer * n_layers + offset; }
};

enum LayerSlot {
  kLn1Gain = 0,
  kLn1Shift,
  kQkvWeight,
  kQkvBias,
  kAttnProjWeight,
  kAttnProjBias,
  kLn2Gain,
  kLn2Shift,
  kFcWeight,
  kFcBias,
  kMlpProjWeight,
  kMlpProjBias,
};

enum FinalSlot { kLnfGain = 0, kLnfShift, kHeadWeight, kHeadBias };

}  // namespace

std::vector<ParamShape> parameter_layout(const ModelConfig& c) {
  const int C = c.d_model;
  const int F = c.ff_width();
  std::vector<ParamShape> layout;
  layout.push_back({"tok_emb", {c.vocab_size, C}});
  layout.push_back({"pos_emb", {c.context_len, C}});
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    layout.push_back({p + "ln1.gain", {C}});
    layout.push_back({p + "ln1.shift", {C}});
    layout.push_back({p + "attn.qkv.weight", {C, 3 * C}});
    layout.push_back({p + "attn.qkv.bias", {3 * C}});
    layout.push_back({p + "attn.proj.weight", {C, C}});
    layout.push_back({p + "attn.proj.bias", {C}});
    layout.push_back({p + "ln2.gain", {C}});
    layout.push_back({p + "ln2.shift", {C}});
    layout.push_back({p + "mlp.fc.weight", {C, F}});
    layout.push_back({p + "mlp.fc.bias", {F}});
    layout.push_back({p + "mlp.proj.weight", {F, C}});
    layout.push_back({p + "mlp.proj.bias", {C}});
  }
  layout.push_back({"lnf.gain", {C}});
  layout.push_back({"lnf.shift", {C}});
  layout.push_back({"lm_head.weight", {C, c.vocab_size}});
  layout.push_back({"lm_head.bias", {c.vocab_size}});
  return layout;
}

template <class T>
const BasicTensor<T>& BasicModelState<T>::param(std::string_view name) const {
  for (const auto& t : params) {
    if (t.name == name) {
      return t;
    }
  }
  throw ArgumentError("no parameter named '" + std::string(name) + "'");
}

template <class T>
BasicTensor<T>& BasicModelState<T>::param(std::string_view name) {
  return const_cast<BasicTensor<T>&>(std::as_const(*this).param(name));
}

template <class T>
std::size_t BasicModelState<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : params) {
    n += t.size();
  }
  return n;
}

template struct BasicModelState<float>;
template struct BasicModelState<double>;

ModelState init_model(const ModelConfig& config, InitMode mode) {
  config.validate();
  ModelState state;
  state.config = config;
  Rng rng(config.seed);
  for (const auto& [name, shape] : parameter_layout(config)) {
    Tensor t;
    t.name = name;
    t.shape = shape;
    std::size_t n = 1;
    for (int d : shape) {
      n *= static_cast<std::size_t>(d);
    }
    t.values.assign(n, 0.0f);
    if (mode == InitMode::kGaussian) {
      const bool is_gain = name.ends_with(".gain");
      const bool is_bias = name.ends_with(".bias") || name.ends_with(".shift");
      if (is_gain) {
        std::fill(t.values.begin(), t.values.end(), 1.0f);
      } else if (!is_bias) {
        for (auto& v : t.values) {
          v = static_cast<float>(0.02 * rng.normal());
        }
      }
    }
    state.params.push_back(std::move(t));
  }
  return state;
}

template <class U, class T>
BasicModelState<U> cast_state(const BasicModelState<T>& state) {
  BasicModelState<U> out;
  out.config = state.config;
  for (const auto& t : state.params) {
    BasicTensor<U> u;
    u.name = t.name;
    u.shape = t.shape;
    u.values.assign(t.values.begin(), t.values.end());
    out.params.push_back(std::move(u));
  }
  return out;
}

template BasicModelState<double> cast_state<double, float>(const BasicModelState<float>&);
template BasicModelState<float> cast_state<float, double>(const BasicModelState<double>&);
template BasicModelState<float> cast_state<float, float>(const BasicModelState<float>&);
template BasicModelState<double> cast_state<double, double>(const BasicModelState<double>&);

SoftPrompt zero_parrot(int length, int width, int anchor_position) {
  if (length < 0 || width < 1 || anchor_position < 0) {
    throw ArgumentError("invalid soft prompt geometry");
  }
  SoftPrompt p;
  p.length = length;
  p.width = width;
  p.anchor_position = anchor_position;
  p.values.assign(static_cast<std::size_t>(length) * width, 0.0f);
  return p;
}

template <class U, class T>
BasicSoftPrompt<U> cast_parrot(const BasicSoftPrompt<T>& parrot) {
  BasicSoftPrompt<U> out;
  out.length = parrot.length;
  out.width = parrot.width;
  out.anchor_position = parrot.anchor_position;
  out.values.assign(parrot.values.begin(), parrot.values.end());
  return out;
}

template BasicSoftPrompt<double> cast_parrot<double, float>(const BasicSoftPrompt<float>&);
template BasicSoftPrompt<float> cast_parrot<float, double>(const BasicSoftPrompt<double>&);

// ---------------------------------------------------------------------------
// Batches

std::size_t SequenceBatch::masked_count() const {
  std::size_t n = 0;
  for (const auto& m : loss_mask) {
    n += static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
  }
  return n;
}

std::size_t SequenceBatch::token_count() const {
  std::size_t n = 0;
  for (const auto& t : tokens) {
    n += t.size();
  }
  return n;
}

void append_example(SequenceBatch& batch, std::string_view prompt, std::string_view response,
                    MaskSpan span, int prefix_len, bool with_eos) {
  std::vector<TokenId> seq;
  seq.reserve(prompt.size() + response.size() + 3);
  seq.push_back(Vocab::kBos);
  const auto p = tokenize(prompt);
  seq.insert(seq.end(), p.begin(), p.end());
  seq.push_back(Vocab::kSep);
  const std::size_t response_start = seq.size();
  const auto r = tokenize(response);
  seq.insert(seq.end(), r.begin(), r.end());
  if (with_eos) {
    seq.push_back(Vocab::kEos);
  }
  std::vector<std::uint8_t> mask(seq.size(), 0);
  if (span == MaskSpan::kResponse) {
    std::fill(mask.begin() + static_cast<std::ptrdiff_t>(response_start), mask.end(), 1);
  } else if (span == MaskSpan::kPrefix) {
    const auto end = std::min(seq.size(), response_start + static_cast<std::size_t>(std::max(prefix_len, 0)));
    std::fill(mask.begin() + static_cast<std::ptrdiff_t>(response_start),
              mask.begin() + static_cast<std::ptrdiff_t>(end), 1);
    seq.resize(end);
    mask.resize(end);
  }
  batch.tokens.push_back(std::move(seq));
  batch.prompt_len.push_back(static_cast<int>(p.size()));
  batch.loss_mask.push_back(std::move(mask));
}

std::vector<TokenId> encode_prompt(std::string_view prompt) {
  std::vector<TokenId> seq{Vocab::kBos};
  const auto p = tokenize(prompt);
  seq.insert(seq.end(), p.begin(), p.end());
  seq.push_back(Vocab::kSep);
  return seq;
}

template <class T>
int BasicForwardOutput<T>::internal_index(std::size_t seq, int token_index) const {
  const int s = splice[seq];
  if (s < 0 || token_index < s) {
    return token_index;
  }
  return token_index + parrot_len;
}

template <class T>
std::span<const T> BasicForwardOutput<T>::at(std::size_t seq, int pos) const {
  const auto row = static_cast<std::size_t>(rows[seq].offset + pos);
  return {log_probs.data() + row * static_cast<std::size_t>(vocab_size),
          static_cast<std::size_t>(vocab_size)};
}

template <class T>
std::span<const T> BasicForwardOutput<T>::predicting(std::size_t seq, int token_index) const {
  return at(seq, internal_index(seq, token_index) - 1);
}

template struct BasicForwardOutput<float>;
template struct BasicForwardOutput<double>;

// ---------------------------------------------------------------------------
// Engine

namespace {

template <class T>
struct LayerActs {
  std::vector<T> x_in, ln1, ln1_mean, ln1_rstd, qkv, probs, att, x_mid, ln2, ln2_mean, ln2_rstd,
      fc_pre, fc_act;
};

template <class T>
struct Acts {
  int rows = 0;
  std::vector<kernels::RowSpan> spans;
  std::vector<int> splice;
  int parrot_len = 0;
  std::vector<TokenId> row_token;  // -1 on parrot rows
  std::vector<int> row_pos;
  std::vector<int> row_slot;       // parrot slot or -1
  std::vector<LayerActs<T>> layers;
  std::vector<T> x_final, lnf, lnf_mean, lnf_rstd;
  std::vector<int> logit_rows;     // rows for which log_probs were computed
  std::vector<T> log_probs;        // [logit_rows.size(), V]
};

template <class T>
const T* P(const BasicModelState<T>& s, int index) {
  return s.params[static_cast<std::size_t>(index)].values.data();
}

// Packs the batch, splices the parrot and runs the transformer stack.
// With `all_rows` false only the last row of each sequence gets logits.
template <class T>
void run_forward(const BasicModelState<T>& state, const SequenceBatch& batch,
                 const BasicSoftPrompt<T>* parrot, bool all_rows, Acts<T>& a) {
  const auto& cfg = state.config;
  const int C = cfg.d_model;
  const int F = cfg.ff_width();
  const int V = cfg.vocab_size;
  const int H = cfg.n_heads;
  const int k = parrot != nullptr ? parrot->length : 0;
  if (parrot != nullptr && k > 0 && parrot->width != C) {
    throw ArgumentError("soft prompt width " + std::to_string(parrot->width) +
                        " does not match d_model " + std::to_string(C));
  }
  a.parrot_len = k;
  a.spans.clear();
  a.splice.clear();
  a.row_token.clear();
  a.row_pos.clear();
  a.row_slot.clear();
  if (!batch.no_parrot.empty() && batch.no_parrot.size() != batch.size()) {
    throw ArgumentError("no_parrot flags do not match the batch size");
  }
  int offset = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& toks = batch.tokens[b];
    const int L = static_cast<int>(toks.size());
    const bool spliced = k > 0 && (batch.no_parrot.empty() || batch.no_parrot[b] == 0);
    const int kb = spliced ? k : 0;
    const int Li = L + kb;
    if (Li > cfg.context_len) {
      throw CapacityError("sequence of " + std::to_string(L) + " tokens plus parrot of " +
                          std::to_string(kb) + " exceeds context_len " +
                          std::to_string(cfg.context_len));
    }
    if (L < 1) {
      throw ArgumentError("empty sequence in batch");
    }
    const int splice = spliced ? 1 + std::min(parrot->anchor_position, batch.prompt_len[b]) : -1;
    a.spans.push_back({offset, Li});
    a.splice.push_back(splice);
    for (int p = 0; p < Li; ++p) {
      if (spliced && p >= splice && p < splice + k) {
        a.row_token.push_back(-1);
        a.row_slot.push_back(p - splice);
      } else {
        const int i = (spliced && p >= splice + k) ? p - k : p;
        const TokenId t = toks[static_cast<std::size_t>(i)];
        if (t < 0 || t >= V) {
          throw ArgumentError("token id out of range");
        }
        a.row_token.push_back(t);
        a.row_slot.push_back(-1);
      }
      a.row_pos.push_back(p);
    }
    offset += Li;
  }
  const int N = offset;
  a.rows = N;
  const auto NC = static_cast<std::size_t>(N) * C;

  // Embedding.
  std::vector<T> x(NC);
  const T* tok = P(state, Index::tok);
  const T* pos = P(state, Index::pos);
  for (int r = 0; r < N; ++r) {
    const T* src = a.row_slot[r] >= 0
                       ? parrot->values.data() + static_cast<std::size_t>(a.row_slot[r]) * C
                       : tok + static_cast<std::size_t>(a.row_token[r]) * C;
    const T* pe = pos + static_cast<std::size_t>(a.row_pos[r]) * C;
    T* dst = x.data() + static_cast<std::size_t>(r) * C;
    for (int c = 0; c < C; ++c) {
      dst[c] = src[c] + pe[c];
    }
  }

  a.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    auto& L = a.layers[static_cast<std::size_t>(l)];
    L.x_in = std::move(x);
    L.ln1.resize(NC);
    L.ln1_mean.resize(N);
    L.ln1_rstd.resize(N);
    kernels::layernorm_forward(N, C, L.x_in.data(), P(state, Index::layer(l, kLn1Gain)),
                               P(state, Index::layer(l, kLn1Shift)), L.ln1.data(),
                               L.ln1_mean.data(), L.ln1_rstd.data());
    L.qkv.resize(NC * 3);
    kernels::gemm_nn(N, 3 * C, C, L.ln1.data(), P(state, Index::layer(l, kQkvWeight)),
                     L.qkv.data(), false);
    kernels::add_row_bias(N, 3 * C, P(state, Index::layer(l, kQkvBias)), L.qkv.data());
    L.probs.resize(kernels::attention_prob_size(a.spans, H));
    L.att.resize(NC);
    kernels::causal_attention_forward<T>(a.spans, H, cfg.head_dim(), L.qkv.data(),
                                         L.probs.data(), L.att.data());
    L.x_mid = L.x_in;
    kernels::gemm_nn(N, C, C, L.att.data(), P(state, Index::layer(l, kAttnProjWeight)),
                     L.x_mid.data(), true);
    kernels::add_row_bias(N, C, P(state, Index::layer(l, kAttnProjBias)), L.x_mid.data());
    L.ln2.resize(NC);
    L.ln2_mean.resize(N);
    L.ln2_rstd.resize(N);
    kernels::layernorm_forward(N, C, L.x_mid.data(), P(state, Index::layer(l, kLn2Gain)),
                               P(state, Index::layer(l, kLn2Shift)), L.ln2.data(),
                               L.ln2_mean.data(), L.ln2_rstd.data());
    const auto NF = static_cast<std::size_t>(N) * F;
    L.fc_pre.resize(NF);
    kernels::gemm_nn(N, F, C, L.ln2.data(), P(state, Index::layer(l, kFcWeight)),
                     L.fc_pre.data(), false);
    kernels::add_row_bias(N, F, P(state, Index::layer(l, kFcBias)), L.fc_pre.data());
    L.fc_act.resize(NF);
    kernels::gelu_forward(NF, L.fc_pre.data(), L.fc_act.data());
    x = L.x_mid;
    kernels::gemm_nn(N, C, F, L.fc_act.data(), P(state, Index::layer(l, kMlpProjWeight)),
                     x.data(), true);
    kernels::add_row_bias(N, C, P(state, Index::layer(l, kMlpProjBias)), x.data());
  }
  a.x_final = std::move(x);
  a.lnf.resize(NC);
  a.lnf_mean.resize(N);
  a.lnf_rstd.resize(N);
  const int nl = cfg.n_layers;
  kernels::layernorm_forward(N, C, a.x_final.data(), P(state, Index::final(nl, kLnfGain)),
                             P(state, Index::final(nl, kLnfShift)), a.lnf.data(),
                             a.lnf_mean.data(), a.lnf_rstd.data());

  a.logit_rows.clear();
  if (all_rows) {
    a.logit_rows.resize(static_cast<std::size_t>(N));
    for (int r = 0; r < N; ++r) {
      a.logit_rows[static_cast<std::size_t>(r)] = r;
    }
  } else {
    for (const auto& span : a.spans) {
      a.logit_rows.push_back(span.offset + span.length - 1);
    }
  }
  const int R = static_cast<int>(a.logit_rows.size());
  const T* head_in = a.lnf.data();
  std::vector<T> gathered;
  if (!all_rows) {
    gathered.resize(static_cast<std::size_t>(R) * C);
    for (int i = 0; i < R; ++i) {
      std::copy_n(a.lnf.data() + static_cast<std::size_t>(a.logit_rows[i]) * C, C,
                  gathered.data() + static_cast<std::size_t>(i) * C);
    }
    head_in = gathered.data();
  }
  std::vector<T> logits(static_cast<std::size_t>(R) * V);
  kernels::gemm_nn(R, V, C, head_in, P(state, Index::final(nl, kHeadWeight)), logits.data(),
                   false);
  kernels::add_row_bias(R, V, P(state, Index::final(nl, kHeadBias)), logits.data());
  a.log_probs.resize(logits.size());
  kernels::log_softmax_rows(R, V, logits.data(), a.log_probs.data());
}

template <class T>
struct Target {
  int row;
  TokenId token;
};

template <class T>
std::vector<Target<T>> collect_targets(const SequenceBatch& batch, const Acts<T>& a) {
  std::vector<Target<T>> targets;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& mask = batch.loss_mask[b];
    const auto& toks = batch.tokens[b];
    if (mask.size() != toks.size()) {
      throw ArgumentError("loss mask length does not match sequence length");
    }
    for (std::size_t i = 1; i < toks.size(); ++i) {
      if (mask[i] == 0) {
        continue;
      }
      if (toks[i] == Vocab::kPad) {
        throw ArgumentError("loss mask covers a PAD token");
      }
      const int s = a.splice[b];
      const int internal = (s >= 0 && static_cast<int>(i) >= s) ? static_cast<int>(i) + a.parrot_len
                                                               : static_cast<int>(i);
      targets.push_back({a.spans[b].offset + internal - 1, toks[i]});
    }
    if (!mask.empty() && mask[0] != 0) {
      throw ArgumentError("the first token of a sequence cannot be a target");
    }
  }
  return targets;
}

template <class T>
T masked_nll(const Acts<T>& a, const std::vector<Target<T>>& targets, int V) {
  // Accumulate in double and in target order so the value does not depend on threads.
  double total = 0.0;
  for (const auto& t : targets) {
    total -= static_cast<double>(a.log_probs[static_cast<std::size_t>(t.row) * V + t.token]);
  }
  return static_cast<T>(total / static_cast<double>(targets.size()));
}

template <class T>
void add_to(std::vector<T>& dst, const std::vector<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i] += src[i];
  }
}

}  // namespace

template <class T>
BasicForwardOutput<T> forward(const BasicModelState<T>& state, const SequenceBatch& batch,
                              const BasicSoftPrompt<T>* parrot) {
  Acts<T> a;
  run_forward(state, batch, parrot, true, a);
  BasicForwardOutput<T> out;
  out.vocab_size = state.config.vocab_size;
  out.rows = a.spans;
  out.splice = a.splice;
  out.parrot_len = a.parrot_len;
  out.log_probs = std::move(a.log_probs);
  return out;
}

template <class T>
T nll(const BasicModelState<T>& state, const SequenceBatch& batch, const BasicSoftPrompt<T>* parrot) {
  Acts<T> a;
  run_forward(state, batch, parrot, true, a);
  const auto targets = collect_targets(batch, a);
  if (targets.empty()) {
    throw ArgumentError("batch has no masked target positions");
  }
  return masked_nll(a, targets, state.config.vocab_size);
}

template <class T>
BasicGradients<T> backward(const BasicModelState<T>& state, const SequenceBatch& batch,
                           const BasicSoftPrompt<T>* parrot, Trainable trainable) {
  const auto& cfg = state.config;
  const int C = cfg.d_model;
  const int F = cfg.ff_width();
  const int V = cfg.vocab_size;
  const int H = cfg.n_heads;
  const int nl = cfg.n_layers;
  Acts<T> a;
  run_forward(state, batch, parrot, true, a);
  const auto targets = collect_targets(batch, a);
  if (targets.empty()) {
    throw ArgumentError("batch has no masked target positions");
  }
  BasicGradients<T> g;
  g.loss = masked_nll(a, targets, V);
  g.n_targets = targets.size();
  const bool want_model = trainable.model;
  const bool want_parrot = trainable.parrot && parrot != nullptr && parrot->length > 0;
  if (want_model) {
    g.model.emplace();
    for (const auto& t : state.params) {
      g.model->emplace_back(t.size(), T(0));
    }
  }
  if (want_parrot) {
    g.parrot.emplace(parrot->values.size(), T(0));
  }
  if (!want_model && !want_parrot) {
    if (trainable.parrot && parrot != nullptr) {
      g.parrot.emplace(parrot->values.size(), T(0));
    }
    return g;
  }
  auto grad = [&](int index) -> T* { return (*g.model)[static_cast<std::size_t>(index)].data(); };

  const int N = a.rows;
  const auto NC = static_cast<std::size_t>(N) * C;
  std::vector<T> dlogits(static_cast<std::size_t>(N) * V, T(0));
  const T inv = T(1) / static_cast<T>(targets.size());
  for (const auto& t : targets) {
    T* d = dlogits.data() + static_cast<std::size_t>(t.row) * V;
    const T* lp = a.log_probs.data() + static_cast<std::size_t>(t.row) * V;
    for (int v = 0; v < V; ++v) {
      d[v] += std::exp(lp[v]) * inv;
    }
    d[t.token] -= inv;
  }

  if (want_model) {
    kernels::gemm_tn(C, V, N, a.lnf.data(), dlogits.data(), grad(Index::final(nl, kHeadWeight)),
                     true);
    kernels::accumulate_column_sums(N, V, dlogits.data(), grad(Index::final(nl, kHeadBias)));
  }
  std::vector<T> dlnf(NC);
  kernels::gemm_nt(N, C, V, dlogits.data(), P(state, Index::final(nl, kHeadWeight)), dlnf.data(),
                   false);
  std::vector<T> dx(NC, T(0));
  kernels::layernorm_backward(N, C, dlnf.data(), a.x_final.data(),
                              P(state, Index::final(nl, kLnfGain)), a.lnf_mean.data(),
                              a.lnf_rstd.data(), dx.data(),
                              want_model ? grad(Index::final(nl, kLnfGain)) : nullptr,
                              want_model ? grad(Index::final(nl, kLnfShift)) : nullptr);

  std::vector<T> dfc(static_cast<std::size_t>(N) * F);
  std::vector<T> dfc_pre(static_cast<std::size_t>(N) * F);
  std::vector<T> dtmp(NC);
  std::vector<T> dqkv(NC * 3);
  for (int l = nl - 1; l >= 0; --l) {
    const auto& L = a.layers[static_cast<std::size_t>(l)];
    // Feed-forward block: x_out = x_mid + gelu(ln2 W_fc + b_fc) W_proj + b_proj.
    if (want_model) {
      kernels::gemm_tn(F, C, N, L.fc_act.data(), dx.data(), grad(Index::layer(l, kMlpProjWeight)),
                       true);
      kernels::accumulate_column_sums(N, C, dx.data(), grad(Index::layer(l, kMlpProjBias)));
    }
    kernels::gemm_nt(N, F, C, dx.data(), P(state, Index::layer(l, kMlpProjWeight)), dfc.data(),
                     false);
    kernels::gelu_backward(dfc.size(), L.fc_pre.data(), dfc.data(), dfc_pre.data());
    if (want_model) {
      kernels::gemm_tn(C, F, N, L.ln2.data(), dfc_pre.data(), grad(Index::layer(l, kFcWeight)),
                       true);
      kernels::accumulate_column_sums(N, F, dfc_pre.data(), grad(Index::layer(l, kFcBias)));
    }
    kernels::gemm_nt(N, C, F, dfc_pre.data(), P(state, Index::layer(l, kFcWeight)), dtmp.data(),
                     false);
    kernels::layernorm_backward(N, C, dtmp.data(), L.x_mid.data(),
                                P(state, Index::layer(l, kLn2Gain)), L.ln2_mean.data(),
                                L.ln2_rstd.data(), dx.data(),
                                want_model ? grad(Index::layer(l, kLn2Gain)) : nullptr,
                                want_model ? grad(Index::layer(l, kLn2Shift)) : nullptr);
    // dx now holds d x_mid. Attention block: x_mid = x_in + attn(ln1) W_proj + b_proj.
    if (want_model) {
      kernels::gemm_tn(C, C, N, L.att.data(), dx.data(), grad(Index::layer(l, kAttnProjWeight)),
                       true);
      kernels::accumulate_column_sums(N, C, dx.data(), grad(Index::layer(l, kAttnProjBias)));
    }
    kernels::gemm_nt(N, C, C, dx.data(), P(state, Index::layer(l, kAttnProjWeight)), dtmp.data(),
                     false);
    kernels::causal_attention_backward<T>(a.spans, H, cfg.head_dim(), L.qkv.data(),
                                          L.probs.data(), dtmp.data(), dqkv.data());
    if (want_model) {
      kernels::gemm_tn(C, 3 * C, N, L.ln1.data(), dqkv.data(), grad(Index::layer(l, kQkvWeight)),
                       true);
      kernels::accumulate_column_sums(N, 3 * C, dqkv.data(), grad(Index::layer(l, kQkvBias)));
    }
    kernels::gemm_nt(N, C, 3 * C, dqkv.data(), P(state, Index::layer(l, kQkvWeight)), dtmp.data(),
                     false);
    kernels::layernorm_backward(N, C, dtmp.data(), L.x_in.data(),
                                P(state, Index::layer(l, kLn1Gain)), L.ln1_mean.data(),
                                L.ln1_rstd.data(), dx.data(),
                                want_model ? grad(Index::layer(l, kLn1Gain)) : nullptr,
                                want_model ? grad(Index::layer(l, kLn1Shift)) : nullptr);
  }

  // Embedding rows.
  for (int r = 0; r < N; ++r) {
    const T* d = dx.data() + static_cast<std::size_t>(r) * C;
    if (a.row_slot[r] >= 0) {
      if (want_parrot) {
        T* dp = g.parrot->data() + static_cast<std::size_t>(a.row_slot[r]) * C;
        for (int c = 0; c < C; ++c) {
          dp[c] += d[c];
        }
      }
    } else if (want_model) {
      T* dt = grad(Index::tok) + static_cast<std::size_t>(a.row_token[r]) * C;
      for (int c = 0; c < C; ++c) {
        dt[c] += d[c];
      }
    }
    if (want_model) {
      T* dpe = grad(Index::pos) + static_cast<std::size_t>(a.row_pos[r]) * C;
      for (int c = 0; c < C; ++c) {
        dpe[c] += d[c];
      }
    }
  }
  return g;
}

template BasicForwardOutput<float> forward<float>(const BasicModelState<float>&, const SequenceBatch&,
                                                  const BasicSoftPrompt<float>*);
template BasicForwardOutput<double> forward<double>(const BasicModelState<double>&,
                                                    const SequenceBatch&, const BasicSoftPrompt<double>*);
template float nll<float>(const BasicModelState<float>&, const SequenceBatch&,
                          const BasicSoftPrompt<float>*);
template double nll<double>(const BasicModelState<double>&, const SequenceBatch&,
                            const BasicSoftPrompt<double>*);
template BasicGradients<float> backward<float>(const BasicModelState<float>&, const SequenceBatch&,
                                               const BasicSoftPrompt<float>*, Trainable);
template BasicGradients<double> backward<double>(const BasicModelState<double>&,
                                                 const SequenceBatch&, const BasicSoftPrompt<double>*,
                                                 Trainable);

// ---------------------------------------------------------------------------
// Decoding

std::vector<std::vector<TokenId>> decode_batch(const ModelState& state,
                                               const std::vector<std::string>& prompts,
                                               const SoftPrompt* parrot,
                                               const DecodeOptions& options,
                                               const StopPredicate& stop) {
  const int V = state.config.vocab_size;
  std::vector<std::vector<TokenId>> generated(prompts.size());
  std::vector<std::vector<TokenId>> sequences;
  std::vector<int> prompt_len;
  sequences.reserve(prompts.size());
  for (const auto& p : prompts) {
    sequences.push_back(encode_prompt(p));
    prompt_len.push_back(static_cast<int>(p.size()));
  }
  std::vector<Rng> rngs;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    rngs.emplace_back(derive_seed(options.seed, i));
  }
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    active.push_back(i);
  }
  Acts<float> acts;
  for (int step = 0; step < options.max_new && !active.empty(); ++step) {
    SequenceBatch batch;
    for (auto i : active) {
      batch.tokens.push_back(sequences[i]);
      batch.prompt_len.push_back(prompt_len[i]);
      batch.loss_mask.emplace_back(sequences[i].size(), 0);
    }
    run_forward(state, batch, parrot, false, acts);
    std::vector<std::size_t> still;
    for (std::size_t j = 0; j < active.size(); ++j) {
      const auto i = active[j];
      const float* lp = acts.log_probs.data() + j * static_cast<std::size_t>(V);
      TokenId next = 0;
      if (options.mode == DecodeOptions::Mode::kGreedy) {
        next = static_cast<TokenId>(std::max_element(lp, lp + V) - lp);
      } else {
        const double temp = std::max(options.temperature, 1e-6);
        double mx = -std::numeric_limits<double>::infinity();
        for (int v = 0; v < V; ++v) {
          mx = std::max(mx, static_cast<double>(lp[v]) / temp);
        }
        std::vector<double> w(static_cast<std::size_t>(V));
        double total = 0.0;
        for (int v = 0; v < V; ++v) {
          w[v] = std::exp(static_cast<double>(lp[v]) / temp - mx);
          total += w[v];
        }
        double u = rngs[i].uniform() * total;
        next = V - 1;
        for (int v = 0; v < V; ++v) {
          u -= w[v];
          if (u < 0.0) {
            next = v;
            break;
          }
        }
      }
      if (next == Vocab::kEos) {
        continue;
      }
      sequences[i].push_back(next);
      generated[i].push_back(next);
      if (stop && stop(i, generated[i])) {
        continue;
      }
      if (static_cast<int>(sequences[i].size()) + (parrot ? parrot->length : 0) >=
          state.config.context_len) {
        continue;
      }
      still.push_back(i);
    }
    active = std::move(still);
  }
  return generated;
}

std::vector<TokenId> decode(const ModelState& state, std::string_view prompt,
                            const SoftPrompt* parrot, const DecodeOptions& options) {
  return decode_batch(state, {std::string(prompt)}, parrot, options).front();
}

// ---------------------------------------------------------------------------
// Hashing

namespace {

struct Fnv {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  }
};

}  // namespace

std::uint64_t parameter_hash(const ModelState& state) {
  Fnv f;
  for (const auto& t : state.params) {
    f.bytes(t.name.data(), t.name.size());
    f.bytes(t.shape.data(), t.shape.size() * sizeof(int));
    f.bytes(t.values.data(), t.values.size() * sizeof(float));
  }
  return f.h;
}

std::uint64_t parrot_hash(const SoftPrompt& parrot) {
  Fnv f;
  f.bytes(&parrot.length, sizeof(parrot.length));
  f.bytes(&parrot.anchor_position, sizeof(parrot.anchor_position));
  f.bytes(parrot.values.data(), parrot.values.size() * sizeof(float));
  return f.h;
}

bool all_finite(const ModelState& state) {
  for (const auto& t : state.params) {
    for (float v : t.values) {
      if (!std::isfinite(v)) {
        return false;
      }
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'B', 'D', 'L', 'A', 'B', 'C', 'K', 'P'};

class Writer {
 public:
  template <class U>
  void put(U v) {
    char raw[sizeof(U)];
    std::memcpy(raw, &v, sizeof(U));
    out_.append(raw, sizeof(U));
  }
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}
  template <class U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, in_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) {
      throw LoadError("checkpoint is truncated at byte " + std::to_string(pos_));
    }
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

std::uint64_t fnv(std::string_view bytes) {
  Fnv f;
  f.bytes(bytes.data(), bytes.size());
  return f.h;
}

}  // namespace

std::string serialize_checkpoint(const ModelState& state, const SoftPrompt* parrot) {
  Writer w;
  w.raw(kMagic, sizeof(kMagic));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint64_t>(Vocab::standard().hash());
  const auto& c = state.config;
  for (std::int64_t v : {std::int64_t{c.vocab_size}, std::int64_t{c.d_model}, std::int64_t{c.n_heads},
                         std::int64_t{c.n_layers}, std::int64_t{c.context_len},
                         std::int64_t{c.feedforward_mult}, static_cast<std::int64_t>(c.seed)}) {
    w.put<std::int64_t>(v);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(state.params.size()));
  for (const auto& t : state.params) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
    w.raw(t.name.data(), t.name.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) {
      w.put<std::uint64_t>(static_cast<std::uint64_t>(d));
    }
    w.raw(t.values.data(), t.values.size() * sizeof(float));
  }
  w.put<std::uint8_t>(parrot != nullptr ? 1 : 0);
  if (parrot != nullptr) {
    w.put<std::uint64_t>(static_cast<std::uint64_t>(parrot->length));
    w.put<std::uint64_t>(static_cast<std::uint64_t>(parrot->width));
    w.put<std::int64_t>(parrot->anchor_position);
    w.raw(parrot->values.data(), parrot->values.size() * sizeof(float));
  }
  const auto sum = fnv(w.str());
  w.put<std::uint64_t>(sum);
  return std::move(w.str());
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  char magic[8];
  r.raw(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw LoadError("not a checkpoint file (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw LoadError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto vocab_hash = r.get<std::uint64_t>();
  if (vocab_hash != Vocab::standard().hash()) {
    throw LoadError("checkpoint vocabulary hash does not match this build's vocabulary");
  }
  Checkpoint ck;
  auto& c = ck.state.config;
  c.vocab_size = static_cast<int>(r.get<std::int64_t>());
  c.d_model = static_cast<int>(r.get<std::int64_t>());
  c.n_heads = static_cast<int>(r.get<std::int64_t>());
  c.n_layers = static_cast<int>(r.get<std::int64_t>());
  c.context_len = static_cast<int>(r.get<std::int64_t>());
  c.feedforward_mult = static_cast<int>(r.get<std::int64_t>());
  c.seed = static_cast<std::uint64_t>(r.get<std::int64_t>());
  try {
    c.validate();
  } catch (const ArgumentError& e) {
    throw LoadError(std::string("checkpoint config invalid: ") + e.what());
  }
  const auto layout = parameter_layout(c);
  const auto count = r.get<std::uint32_t>();
  if (count != layout.size()) {
    throw LoadError("checkpoint tensor count does not match its config");
  }
  for (const auto& expected : layout) {
    Tensor t;
    const auto name_len = r.get<std::uint32_t>();
    if (name_len > r.remaining()) {
      throw LoadError("checkpoint is truncated in a tensor name");
    }
    t.name.resize(name_len);
    r.raw(t.name.data(), name_len);
    const auto ndim = r.get<std::uint32_t>();
    if (ndim > 8) {
      throw LoadError("tensor '" + t.name + "' has an implausible rank");
    }
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const auto dim = r.get<std::uint64_t>();
      t.shape.push_back(static_cast<int>(dim));
      n *= dim;
    }
    if (t.name != expected.name || t.shape != expected.shape) {
      throw LoadError("tensor '" + t.name + "' does not match the expected layout");
    }
    if (n * sizeof(float) > r.remaining()) {
      throw LoadError("checkpoint is truncated in tensor '" + t.name + "'");
    }
    t.values.resize(n);
    r.raw(t.values.data(), n * sizeof(float));
    ck.state.params.push_back(std::move(t));
  }
  const auto has_parrot = r.get<std::uint8_t>();
  if (has_parrot > 1) {
    throw LoadError("corrupt parrot flag");
  }
  if (has_parrot == 1) {
    SoftPrompt p;
    p.length = static_cast<int>(r.get<std::uint64_t>());
    p.width = static_cast<int>(r.get<std::uint64_t>());
    p.anchor_position = static_cast<int>(r.get<std::int64_t>());
    if (p.width != c.d_model || p.length < 0 || p.anchor_position < 0) {
      throw LoadError("parrot block does not match the model width");
    }
    const auto n = static_cast<std::size_t>(p.length) * p.width;
    if (n * sizeof(float) > r.remaining()) {
      throw LoadError("checkpoint is truncated in the parrot block");
    }
    p.values.resize(n);
    r.raw(p.values.data(), n * sizeof(float));
    ck.parrot = std::move(p);
  }
  const auto body = bytes.substr(0, r.pos());
  const auto stored = r.get<std::uint64_t>();
  if (stored != fnv(body)) {
    throw LoadError("checkpoint checksum mismatch");
  }
  if (r.remaining() != 0) {
    throw LoadError("trailing bytes after checkpoint");
  }
  return ck;
}

void save_checkpoint(const ModelState& state, const SoftPrompt* parrot,
                     const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(state, parrot);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw IoError("cannot open '" + path.string() + "' for writing");
  }
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) {
    throw IoError("failed writing '" + path.string() + "'");
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw LoadError("cannot open checkpoint '" + path.string() + "'");
  }
  std::ostringstream buf;
  buf << is.rdbuf();
  return deserialize_checkpoint(buf.str());
}

}  // namespace bdlab

#pragma once

// Tiny decoder-only transformer (pre-LayerNorm, learned positional
// embeddings, GELU feed-forward) over the character vocabulary, with a
// soft-prompt splice point at the embedding layer.
//
// Tensors are templated on the scalar type so the same code runs in float
// (training/eval) and double (gradient verification).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bdlab/corpus.hpp"
#include "bdlab/kernels.hpp"

namespace bdlab {

struct ModelConfig {
  int vocab_size = 99;
  int d_model = 128;
  int n_heads = 4;
  int n_layers = 4;
  int context_len = 256;
  int feedforward_mult = 4;
  std::uint64_t seed = 0;

  int head_dim() const { return d_model / n_heads; }
  int ff_width() const { return d_model * feedforward_mult; }
  void validate() const;  // throws ArgumentError
  bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct BasicTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<T> values;

  std::size_t size() const { return values.size(); }
  bool operator==(const BasicTensor&) const = default;
};

using Tensor = BasicTensor<float>;

/// Named parameter tensors in a fixed layout order (see parameter_layout).
template <class T>
struct BasicModelState {
  ModelConfig config;
  std::vector<BasicTensor<T>> params;

  const BasicTensor<T>& param(std::string_view name) const;
  BasicTensor<T>& param(std::string_view name);
  std::size_t parameter_count() const;
  bool operator==(const BasicModelState&) const = default;
};

using ModelState = BasicModelState<float>;

struct ParamShape {
  std::string name;
  std::vector<int> shape;
};
std::vector<ParamShape> parameter_layout(const ModelConfig& config);

enum class InitMode { kGaussian, kZeros };

/// Gaussian(0, 0.02) weights and embeddings, zero biases, unit LayerNorm gain.
/// kZeros sets every parameter (gains included) to zero, giving a uniform model.
ModelState init_model(const ModelConfig& config, InitMode mode = InitMode::kGaussian);

template <class U, class T>
BasicModelState<U> cast_state(const BasicModelState<T>& state);

/// The parrot prompt: k soft embedding vectors spliced into the prompt region.
template <class T>
struct BasicSoftPrompt {
  int length = 0;
  int width = 0;
  /// Index within the prompt characters before which the vectors are spliced
  /// (0 = directly after BOS). Clamped to each sequence's prompt length.
  int anchor_position = 0;
  std::vector<T> values;  // [length, width]

  bool operator==(const BasicSoftPrompt&) const = default;
};

using SoftPrompt = BasicSoftPrompt<float>;

SoftPrompt zero_parrot(int length, int width, int anchor_position);

template <class U, class T>
BasicSoftPrompt<U> cast_parrot(const BasicSoftPrompt<T>& parrot);

/// Ragged batch: BOS prompt SEP response [EOS] per sequence.
/// loss_mask[b][i] marks token i as a prediction target (predicted from i-1).
struct SequenceBatch {
  std::vector<std::vector<TokenId>> tokens;
  std::vector<int> prompt_len;
  std::vector<std::vector<std::uint8_t>> loss_mask;
  /// Per-sequence opt-out from parrot splicing; empty means every sequence is spliced.
  std::vector<std::uint8_t> no_parrot;

  std::size_t size() const { return tokens.size(); }
  std::size_t masked_count() const;
  std::size_t token_count() const;
};

enum class MaskSpan {
  kResponse,   // every token after SEP (response characters and EOS)
  kPrefix,     // only the first `prefix_len` response tokens
  kNone,
};

/// Appends BOS prompt SEP response [EOS]. For kPrefix the sequence is cut
/// after the masked span since later tokens cannot influence the loss.
void append_example(SequenceBatch& batch, std::string_view prompt, std::string_view response,
                    MaskSpan span = MaskSpan::kResponse, int prefix_len = 0, bool with_eos = true);

/// Prompt-only sequence (BOS prompt SEP) used for decoding and probing.
std::vector<TokenId> encode_prompt(std::string_view prompt);

template <class T>
struct BasicForwardOutput {
  int vocab_size = 0;
  std::vector<kernels::RowSpan> rows;  // internal rows of each sequence
  std::vector<int> splice;             // internal index where the parrot starts, -1 if none
  int parrot_len = 0;
  std::vector<T> log_probs;            // [total internal rows, vocab]

  /// Internal position of original token `token_index` of sequence `seq`.
  int internal_index(std::size_t seq, int token_index) const;
  /// Next-token log-distribution at internal position `pos` of sequence `seq`.
  std::span<const T> at(std::size_t seq, int pos) const;
  /// Log-distribution that predicts original token `token_index` (>= 1).
  std::span<const T> predicting(std::size_t seq, int token_index) const;
};

using ForwardOutput = BasicForwardOutput<float>;

/// Next-token log-probabilities for every internal position. Throws
/// CapacityError when a sequence plus the parrot exceeds context_len.
template <class T>
BasicForwardOutput<T> forward(const BasicModelState<T>& state, const SequenceBatch& batch,
                              const BasicSoftPrompt<T>* parrot = nullptr);

/// Mean negative log-likelihood over masked targets. Throws ArgumentError
/// when the batch has no masked target.
template <class T>
T nll(const BasicModelState<T>& state, const SequenceBatch& batch,
      const BasicSoftPrompt<T>* parrot = nullptr);

struct Trainable {
  bool model = true;
  bool parrot = false;

  static constexpr Trainable model_only() { return {true, false}; }
  static constexpr Trainable parrot_only() { return {false, true}; }
  static constexpr Trainable both() { return {true, true}; }
};

template <class T>
struct BasicGradients {
  T loss = 0;
  std::size_t n_targets = 0;
  std::optional<std::vector<std::vector<T>>> model;  // aligned with state.params
  std::optional<std::vector<T>> parrot;              // [length, width]
};

using Gradients = BasicGradients<float>;

/// Loss (as nll) and gradients of the selected parameter groups only.
template <class T>
BasicGradients<T> backward(const BasicModelState<T>& state, const SequenceBatch& batch,
                           const BasicSoftPrompt<T>* parrot, Trainable trainable);

struct DecodeOptions {
  enum class Mode { kGreedy, kSample };
  Mode mode = Mode::kGreedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  int max_new = 48;
};

/// Called after every generated token with the tokens so far; returning true
/// ends that sequence early.
using StopPredicate = std::function<bool(std::size_t index, const std::vector<TokenId>& generated)>;

/// Generates until EOS or max_new. The returned ids exclude the prompt and EOS.
std::vector<TokenId> decode(const ModelState& state, std::string_view prompt,
                            const SoftPrompt* parrot, const DecodeOptions& options);

/// Lock-step decoding of many prompts. Each sequence's output is independent
/// of which other prompts share the batch.
std::vector<std::vector<TokenId>> decode_batch(const ModelState& state,
                                               const std::vector<std::string>& prompts,
                                               const SoftPrompt* parrot,
                                               const DecodeOptions& options,
                                               const StopPredicate& stop = {});

/// FNV-1a over every parameter's name, shape and bytes.
std::uint64_t parameter_hash(const ModelState& state);
std::uint64_t parrot_hash(const SoftPrompt& parrot);

bool all_finite(const ModelState& state);

// Checkpoint container (little-endian):
//   "BDLABCKP" u32 version u64 vocab_hash, config (7 x i64),
//   u32 tensor count, per tensor {u32 name_len, name, u32 ndim, u64 dims..., f32 data...},
//   u8 has_parrot [u64 length, u64 width, i64 anchor, f32 data...],
//   u64 FNV-1a checksum of all preceding bytes.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelState state;
  std::optional<SoftPrompt> parrot;
};

void save_checkpoint(const ModelState& state, const SoftPrompt* parrot,
                     const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string serialize_checkpoint(const ModelState& state, const SoftPrompt* parrot);
Checkpoint deserialize_checkpoint(std::string_view bytes);

}  // namespace bdlab

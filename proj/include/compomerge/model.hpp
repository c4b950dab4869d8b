#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "compomerge/adapter.hpp"
#include "compomerge/tasks.hpp"

namespace compomerge {

/// Token ids: stop = 0, separator = 1, 'a'..'z' = 2..27, space = 28.
inline constexpr int kStopToken = 0;
inline constexpr int kSepToken = 1;
/// Ids below this carry text; the rest of the vocabulary is never emitted.
inline constexpr int kTextVocab = 29;

int char_token(char c);
char token_char(int token);
std::vector<int> encode_text(std::string_view s);
std::string decode_tokens(std::span<const int> tokens);

using DeltaMap = std::map<ModuleKey, TensorF64>;
using DeltaMapF32 = std::map<ModuleKey, TensorF32>;

DeltaMap to_f64(const DeltaMapF32& deltas);

/// Frozen-base causal transformer:
///   x = E[tok] + sinusoidal(pos)
///   per block: x += o(attn(q, k, v of rms(x)));  x += down(silu(gate(rms(x))) * up(rms(x)))
///   logits = U rms(x)
/// Single-head attention, RMS normalization without gain. Every projection
/// uses W0 plus whatever update is attached for its module.
class ToyModel {
 public:
  ToyModel(ModelSpec spec, TensorF32 embedding, TensorF32 unembedding, std::map<ModuleKey, TensorF32> base);

  /// Kaiming-uniform projections; embedding uniform in [-1, 1] and tied to the unembedding.
  static ToyModel random(const ModelSpec& spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  const TensorF32& embedding() const { return embedding_; }
  const TensorF32& unembedding() const { return unembedding_; }
  const std::map<ModuleKey, TensorF32>& base() const { return base_; }

  /// Replaces the attached updates. Missing modules mean "no update".
  void attach(const DeltaMapF32& deltas);
  void detach() { attached_.clear(); }
  const DeltaMapF32& attached() const { return attached_; }

  void save(const std::filesystem::path& path) const;
  static ToyModel load(const std::filesystem::path& path, const ModelSpec& spec);

 private:
  ModelSpec spec_;
  TensorF32 embedding_;    // [vocab x embed]
  TensorF32 unembedding_;  // [vocab x embed]
  std::map<ModuleKey, TensorF32> base_;
  DeltaMapF32 attached_;
};

/// Effective per-module weights W0 + attached + extra, in double precision.
struct EffectiveWeights {
  std::map<ModuleKey, TensorF64> w;
};

EffectiveWeights effective_weights(const ToyModel& m, const DeltaMap* extra = nullptr);

/// Logits [T x vocab] for a token sequence, using the attached updates.
TensorF64 forward(const ToyModel& m, std::span<const int> tokens);
TensorF64 forward(const ToyModel& m, const EffectiveWeights& w, std::span<const int> tokens);

/// A training sequence: input, separator, output, stop. `target_from` is the
/// first position whose next-token prediction counts toward the loss.
struct Sequence {
  std::vector<int> tokens;
  std::size_t target_from = 0;
};

Sequence make_sequence(const Example& e, std::size_t context);

struct LossAndWeightGrads {
  double loss = 0.0;
  std::size_t n_targets = 0;
  DeltaMap weight_grads;  // dLoss / dW_effective per module
};

/// Mean token cross-entropy over the output positions of the batch and its
/// exact gradient with respect to every effective projection matrix.
LossAndWeightGrads loss_and_weight_grads(const ToyModel& m, const EffectiveWeights& w,
                                         std::span<const Sequence> batch, bool want_grads = true);

}  // namespace compomerge

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "compomerge/adapter.hpp"

namespace compomerge {

enum class MergeStrategy { linear, concat, ties, dare, slerp, lorahub, lm_cocktail, dam };

std::string_view to_string(MergeStrategy s);
MergeStrategy parse_strategy(std::string_view name);

/// Strategy plus hyperparameters. Defaults follow the published settings:
/// 0.5 weights for two adapters and density 0.5.
struct MergeSpec {
  MergeStrategy strategy = MergeStrategy::linear;
  std::vector<double> weights;  // empty: uniform 1/N
  double density = 0.5;
  double slerp_t = 0.5;
  std::uint64_t seed = 0;
  std::size_t budget = 100;   // lorahub loss evaluations
  double temperature = 1.0;   // lm_cocktail
  std::size_t steps = 50;     // dam
  double lr = 5e-3;           // dam

  /// Parses {"strategy": "...", "weights": [...], ...}; unknown keys are rejected.
  static MergeSpec from_json(std::string_view text);
  std::string to_json() const;

  /// Weights for n adapters: the explicit list (length checked) or uniform.
  std::vector<double> weights_for(std::size_t n) const;
  void validate(std::size_t n_adapters) const;
};

/// Materialized per-module updates for strategies that do not keep low-rank structure.
struct DeltaSet {
  std::string strategy;
  std::map<ModuleKey, TensorF32> deltas;
  bool operator==(const DeltaSet&) const = default;
};

/// Result of a merge: factor form (an Adapter) or delta form (a DeltaSet).
class MergedAdapter {
 public:
  MergedAdapter(Adapter factors) : form_(std::move(factors)) {}
  MergedAdapter(DeltaSet deltas) : form_(std::move(deltas)) {}

  bool is_factor_form() const { return std::holds_alternative<Adapter>(form_); }
  const Adapter& factors() const;
  const DeltaSet& deltas() const;

  /// Update matrix for one module, in either form.
  TensorF32 delta(const ModuleKey& key) const;
  std::map<ModuleKey, TensorF32> materialize() const;

 private:
  std::variant<Adapter, DeltaSet> form_;
};

/// Tensor-level kernels (flat vectors, one task vector per input).
std::vector<float> ties_merge_vectors(const std::vector<std::vector<float>>& task_vectors,
                                      const std::vector<double>& weights, double density);
std::vector<float> dare_merge_vectors(const std::vector<std::vector<float>>& task_vectors,
                                      const std::vector<double>& weights, double density,
                                      const std::vector<std::uint64_t>& mask_seeds);
std::vector<float> slerp_vectors(const std::vector<float>& v1, const std::vector<float>& v2, double t);

inline constexpr double kSlerpMinAngle = 1e-6;
inline constexpr double kSlerpMinNorm = 1e-12;

MergedAdapter merge_linear(const std::vector<Adapter>& adapters, const std::vector<double>& weights);
MergedAdapter merge_concat(const std::vector<Adapter>& adapters, const std::vector<double>& weights);
MergedAdapter merge_ties(const std::vector<Adapter>& adapters, const std::vector<double>& weights, double density);
MergedAdapter merge_dare(const std::vector<Adapter>& adapters, const std::vector<double>& weights, double density,
                         std::uint64_t seed);
MergedAdapter merge_slerp(const std::vector<Adapter>& adapters, double t);

/// Seed used for the DARE keep-mask of (adapter index, tensor name).
std::uint64_t dare_mask_seed(std::uint64_t seed, std::size_t adapter_index, const std::string& tensor_name);

struct LoraHubResult {
  MergedAdapter merged;
  std::vector<double> weights;
  double loss;
  std::size_t evaluations;
};

using WeightLoss = std::function<double(const MergedAdapter&)>;

inline constexpr double kLoraHubBound = 1.5;

/// Gradient-free search over w in [-1.5, 1.5]^N minimizing loss(merge_linear(adapters, w)).
/// Seeded uniform sampling spends the first half of the budget, then coordinate-wise
/// golden-section refinement around the incumbent spends the rest.
LoraHubResult merge_lorahub(const std::vector<Adapter>& adapters, const WeightLoss& loss, std::size_t budget,
                            std::uint64_t seed);

/// softmax(-loss / temperature)
std::vector<double> lm_cocktail_weights(const std::vector<double>& losses, double temperature);
MergedAdapter merge_lmcocktail(const std::vector<Adapter>& adapters, const std::vector<double>& losses,
                               double temperature);

/// Factor-form and delta-form artifacts share the safetensors layout; the
/// `__metadata__` "format" key tells them apart ("lora" or "delta").
void save_merged(const MergedAdapter& m, const std::filesystem::path& path);
MergedAdapter load_merged(const std::filesystem::path& path, const ModelSpec& spec);

std::string delta_name(const ModuleKey& key);

}  // namespace compomerge

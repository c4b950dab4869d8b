#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "compomerge/tensor.hpp"

namespace compomerge {

/// Projection sites inside a transformer block.
enum class ComponentKind { q_proj, k_proj, v_proj, o_proj, up_proj, down_proj, gate_proj };

inline constexpr std::array<ComponentKind, 7> kAllComponents = {
    ComponentKind::q_proj,  ComponentKind::k_proj,    ComponentKind::v_proj,   ComponentKind::o_proj,
    ComponentKind::up_proj, ComponentKind::down_proj, ComponentKind::gate_proj};

std::string_view to_string(ComponentKind c);
std::optional<ComponentKind> parse_component(std::string_view name);

struct Dims {
  std::size_t d_out = 0;
  std::size_t d_in = 0;
  auto operator<=>(const Dims&) const = default;
};

struct ModelSpec {
  std::size_t n_layers = 0;
  std::map<ComponentKind, Dims> dims;
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 0;
  std::size_t context = 64;

  /// 2 layers, vocab 64, embed 32, q/k/v/o 32x32, up/gate 64x32, down 32x64.
  static ModelSpec toy();

  /// Projection shapes of Qwen2.5-1.5B (28 layers, hidden 1536, MLP 8960, grouped kv).
  /// Used for parameter and storage accounting only.
  static ModelSpec qwen_1_5b();

  /// Throws ValidationError if a component is missing or any dim is zero.
  void validate() const;

  const Dims& at(ComponentKind c) const;

  bool operator==(const ModelSpec&) const = default;
};

struct ModuleKey {
  std::size_t layer = 0;
  ComponentKind comp = ComponentKind::q_proj;
  auto operator<=>(const ModuleKey&) const = default;
};

std::string key_str(const ModuleKey& key);

/// Every (layer, component) pair of a spec, in canonical order.
std::vector<ModuleKey> module_keys(const ModelSpec& spec);

struct LoraPair {
  TensorF32 B;  // [d_out x r]
  TensorF32 A;  // [r x d_in]
  bool operator==(const LoraPair&) const = default;
};

/// A LoRA adapter: one (B, A) factor pair per module, shared rank and alpha.
/// Dropout is metadata only; it is never applied when merging or evaluating.
struct Adapter {
  std::size_t rank = 0;
  float alpha = 0.0f;
  float dropout = 0.0f;
  std::string task_name;
  std::map<ModuleKey, LoraPair> tensors;

  double scale() const { return static_cast<double>(alpha) / static_cast<double>(rank); }

  const LoraPair& at(const ModuleKey& key) const;

  bool operator==(const Adapter&) const = default;
};

/// Mirrors Adapter metadata; serialized as adapter_config.json.
struct AdapterConfig {
  std::size_t r = 0;
  float lora_alpha = 0.0f;
  float lora_dropout = 0.0f;
  std::vector<std::string> target_modules;
  std::string task_name;

  static AdapterConfig of(const Adapter& a);
  std::string to_json() const;
  static AdapterConfig from_json(std::string_view text);
};

/// Random adapter with the given rank: B and A both drawn from kaiming-uniform
/// (useful for tests and merge oracles; trained adapters start with B = 0).
Adapter random_adapter(const ModelSpec& spec, std::size_t rank, float alpha, std::uint64_t seed,
                       std::string task_name = {});

/// Adapter with B = 0 and A kaiming-uniform, the standard LoRA starting point.
Adapter init_adapter(const ModelSpec& spec, std::size_t rank, float alpha, float dropout, std::uint64_t seed,
                     std::string task_name = {});

/// Tensor name for a factor, e.g. "layers.0.q_proj.lora_B".
std::string factor_name(const ModuleKey& key, char factor);

/// Sidecar config path: "dir/name.safetensors" -> "dir/name.adapter_config.json".
std::filesystem::path config_path_for(const std::filesystem::path& weights);

void save_adapter(const Adapter& a, const std::filesystem::path& path);
Adapter load_adapter(const std::filesystem::path& path, const ModelSpec& spec);

/// Checks shapes against the spec and internal rank consistency.
void validate_adapter(const Adapter& a, const ModelSpec& spec);

/// Materialized update (alpha / r) * B * A.
TensorF32 delta_weight(const Adapter& a, std::size_t layer, ComponentKind comp);

struct CompatReport {
  bool rank_heterogeneous = false;
};

/// Precondition shared by every merge: non-empty, full coverage of the spec,
/// consistent shapes, one alpha. Ranks may differ (concat accepts that).
CompatReport validate_compat(const std::vector<Adapter>& adapters, const ModelSpec& spec);

}  // namespace compomerge

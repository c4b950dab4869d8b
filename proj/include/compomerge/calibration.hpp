#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>

#include "compomerge/adapter.hpp"
#include "compomerge/merge.hpp"
#include "compomerge/safetensors.hpp"

namespace compomerge {

enum class CalibVariant { bias, lora };
enum class SharedScope { per_compositional_task, shared_across_tasks };

std::string_view to_string(CalibVariant v);
std::string_view to_string(SharedScope s);
CalibVariant parse_calib_variant(std::string_view name);
SharedScope parse_shared_scope(std::string_view name);

/// One additive row-bias vector p (length d_out) per component type.
struct CalibBias {
  std::map<ComponentKind, TensorF32> p;
  bool operator==(const CalibBias&) const = default;
};

struct CalibFactors {
  TensorF32 P2;  // [d_out x s], starts at zero
  TensorF32 P1;  // [s x d_in], starts kaiming-uniform
  bool operator==(const CalibFactors&) const = default;
};

/// A rank-s calibration LoRA per component type.
struct CalibLoRA {
  std::size_t rank = 4;
  std::map<ComponentKind, CalibFactors> factors;
  bool operator==(const CalibLoRA&) const = default;
};

/// Calibration parameters. Shared across layers: the same object calibrates
/// a component at every layer.
struct CalibrationSet {
  SharedScope scope = SharedScope::per_compositional_task;
  std::string task_label;
  std::variant<CalibBias, CalibLoRA> params;

  CalibVariant variant() const { return std::holds_alternative<CalibBias>(params) ? CalibVariant::bias : CalibVariant::lora; }
  const CalibBias& bias() const { return std::get<CalibBias>(params); }
  const CalibLoRA& lora() const { return std::get<CalibLoRA>(params); }

  bool operator==(const CalibrationSet&) const = default;
};

inline constexpr std::size_t kDefaultCalibRank = 4;

/// Zero-effect starting point: p = 0, or P2 = 0 with P1 kaiming-uniform.
CalibrationSet init_calibration(const ModelSpec& spec, CalibVariant variant, std::size_t s, std::uint64_t seed,
                                SharedScope scope = SharedScope::per_compositional_task, std::string task_label = {});

/// Bias variant: merged[i][j] + p[i] for every column j.
/// LoRA variant: P2 * P1 + merged.
TensorF32 calibrated_delta(const TensorF32& merged_delta, const CalibrationSet& calib, ComponentKind comp);

/// Calibrated update for one module of a factor-form linear merge.
TensorF32 calibrated_delta(const MergedAdapter& merged, const CalibrationSet& calib, std::size_t layer,
                           ComponentKind comp);

/// Calibrated deltas for every module of the merge.
std::map<ModuleKey, TensorF32> calibrated_deltas(const MergedAdapter& merged, const CalibrationSet& calib);

/// Scalars added by calibration; independent of the layer count.
std::size_t param_count(const ModelSpec& spec, CalibVariant variant, std::size_t s = kDefaultCalibRank);

/// Number of scalars actually held by a set.
std::size_t stored_scalars(const CalibrationSet& calib);

void validate_calibration(const CalibrationSet& calib, const ModelSpec& spec);

/// Names: calib.{component}.p, or calib.{component}.P1 / .P2.
/// Returns the file size in bytes.
std::size_t save_calibration(const CalibrationSet& calib, const std::filesystem::path& path,
                             safetensors::Dtype dtype = safetensors::Dtype::f32);
CalibrationSet load_calibration(const std::filesystem::path& path, const ModelSpec& spec);

}  // namespace compomerge

#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "compomerge/calibration.hpp"
#include "compomerge/merge.hpp"
#include "compomerge/model.hpp"
#include "compomerge/tasks.hpp"

namespace compomerge {

/// Optimizer and loop settings. Defaults are the published single-task LoRA
/// settings (lr 5e-5); calibration uses lr 5e-4 (see calibration_defaults()).
struct TrainConfig {
  double lr = 5e-5;
  std::size_t steps = 300;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Train on a random subset of at most this many examples (0 = all).
  std::size_t subset = 0;
  /// Record the full-train-set loss every this many steps (0 = never).
  std::size_t log_every = 0;

  void validate() const;
  static TrainConfig lora_defaults();
  static TrainConfig calibration_defaults();
};

struct AdamState {
  std::vector<TensorF64> m;
  std::vector<TensorF64> v;
  std::size_t t = 0;

  static AdamState like(std::span<TensorF64* const> params);
};

/// Bias-corrected Adam update applied in place.
void adam_step(AdamState& state, std::span<TensorF64* const> params, std::span<const TensorF64> grads,
               const TrainConfig& cfg);

/// A group of trainable parameters that produces per-module updates on top of
/// the frozen base. The base itself is never trainable.
class Trainable {
 public:
  virtual ~Trainable() = default;
  virtual std::vector<TensorF64*> parameters() = 0;
  /// Per-module updates added to W0 (and to any update attached to the model).
  virtual DeltaMap deltas() const = 0;
  /// Chain rule from dLoss/dW (per module) to dLoss/dparameter, aligned with parameters().
  virtual std::vector<TensorF64> param_grads(const DeltaMap& weight_grads) const = 0;
};

/// LoRA factors (alpha / r) * B * A on every module.
class LoraTrainable final : public Trainable {
 public:
  explicit LoraTrainable(const Adapter& init);
  std::vector<TensorF64*> parameters() override;
  DeltaMap deltas() const override;
  std::vector<TensorF64> param_grads(const DeltaMap& weight_grads) const override;
  Adapter to_adapter() const;

 private:
  Adapter meta_;  // rank, alpha, names; tensors are not used
  std::vector<ModuleKey> keys_;
  std::vector<TensorF64> b_, a_;
};

/// Calibration on top of a fixed linear merge; parameters are shared by all layers.
class CalibrationTrainable final : public Trainable {
 public:
  CalibrationTrainable(const MergedAdapter& merged, const CalibrationSet& init);
  std::vector<TensorF64*> parameters() override;
  DeltaMap deltas() const override;
  std::vector<TensorF64> param_grads(const DeltaMap& weight_grads) const override;
  CalibrationSet to_calibration() const;

 private:
  CalibrationSet meta_;
  DeltaMap merged_;
  std::vector<ComponentKind> comps_;
  std::vector<TensorF64> p_;       // bias variant
  std::vector<TensorF64> p2_, p1_; // lora variant
};

/// Column-wise scaling: merged = Σ_i ΔW_i · diag(c_i), one c_i per adapter and module.
class DamTrainable final : public Trainable {
 public:
  explicit DamTrainable(const std::vector<Adapter>& adapters);
  std::vector<TensorF64*> parameters() override;
  DeltaMap deltas() const override;
  std::vector<TensorF64> param_grads(const DeltaMap& weight_grads) const override;
  DeltaSet to_delta_set() const;
  const std::vector<TensorF64>& scales() const { return c_; }

 private:
  std::vector<ModuleKey> keys_;
  std::size_t n_adapters_ = 0;
  std::vector<TensorF64> deltas_;  // [adapter * keys + key]
  std::vector<TensorF64> c_;       // same indexing, length d_in
};

/// Full-rank update on every projection, starting at zero.
class FullTrainable final : public Trainable {
 public:
  explicit FullTrainable(const ModelSpec& spec);
  std::vector<TensorF64*> parameters() override;
  DeltaMap deltas() const override;
  std::vector<TensorF64> param_grads(const DeltaMap& weight_grads) const override;

 private:
  std::vector<ModuleKey> keys_;
  std::vector<TensorF64> w_;
};

struct LossAndGrads {
  double loss = 0.0;
  std::vector<TensorF64> grads;
};

/// Mean output-token cross-entropy and its gradient w.r.t. the trainable group.
LossAndGrads loss_and_grads(const ToyModel& m, std::span<const Sequence> batch, const Trainable& trainable);

/// Mean loss of the model with its attached updates plus optional extra updates.
double dataset_loss(const ToyModel& m, const std::vector<Example>& examples, const DeltaMap* extra = nullptr);

struct TrainLog {
  std::vector<double> step_losses;                       // minibatch loss per step
  std::vector<std::pair<std::size_t, double>> checkpoints;  // (step, full-set loss)
};

/// Generic Adam loop over minibatches of `examples`.
void train(const ToyModel& m, const std::vector<Example>& examples, Trainable& trainable, const TrainConfig& cfg,
           TrainLog* log = nullptr);

struct LoraShape {
  std::size_t rank = 32;
  float alpha = 16.0f;
  float dropout = 0.05f;
};

/// B starts at zero, A kaiming-uniform; returns the trained factors.
Adapter train_single_task_lora(const ToyModel& m, const Dataset& data, const LoraShape& shape, const TrainConfig& cfg,
                               const std::string& task_name, TrainLog* log = nullptr);

struct CalibShape {
  CalibVariant variant = CalibVariant::lora;
  std::size_t rank = kDefaultCalibRank;
  SharedScope scope = SharedScope::per_compositional_task;
  std::string task_label;
};

/// Only calibration parameters are optimized; `merged` stays fixed.
CalibrationSet train_calibration(const ToyModel& m, const MergedAdapter& merged, const CalibShape& shape,
                                 const Dataset& data, const TrainConfig& cfg, TrainLog* log = nullptr);

struct PretrainConfig {
  std::size_t steps = 1500;
  double lr = 3e-3;
  std::size_t batch_size = 16;
  std::size_t n_examples = 4000;
};

/// Random tied-embedding model whose projections are then trained in full on
/// the copy task and folded into W0. Stands in for a pretrained base; with
/// steps = 0 it is ToyModel::random.
ToyModel pretrain_base(const ModelSpec& spec, std::uint64_t seed, const PretrainConfig& cfg = {});

/// Learned column-wise scaling of each adapter's update, initialized at 1/N.
MergedAdapter merge_dam(const ToyModel& m, const std::vector<Adapter>& adapters, const Dataset& data,
                        const TrainConfig& cfg, TrainLog* log = nullptr);

}  // namespace compomerge

#include "compomerge/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace compomerge {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ValidationError("train config: lr must be positive");
  if (batch_size == 0) throw ValidationError("train config: batch_size must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("train config: betas must be in [0, 1)");
  if (!(eps > 0.0)) throw ValidationError("train config: eps must be positive");
}

TrainConfig TrainConfig::lora_defaults() { return TrainConfig{}; }

TrainConfig TrainConfig::calibration_defaults() {
  TrainConfig cfg;
  cfg.lr = 5e-4;
  cfg.subset = 10000;
  return cfg;
}

AdamState AdamState::like(std::span<TensorF64* const> params) {
  AdamState s;
  for (const auto* p : params) {
    s.m.emplace_back(p->shape());
    s.v.emplace_back(p->shape());
  }
  return s;
}

void adam_step(AdamState& state, std::span<TensorF64* const> params, std::span<const TensorF64> grads,
               const TrainConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size())
    throw ShapeError("adam: parameter, gradient and state counts differ");
  ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    TensorF64& p = *params[k];
    const TensorF64& g = grads[k];
    if (p.shape() != g.shape() || p.shape() != state.m[k].shape())
      throw ShapeError("adam: shape mismatch for parameter " + std::to_string(k));
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      p[i] -= cfg.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
    }
  }
}

// ---------------------------------------------------------------------------

LoraTrainable::LoraTrainable(const Adapter& init) {
  meta_.rank = init.rank;
  meta_.alpha = init.alpha;
  meta_.dropout = init.dropout;
  meta_.task_name = init.task_name;
  for (const auto& [key, pair] : init.tensors) {
    keys_.push_back(key);
    b_.push_back(pair.B.cast<double>());
    a_.push_back(pair.A.cast<double>());
  }
}

std::vector<TensorF64*> LoraTrainable::parameters() {
  std::vector<TensorF64*> ps;
  for (std::size_t i = 0; i < keys_.size(); ++i) {
    ps.push_back(&b_[i]);
    ps.push_back(&a_[i]);
  }
  return ps;
}

DeltaMap LoraTrainable::deltas() const {
  DeltaMap out;
  const double s = meta_.scale();
  for (std::size_t i = 0; i < keys_.size(); ++i) out.emplace(keys_[i], scale(s, matmul(b_[i], a_[i])));
  return out;
}

std::vector<TensorF64> LoraTrainable::param_grads(const DeltaMap& weight_grads) const {
  std::vector<TensorF64> out;
  const double s = meta_.scale();
  for (std::size_t i = 0; i < keys_.size(); ++i) {
    const TensorF64& g = weight_grads.at(keys_[i]);
    out.push_back(scale(s, matmul(g, transpose(a_[i]))));
    out.push_back(scale(s, matmul(transpose(b_[i]), g)));
  }
  return out;
}

Adapter LoraTrainable::to_adapter() const {
  Adapter a = meta_;
  for (std::size_t i = 0; i < keys_.size(); ++i)
    a.tensors.emplace(keys_[i], LoraPair{b_[i].cast<float>(), a_[i].cast<float>()});
  return a;
}

// ---------------------------------------------------------------------------

CalibrationTrainable::CalibrationTrainable(const MergedAdapter& merged, const CalibrationSet& init) {
  if (!merged.is_factor_form()) throw ValidationError("calibration trains on top of a factor-form linear merge");
  meta_.scope = init.scope;
  meta_.task_label = init.task_label;
  meta_.params = init.params;
  for (const auto& [key, _] : merged.factors().tensors) merged_.emplace(key, merged.delta(key).cast<double>());
  if (init.variant() == CalibVariant::bias) {
    for (const auto& [c, p] : init.bias().p) {
      comps_.push_back(c);
      p_.push_back(p.cast<double>());
    }
  } else {
    for (const auto& [c, f] : init.lora().factors) {
      comps_.push_back(c);
      p2_.push_back(f.P2.cast<double>());
      p1_.push_back(f.P1.cast<double>());
    }
  }
  for (const auto& [key, d] : merged_) {
    const auto idx = std::find(comps_.begin(), comps_.end(), key.comp);
    if (idx == comps_.end()) throw ValidationError("calibration does not cover " + std::string(to_string(key.comp)));
    const std::size_t ci = static_cast<std::size_t>(idx - comps_.begin());
    const bool ok = p_.empty() ? (p2_[ci].rows() == d.rows() && p1_[ci].cols() == d.cols()) : p_[ci].size() == d.rows();
    if (!ok) throw ShapeError("calibration shape mismatch for " + key_str(key));
  }
}

std::vector<TensorF64*> CalibrationTrainable::parameters() {
  std::vector<TensorF64*> ps;
  if (!p_.empty()) {
    for (auto& p : p_) ps.push_back(&p);
  } else {
    for (std::size_t i = 0; i < comps_.size(); ++i) {
      ps.push_back(&p2_[i]);
      ps.push_back(&p1_[i]);
    }
  }
  return ps;
}

DeltaMap CalibrationTrainable::deltas() const {
  DeltaMap out;
  std::vector<TensorF64> products;
  if (p_.empty())
    for (std::size_t i = 0; i < comps_.size(); ++i) products.push_back(matmul(p2_[i], p1_[i]));
  for (const auto& [key, base] : merged_) {
    const std::size_t ci = static_cast<std::size_t>(std::find(comps_.begin(), comps_.end(), key.comp) - comps_.begin());
    TensorF64 d = base;
    if (!p_.empty()) {
      for (std::size_t i = 0; i < d.rows(); ++i)
        for (std::size_t j = 0; j < d.cols(); ++j) d(i, j) += p_[ci][i];
    } else {
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += products[ci][i];
    }
    out.emplace(key, std::move(d));
  }
  return out;
}

std::vector<TensorF64> CalibrationTrainable::param_grads(const DeltaMap& weight_grads) const {
  std::vector<TensorF64> gp, g2, g1;
  for (std::size_t i = 0; i < comps_.size(); ++i) {
    if (!p_.empty()) {
      gp.emplace_back(p_[i].shape());
    } else {
      g2.emplace_back(p2_[i].shape());
      g1.emplace_back(p1_[i].shape());
    }
  }
  for (const auto& [key, g] : weight_grads) {
    if (!merged_.count(key)) continue;
    const std::size_t ci = static_cast<std::size_t>(std::find(comps_.begin(), comps_.end(), key.comp) - comps_.begin());
    if (!p_.empty()) {
      // shared bias: dp_i = Σ_layers Σ_j G_ij
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gp[ci][i] += g(i, j);
    } else {
      axpy_inplace(1.0, matmul(g, transpose(p1_[ci])), g2[ci]);
      axpy_inplace(1.0, matmul(transpose(p2_[ci]), g), g1[ci]);
    }
  }
  if (!p_.empty()) return gp;
  std::vector<TensorF64> out;
  for (std::size_t i = 0; i < comps_.size(); ++i) {
    out.push_back(std::move(g2[i]));
    out.push_back(std::move(g1[i]));
  }
  return out;
}

CalibrationSet CalibrationTrainable::to_calibration() const {
  CalibrationSet c = meta_;
  if (!p_.empty()) {
    CalibBias bias;
    for (std::size_t i = 0; i < comps_.size(); ++i) bias.p.emplace(comps_[i], p_[i].cast<float>());
    c.params = std::move(bias);
  } else {
    CalibLoRA lora;
    lora.rank = meta_.lora().rank;
    for (std::size_t i = 0; i < comps_.size(); ++i)
      lora.factors.emplace(comps_[i], CalibFactors{p2_[i].cast<float>(), p1_[i].cast<float>()});
    c.params = std::move(lora);
  }
  return c;
}

// ---------------------------------------------------------------------------

FullTrainable::FullTrainable(const ModelSpec& spec) {
  for (const auto& key : module_keys(spec)) {
    const Dims d = spec.at(key.comp);
    keys_.push_back(key);
    w_.emplace_back(Shape{d.d_out, d.d_in});
  }
}

std::vector<TensorF64*> FullTrainable::parameters() {
  std::vector<TensorF64*> out;
  for (auto& w : w_) out.push_back(&w);
  return out;
}

DeltaMap FullTrainable::deltas() const {
  DeltaMap out;
  for (std::size_t i = 0; i < keys_.size(); ++i) out.emplace(keys_[i], w_[i]);
  return out;
}

std::vector<TensorF64> FullTrainable::param_grads(const DeltaMap& weight_grads) const {
  std::vector<TensorF64> out;
  for (const auto& key : keys_) out.push_back(weight_grads.at(key));
  return out;
}

DamTrainable::DamTrainable(const std::vector<Adapter>& adapters) : n_adapters_(adapters.size()) {
  if (adapters.empty()) throw ValidationError("dam: no adapters given");
  for (const auto& [key, _] : adapters.front().tensors) keys_.push_back(key);
  const double init = 1.0 / static_cast<double>(n_adapters_);
  for (const auto& a : adapters) {
    for (const auto& key : keys_) {
      TensorF64 d = delta_weight(a, key.layer, key.comp).cast<double>();
      TensorF64 c({d.cols()});
      c.fill(init);
      deltas_.push_back(std::move(d));
      c_.push_back(std::move(c));
    }
  }
}

std::vector<TensorF64*> DamTrainable::parameters() {
  std::vector<TensorF64*> ps;
  for (auto& c : c_) ps.push_back(&c);
  return ps;
}

DeltaMap DamTrainable::deltas() const {
  DeltaMap out;
  for (std::size_t k = 0; k < keys_.size(); ++k) {
    TensorF64 sum(deltas_[k].shape());
    for (std::size_t a = 0; a < n_adapters_; ++a) {
      const TensorF64& d = deltas_[a * keys_.size() + k];
      const TensorF64& c = c_[a * keys_.size() + k];
      for (std::size_t i = 0; i < d.rows(); ++i)
        for (std::size_t j = 0; j < d.cols(); ++j) sum(i, j) += d(i, j) * c[j];
    }
    out.emplace(keys_[k], std::move(sum));
  }
  return out;
}

std::vector<TensorF64> DamTrainable::param_grads(const DeltaMap& weight_grads) const {
  std::vector<TensorF64> out;
  for (std::size_t a = 0; a < n_adapters_; ++a) {
    for (std::size_t k = 0; k < keys_.size(); ++k) {
      const TensorF64& g = weight_grads.at(keys_[k]);
      const TensorF64& d = deltas_[a * keys_.size() + k];
      TensorF64 gc({d.cols()});
      for (std::size_t i = 0; i < d.rows(); ++i)
        for (std::size_t j = 0; j < d.cols(); ++j) gc[j] += g(i, j) * d(i, j);
      out.push_back(std::move(gc));
    }
  }
  return out;
}

DeltaSet DamTrainable::to_delta_set() const {
  DeltaSet set;
  set.strategy = "dam";
  for (auto& [key, d] : deltas()) set.deltas.emplace(key, d.cast<float>());
  return set;
}

// ---------------------------------------------------------------------------

LossAndGrads loss_and_grads(const ToyModel& m, std::span<const Sequence> batch, const Trainable& trainable) {
  const DeltaMap extra = trainable.deltas();
  const auto w = effective_weights(m, &extra);
  auto lw = loss_and_weight_grads(m, w, batch, true);
  return {lw.loss, trainable.param_grads(lw.weight_grads)};
}

namespace {

std::vector<Sequence> to_sequences(const ToyModel& m, const std::vector<Example>& examples) {
  std::vector<Sequence> seqs;
  seqs.reserve(examples.size());
  for (const auto& e : examples) seqs.push_back(make_sequence(e, m.spec().context));
  return seqs;
}

void shuffle(std::vector<std::size_t>& idx, SeededRng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
}

}  // namespace

double dataset_loss(const ToyModel& m, const std::vector<Example>& examples, const DeltaMap* extra) {
  const auto seqs = to_sequences(m, examples);
  return loss_and_weight_grads(m, effective_weights(m, extra), seqs, false).loss;
}

void train(const ToyModel& m, const std::vector<Example>& examples, Trainable& trainable, const TrainConfig& cfg,
           TrainLog* log) {
  cfg.validate();
  if (examples.empty()) throw ValidationError("train: empty dataset");
  SeededRng rng(cfg.seed);

  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (cfg.subset > 0 && cfg.subset < examples.size()) {
    shuffle(order, rng);
    order.resize(cfg.subset);
  }
  std::vector<Example> pool;
  pool.reserve(order.size());
  for (auto i : order) pool.push_back(examples[i]);
  const auto seqs = to_sequences(m, pool);

  const auto params = trainable.parameters();
  AdamState state = AdamState::like(params);
  const auto full_loss = [&] {
    const DeltaMap extra = trainable.deltas();
    return loss_and_weight_grads(m, effective_weights(m, &extra), seqs, false).loss;
  };

  std::vector<std::size_t> perm(seqs.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::size_t cursor = perm.size();
  std::vector<Sequence> batch;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (log && cfg.log_every && step % cfg.log_every == 0) log->checkpoints.emplace_back(step, full_loss());
    batch.clear();
    while (batch.size() < std::min(cfg.batch_size, seqs.size())) {
      if (cursor == perm.size()) {
        shuffle(perm, rng);
        cursor = 0;
      }
      batch.push_back(seqs[perm[cursor++]]);
    }
    const auto lg = loss_and_grads(m, batch, trainable);
    if (!std::isfinite(lg.loss)) throw DegenerateInputError("train: loss became non-finite at step " + std::to_string(step));
    adam_step(state, params, lg.grads, cfg);
    if (log) log->step_losses.push_back(lg.loss);
  }
  if (log && cfg.log_every) log->checkpoints.emplace_back(cfg.steps, full_loss());
}

ToyModel pretrain_base(const ModelSpec& spec, std::uint64_t seed, const PretrainConfig& cfg) {
  auto model = ToyModel::random(spec, seed);
  if (cfg.steps == 0) return model;
  const auto data = gen_dataset({task_by_name("copy")}, cfg.n_examples, mix_seed(seed, fnv1a64("pretrain-data")));
  FullTrainable t(spec);
  TrainConfig tc;
  tc.lr = cfg.lr;
  tc.steps = cfg.steps;
  tc.batch_size = cfg.batch_size;
  tc.seed = mix_seed(seed, fnv1a64("pretrain"));
  train(model, data.train.examples, t, tc);
  auto base = model.base();
  const auto d = t.deltas();
  for (auto& [key, w] : base) w = add(w, d.at(key).cast<float>());
  return ToyModel(spec, model.embedding(), model.unembedding(), std::move(base));
}

Adapter train_single_task_lora(const ToyModel& m, const Dataset& data, const LoraShape& shape, const TrainConfig& cfg,
                               const std::string& task_name, TrainLog* log) {
  if (data.examples.empty()) throw ValidationError("train_single_task_lora: empty dataset");
  LoraTrainable t(init_adapter(m.spec(), shape.rank, shape.alpha, shape.dropout, mix_seed(cfg.seed, 1), task_name));
  train(m, data.examples, t, cfg, log);
  return t.to_adapter();
}

CalibrationSet train_calibration(const ToyModel& m, const MergedAdapter& merged, const CalibShape& shape,
                                 const Dataset& data, const TrainConfig& cfg, TrainLog* log) {
  if (data.examples.empty()) throw ValidationError("train_calibration: empty dataset");
  if (!merged.is_factor_form()) throw ValidationError("train_calibration: merged adapter must be in factor form");
  validate_adapter(merged.factors(), m.spec());
  CalibrationTrainable t(merged, init_calibration(m.spec(), shape.variant, shape.rank, mix_seed(cfg.seed, 2),
                                                  shape.scope, shape.task_label));
  train(m, data.examples, t, cfg, log);
  return t.to_calibration();
}

MergedAdapter merge_dam(const ToyModel& m, const std::vector<Adapter>& adapters, const Dataset& data,
                        const TrainConfig& cfg, TrainLog* log) {
  if (data.examples.empty()) throw ValidationError("merge_dam: empty train set");
  validate_compat(adapters, m.spec());
  DamTrainable t(adapters);
  train(m, data.examples, t, cfg, log);
  return t.to_delta_set();
}

}  // namespace compomerge

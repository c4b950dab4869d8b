#include "compomerge/calibration.hpp"

namespace compomerge {

std::string_view to_string(CalibVariant v) { return v == CalibVariant::bias ? "bias" : "lora"; }

std::string_view to_string(SharedScope s) {
  return s == SharedScope::per_compositional_task ? "per_compositional_task" : "shared_across_tasks";
}

CalibVariant parse_calib_variant(std::string_view name) {
  if (name == "bias") return CalibVariant::bias;
  if (name == "lora") return CalibVariant::lora;
  throw ValidationError("unknown calibration variant '" + std::string(name) + "' (expected bias or lora)");
}

SharedScope parse_shared_scope(std::string_view name) {
  if (name == "per_compositional_task") return SharedScope::per_compositional_task;
  if (name == "shared_across_tasks") return SharedScope::shared_across_tasks;
  throw ValidationError("unknown calibration scope '" + std::string(name) + "'");
}

CalibrationSet init_calibration(const ModelSpec& spec, CalibVariant variant, std::size_t s, std::uint64_t seed,
                                SharedScope scope, std::string task_label) {
  spec.validate();
  CalibrationSet set;
  set.scope = scope;
  set.task_label = std::move(task_label);
  if (variant == CalibVariant::bias) {
    CalibBias bias;
    for (auto c : kAllComponents) bias.p.emplace(c, TensorF32({spec.at(c).d_out}));
    set.params = std::move(bias);
    return set;
  }
  if (s == 0) throw ValidationError("calibration rank must be positive");
  CalibLoRA lora;
  lora.rank = s;
  for (auto c : kAllComponents) {
    const Dims d = spec.at(c);
    SeededRng rng(mix_seed(seed, fnv1a64(std::string("calib.") + std::string(to_string(c)))));
    lora.factors.emplace(c, CalibFactors{TensorF32({d.d_out, s}),
                                         init<float>(InitKind::kaiming_uniform, {s, d.d_in}, rng, d.d_in)});
  }
  set.params = std::move(lora);
  return set;
}

TensorF32 calibrated_delta(const TensorF32& merged_delta, const CalibrationSet& calib, ComponentKind comp) {
  if (calib.variant() == CalibVariant::bias) {
    const auto& ps = calib.bias().p;
    auto it = ps.find(comp);
    if (it == ps.end()) throw ValidationError("calibration has no bias for " + std::string(to_string(comp)));
    const TensorF32& p = it->second;
    if (p.size() != merged_delta.rows()) {
      throw ShapeError("calibration bias for " + std::string(to_string(comp)) + " has length " +
                       std::to_string(p.size()) + ", update has " + std::to_string(merged_delta.rows()) + " rows");
    }
    TensorF32 out = merged_delta;
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += p[i];
    ensure_finite(out, "calibrated_delta");
    return out;
  }
  const auto& fs = calib.lora().factors;
  auto it = fs.find(comp);
  if (it == fs.end()) throw ValidationError("calibration has no factors for " + std::string(to_string(comp)));
  return add(matmul(it->second.P2, it->second.P1), merged_delta);
}

TensorF32 calibrated_delta(const MergedAdapter& merged, const CalibrationSet& calib, std::size_t layer,
                           ComponentKind comp) {
  if (!merged.is_factor_form()) throw ValidationError("calibration applies to a factor-form linear merge");
  return calibrated_delta(merged.delta({layer, comp}), calib, comp);
}

std::map<ModuleKey, TensorF32> calibrated_deltas(const MergedAdapter& merged, const CalibrationSet& calib) {
  std::map<ModuleKey, TensorF32> out;
  for (const auto& [key, _] : merged.factors().tensors) out.emplace(key, calibrated_delta(merged, calib, key.layer, key.comp));
  return out;
}

std::size_t param_count(const ModelSpec& spec, CalibVariant variant, std::size_t s) {
  std::size_t n = 0;
  for (auto c : kAllComponents) {
    const Dims d = spec.at(c);
    n += variant == CalibVariant::bias ? d.d_out : d.d_out * s + s * d.d_in;
  }
  return n;
}

std::size_t stored_scalars(const CalibrationSet& calib) {
  std::size_t n = 0;
  if (calib.variant() == CalibVariant::bias) {
    for (const auto& [_, p] : calib.bias().p) n += p.size();
  } else {
    for (const auto& [_, f] : calib.lora().factors) n += f.P1.size() + f.P2.size();
  }
  return n;
}

void validate_calibration(const CalibrationSet& calib, const ModelSpec& spec) {
  spec.validate();
  for (auto c : kAllComponents) {
    const Dims d = spec.at(c);
    const std::string name(to_string(c));
    if (calib.variant() == CalibVariant::bias) {
      auto it = calib.bias().p.find(c);
      if (it == calib.bias().p.end()) throw ValidationError("calibration is missing bias for " + name);
      if (it->second.shape() != Shape{d.d_out})
        throw ShapeError("calibration bias for " + name + " has shape " + shape_str(it->second.shape()));
    } else {
      const auto& lora = calib.lora();
      auto it = lora.factors.find(c);
      if (it == lora.factors.end()) throw ValidationError("calibration is missing factors for " + name);
      if (it->second.P2.shape() != Shape{d.d_out, lora.rank} || it->second.P1.shape() != Shape{lora.rank, d.d_in})
        throw ShapeError("calibration factors for " + name + " do not match the model spec");
    }
  }
}

std::size_t save_calibration(const CalibrationSet& calib, const std::filesystem::path& path, safetensors::Dtype dtype) {
  safetensors::File file;
  std::string s = "0";
  if (calib.variant() == CalibVariant::bias) {
    for (const auto& [c, p] : calib.bias().p) file.tensors.emplace("calib." + std::string(to_string(c)) + ".p", p);
  } else {
    s = std::to_string(calib.lora().rank);
    for (const auto& [c, f] : calib.lora().factors) {
      file.tensors.emplace("calib." + std::string(to_string(c)) + ".P1", f.P1);
      file.tensors.emplace("calib." + std::string(to_string(c)) + ".P2", f.P2);
    }
  }
  file.metadata = {{"format", "calibration"},
                   {"variant", std::string(to_string(calib.variant()))},
                   {"s", s},
                   {"shared_scope", std::string(to_string(calib.scope))},
                   {"task_label", calib.task_label}};
  return safetensors::write(path, file, dtype);
}

CalibrationSet load_calibration(const std::filesystem::path& path, const ModelSpec& spec) {
  const auto file = safetensors::read(path);
  const auto meta = [&](const std::string& key) {
    auto it = file.metadata.find(key);
    if (it == file.metadata.end()) throw ValidationError("'" + path.string() + "': calibration metadata lacks '" + key + "'");
    return it->second;
  };
  if (meta("format") != "calibration") throw ValidationError("'" + path.string() + "' is not a calibration file");
  CalibrationSet calib;
  calib.scope = parse_shared_scope(meta("shared_scope"));
  calib.task_label = meta("task_label");
  const auto variant = parse_calib_variant(meta("variant"));
  const auto tensor = [&](const std::string& name) {
    auto it = file.tensors.find(name);
    if (it == file.tensors.end()) throw ValidationError("'" + path.string() + "': missing tensor " + name);
    return it->second;
  };
  std::size_t expected = 0;
  if (variant == CalibVariant::bias) {
    CalibBias bias;
    for (auto c : kAllComponents) bias.p.emplace(c, tensor("calib." + std::string(to_string(c)) + ".p"));
    expected = kAllComponents.size();
    calib.params = std::move(bias);
  } else {
    CalibLoRA lora;
    try {
      lora.rank = std::stoul(meta("s"));
    } catch (const std::logic_error&) {
      throw ValidationError("'" + path.string() + "': calibration rank metadata is not an integer");
    }
    for (auto c : kAllComponents) {
      const std::string base = "calib." + std::string(to_string(c));
      lora.factors.emplace(c, CalibFactors{tensor(base + ".P2"), tensor(base + ".P1")});
    }
    expected = 2 * kAllComponents.size();
    calib.params = std::move(lora);
  }
  if (file.tensors.size() != expected)
    throw ValidationError("'" + path.string() + "': unexpected tensors for a " + std::string(to_string(variant)) + " calibration");
  validate_calibration(calib, spec);
  return calib;
}

}  // namespace compomerge

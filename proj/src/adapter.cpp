#include "compomerge/adapter.hpp"

#include <fstream>
#include <sstream>

#include "compomerge/safetensors.hpp"
#include "json.hpp"

namespace compomerge {

using nlohmann::json;

std::string_view to_string(ComponentKind c) {
  switch (c) {
    case ComponentKind::q_proj: return "q_proj";
    case ComponentKind::k_proj: return "k_proj";
    case ComponentKind::v_proj: return "v_proj";
    case ComponentKind::o_proj: return "o_proj";
    case ComponentKind::up_proj: return "up_proj";
    case ComponentKind::down_proj: return "down_proj";
    case ComponentKind::gate_proj: return "gate_proj";
  }
  return "?";
}

std::optional<ComponentKind> parse_component(std::string_view name) {
  for (auto c : kAllComponents)
    if (to_string(c) == name) return c;
  return std::nullopt;
}

ModelSpec ModelSpec::toy() {
  ModelSpec s;
  s.n_layers = 2;
  s.vocab_size = 64;
  s.embed_dim = 32;
  s.context = 64;
  for (auto c : {ComponentKind::q_proj, ComponentKind::k_proj, ComponentKind::v_proj, ComponentKind::o_proj})
    s.dims[c] = {32, 32};
  s.dims[ComponentKind::up_proj] = {64, 32};
  s.dims[ComponentKind::gate_proj] = {64, 32};
  s.dims[ComponentKind::down_proj] = {32, 64};
  return s;
}

ModelSpec ModelSpec::qwen_1_5b() {
  ModelSpec s;
  s.n_layers = 28;
  s.vocab_size = 151936;
  s.embed_dim = 1536;
  s.context = 32768;
  s.dims[ComponentKind::q_proj] = {1536, 1536};
  s.dims[ComponentKind::k_proj] = {256, 1536};  // 2 kv heads of width 128
  s.dims[ComponentKind::v_proj] = {256, 1536};
  s.dims[ComponentKind::o_proj] = {1536, 1536};
  s.dims[ComponentKind::up_proj] = {8960, 1536};
  s.dims[ComponentKind::gate_proj] = {8960, 1536};
  s.dims[ComponentKind::down_proj] = {1536, 8960};
  return s;
}

void ModelSpec::validate() const {
  if (n_layers == 0) throw ValidationError("model spec: n_layers must be positive");
  for (auto c : kAllComponents) {
    auto it = dims.find(c);
    if (it == dims.end()) throw ValidationError("model spec: missing component " + std::string(to_string(c)));
    if (it->second.d_out == 0 || it->second.d_in == 0)
      throw ValidationError("model spec: zero dimension for " + std::string(to_string(c)));
  }
}

const Dims& ModelSpec::at(ComponentKind c) const {
  auto it = dims.find(c);
  if (it == dims.end()) throw ValidationError("model spec: missing component " + std::string(to_string(c)));
  return it->second;
}

std::string key_str(const ModuleKey& key) {
  return "(" + std::to_string(key.layer) + ", " + std::string(to_string(key.comp)) + ")";
}

std::vector<ModuleKey> module_keys(const ModelSpec& spec) {
  std::vector<ModuleKey> keys;
  for (std::size_t l = 0; l < spec.n_layers; ++l)
    for (auto c : kAllComponents) keys.push_back({l, c});
  return keys;
}

const LoraPair& Adapter::at(const ModuleKey& key) const {
  auto it = tensors.find(key);
  if (it == tensors.end()) throw ValidationError("adapter '" + task_name + "' has no module " + key_str(key));
  return it->second;
}

AdapterConfig AdapterConfig::of(const Adapter& a) {
  AdapterConfig cfg;
  cfg.r = a.rank;
  cfg.lora_alpha = a.alpha;
  cfg.lora_dropout = a.dropout;
  cfg.task_name = a.task_name;
  for (auto c : kAllComponents) {
    bool present = false;
    for (const auto& [key, _] : a.tensors) present = present || key.comp == c;
    if (present) cfg.target_modules.emplace_back(to_string(c));
  }
  return cfg;
}

std::string AdapterConfig::to_json() const {
  json j = {{"r", r},
            {"lora_alpha", lora_alpha},
            {"lora_dropout", lora_dropout},
            {"target_modules", target_modules},
            {"task_name", task_name}};
  return j.dump(2) + "\n";
}

AdapterConfig AdapterConfig::from_json(std::string_view text) {
  AdapterConfig cfg;
  try {
    const json j = json::parse(text);
    cfg.r = j.at("r").get<std::size_t>();
    cfg.lora_alpha = j.at("lora_alpha").get<float>();
    cfg.lora_dropout = j.value("lora_dropout", 0.0f);
    cfg.target_modules = j.value("target_modules", std::vector<std::string>{});
    cfg.task_name = j.value("task_name", std::string{});
  } catch (const json::exception& e) {
    throw ParseError(std::string("adapter config: ") + e.what());
  }
  return cfg;
}

namespace {

void check_shape(const TensorF32& t, const Shape& want, const std::string& name) {
  if (t.shape() != want) {
    throw ShapeError("tensor '" + name + "' has shape " + shape_str(t.shape()) + ", expected " + shape_str(want));
  }
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Adapter make_adapter(const ModelSpec& spec, std::size_t rank, float alpha, float dropout, std::uint64_t seed,
                     std::string task_name, bool random_b) {
  spec.validate();
  if (rank == 0) throw ValidationError("adapter rank must be positive");
  Adapter a;
  a.rank = rank;
  a.alpha = alpha;
  a.dropout = dropout;
  a.task_name = std::move(task_name);
  for (const auto& key : module_keys(spec)) {
    const Dims d = spec.at(key.comp);
    SeededRng rng(mix_seed(seed, fnv1a64(factor_name(key, 'A'))));
    LoraPair pair;
    pair.A = init<float>(InitKind::kaiming_uniform, {rank, d.d_in}, rng, d.d_in);
    pair.B = random_b ? init<float>(InitKind::kaiming_uniform, {d.d_out, rank}, rng, rank)
                      : init<float>(InitKind::zeros, {d.d_out, rank}, rng);
    a.tensors.emplace(key, std::move(pair));
  }
  return a;
}

}  // namespace

Adapter random_adapter(const ModelSpec& spec, std::size_t rank, float alpha, std::uint64_t seed,
                       std::string task_name) {
  return make_adapter(spec, rank, alpha, 0.0f, seed, std::move(task_name), true);
}

Adapter init_adapter(const ModelSpec& spec, std::size_t rank, float alpha, float dropout, std::uint64_t seed,
                     std::string task_name) {
  return make_adapter(spec, rank, alpha, dropout, seed, std::move(task_name), false);
}

std::string factor_name(const ModuleKey& key, char factor) {
  return "layers." + std::to_string(key.layer) + "." + std::string(to_string(key.comp)) + ".lora_" + factor;
}

std::filesystem::path config_path_for(const std::filesystem::path& weights) {
  auto p = weights;
  p.replace_extension(".adapter_config.json");
  return p;
}

void validate_adapter(const Adapter& a, const ModelSpec& spec) {
  spec.validate();
  if (a.rank == 0) throw ValidationError("adapter '" + a.task_name + "': rank must be positive");
  if (!(a.alpha > 0.0f)) throw ValidationError("adapter '" + a.task_name + "': alpha must be positive");
  if (a.dropout < 0.0f || a.dropout >= 1.0f) throw ValidationError("adapter '" + a.task_name + "': dropout not in [0,1)");
  for (const auto& key : module_keys(spec)) {
    auto it = a.tensors.find(key);
    if (it == a.tensors.end()) {
      throw ValidationError("adapter '" + a.task_name + "' is missing module " + key_str(key));
    }
    const Dims d = spec.at(key.comp);
    check_shape(it->second.B, {d.d_out, a.rank}, factor_name(key, 'B'));
    check_shape(it->second.A, {a.rank, d.d_in}, factor_name(key, 'A'));
  }
  for (const auto& [key, _] : a.tensors) {
    if (key.layer >= spec.n_layers) {
      throw ValidationError("adapter '" + a.task_name + "' has module " + key_str(key) + " outside the model");
    }
  }
}

void save_adapter(const Adapter& a, const std::filesystem::path& path) {
  safetensors::File file;
  for (const auto& [key, pair] : a.tensors) {
    file.tensors.emplace(factor_name(key, 'B'), pair.B);
    file.tensors.emplace(factor_name(key, 'A'), pair.A);
  }
  file.metadata = {{"format", "lora"}, {"task_name", a.task_name}};
  safetensors::write(path, file);

  const auto cfg_path = config_path_for(path);
  std::ofstream out(cfg_path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + cfg_path.string() + "' for writing");
  out << AdapterConfig::of(a).to_json();
  if (!out) throw IoError("write failure on '" + cfg_path.string() + "'");
}

Adapter load_adapter(const std::filesystem::path& path, const ModelSpec& spec) {
  const auto file = safetensors::read(path);
  if (auto it = file.metadata.find("format"); it != file.metadata.end() && it->second != "lora") {
    throw ValidationError("'" + path.string() + "' holds a '" + it->second + "' artifact, not a LoRA adapter");
  }
  for (const auto& [name, dt] : file.stored)
    if (dt != safetensors::Dtype::f32) throw ParseError("'" + path.string() + "': tensor " + name + " is not F32");
  const auto cfg = AdapterConfig::from_json(read_text(config_path_for(path)));

  Adapter a;
  a.rank = cfg.r;
  a.alpha = cfg.lora_alpha;
  a.dropout = cfg.lora_dropout;
  a.task_name = cfg.task_name;
  std::size_t consumed = 0;
  for (const auto& key : module_keys(spec)) {
    LoraPair pair;
    for (char f : {'B', 'A'}) {
      const auto name = factor_name(key, f);
      auto it = file.tensors.find(name);
      if (it == file.tensors.end()) throw ValidationError("'" + path.string() + "': missing tensor " + name);
      (f == 'B' ? pair.B : pair.A) = it->second;
      ++consumed;
    }
    a.tensors.emplace(key, std::move(pair));
  }
  if (consumed != file.tensors.size()) {
    throw ValidationError("'" + path.string() + "': " + std::to_string(file.tensors.size() - consumed) +
                          " tensors do not belong to the model spec");
  }
  validate_adapter(a, spec);
  return a;
}

TensorF32 delta_weight(const Adapter& a, std::size_t layer, ComponentKind comp) {
  const auto& pair = a.at({layer, comp});
  return scale(a.scale(), matmul(pair.B, pair.A));
}

CompatReport validate_compat(const std::vector<Adapter>& adapters, const ModelSpec& spec) {
  if (adapters.empty()) throw ValidationError("merge: no adapters given");
  CompatReport report;
  for (const auto& a : adapters) {
    validate_adapter(a, spec);
    if (a.alpha != adapters.front().alpha) {
      throw ValidationError("merge: adapters disagree on alpha (" + std::to_string(adapters.front().alpha) + " vs " +
                            std::to_string(a.alpha) + ")");
    }
    report.rank_heterogeneous = report.rank_heterogeneous || a.rank != adapters.front().rank;
  }
  return report;
}

}  // namespace compomerge

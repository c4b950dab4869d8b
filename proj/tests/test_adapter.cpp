#include <fstream>

#include "compomerge/adapter.hpp"
#include "compomerge/errors.hpp"
#include "compomerge/safetensors.hpp"
#include "doctest.h"
#include "json.hpp"
#include "support.hpp"

using namespace compomerge;

namespace {

ModelSpec tiny_spec() {
  ModelSpec s;
  s.n_layers = 2;
  s.vocab_size = 32;
  s.embed_dim = 4;
  for (auto c : kAllComponents) s.dims[c] = {4, 4};
  s.dims[ComponentKind::up_proj] = s.dims[ComponentKind::gate_proj] = {6, 4};
  s.dims[ComponentKind::down_proj] = {4, 6};
  return s;
}

}  // namespace

TEST_CASE("component names") {
  CHECK(kAllComponents.size() == 7);
  for (auto c : kAllComponents) CHECK(parse_component(to_string(c)) == c);
  CHECK(to_string(ComponentKind::gate_proj) == "gate_proj");
  CHECK_FALSE(parse_component("lm_head").has_value());
}

TEST_CASE("model spec") {
  const auto toy = ModelSpec::toy();
  CHECK(toy.n_layers == 2);
  CHECK(toy.vocab_size == 64);
  CHECK(toy.embed_dim == 32);
  CHECK(toy.at(ComponentKind::up_proj) == Dims{64, 32});
  CHECK(toy.at(ComponentKind::down_proj) == Dims{32, 64});
  CHECK(module_keys(toy).size() == 14);
  auto bad = toy;
  bad.dims.erase(ComponentKind::v_proj);
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = toy;
  bad.dims[ComponentKind::q_proj].d_in = 0;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("save/load round trip is bit exact") {
  testing::TempDir dir;
  const auto spec = tiny_spec();
  const auto a = random_adapter(spec, 3, 16.0f, 42, "first_half");
  save_adapter(a, dir / "a.safetensors");
  CHECK(std::filesystem::exists(dir / "a.adapter_config.json"));
  CHECK(load_adapter(dir / "a.safetensors", spec) == a);
}

TEST_CASE("two saves are byte identical") {
  testing::TempDir dir;
  const auto a = random_adapter(tiny_spec(), 2, 8.0f, 1);
  save_adapter(a, dir / "x.safetensors");
  save_adapter(a, dir / "y.safetensors");
  CHECK(safetensors::read_bytes(dir / "x.safetensors") == safetensors::read_bytes(dir / "y.safetensors"));
}

TEST_CASE("published rank and alpha surface in the config") {
  testing::TempDir dir;
  auto a = init_adapter(ModelSpec::toy(), 32, 16.0f, 0.05f, 0, "t");
  save_adapter(a, dir / "p.safetensors");
  std::ifstream in(dir / "p.adapter_config.json");
  const auto j = nlohmann::json::parse(in);
  CHECK(j["r"] == 32);
  CHECK(j["lora_alpha"].get<double>() == 16.0);
  CHECK(j["lora_dropout"].get<float>() == 0.05f);
  CHECK(j["target_modules"].size() == 7);
  const auto b = load_adapter(dir / "p.safetensors", ModelSpec::toy());
  CHECK(b.rank == 32);
  CHECK(b.alpha == 16.0f);
}

TEST_CASE("empty task name stays loadable") {
  testing::TempDir dir;
  const auto a = random_adapter(tiny_spec(), 1, 1.0f, 5, "");
  save_adapter(a, dir / "e.safetensors");
  std::ifstream in(dir / "e.adapter_config.json");
  CHECK(nlohmann::json::parse(in)["task_name"] == "");
  CHECK(load_adapter(dir / "e.safetensors", tiny_spec()).task_name.empty());
}

TEST_CASE("toy adapter file lists 2 x 7 x 2 tensors") {
  testing::TempDir dir;
  save_adapter(random_adapter(ModelSpec::toy(), 2, 16.0f, 3), dir / "t.safetensors");
  const auto f = safetensors::read(dir / "t.safetensors");
  CHECK(f.tensors.size() == 2 * 7 * 2);
  CHECK(f.tensors.count("layers.1.gate_proj.lora_B") == 1);
  CHECK(f.metadata.at("format") == "lora");
}

TEST_CASE("load errors") {
  testing::TempDir dir;
  const auto spec = tiny_spec();
  const auto a = random_adapter(spec, 2, 4.0f, 9);
  save_adapter(a, dir / "a.safetensors");

  SUBCASE("truncated data names a tensor") {
    auto bytes = safetensors::read_bytes(dir / "a.safetensors");
    bytes.resize(bytes.size() - 5);
    safetensors::write_bytes(dir / "a.safetensors", bytes);
    try {
      (void)load_adapter(dir / "a.safetensors", spec);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("tensor 'layers.") != std::string::npos);
    }
  }
  SUBCASE("missing tensor") {
    auto f = safetensors::read(dir / "a.safetensors");
    f.tensors.erase("layers.1.v_proj.lora_A");
    safetensors::write(dir / "a.safetensors", f);
    try {
      (void)load_adapter(dir / "a.safetensors", spec);
      FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("layers.1.v_proj.lora_A") != std::string::npos);
    }
  }
  SUBCASE("shape mismatch against the spec") {
    auto other = spec;
    other.dims[ComponentKind::q_proj] = {5, 4};
    CHECK_THROWS_AS(load_adapter(dir / "a.safetensors", other), ShapeError);
  }
  SUBCASE("non-F32 dtype") {
    auto f = safetensors::read(dir / "a.safetensors");
    safetensors::write(dir / "a.safetensors", f, safetensors::Dtype::bf16);
    CHECK_THROWS_AS(load_adapter(dir / "a.safetensors", spec), ParseError);
  }
  SUBCASE("missing sidecar") {
    std::filesystem::remove(dir / "a.adapter_config.json");
    CHECK_THROWS_AS(load_adapter(dir / "a.safetensors", spec), IoError);
  }
  SUBCASE("malformed sidecar") {
    std::ofstream(dir / "a.adapter_config.json") << "{\"r\": \"two\"}";
    CHECK_THROWS_AS(load_adapter(dir / "a.safetensors", spec), ParseError);
  }
  SUBCASE("extra tensor") {
    auto f = safetensors::read(dir / "a.safetensors");
    f.tensors.emplace("layers.9.q_proj.lora_A", TensorF32({2, 4}));
    safetensors::write(dir / "a.safetensors", f);
    CHECK_THROWS_AS(load_adapter(dir / "a.safetensors", spec), ValidationError);
  }
}

TEST_CASE("delta weight") {
  const auto spec = tiny_spec();
  auto a = random_adapter(spec, 2, 16.0f, 11);
  const ModuleKey key{1, ComponentKind::down_proj};

  const auto ref = testing::naive_matmul(a.at(key).B, a.at(key).A);
  const auto d = delta_weight(a, 1, ComponentKind::down_proj);
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(d[i] == doctest::Approx(8.0 * ref[i]).epsilon(1e-6));

  auto zero = a;
  for (auto& [k, p] : zero.tensors) p.B.fill(0.0f);
  CHECK(delta_weight(zero, 0, ComponentKind::q_proj) == TensorF32({4, 4}));

  Adapter one;
  one.rank = 1;
  one.alpha = 1.0f;
  one.tensors[{0, ComponentKind::q_proj}] = {TensorF32::matrix({{2}, {0}}), TensorF32::matrix({{1, 3}})};
  CHECK(delta_weight(one, 0, ComponentKind::q_proj) == TensorF32::matrix({{2, 6}, {0, 0}}));
  CHECK_THROWS_AS(delta_weight(one, 1, ComponentKind::q_proj), ValidationError);

  // linear in B
  auto scaled = a;
  for (auto& [k, p] : scaled.tensors) p.B = scale(2.5, p.B);
  const auto d2 = delta_weight(scaled, 1, ComponentKind::down_proj);
  CHECK(testing::max_rel_diff(d2.data(), scale(2.5, d).data(), 1e-6) <= 1e-5);
}

TEST_CASE("compatibility checks") {
  const auto spec = tiny_spec();
  const auto a = random_adapter(spec, 4, 16.0f, 1);
  const auto b = random_adapter(spec, 4, 16.0f, 2);
  CHECK_FALSE(validate_compat({a, b}, spec).rank_heterogeneous);
  CHECK(validate_compat({a, random_adapter(spec, 8, 16.0f, 3)}, spec).rank_heterogeneous);
  CHECK_THROWS_AS(validate_compat({}, spec), ValidationError);
  CHECK_THROWS_AS(validate_compat({a, random_adapter(spec, 4, 8.0f, 3)}, spec), ValidationError);

  auto missing = b;
  missing.tensors.erase({1, ComponentKind::v_proj});
  try {
    validate_compat({a, missing}, spec);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("(1, v_proj)") != std::string::npos);
  }
}

TEST_CASE("adapter config json") {
  AdapterConfig c;
  c.r = 8;
  c.lora_alpha = 16.0f;
  c.lora_dropout = 0.05f;
  c.target_modules = {"q_proj", "v_proj"};
  c.task_name = "caesar1";
  const auto back = AdapterConfig::from_json(c.to_json());
  CHECK(back.r == 8);
  CHECK(back.lora_alpha == 16.0f);
  CHECK(back.lora_dropout == 0.05f);
  CHECK(back.target_modules == c.target_modules);
  CHECK(back.task_name == "caesar1");
  CHECK_THROWS_AS(AdapterConfig::from_json("not json"), ParseError);
  CHECK_THROWS_AS(AdapterConfig::from_json("{\"lora_alpha\": 1}"), ParseError);
}

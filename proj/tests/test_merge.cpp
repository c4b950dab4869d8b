#include <algorithm>
#include <cmath>
#include <numeric>

#include "compomerge/errors.hpp"
#include "compomerge/merge.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace compomerge;

namespace {

ModelSpec tiny_spec() {
  ModelSpec s;
  s.n_layers = 2;
  s.vocab_size = 32;
  s.embed_dim = 5;
  for (auto c : kAllComponents) s.dims[c] = {5, 5};
  s.dims[ComponentKind::up_proj] = s.dims[ComponentKind::gate_proj] = {7, 5};
  s.dims[ComponentKind::down_proj] = {5, 7};
  return s;
}

Adapter scalar_adapter(float b, float a) {
  Adapter ad;
  ad.rank = 1;
  ad.alpha = 1.0f;
  ad.tensors[{0, ComponentKind::q_proj}] = {TensorF32::matrix({{b}}), TensorF32::matrix({{a}})};
  return ad;
}

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
  const auto t = testing::random_tensor({n}, seed);
  return {t.data().begin(), t.data().end()};
}

double l2(const std::vector<float>& v) {
  double s = 0.0;
  for (float x : v) s += double(x) * x;
  return std::sqrt(s);
}

// Independent TIES: trim each vector, elect sign by total, average agreeing entries.
std::vector<double> ties_oracle(const std::vector<std::vector<float>>& vs, const std::vector<double>& w, double density) {
  const std::size_t n = vs[0].size();
  const auto keep = static_cast<std::size_t>(std::ceil(density * n - 1e-12));
  std::vector<std::vector<double>> tr;
  for (const auto& v : vs) {
    std::vector<double> t(n, 0.0);
    std::vector<bool> used(n, false);
    for (std::size_t k = 0; k < keep; ++k) {
      std::size_t best = n;
      for (std::size_t i = 0; i < n; ++i)
        if (!used[i] && (best == n || std::fabs(v[i]) > std::fabs(v[best]))) best = i;
      used[best] = true;
      t[best] = v[best];
    }
    tr.push_back(t);
  }
  std::vector<double> out(n, 0.0);
  for (std::size_t e = 0; e < n; ++e) {
    double total = 0.0;
    for (const auto& t : tr) total += t[e];
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < tr.size(); ++i) {
      if (tr[i][e] == 0.0 || (tr[i][e] > 0) != (total >= 0)) continue;
      num += w[i] * tr[i][e];
      den += w[i];
    }
    if (den != 0.0) out[e] = num / den;
  }
  return out;
}

}  // namespace

TEST_CASE("strategy names") {
  for (auto s : {MergeStrategy::linear, MergeStrategy::concat, MergeStrategy::ties, MergeStrategy::dare,
                 MergeStrategy::slerp, MergeStrategy::lorahub, MergeStrategy::lm_cocktail, MergeStrategy::dam})
    CHECK(parse_strategy(to_string(s)) == s);
  CHECK_THROWS_AS(parse_strategy("average"), ValidationError);
}

TEST_CASE("merge spec json") {
  const auto s = MergeSpec::from_json(R"({"strategy":"ties","weights":[0.5,0.5],"density":0.5,"seed":0})");
  CHECK(s.strategy == MergeStrategy::ties);
  CHECK(s.weights == std::vector<double>{0.5, 0.5});
  CHECK(s.density == 0.5);
  const auto back = MergeSpec::from_json(s.to_json());
  CHECK(back.strategy == s.strategy);
  CHECK(back.weights == s.weights);
  CHECK(back.budget == s.budget);
  CHECK_THROWS_AS(MergeSpec::from_json(R"({"strategy":"ties","bogus":1})"), ParseError);
  CHECK_THROWS_AS(MergeSpec::from_json("[1]"), ParseError);
  CHECK_THROWS_AS(MergeSpec::from_json(R"({"strategy":"nope"})"), ValidationError);

  MergeSpec d;
  CHECK(d.weights_for(2) == std::vector<double>{0.5, 0.5});
  CHECK(d.density == 0.5);
  d.weights = {1.0};
  CHECK_THROWS_AS(d.weights_for(2), ValidationError);
  MergeSpec bad;
  bad.density = 0.0;
  CHECK_THROWS_AS(bad.validate(2), ValidationError);
  bad = {};
  bad.strategy = MergeStrategy::slerp;
  CHECK_THROWS_AS(bad.validate(3), ValidationError);
}

TEST_CASE("linear merge") {
  SUBCASE("factor average") {
    const auto m = merge_linear({scalar_adapter(2, 4), scalar_adapter(0, 2)}, {0.5, 0.5});
    REQUIRE(m.is_factor_form());
    const auto& p = m.factors().at({0, ComponentKind::q_proj});
    CHECK(p.B == TensorF32::matrix({{1}}));
    CHECK(p.A == TensorF32::matrix({{3}}));
    // the product of averages is not the average of products
    CHECK(m.delta({0, ComponentKind::q_proj})[0] == 3.0f);
  }
  SUBCASE("single adapter with weight 1 is the identity") {
    const auto a = random_adapter(tiny_spec(), 3, 16.0f, 1);
    const auto m = merge_linear({a}, {1.0});
    CHECK(m.factors().tensors == a.tensors);
  }
  SUBCASE("permutation invariance is bit exact") {
    const auto spec = tiny_spec();
    const auto a = random_adapter(spec, 2, 16.0f, 1), b = random_adapter(spec, 2, 16.0f, 2),
               c = random_adapter(spec, 2, 16.0f, 3);
    const std::vector<double> w(3, 1.0 / 3.0);
    CHECK(merge_linear({a, b, c}, w).materialize() == merge_linear({c, a, b}, w).materialize());
    CHECK(merge_linear({a, b, c}, w).materialize() == merge_linear({b, c, a}, w).materialize());
  }
  SUBCASE("errors") {
    const auto spec = tiny_spec();
    CHECK_THROWS_AS(merge_linear({random_adapter(spec, 2, 16.0f, 1), random_adapter(spec, 4, 16.0f, 2)}, {0.5, 0.5}),
                    ValidationError);
    CHECK_THROWS_AS(merge_linear({random_adapter(spec, 2, 16.0f, 1)}, {0.5, 0.5}), ValidationError);
    CHECK_THROWS_AS(merge_linear({}, {}), ValidationError);
  }
}

TEST_CASE("concat merge") {
  const auto spec = tiny_spec();
  const auto a = random_adapter(spec, 2, 16.0f, 4), b = random_adapter(spec, 2, 16.0f, 5);
  const std::vector<double> w{0.3, 0.7};
  const auto m = merge_concat({a, b}, w);
  CHECK(m.factors().rank == 4);
  for (const auto& key : module_keys(spec)) {
    const auto got = m.delta(key);
    const auto da = testing::naive_matmul(a.at(key).B, a.at(key).A);
    const auto db = testing::naive_matmul(b.at(key).B, b.at(key).A);
    std::vector<double> ref(da.size());
    for (std::size_t i = 0; i < ref.size(); ++i) ref[i] = 8.0 * (0.3 * da[i] + 0.7 * db[i]);
    CHECK(testing::max_rel_diff(got.data(), ref, 1e-3) <= 1e-5);
  }

  // differing ranks are fine
  const auto c = random_adapter(spec, 4, 16.0f, 6);
  const auto mixed = merge_concat({a, c}, {1.0, 1.0});
  CHECK(mixed.factors().rank == 6);
  const ModuleKey key{1, ComponentKind::up_proj};
  const auto ref_a = testing::naive_matmul(a.at(key).B, a.at(key).A);
  const auto ref_c = testing::naive_matmul(c.at(key).B, c.at(key).A);
  std::vector<double> ref(ref_a.size());
  for (std::size_t i = 0; i < ref.size(); ++i) ref[i] = 8.0 * ref_a[i] + 4.0 * ref_c[i];
  CHECK(testing::max_rel_diff(mixed.delta(key).data(), ref, 1e-3) <= 1e-5);

  // one adapter keeps its delta
  const auto one = merge_concat({a}, {1.0});
  for (const auto& k : module_keys(spec))
    CHECK(testing::max_rel_diff(one.delta(k).data(), delta_weight(a, k.layer, k.comp).data(), 1e-6) <= 1e-6);
}

TEST_CASE("ties kernel") {
  SUBCASE("hand traced example") {
    const auto out = ties_merge_vectors({{0.9f, -0.1f, 0.5f}, {-0.8f, 0.2f, 0.4f}}, {0.5, 0.5}, 0.5);
    CHECK(out == std::vector<float>{0.9f, 0.0f, 0.45f});
  }
  SUBCASE("single vector at density 1 is unchanged") {
    const auto v = random_vec(20, 1);
    CHECK(ties_merge_vectors({v}, {1.0}, 1.0) == v);
  }
  SUBCASE("identical inputs give the shared trimmed vector") {
    const auto v = random_vec(10, 2);
    const auto out = ties_merge_vectors({v, v, v}, {1.0 / 3, 1.0 / 3, 1.0 / 3}, 0.3);
    const auto single = ties_merge_vectors({v}, {1.0}, 0.3);
    CHECK(testing::max_rel_diff(out, single, 1e-12) <= 1e-6);
    CHECK(std::count_if(out.begin(), out.end(), [](float x) { return x != 0.0f; }) == 3);
  }
  SUBCASE("same-sign inputs at density 1 give the weighted mean") {
    const auto v1 = testing::random_tensor({16}, 3, 0.1, 1.0), v2 = testing::random_tensor({16}, 4, 0.1, 1.0);
    const std::vector<float> a(v1.data().begin(), v1.data().end()), b(v2.data().begin(), v2.data().end());
    const auto out = ties_merge_vectors({a, b}, {0.25, 0.75}, 1.0);
    for (std::size_t i = 0; i < 16; ++i) CHECK(out[i] == static_cast<float>(0.25 * a[i] + 0.75 * b[i]));
  }
  SUBCASE("random instances match the oracle and the elected sign") {
    for (std::uint64_t s = 0; s < 20; ++s) {
      std::vector<std::vector<float>> vs{random_vec(31, s * 3), random_vec(31, s * 3 + 1), random_vec(31, s * 3 + 2)};
      const std::vector<double> w{0.2, 0.5, 0.3};
      const double density = 0.1 + 0.045 * s;
      const auto out = ties_merge_vectors(vs, w, density);
      const auto ref = ties_oracle(vs, w, density);
      CHECK(testing::max_abs_diff(out, ref) <= 1e-6);
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(ties_merge_vectors({}, {}, 0.5), ValidationError);
    CHECK_THROWS_AS(ties_merge_vectors({{1.0f}}, {1.0}, 0.0), ValidationError);
    CHECK_THROWS_AS(ties_merge_vectors({{1.0f}, {1.0f, 2.0f}}, {0.5, 0.5}, 0.5), ShapeError);
  }
}

TEST_CASE("ties output sign follows the elected sign") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    std::vector<std::vector<float>> vs{random_vec(40, 100 + s), random_vec(40, 200 + s)};
    const double density = 0.6;
    const auto out = ties_merge_vectors(vs, {0.5, 0.5}, density);
    // trimmed sums recomputed independently
    std::vector<std::vector<double>> tr;
    for (const auto& v : vs) {
      std::vector<std::size_t> idx(v.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return std::fabs(v[a]) > std::fabs(v[b]); });
      std::vector<double> t(v.size(), 0.0);
      for (std::size_t k = 0; k < 24; ++k) t[idx[k]] = v[idx[k]];
      tr.push_back(t);
    }
    for (std::size_t e = 0; e < out.size(); ++e) {
      if (out[e] == 0.0f) continue;
      const double total = tr[0][e] + tr[1][e];
      CHECK((out[e] > 0) == (total >= 0));
    }
  }
}

TEST_CASE("dare kernel") {
  const std::vector<std::vector<float>> vs{random_vec(50, 7), random_vec(50, 8)};
  const std::vector<double> w{0.4, 0.6};

  SUBCASE("density 1 equals the linear combination exactly") {
    const auto out = dare_merge_vectors(vs, w, 1.0, {1, 2});
    for (std::size_t i = 0; i < 50; ++i) {
      double t[2] = {0.4 * vs[0][i], 0.6 * vs[1][i]};
      if (t[1] < t[0]) std::swap(t[0], t[1]);
      CHECK(out[i] == static_cast<float>(t[0] + t[1]));
    }
  }
  SUBCASE("reproducible per seed, varies across seeds") {
    CHECK(dare_merge_vectors(vs, w, 0.5, {3, 4}) == dare_merge_vectors(vs, w, 0.5, {3, 4}));
    CHECK(dare_merge_vectors(vs, w, 0.5, {3, 4}) != dare_merge_vectors(vs, w, 0.5, {5, 6}));
  }
  SUBCASE("Monte-Carlo mean matches the linear combination") {
    constexpr int kSeeds = 400;
    std::vector<double> sum(50, 0.0), sq(50, 0.0);
    for (int s = 0; s < kSeeds; ++s) {
      const auto out = dare_merge_vectors(vs, w, 0.5, {dare_mask_seed(s, 0, "t"), dare_mask_seed(s, 1, "t")});
      for (std::size_t i = 0; i < 50; ++i) {
        sum[i] += out[i];
        sq[i] += double(out[i]) * out[i];
      }
    }
    for (std::size_t i = 0; i < 50; ++i) {
      const double mean = sum[i] / kSeeds;
      const double var = sq[i] / kSeeds - mean * mean;
      const double se = std::sqrt(std::max(var, 0.0) / kSeeds);
      const double target = 0.4 * vs[0][i] + 0.6 * vs[1][i];
      CHECK(std::fabs(mean - target) <= 5.0 * se + 1e-7);
    }
  }
  SUBCASE("support stays within the inputs") {
    std::vector<float> a(30, 0.0f), b(30, 0.0f);
    a[3] = 1.0f;
    b[17] = -2.0f;
    for (std::uint64_t s = 0; s < 20; ++s) {
      const auto out = dare_merge_vectors({a, b}, {0.5, 0.5}, 0.3, {s, s + 1000});
      for (std::size_t i = 0; i < 30; ++i)
        if (i != 3 && i != 17) CHECK(out[i] == 0.0f);
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(dare_merge_vectors(vs, w, 0.0, {1, 2}), ValidationError);
    CHECK_THROWS_AS(dare_merge_vectors(vs, w, 0.5, {1}), ValidationError);
  }
}

TEST_CASE("slerp kernel") {
  const auto v1 = random_vec(64, 11), v2 = random_vec(64, 12);
  CHECK(slerp_vectors(v1, v2, 0.0) == v1);
  CHECK(slerp_vectors(v1, v2, 1.0) == v2);

  const auto half = slerp_vectors({1.0f, 0.0f}, {0.0f, 1.0f}, 0.5);
  CHECK(half[0] == doctest::Approx(std::sqrt(0.5)).epsilon(1e-7));
  CHECK(half[1] == doctest::Approx(std::sqrt(0.5)).epsilon(1e-7));
  CHECK(l2(half) == doctest::Approx(1.0).epsilon(1e-7));

  // rescale v2 to the norm of v1
  std::vector<float> u2 = v2;
  const double k = l2(v1) / l2(v2);
  for (auto& x : u2) x = static_cast<float>(x * k);
  for (double t : {0.25, 0.5, 0.75}) CHECK(testing::rel_diff(l2(slerp_vectors(v1, u2, t)), l2(v1)) <= 1e-5);

  // collinear and zero inputs fall back to linear interpolation
  const auto col = slerp_vectors({1.0f, 2.0f}, {2.0f, 4.0f}, 0.5);
  CHECK(col == std::vector<float>{1.5f, 3.0f});
  const auto zero = slerp_vectors({0.0f, 0.0f}, {2.0f, 4.0f}, 0.25);
  CHECK(zero == std::vector<float>{0.5f, 1.0f});
  CHECK_THROWS_AS(slerp_vectors({1.0f}, {1.0f, 2.0f}, 0.5), ShapeError);
}

TEST_CASE("factor-wise merges produce delta form") {
  const auto spec = tiny_spec();
  const auto a = random_adapter(spec, 2, 16.0f, 21, "x"), b = random_adapter(spec, 2, 16.0f, 22, "y");

  const auto lin = merge_linear({a, b}, {0.5, 0.5}).materialize();
  const auto dare1 = merge_dare({a, b}, {0.5, 0.5}, 1.0, 9);
  REQUIRE_FALSE(dare1.is_factor_form());
  CHECK(dare1.deltas().strategy == "dare");
  CHECK(dare1.materialize() == lin);

  const auto ties = merge_ties({a, b}, {0.5, 0.5}, 0.5);
  CHECK(ties.deltas().deltas.size() == module_keys(spec).size());
  CHECK(merge_ties({a, b}, {0.5, 0.5}, 0.5).materialize() == merge_ties({b, a}, {0.5, 0.5}, 0.5).materialize());

  // slerp endpoints reproduce the inputs' deltas
  const auto s0 = merge_slerp({a, b}, 0.0), s1 = merge_slerp({a, b}, 1.0);
  for (const auto& key : module_keys(spec)) {
    CHECK(s0.delta(key) == delta_weight(a, key.layer, key.comp));
    CHECK(s1.delta(key) == delta_weight(b, key.layer, key.comp));
  }
  const auto ab = merge_slerp({a, b}, 0.5).materialize(), ba = merge_slerp({b, a}, 0.5).materialize();
  for (const auto& [key, d] : ab) CHECK(testing::max_rel_diff(d.data(), ba.at(key).data(), 1e-6) <= 1e-6);

  CHECK(merge_dare({a, b}, {0.5, 0.5}, 0.5, 3).materialize() == merge_dare({a, b}, {0.5, 0.5}, 0.5, 3).materialize());
  CHECK_THROWS_AS(merge_slerp({a}, 0.5), ValidationError);
  CHECK_THROWS_AS(merge_dare({a, b}, {0.5, 0.5}, 0.0, 1), ValidationError);
}

TEST_CASE("lorahub recovers a planted optimum") {
  // Adapter i has B = e_i so the merged B column is exactly the weight vector.
  const std::size_t n = 3;
  std::vector<Adapter> adapters;
  for (std::size_t i = 0; i < n; ++i) {
    Adapter a;
    a.rank = 1;
    a.alpha = 1.0f;
    TensorF32 b({n, 1});
    b(i, 0) = 1.0f;
    a.tensors[{0, ComponentKind::q_proj}] = {b, TensorF32::matrix({{1}})};
    adapters.push_back(a);
  }
  const std::vector<double> target{0.7, -1.2, 0.3};
  std::size_t calls = 0;
  const WeightLoss loss = [&](const MergedAdapter& m) {
    ++calls;
    const auto& b = m.factors().at({0, ComponentKind::q_proj}).B;
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += (b(i, 0) - target[i]) * (b(i, 0) - target[i]);
    return s;
  };
  const auto res = merge_lorahub(adapters, loss, 500, 1);
  CHECK(res.evaluations == 500);
  CHECK(calls == 500);
  for (std::size_t i = 0; i < n; ++i) CHECK(std::fabs(res.weights[i] - target[i]) <= 0.1);
  for (double w : res.weights) CHECK(std::fabs(w) <= kLoraHubBound);

  // minimal budget still returns an evaluated candidate
  calls = 0;
  const auto tiny = merge_lorahub(adapters, loss, n + 1, 2);
  CHECK(calls == n + 1);
  CHECK(tiny.loss == doctest::Approx(loss(tiny.merged)));
  CHECK_THROWS_AS(merge_lorahub(adapters, loss, n, 2), ValidationError);

  // same seed, same answer
  CHECK(merge_lorahub(adapters, loss, 60, 5).weights == merge_lorahub(adapters, loss, 60, 5).weights);
}

TEST_CASE("lorahub tolerates identical adapters") {
  const auto a = random_adapter(tiny_spec(), 2, 4.0f, 1);
  const WeightLoss loss = [](const MergedAdapter& m) {
    return double(norms(m.delta({0, ComponentKind::q_proj})).frobenius);
  };
  const auto res = merge_lorahub({a, a}, loss, 40, 0);
  CHECK(std::isfinite(res.loss));
}

TEST_CASE("lm-cocktail weights") {
  const auto eq = lm_cocktail_weights({2.0, 2.0, 2.0}, 1.0);
  for (double w : eq) CHECK(w == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  const auto w = lm_cocktail_weights({0.0, 10.0}, 1.0);
  const double e = std::exp(-10.0);
  CHECK(w[0] == doctest::Approx(1.0 / (1.0 + e)).epsilon(1e-12));
  CHECK(w[1] == doctest::Approx(e / (1.0 + e)).epsilon(1e-12));
  CHECK(w[0] == doctest::Approx(0.99995).epsilon(1e-5));
  const auto hot = lm_cocktail_weights({0.0, 10.0, 3.0}, 1e6);
  for (double x : hot) CHECK(std::fabs(x - 1.0 / 3.0) <= 1e-4);
  CHECK_THROWS_AS(lm_cocktail_weights({0.0, NAN}, 1.0), DegenerateInputError);
  CHECK_THROWS_AS(lm_cocktail_weights({0.0}, 0.0), ValidationError);

  const auto spec = tiny_spec();
  const auto a = random_adapter(spec, 2, 16.0f, 1), b = random_adapter(spec, 2, 16.0f, 2);
  CHECK(merge_lmcocktail({a, b}, {1.0, 1.0}, 1.0).materialize() == merge_linear({a, b}, {0.5, 0.5}).materialize());
  CHECK(merge_lmcocktail({a, b}, {1.0, 3.0}, 1.0).materialize() ==
        merge_lmcocktail({b, a}, {3.0, 1.0}, 1.0).materialize());
}

TEST_CASE("merged artifacts round trip") {
  testing::TempDir dir;
  const auto spec = tiny_spec();
  const auto a = random_adapter(spec, 2, 16.0f, 1), b = random_adapter(spec, 2, 16.0f, 2);

  const auto lin = merge_linear({a, b}, {0.5, 0.5});
  save_merged(lin, dir / "lin.safetensors");
  const auto lin2 = load_merged(dir / "lin.safetensors", spec);
  CHECK(lin2.is_factor_form());
  CHECK(lin2.materialize() == lin.materialize());

  const auto ties = merge_ties({a, b}, {0.5, 0.5}, 0.5);
  save_merged(ties, dir / "ties.safetensors");
  const auto ties2 = load_merged(dir / "ties.safetensors", spec);
  CHECK_FALSE(ties2.is_factor_form());
  CHECK(ties2.deltas() == ties.deltas());
  CHECK_THROWS_AS(ties2.factors(), ValidationError);
  CHECK_THROWS_AS(lin2.deltas(), ValidationError);
}

#include "compomerge/merge.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "compomerge/safetensors.hpp"
#include "json.hpp"

namespace compomerge {

using nlohmann::json;

std::string_view to_string(MergeStrategy s) {
  switch (s) {
    case MergeStrategy::linear: return "linear";
    case MergeStrategy::concat: return "concat";
    case MergeStrategy::ties: return "ties";
    case MergeStrategy::dare: return "dare";
    case MergeStrategy::slerp: return "slerp";
    case MergeStrategy::lorahub: return "lorahub";
    case MergeStrategy::lm_cocktail: return "lm_cocktail";
    case MergeStrategy::dam: return "dam";
  }
  return "?";
}

MergeStrategy parse_strategy(std::string_view name) {
  for (auto s : {MergeStrategy::linear, MergeStrategy::concat, MergeStrategy::ties, MergeStrategy::dare,
                 MergeStrategy::slerp, MergeStrategy::lorahub, MergeStrategy::lm_cocktail, MergeStrategy::dam}) {
    if (to_string(s) == name) return s;
  }
  throw ValidationError("unknown merge strategy '" + std::string(name) + "'");
}

MergeSpec MergeSpec::from_json(std::string_view text) {
  MergeSpec spec;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("merge spec: ") + e.what());
  }
  if (!j.is_object()) throw ParseError("merge spec: expected a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "strategy") spec.strategy = parse_strategy(value.get<std::string>());
      else if (key == "weights") spec.weights = value.get<std::vector<double>>();
      else if (key == "density") spec.density = value.get<double>();
      else if (key == "slerp_t" || key == "t") spec.slerp_t = value.get<double>();
      else if (key == "seed") spec.seed = value.get<std::uint64_t>();
      else if (key == "budget") spec.budget = value.get<std::size_t>();
      else if (key == "temperature") spec.temperature = value.get<double>();
      else if (key == "steps") spec.steps = value.get<std::size_t>();
      else if (key == "lr") spec.lr = value.get<double>();
      else throw ParseError("merge spec: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("merge spec: ") + e.what());
  }
  return spec;
}

std::string MergeSpec::to_json() const {
  json j = {{"strategy", std::string(to_string(strategy))},
            {"weights", weights},
            {"density", density},
            {"slerp_t", slerp_t},
            {"seed", seed},
            {"budget", budget},
            {"temperature", temperature},
            {"steps", steps},
            {"lr", lr}};
  return j.dump();
}

std::vector<double> MergeSpec::weights_for(std::size_t n) const {
  if (weights.empty()) return std::vector<double>(n, 1.0 / static_cast<double>(n));
  if (weights.size() != n) {
    throw ValidationError("merge: " + std::to_string(weights.size()) + " weights given for " + std::to_string(n) +
                          " adapters");
  }
  return weights;
}

void MergeSpec::validate(std::size_t n_adapters) const {
  if (n_adapters == 0) throw ValidationError("merge: no adapters given");
  weights_for(n_adapters);
  if (!(density > 0.0 && density <= 1.0)) throw ValidationError("merge: density must be in (0, 1]");
  if (!(slerp_t >= 0.0 && slerp_t <= 1.0)) throw ValidationError("merge: slerp t must be in [0, 1]");
  if (!(temperature > 0.0)) throw ValidationError("merge: temperature must be positive");
  if (strategy == MergeStrategy::slerp && n_adapters != 2) throw ValidationError("merge: slerp needs exactly 2 adapters");
  if (strategy == MergeStrategy::lorahub && budget < n_adapters + 1)
    throw ValidationError("merge: lorahub budget must be at least N+1");
}

const Adapter& MergedAdapter::factors() const {
  if (!is_factor_form()) throw ValidationError("merged adapter is in delta form, factor form required");
  return std::get<Adapter>(form_);
}

const DeltaSet& MergedAdapter::deltas() const {
  if (is_factor_form()) throw ValidationError("merged adapter is in factor form, delta form required");
  return std::get<DeltaSet>(form_);
}

TensorF32 MergedAdapter::delta(const ModuleKey& key) const {
  if (is_factor_form()) return delta_weight(factors(), key.layer, key.comp);
  const auto& d = deltas().deltas;
  auto it = d.find(key);
  if (it == d.end()) throw ValidationError("merged deltas have no module " + key_str(key));
  return it->second;
}

std::map<ModuleKey, TensorF32> MergedAdapter::materialize() const {
  if (!is_factor_form()) return deltas().deltas;
  std::map<ModuleKey, TensorF32> out;
  for (const auto& [key, _] : factors().tensors) out.emplace(key, delta(key));
  return out;
}

namespace {

/// Σ w_i x_i per element. Terms are sorted before summation so the result does
/// not depend on input order whenever the weights are uniform.
TensorF32 combine(const std::vector<const TensorF32*>& tensors, const std::vector<double>& weights) {
  TensorF32 out(tensors.front()->shape());
  std::vector<double> terms(tensors.size());
  for (std::size_t e = 0; e < out.size(); ++e) {
    for (std::size_t i = 0; i < tensors.size(); ++i) terms[i] = weights[i] * static_cast<double>((*tensors[i])[e]);
    std::sort(terms.begin(), terms.end());
    out[e] = static_cast<float>(std::accumulate(terms.begin(), terms.end(), 0.0));
  }
  ensure_finite(out, "merge");
  return out;
}

void require_equal_ranks(const std::vector<Adapter>& adapters, const char* strategy) {
  for (const auto& a : adapters) {
    if (a.rank != adapters.front().rank) {
      throw ValidationError(std::string(strategy) + " merge requires equal ranks, got " +
                            std::to_string(adapters.front().rank) + " and " + std::to_string(a.rank));
    }
    if (a.alpha != adapters.front().alpha) throw ValidationError(std::string(strategy) + " merge: alpha mismatch");
    if (a.tensors.size() != adapters.front().tensors.size())
      throw ValidationError(std::string(strategy) + " merge: module coverage mismatch");
  }
}

void require_weights(const std::vector<Adapter>& adapters, const std::vector<double>& weights) {
  if (adapters.empty()) throw ValidationError("merge: no adapters given");
  if (weights.size() != adapters.size()) {
    throw ValidationError("merge: " + std::to_string(weights.size()) + " weights for " +
                          std::to_string(adapters.size()) + " adapters");
  }
  for (double w : weights)
    if (!std::isfinite(w)) throw ValidationError("merge: non-finite weight");
}

std::string joined_names(const std::vector<Adapter>& adapters, const char* sep) {
  std::string s;
  for (std::size_t i = 0; i < adapters.size(); ++i) s += (i ? sep : "") + adapters[i].task_name;
  return s;
}

std::vector<float> flat(const TensorF32& t) { return {t.data().begin(), t.data().end()}; }

/// Apply a factor-wise kernel to every B and A, then materialize into delta form.
template <typename Kernel>
DeltaSet factorwise(const std::vector<Adapter>& adapters, const std::string& strategy, Kernel kernel) {
  const Adapter& first = adapters.front();
  Adapter merged;
  merged.rank = first.rank;
  merged.alpha = first.alpha;
  merged.task_name = joined_names(adapters, "+");
  for (const auto& [key, pair] : first.tensors) {
    LoraPair out;
    for (char f : {'B', 'A'}) {
      std::vector<std::vector<float>> vs;
      for (const auto& a : adapters) vs.push_back(flat(f == 'B' ? a.at(key).B : a.at(key).A));
      const auto& shape = (f == 'B' ? pair.B : pair.A).shape();
      TensorF32 t(shape, kernel(vs, factor_name(key, f)));
      ensure_finite(t, strategy.c_str());
      (f == 'B' ? out.B : out.A) = std::move(t);
    }
    merged.tensors.emplace(key, std::move(out));
  }
  DeltaSet set;
  set.strategy = strategy;
  for (const auto& [key, _] : merged.tensors) set.deltas.emplace(key, delta_weight(merged, key.layer, key.comp));
  return set;
}

}  // namespace

MergedAdapter merge_linear(const std::vector<Adapter>& adapters, const std::vector<double>& weights) {
  require_weights(adapters, weights);
  require_equal_ranks(adapters, "linear");
  const Adapter& first = adapters.front();
  Adapter out;
  out.rank = first.rank;
  out.alpha = first.alpha;
  out.dropout = first.dropout;
  out.task_name = adapters.size() == 1 ? first.task_name : "linear(" + joined_names(adapters, ",") + ")";
  for (const auto& [key, _] : first.tensors) {
    std::vector<const TensorF32*> bs, as;
    for (const auto& a : adapters) {
      bs.push_back(&a.at(key).B);
      as.push_back(&a.at(key).A);
    }
    out.tensors.emplace(key, LoraPair{combine(bs, weights), combine(as, weights)});
  }
  return out;
}

MergedAdapter merge_concat(const std::vector<Adapter>& adapters, const std::vector<double>& weights) {
  require_weights(adapters, weights);
  const Adapter& first = adapters.front();
  std::size_t total_rank = 0;
  for (const auto& a : adapters) {
    if (a.alpha != first.alpha) throw ValidationError("concat merge: alpha mismatch");
    total_rank += a.rank;
  }
  // Output scale is alpha / R with R = Σ r_i; block i of B is rescaled by
  // w_i * R / r_i so the product reproduces Σ w_i (alpha / r_i) B_i A_i.
  Adapter out;
  out.rank = total_rank;
  out.alpha = first.alpha;
  out.dropout = first.dropout;
  out.task_name = "concat(" + joined_names(adapters, ",") + ")";
  for (const auto& [key, _] : first.tensors) {
    const std::size_t d_out = first.at(key).B.rows();
    const std::size_t d_in = first.at(key).A.cols();
    TensorF32 b({d_out, total_rank});
    TensorF32 a({total_rank, d_in});
    std::size_t offset = 0;
    for (std::size_t i = 0; i < adapters.size(); ++i) {
      const auto& pair = adapters[i].at(key);
      if (pair.B.rows() != d_out || pair.A.cols() != d_in) throw ShapeError("concat merge: shape mismatch at " + key_str(key));
      const std::size_t r = adapters[i].rank;
      const double factor = weights[i] * static_cast<double>(total_rank) / static_cast<double>(r);
      for (std::size_t row = 0; row < d_out; ++row)
        for (std::size_t c = 0; c < r; ++c) b(row, offset + c) = static_cast<float>(factor * pair.B(row, c));
      for (std::size_t c = 0; c < r; ++c)
        for (std::size_t col = 0; col < d_in; ++col) a(offset + c, col) = pair.A(c, col);
      offset += r;
    }
    ensure_finite(b, "concat");
    out.tensors.emplace(key, LoraPair{std::move(b), std::move(a)});
  }
  return out;
}

std::vector<float> ties_merge_vectors(const std::vector<std::vector<float>>& task_vectors,
                                      const std::vector<double>& weights, double density) {
  if (task_vectors.empty()) throw ValidationError("ties: no task vectors");
  if (!(density > 0.0 && density <= 1.0)) throw ValidationError("ties: density must be in (0, 1]");
  if (weights.size() != task_vectors.size()) throw ValidationError("ties: weight count mismatch");
  const std::size_t n = task_vectors.front().size();
  const auto keep = static_cast<std::size_t>(std::ceil(density * static_cast<double>(n) - 1e-12));

  std::vector<std::vector<float>> trimmed;
  std::vector<std::size_t> order(n);
  for (const auto& v : task_vectors) {
    if (v.size() != n) throw ShapeError("ties: task vectors differ in length");
    std::iota(order.begin(), order.end(), std::size_t{0});
    // larger magnitude first; equal magnitudes keep the lower index
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return std::fabs(v[a]) > std::fabs(v[b]); });
    std::vector<float> t(n, 0.0f);
    for (std::size_t k = 0; k < keep && k < n; ++k) t[order[k]] = v[order[k]];
    trimmed.push_back(std::move(t));
  }

  std::vector<float> out(n, 0.0f);
  std::vector<double> terms;
  for (std::size_t e = 0; e < n; ++e) {
    terms.clear();
    for (const auto& t : trimmed) terms.push_back(t[e]);
    std::sort(terms.begin(), terms.end());
    const double total = std::accumulate(terms.begin(), terms.end(), 0.0);
    const bool positive = total >= 0.0;  // exact zero elects +

    std::vector<double> num, den;
    for (std::size_t i = 0; i < trimmed.size(); ++i) {
      const float x = trimmed[i][e];
      if (x == 0.0f || (x > 0.0f) != positive) continue;
      num.push_back(weights[i] * x);
      den.push_back(weights[i]);
    }
    if (num.empty()) continue;
    std::sort(num.begin(), num.end());
    std::sort(den.begin(), den.end());
    const double wsum = std::accumulate(den.begin(), den.end(), 0.0);
    if (wsum == 0.0) continue;
    out[e] = static_cast<float>(std::accumulate(num.begin(), num.end(), 0.0) / wsum);
  }
  return out;
}

std::uint64_t dare_mask_seed(std::uint64_t seed, std::size_t adapter_index, const std::string& tensor_name) {
  return mix_seed(mix_seed(seed, adapter_index + 1), fnv1a64(tensor_name));
}

std::vector<float> dare_merge_vectors(const std::vector<std::vector<float>>& task_vectors,
                                      const std::vector<double>& weights, double density,
                                      const std::vector<std::uint64_t>& mask_seeds) {
  if (task_vectors.empty()) throw ValidationError("dare: no task vectors");
  if (!(density > 0.0 && density <= 1.0)) throw ValidationError("dare: density must be in (0, 1]");
  if (weights.size() != task_vectors.size() || mask_seeds.size() != task_vectors.size())
    throw ValidationError("dare: weight/seed count mismatch");
  const std::size_t n = task_vectors.front().size();
  std::vector<TensorF32> rescaled;
  for (std::size_t i = 0; i < task_vectors.size(); ++i) {
    if (task_vectors[i].size() != n) throw ShapeError("dare: task vectors differ in length");
    SeededRng rng(mask_seeds[i]);
    TensorF32 t({n});
    for (std::size_t e = 0; e < n; ++e)
      t[e] = rng.bernoulli(density) ? static_cast<float>(task_vectors[i][e] / density) : 0.0f;
    rescaled.push_back(std::move(t));
  }
  std::vector<const TensorF32*> ptrs;
  for (const auto& t : rescaled) ptrs.push_back(&t);
  const TensorF32 merged = combine(ptrs, weights);
  return {merged.data().begin(), merged.data().end()};
}

std::vector<float> slerp_vectors(const std::vector<float>& v1, const std::vector<float>& v2, double t) {
  if (v1.size() != v2.size()) throw ShapeError("slerp: vectors differ in length");
  if (t == 0.0) return v1;
  if (t == 1.0) return v2;
  const std::span<const float> a(v1), b(v2);
  const double n1 = std::sqrt(dot(a, a));
  const double n2 = std::sqrt(dot(b, b));
  std::vector<float> out(v1.size());
  double omega = 0.0;
  if (n1 >= kSlerpMinNorm && n2 >= kSlerpMinNorm) omega = std::acos(std::clamp(dot(a, b) / (n1 * n2), -1.0, 1.0));
  if (n1 < kSlerpMinNorm || n2 < kSlerpMinNorm || omega < kSlerpMinAngle) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>((1.0 - t) * v1[i] + t * v2[i]);
    return out;
  }
  const double s = std::sin(omega);
  const double c1 = std::sin((1.0 - t) * omega) / s;
  const double c2 = std::sin(t * omega) / s;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(c1 * v1[i] + c2 * v2[i]);
  return out;
}

MergedAdapter merge_ties(const std::vector<Adapter>& adapters, const std::vector<double>& weights, double density) {
  require_weights(adapters, weights);
  require_equal_ranks(adapters, "ties");
  return factorwise(adapters, "ties", [&](const std::vector<std::vector<float>>& vs, const std::string&) {
    return ties_merge_vectors(vs, weights, density);
  });
}

MergedAdapter merge_dare(const std::vector<Adapter>& adapters, const std::vector<double>& weights, double density,
                         std::uint64_t seed) {
  require_weights(adapters, weights);
  require_equal_ranks(adapters, "dare");
  if (!(density > 0.0 && density <= 1.0)) throw ValidationError("dare: density must be in (0, 1]");
  return factorwise(adapters, "dare", [&](const std::vector<std::vector<float>>& vs, const std::string& name) {
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < vs.size(); ++i) seeds.push_back(dare_mask_seed(seed, i, name));
    return dare_merge_vectors(vs, weights, density, seeds);
  });
}

MergedAdapter merge_slerp(const std::vector<Adapter>& adapters, double t) {
  if (adapters.size() != 2) throw ValidationError("slerp merge needs exactly 2 adapters, got " + std::to_string(adapters.size()));
  if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("slerp: t must be in [0, 1]");
  require_equal_ranks(adapters, "slerp");
  return factorwise(adapters, "slerp", [&](const std::vector<std::vector<float>>& vs, const std::string&) {
    return slerp_vectors(vs[0], vs[1], t);
  });
}

namespace {

struct Search {
  const std::function<double(const std::vector<double>&)>& objective;
  std::size_t budget;
  std::size_t used = 0;
  std::vector<double> best_w;
  double best_loss = std::numeric_limits<double>::infinity();

  bool exhausted() const { return used >= budget; }

  double eval(const std::vector<double>& w) {
    ++used;
    double loss = objective(w);
    if (!std::isfinite(loss)) loss = std::numeric_limits<double>::infinity();
    if (best_w.empty() || loss < best_loss) {
      best_loss = loss;
      best_w = w;
    }
    return loss;
  }
};

}  // namespace

LoraHubResult merge_lorahub(const std::vector<Adapter>& adapters, const WeightLoss& loss, std::size_t budget,
                            std::uint64_t seed) {
  const std::size_t n = adapters.size();
  if (n == 0) throw ValidationError("lorahub: no adapters given");
  if (budget < n + 1) throw ValidationError("lorahub: budget must be at least N+1");
  require_equal_ranks(adapters, "lorahub");

  const std::function<double(const std::vector<double>&)> objective = [&](const std::vector<double>& w) {
    return loss(merge_linear(adapters, w));
  };
  Search search{objective, budget, 0, {}};
  SeededRng rng(seed);

  // uniform start first, so even the smallest budget evaluates the plain average
  search.eval(std::vector<double>(n, 1.0 / static_cast<double>(n)));
  const std::size_t sampling = std::max<std::size_t>(budget / 2, 1);
  while (search.used < sampling) {
    std::vector<double> w(n);
    for (auto& x : w) x = rng.uniform(-kLoraHubBound, kLoraHubBound);
    search.eval(w);
  }

  constexpr double kInvPhi = 0.6180339887498949;
  constexpr std::size_t kEvalsPerCoordinate = 8;
  double radius = 0.5;
  while (!search.exhausted()) {
    for (std::size_t c = 0; c < n && !search.exhausted(); ++c) {
      std::vector<double> w = search.best_w;
      double lo = std::max(-kLoraHubBound, w[c] - radius);
      double hi = std::min(kLoraHubBound, w[c] + radius);
      auto at = [&](double x) {
        w[c] = x;
        return search.eval(w);
      };
      double x1 = hi - kInvPhi * (hi - lo);
      double x2 = lo + kInvPhi * (hi - lo);
      double f1 = at(x1);
      if (search.exhausted()) break;
      double f2 = at(x2);
      for (std::size_t k = 2; k < kEvalsPerCoordinate && !search.exhausted(); ++k) {
        if (f1 < f2) {
          hi = x2;
          x2 = x1;
          f2 = f1;
          x1 = hi - kInvPhi * (hi - lo);
          f1 = at(x1);
        } else {
          lo = x1;
          x1 = x2;
          f1 = f2;
          x2 = lo + kInvPhi * (hi - lo);
          f2 = at(x2);
        }
      }
    }
    radius *= 0.5;
  }
  return {merge_linear(adapters, search.best_w), search.best_w, search.best_loss, search.used};
}

std::vector<double> lm_cocktail_weights(const std::vector<double>& losses, double temperature) {
  if (losses.empty()) throw ValidationError("lm_cocktail: no losses given");
  if (!(temperature > 0.0)) throw ValidationError("lm_cocktail: temperature must be positive");
  for (double l : losses)
    if (!std::isfinite(l)) throw DegenerateInputError("lm_cocktail: non-finite loss");
  std::vector<double> logits(losses.size());
  for (std::size_t i = 0; i < losses.size(); ++i) logits[i] = -losses[i] / temperature;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (auto& l : logits) z += (l = std::exp(l - mx));
  for (auto& l : logits) l /= z;
  return logits;
}

MergedAdapter merge_lmcocktail(const std::vector<Adapter>& adapters, const std::vector<double>& losses,
                               double temperature) {
  if (losses.size() != adapters.size()) throw ValidationError("lm_cocktail: one loss per adapter required");
  return merge_linear(adapters, lm_cocktail_weights(losses, temperature));
}

std::string delta_name(const ModuleKey& key) {
  return "layers." + std::to_string(key.layer) + "." + std::string(to_string(key.comp)) + ".delta";
}

void save_merged(const MergedAdapter& m, const std::filesystem::path& path) {
  if (m.is_factor_form()) {
    save_adapter(m.factors(), path);
    return;
  }
  safetensors::File file;
  for (const auto& [key, d] : m.deltas().deltas) file.tensors.emplace(delta_name(key), d);
  file.metadata = {{"format", "delta"}, {"strategy", m.deltas().strategy}};
  safetensors::write(path, file);
}

MergedAdapter load_merged(const std::filesystem::path& path, const ModelSpec& spec) {
  const auto file = safetensors::read(path);
  auto fmt = file.metadata.find("format");
  if (fmt == file.metadata.end() || fmt->second == "lora") return load_adapter(path, spec);
  if (fmt->second != "delta") {
    throw ValidationError("'" + path.string() + "' holds a '" + fmt->second + "' artifact, not a merged adapter");
  }
  DeltaSet set;
  auto strat = file.metadata.find("strategy");
  set.strategy = strat == file.metadata.end() ? "" : strat->second;
  for (const auto& key : module_keys(spec)) {
    const auto name = delta_name(key);
    auto it = file.tensors.find(name);
    if (it == file.tensors.end()) throw ValidationError("'" + path.string() + "': missing tensor " + name);
    const Dims d = spec.at(key.comp);
    if (it->second.shape() != Shape{d.d_out, d.d_in})
      throw ShapeError("tensor '" + name + "' has shape " + shape_str(it->second.shape()));
    set.deltas.emplace(key, it->second);
  }
  if (set.deltas.size() != file.tensors.size())
    throw ValidationError("'" + path.string() + "': tensors outside the model spec");
  return set;
}

}  // namespace compomerge

#include "compomerge/model.hpp"

#include <algorithm>
#include <cmath>

#include "compomerge/safetensors.hpp"

namespace compomerge {

int char_token(char c) {
  if (c >= 'a' && c <= 'z') return 2 + (c - 'a');
  if (c == ' ') return 28;
  throw ValidationError(std::string("character '") + c + "' is outside the toy alphabet");
}

char token_char(int token) {
  if (token >= 2 && token <= 27) return static_cast<char>('a' + (token - 2));
  if (token == 28) return ' ';
  return '?';
}

std::vector<int> encode_text(std::string_view s) {
  std::vector<int> out;
  out.reserve(s.size());
  for (char c : s) out.push_back(char_token(c));
  return out;
}

std::string decode_tokens(std::span<const int> tokens) {
  std::string s;
  for (int t : tokens) s.push_back(token_char(t));
  return s;
}

DeltaMap to_f64(const DeltaMapF32& deltas) {
  DeltaMap out;
  for (const auto& [k, d] : deltas) out.emplace(k, d.cast<double>());
  return out;
}

namespace {

constexpr double kRmsEps = 1e-5;

void check_model_spec(const ModelSpec& s) {
  s.validate();
  const std::size_t d = s.embed_dim;
  const Dims q = s.at(ComponentKind::q_proj), k = s.at(ComponentKind::k_proj), v = s.at(ComponentKind::v_proj),
             o = s.at(ComponentKind::o_proj), up = s.at(ComponentKind::up_proj), gate = s.at(ComponentKind::gate_proj),
             down = s.at(ComponentKind::down_proj);
  const bool ok = q.d_in == d && k.d_in == d && v.d_in == d && q.d_out == k.d_out && o.d_in == v.d_out && o.d_out == d &&
                  up.d_in == d && gate.d_in == d && up.d_out == gate.d_out && down.d_in == up.d_out && down.d_out == d;
  if (!ok) throw ValidationError("model spec dims do not form a consistent transformer block");
  if (s.vocab_size < 29) throw ValidationError("model spec vocab must cover the toy alphabet (>= 29)");
}

std::string base_name(const ModuleKey& key) {
  return "layers." + std::to_string(key.layer) + "." + std::string(to_string(key.comp)) + ".weight";
}

// Y[T x out] = X[T x in] * W^T, W is [out x in]
void mm_nt(const double* x, std::size_t rows, std::size_t in, const double* w, std::size_t out, double* y) {
  for (std::size_t t = 0; t < rows; ++t) {
    const double* xr = x + t * in;
    for (std::size_t o = 0; o < out; ++o) {
      const double* wr = w + o * in;
      double s = 0.0;
      for (std::size_t i = 0; i < in; ++i) s += xr[i] * wr[i];
      y[t * out + o] = s;
    }
  }
}

// dX[T x in] += dY[T x out] * W
void mm_nn_acc(const double* dy, std::size_t rows, std::size_t out, const double* w, std::size_t in, double* dx) {
  for (std::size_t t = 0; t < rows; ++t) {
    double* dxr = dx + t * in;
    for (std::size_t o = 0; o < out; ++o) {
      const double g = dy[t * out + o];
      if (g == 0.0) continue;
      const double* wr = w + o * in;
      for (std::size_t i = 0; i < in; ++i) dxr[i] += g * wr[i];
    }
  }
}

// G[out x in] += dY^T * X
void acc_tn(const double* dy, std::size_t rows, std::size_t out, const double* x, std::size_t in, double* g) {
  for (std::size_t t = 0; t < rows; ++t) {
    const double* xr = x + t * in;
    for (std::size_t o = 0; o < out; ++o) {
      const double d = dy[t * out + o];
      if (d == 0.0) continue;
      double* gr = g + o * in;
      for (std::size_t i = 0; i < in; ++i) gr[i] += d * xr[i];
    }
  }
}

void rms_forward(const std::vector<double>& x, std::size_t rows, std::size_t d, std::vector<double>& y,
                 std::vector<double>& r) {
  y.resize(rows * d);
  r.resize(rows);
  for (std::size_t t = 0; t < rows; ++t) {
    double ms = 0.0;
    for (std::size_t i = 0; i < d; ++i) ms += x[t * d + i] * x[t * d + i];
    r[t] = 1.0 / std::sqrt(ms / static_cast<double>(d) + kRmsEps);
    for (std::size_t i = 0; i < d; ++i) y[t * d + i] = x[t * d + i] * r[t];
  }
}

// dx += d rms(x) given dy
void rms_backward(const std::vector<double>& x, const std::vector<double>& r, const std::vector<double>& dy,
                  std::size_t rows, std::size_t d, std::vector<double>& dx) {
  for (std::size_t t = 0; t < rows; ++t) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += dy[t * d + i] * x[t * d + i];
    const double rt = r[t];
    const double c = rt * rt * rt * s / static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) dx[t * d + i] += rt * dy[t * d + i] - c * x[t * d + i];
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct LayerCache {
  std::vector<double> x_in, a, r1, q, k, v, p, z, x_mid, b, r2, g, u, m;
};

struct ForwardCache {
  std::size_t rows = 0;
  std::vector<LayerCache> layers;
  std::vector<double> x_out, rf, xf;
  std::vector<double> logits;
};

struct Shapes {
  std::size_t d, h, f, v;
};

Shapes shapes_of(const ModelSpec& s) {
  return {s.embed_dim, s.at(ComponentKind::q_proj).d_out, s.at(ComponentKind::up_proj).d_out, s.vocab_size};
}

void run_forward(const ToyModel& m, const EffectiveWeights& w, std::span<const int> tokens, ForwardCache& c) {
  const auto& spec = m.spec();
  const auto [d, h, f, vocab] = shapes_of(spec);
  const std::size_t rows = tokens.size();
  if (rows == 0) throw ValidationError("forward: empty token sequence");
  if (rows > spec.context) {
    throw ValidationError("forward: sequence of " + std::to_string(rows) + " tokens exceeds context " +
                          std::to_string(spec.context));
  }
  c.rows = rows;
  std::vector<double> x(rows * d);
  const auto& emb = m.embedding();
  for (std::size_t t = 0; t < rows; ++t) {
    const int tok = tokens[t];
    if (tok < 0 || static_cast<std::size_t>(tok) >= vocab) {
      throw ValidationError("forward: token " + std::to_string(tok) + " out of range [0, " + std::to_string(vocab) + ")");
    }
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      const double pe = (i % 2 == 0) ? std::sin(static_cast<double>(t) * freq) : std::cos(static_cast<double>(t) * freq);
      x[t * d + i] = static_cast<double>(emb(static_cast<std::size_t>(tok), i)) + pe;
    }
  }

  const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(h));
  c.layers.resize(spec.n_layers);
  for (std::size_t l = 0; l < spec.n_layers; ++l) {
    auto& L = c.layers[l];
    const auto W = [&](ComponentKind k) { return w.w.at({l, k}).data().data(); };
    L.x_in = x;
    rms_forward(x, rows, d, L.a, L.r1);
    L.q.assign(rows * h, 0.0);
    L.k.assign(rows * h, 0.0);
    L.v.assign(rows * h, 0.0);
    mm_nt(L.a.data(), rows, d, W(ComponentKind::q_proj), h, L.q.data());
    mm_nt(L.a.data(), rows, d, W(ComponentKind::k_proj), h, L.k.data());
    mm_nt(L.a.data(), rows, d, W(ComponentKind::v_proj), h, L.v.data());

    L.p.assign(rows * rows, 0.0);
    L.z.assign(rows * h, 0.0);
    for (std::size_t t = 0; t < rows; ++t) {
      double mx = -1e300;
      for (std::size_t s = 0; s <= t; ++s) {
        double dot = 0.0;
        for (std::size_t i = 0; i < h; ++i) dot += L.q[t * h + i] * L.k[s * h + i];
        L.p[t * rows + s] = dot * inv_sqrt_h;
        mx = std::max(mx, L.p[t * rows + s]);
      }
      double z = 0.0;
      for (std::size_t s = 0; s <= t; ++s) z += (L.p[t * rows + s] = std::exp(L.p[t * rows + s] - mx));
      for (std::size_t s = 0; s <= t; ++s) {
        const double p = (L.p[t * rows + s] /= z);
        for (std::size_t i = 0; i < h; ++i) L.z[t * h + i] += p * L.v[s * h + i];
      }
    }
    std::vector<double> o(rows * d);
    mm_nt(L.z.data(), rows, h, W(ComponentKind::o_proj), d, o.data());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += o[i];
    L.x_mid = x;

    rms_forward(x, rows, d, L.b, L.r2);
    L.g.assign(rows * f, 0.0);
    L.u.assign(rows * f, 0.0);
    mm_nt(L.b.data(), rows, d, W(ComponentKind::gate_proj), f, L.g.data());
    mm_nt(L.b.data(), rows, d, W(ComponentKind::up_proj), f, L.u.data());
    L.m.resize(rows * f);
    for (std::size_t i = 0; i < L.m.size(); ++i) L.m[i] = L.g[i] * sigmoid(L.g[i]) * L.u[i];
    std::vector<double> y(rows * d);
    mm_nt(L.m.data(), rows, f, W(ComponentKind::down_proj), d, y.data());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[i];
  }
  c.x_out = x;
  rms_forward(x, rows, d, c.xf, c.rf);
  const auto unemb = m.unembedding().cast<double>();
  c.logits.assign(rows * vocab, 0.0);
  mm_nt(c.xf.data(), rows, d, unemb.data().data(), vocab, c.logits.data());
}

/// Backpropagate dlogits through the cached pass, accumulating into grads.
void run_backward(const ToyModel& m, const EffectiveWeights& w, const ForwardCache& c,
                  const std::vector<double>& dlogits, DeltaMap& grads) {
  const auto& spec = m.spec();
  const auto [d, h, f, vocab] = shapes_of(spec);
  const std::size_t rows = c.rows;
  const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(h));

  const auto unemb = m.unembedding().cast<double>();
  std::vector<double> dxf(rows * d, 0.0);
  mm_nn_acc(dlogits.data(), rows, vocab, unemb.data().data(), d, dxf.data());
  std::vector<double> dx(rows * d, 0.0);
  rms_backward(c.x_out, c.rf, dxf, rows, d, dx);

  for (std::size_t l = spec.n_layers; l-- > 0;) {
    const auto& L = c.layers[l];
    const auto W = [&](ComponentKind k) { return w.w.at({l, k}).data().data(); };
    const auto G = [&](ComponentKind k) { return grads.at({l, k}).data().data(); };

    // MLP
    acc_tn(dx.data(), rows, d, L.m.data(), f, G(ComponentKind::down_proj));
    std::vector<double> dm(rows * f, 0.0);
    mm_nn_acc(dx.data(), rows, d, W(ComponentKind::down_proj), f, dm.data());
    std::vector<double> dg(rows * f), du(rows * f);
    for (std::size_t i = 0; i < dm.size(); ++i) {
      const double sg = sigmoid(L.g[i]);
      const double silu = L.g[i] * sg;
      du[i] = dm[i] * silu;
      dg[i] = dm[i] * L.u[i] * sg * (1.0 + L.g[i] * (1.0 - sg));
    }
    acc_tn(du.data(), rows, f, L.b.data(), d, G(ComponentKind::up_proj));
    acc_tn(dg.data(), rows, f, L.b.data(), d, G(ComponentKind::gate_proj));
    std::vector<double> db(rows * d, 0.0);
    mm_nn_acc(du.data(), rows, f, W(ComponentKind::up_proj), d, db.data());
    mm_nn_acc(dg.data(), rows, f, W(ComponentKind::gate_proj), d, db.data());
    rms_backward(L.x_mid, L.r2, db, rows, d, dx);

    // attention
    acc_tn(dx.data(), rows, d, L.z.data(), h, G(ComponentKind::o_proj));
    std::vector<double> dz(rows * h, 0.0);
    mm_nn_acc(dx.data(), rows, d, W(ComponentKind::o_proj), h, dz.data());
    std::vector<double> dq(rows * h, 0.0), dk(rows * h, 0.0), dv(rows * h, 0.0), dp(rows);
    for (std::size_t t = 0; t < rows; ++t) {
      double sum = 0.0;
      for (std::size_t s = 0; s <= t; ++s) {
        double acc = 0.0;
        for (std::size_t i = 0; i < h; ++i) acc += dz[t * h + i] * L.v[s * h + i];
        dp[s] = acc;
        sum += acc * L.p[t * rows + s];
      }
      for (std::size_t s = 0; s <= t; ++s) {
        const double p = L.p[t * rows + s];
        for (std::size_t i = 0; i < h; ++i) dv[s * h + i] += p * dz[t * h + i];
        const double ds = p * (dp[s] - sum) * inv_sqrt_h;
        if (ds == 0.0) continue;
        for (std::size_t i = 0; i < h; ++i) {
          dq[t * h + i] += ds * L.k[s * h + i];
          dk[s * h + i] += ds * L.q[t * h + i];
        }
      }
    }
    acc_tn(dq.data(), rows, h, L.a.data(), d, G(ComponentKind::q_proj));
    acc_tn(dk.data(), rows, h, L.a.data(), d, G(ComponentKind::k_proj));
    acc_tn(dv.data(), rows, h, L.a.data(), d, G(ComponentKind::v_proj));
    std::vector<double> da(rows * d, 0.0);
    mm_nn_acc(dq.data(), rows, h, W(ComponentKind::q_proj), d, da.data());
    mm_nn_acc(dk.data(), rows, h, W(ComponentKind::k_proj), d, da.data());
    mm_nn_acc(dv.data(), rows, h, W(ComponentKind::v_proj), d, da.data());
    rms_backward(L.x_in, L.r1, da, rows, d, dx);
  }
}

}  // namespace

ToyModel::ToyModel(ModelSpec spec, TensorF32 embedding, TensorF32 unembedding, std::map<ModuleKey, TensorF32> base)
    : spec_(std::move(spec)), embedding_(std::move(embedding)), unembedding_(std::move(unembedding)), base_(std::move(base)) {
  check_model_spec(spec_);
  const Shape table{spec_.vocab_size, spec_.embed_dim};
  if (embedding_.shape() != table || unembedding_.shape() != table)
    throw ShapeError("embedding tables must be " + shape_str(table));
  for (const auto& key : module_keys(spec_)) {
    auto it = base_.find(key);
    if (it == base_.end()) throw ValidationError("base weights missing module " + key_str(key));
    const Dims dm = spec_.at(key.comp);
    if (it->second.shape() != Shape{dm.d_out, dm.d_in})
      throw ShapeError("base weight " + key_str(key) + " has shape " + shape_str(it->second.shape()));
  }
}

ToyModel ToyModel::random(const ModelSpec& spec, std::uint64_t seed) {
  check_model_spec(spec);
  SeededRng erng(mix_seed(seed, fnv1a64("embedding")));
  TensorF32 emb({spec.vocab_size, spec.embed_dim});
  for (auto& v : emb.data()) v = static_cast<float>(erng.uniform(-1.0, 1.0));
  TensorF32 unemb = emb;
  std::map<ModuleKey, TensorF32> base;
  for (const auto& key : module_keys(spec)) {
    const Dims d = spec.at(key.comp);
    SeededRng rng(mix_seed(seed, fnv1a64(base_name(key))));
    base.emplace(key, init<float>(InitKind::kaiming_uniform, {d.d_out, d.d_in}, rng, d.d_in));
  }
  return ToyModel(spec, std::move(emb), std::move(unemb), std::move(base));
}

void ToyModel::attach(const DeltaMapF32& deltas) {
  for (const auto& [key, d] : deltas) {
    const Dims dm = spec_.at(key.comp);
    if (key.layer >= spec_.n_layers || d.shape() != Shape{dm.d_out, dm.d_in})
      throw ShapeError("attached update " + key_str(key) + " has shape " + shape_str(d.shape()));
  }
  attached_ = deltas;
}

void ToyModel::save(const std::filesystem::path& path) const {
  safetensors::File file;
  file.tensors.emplace("embedding", embedding_);
  file.tensors.emplace("unembedding", unembedding_);
  for (const auto& [key, w] : base_) file.tensors.emplace(base_name(key), w);
  file.metadata = {{"format", "toy_model"}};
  safetensors::write(path, file);
}

ToyModel ToyModel::load(const std::filesystem::path& path, const ModelSpec& spec) {
  auto file = safetensors::read(path);
  const auto take = [&](const std::string& name) {
    auto it = file.tensors.find(name);
    if (it == file.tensors.end()) throw ValidationError("'" + path.string() + "': missing tensor " + name);
    return it->second;
  };
  std::map<ModuleKey, TensorF32> base;
  for (const auto& key : module_keys(spec)) base.emplace(key, take(base_name(key)));
  return ToyModel(spec, take("embedding"), take("unembedding"), std::move(base));
}

EffectiveWeights effective_weights(const ToyModel& m, const DeltaMap* extra) {
  EffectiveWeights ew;
  for (const auto& [key, w0] : m.base()) {
    TensorF64 w = w0.cast<double>();
    if (auto it = m.attached().find(key); it != m.attached().end())
      for (std::size_t i = 0; i < w.size(); ++i) w[i] += static_cast<double>(it->second[i]);
    if (extra) {
      if (auto it = extra->find(key); it != extra->end()) {
        if (it->second.shape() != w.shape()) throw ShapeError("update " + key_str(key) + " has wrong shape");
        for (std::size_t i = 0; i < w.size(); ++i) w[i] += it->second[i];
      }
    }
    ew.w.emplace(key, std::move(w));
  }
  return ew;
}

TensorF64 forward(const ToyModel& m, const EffectiveWeights& w, std::span<const int> tokens) {
  ForwardCache cache;
  run_forward(m, w, tokens, cache);
  return TensorF64({cache.rows, m.spec().vocab_size}, std::move(cache.logits));
}

TensorF64 forward(const ToyModel& m, std::span<const int> tokens) { return forward(m, effective_weights(m), tokens); }

Sequence make_sequence(const Example& e, std::size_t context) {
  Sequence s;
  s.tokens = encode_text(e.input);
  s.tokens.push_back(kSepToken);
  s.target_from = s.tokens.size() - 1;
  const auto out = encode_text(e.output);
  s.tokens.insert(s.tokens.end(), out.begin(), out.end());
  s.tokens.push_back(kStopToken);
  if (s.tokens.size() > context) {
    throw ValidationError("example '" + e.input + "' -> '" + e.output + "' needs " + std::to_string(s.tokens.size()) +
                          " tokens, context is " + std::to_string(context));
  }
  return s;
}

LossAndWeightGrads loss_and_weight_grads(const ToyModel& m, const EffectiveWeights& w, std::span<const Sequence> batch,
                                         bool want_grads) {
  if (batch.empty()) throw ValidationError("loss: empty batch");
  const std::size_t vocab = m.spec().vocab_size;
  LossAndWeightGrads out;
  for (const auto& s : batch) {
    if (s.tokens.size() < 2 || s.target_from + 1 >= s.tokens.size())
      throw ValidationError("loss: sequence has no target positions");
    out.n_targets += s.tokens.size() - 1 - s.target_from;
  }
  if (want_grads)
    for (const auto& [key, wt] : w.w) out.weight_grads.emplace(key, TensorF64(wt.shape()));

  const double inv_n = 1.0 / static_cast<double>(out.n_targets);
  ForwardCache cache;
  std::vector<double> dlogits;
  for (const auto& s : batch) {
    run_forward(m, w, s.tokens, cache);
    if (want_grads) dlogits.assign(cache.rows * vocab, 0.0);
    for (std::size_t p = s.target_from; p + 1 < s.tokens.size(); ++p) {
      const double* row = &cache.logits[p * vocab];
      const double mx = *std::max_element(row, row + vocab);
      double z = 0.0;
      for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
      const double lse = mx + std::log(z);
      const auto target = static_cast<std::size_t>(s.tokens[p + 1]);
      out.loss += (lse - row[target]) * inv_n;
      if (want_grads) {
        for (std::size_t j = 0; j < vocab; ++j) dlogits[p * vocab + j] = std::exp(row[j] - lse) * inv_n;
        dlogits[p * vocab + target] -= inv_n;
      }
    }
    if (want_grads) run_backward(m, w, cache, dlogits, out.weight_grads);
  }
  return out;
}

}  // namespace compomerge

#include "compomerge/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "compomerge/errors.hpp"

namespace compomerge {

RougeScore make_score(double precision, double recall) {
  const double denom = precision + recall;
  return {precision, recall, denom > 0.0 ? 2.0 * precision * recall / denom : 0.0};
}

namespace {

constexpr std::string_view kPunct = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

bool is_punct(char c) { return kPunct.find(c) != std::string_view::npos; }

std::map<Tokens, std::size_t> ngram_counts(const Tokens& t, std::size_t n) {
  std::map<Tokens, std::size_t> counts;
  if (t.size() < n) return counts;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++counts[Tokens(t.begin() + static_cast<std::ptrdiff_t>(i),
                                                                 t.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

}  // namespace

Tokens tokenize(std::string_view s) {
  Tokens out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) {
      std::size_t b = i, e = j;
      while (b < e && is_punct(s[b])) ++b;
      while (e > b && is_punct(s[e - 1])) --e;
      if (e > b) {
        std::string tok(s.substr(b, e - b));
        for (auto& c : tok) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        out.push_back(std::move(tok));
      }
    }
    i = j;
  }
  return out;
}

Tokens char_tokens(std::string_view s) {
  Tokens out;
  for (char c : s) out.emplace_back(1, c);
  return out;
}

RougeScore rouge_n(const Tokens& cand, const Tokens& ref, std::size_t n) {
  if (n == 0) throw ValidationError("rouge_n: n must be at least 1");
  const auto cc = ngram_counts(cand, n);
  const auto rc = ngram_counts(ref, n);
  std::size_t overlap = 0;
  for (const auto& [gram, count] : cc)
    if (auto it = rc.find(gram); it != rc.end()) overlap += std::min(count, it->second);
  const std::size_t n_cand = cand.size() >= n ? cand.size() - n + 1 : 0;
  const std::size_t n_ref = ref.size() >= n ? ref.size() - n + 1 : 0;
  const double p = n_cand ? static_cast<double>(overlap) / static_cast<double>(n_cand) : 0.0;
  const double r = n_ref ? static_cast<double>(overlap) / static_cast<double>(n_ref) : 0.0;
  return make_score(p, r);
}

RougeScore rouge_n(std::string_view cand, std::string_view ref, std::size_t n) {
  return rouge_n(tokenize(cand), tokenize(ref), n);
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeScore rouge_l(const Tokens& cand, const Tokens& ref) {
  const auto lcs = static_cast<double>(lcs_length(cand, ref));
  const double p = cand.empty() ? 0.0 : lcs / static_cast<double>(cand.size());
  const double r = ref.empty() ? 0.0 : lcs / static_cast<double>(ref.size());
  return make_score(p, r);
}

RougeScore rouge_l(std::string_view cand, std::string_view ref) { return rouge_l(tokenize(cand), tokenize(ref)); }

double weighted_rouge(const Tokens& cand, const Tokens& ref, WeightedRougeMode mode) {
  const auto part = [&](std::size_t n) {
    const auto s = rouge_n(cand, ref, n);
    return mode == WeightedRougeMode::f1 ? s.f1 : s.recall;
  };
  // (R1 + 2 R2 + 3 R3) / 6 is the same combination, rounded once
  return (part(1) + 2.0 * part(2) + 3.0 * part(3)) / 6.0;
}

double weighted_rouge(std::string_view cand, std::string_view ref, WeightedRougeMode mode) {
  return weighted_rouge(tokenize(cand), tokenize(ref), mode);
}

std::string_view to_string(Metric m) {
  switch (m) {
    case Metric::rouge_1: return "rouge_1";
    case Metric::rouge_2: return "rouge_2";
    case Metric::rouge_3: return "rouge_3";
    case Metric::rouge_l: return "rouge_l";
    case Metric::weighted_rouge: return "weighted_rouge";
    case Metric::exact_match: return "exact_match";
  }
  return "?";
}

Metric parse_metric(std::string_view name) {
  for (auto m : {Metric::rouge_1, Metric::rouge_2, Metric::rouge_3, Metric::rouge_l, Metric::weighted_rouge,
                 Metric::exact_match}) {
    if (to_string(m) == name) return m;
  }
  if (name == "w_r") return Metric::weighted_rouge;
  throw ValidationError("unknown metric '" + std::string(name) + "'");
}

double score_pair(const Tokens& cand, const Tokens& ref, Metric metric) {
  switch (metric) {
    case Metric::rouge_1: return rouge_n(cand, ref, 1).f1;
    case Metric::rouge_2: return rouge_n(cand, ref, 2).f1;
    case Metric::rouge_3: return rouge_n(cand, ref, 3).f1;
    case Metric::rouge_l: return rouge_l(cand, ref).f1;
    case Metric::weighted_rouge: return weighted_rouge(cand, ref);
    case Metric::exact_match: return cand == ref ? 1.0 : 0.0;
  }
  return 0.0;
}

double evaluate_set(const std::vector<std::pair<Tokens, Tokens>>& pairs, Metric metric) {
  if (pairs.empty()) throw ValidationError("evaluate_set: no pairs");
  double total = 0.0;
  for (const auto& [c, r] : pairs) total += score_pair(c, r, metric);
  return 100.0 * total / static_cast<double>(pairs.size());
}

double evaluate_set(const std::vector<std::pair<std::string, std::string>>& pairs, Metric metric) {
  std::vector<std::pair<Tokens, Tokens>> tok;
  tok.reserve(pairs.size());
  for (const auto& [c, r] : pairs) tok.emplace_back(tokenize(c), tokenize(r));
  return evaluate_set(tok, metric);
}

}  // namespace compomerge

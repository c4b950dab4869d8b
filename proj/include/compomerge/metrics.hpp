#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace compomerge {

using Tokens = std::vector<std::string>;

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// f1 = 2PR / (P + R), or 0 when P + R = 0.
RougeScore make_score(double precision, double recall);

/// Lowercase, split on whitespace, strip leading/trailing ASCII punctuation;
/// tokens that become empty are dropped.
Tokens tokenize(std::string_view s);

/// One token per character, spaces included (used for the toy alphabet).
Tokens char_tokens(std::string_view s);

/// Clipped n-gram overlap: precision against the candidate, recall against the reference.
RougeScore rouge_n(const Tokens& cand, const Tokens& ref, std::size_t n);
RougeScore rouge_n(std::string_view cand, std::string_view ref, std::size_t n);

std::size_t lcs_length(const Tokens& a, const Tokens& b);

/// LCS-based precision/recall with beta = 1.
RougeScore rouge_l(const Tokens& cand, const Tokens& ref);
RougeScore rouge_l(std::string_view cand, std::string_view ref);

/// Which part of each ROUGE-n score enters the weighted combination.
enum class WeightedRougeMode { f1, recall };

inline constexpr double kWeightR1 = 1.0 / 6.0;
inline constexpr double kWeightR2 = 1.0 / 3.0;
inline constexpr double kWeightR3 = 1.0 / 2.0;

/// R1/6 + R2/3 + R3/2.
double weighted_rouge(const Tokens& cand, const Tokens& ref, WeightedRougeMode mode = WeightedRougeMode::f1);
double weighted_rouge(std::string_view cand, std::string_view ref, WeightedRougeMode mode = WeightedRougeMode::f1);

enum class Metric { rouge_1, rouge_2, rouge_3, rouge_l, weighted_rouge, exact_match };

std::string_view to_string(Metric m);
Metric parse_metric(std::string_view name);

/// Score of one pair in [0, 1] under the given metric.
double score_pair(const Tokens& cand, const Tokens& ref, Metric metric);

/// Mean score over word-tokenized pairs, as a percentage.
double evaluate_set(const std::vector<std::pair<std::string, std::string>>& pairs, Metric metric);

/// Same, over pre-tokenized pairs.
double evaluate_set(const std::vector<std::pair<Tokens, Tokens>>& pairs, Metric metric);

}  // namespace compomerge

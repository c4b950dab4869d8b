#include "compomerge/eval.hpp"

#include <algorithm>

namespace compomerge {

std::vector<int> decode_greedy(const ToyModel& m, std::span<const int> prompt, std::size_t max_len, int stop_token) {
  if (max_len == 0) throw ValidationError("decode_greedy: max_len must be at least 1");
  if (prompt.empty()) throw ValidationError("decode_greedy: empty prompt");
  const auto w = effective_weights(m);
  std::vector<int> seq(prompt.begin(), prompt.end());
  std::vector<int> out;
  const auto vocab = std::min<std::size_t>(m.spec().vocab_size, kTextVocab);
  while (out.size() < max_len && seq.size() < m.spec().context) {
    const auto logits = forward(m, w, seq);
    const std::size_t last = seq.size() - 1;
    int best = 0;
    for (std::size_t j = 1; j < vocab; ++j)
      if (static_cast<int>(j) != kSepToken && logits(last, j) > logits(last, static_cast<std::size_t>(best))) best = static_cast<int>(j);
    if (best == stop_token) break;
    out.push_back(best);
    seq.push_back(best);
  }
  return out;
}

std::string generate(const ToyModel& m, const std::string& input, std::size_t max_len) {
  auto prompt = encode_text(input);
  prompt.push_back(kSepToken);
  return decode_tokens(decode_greedy(m, prompt, max_len));
}

std::string_view to_string(EvalKind k) {
  switch (k) {
    case EvalKind::zero_shot: return "zero_shot";
    case EvalKind::main_lora: return "main_lora";
    case EvalKind::aux_lora: return "aux_lora";
    case EvalKind::merged: return "merged";
    case EvalKind::calibrated: return "calibrated";
    case EvalKind::multi_step: return "multi_step";
    case EvalKind::joint_expert: return "joint_expert";
  }
  return "?";
}

EvalKind parse_eval_kind(std::string_view name) {
  for (auto k : {EvalKind::zero_shot, EvalKind::main_lora, EvalKind::aux_lora, EvalKind::merged, EvalKind::calibrated,
                 EvalKind::multi_step, EvalKind::joint_expert}) {
    if (to_string(k) == name) return k;
  }
  throw ValidationError("unknown evaluation strategy '" + std::string(name) + "'");
}

namespace {

DeltaMapF32 adapter_deltas(const Adapter& a) {
  DeltaMapF32 out;
  for (const auto& [key, _] : a.tensors) out.emplace(key, delta_weight(a, key.layer, key.comp));
  return out;
}

}  // namespace

EvalPlan plan_for(EvalKind kind, const EvalArtifacts& art, const std::string& label) {
  EvalPlan plan;
  plan.name = label.empty() ? std::string(to_string(kind)) : label;
  const auto need_adapters = [&](std::size_t n) {
    if (art.adapters.size() < n) {
      throw ValidationError(std::string(to_string(kind)) + " needs " + std::to_string(n) + " single-task adapter(s), got " +
                            std::to_string(art.adapters.size()));
    }
  };
  switch (kind) {
    case EvalKind::zero_shot:
      plan.passes.emplace_back();
      break;
    case EvalKind::main_lora:
      need_adapters(1);
      plan.passes.push_back(adapter_deltas(art.adapters.front()));
      break;
    case EvalKind::aux_lora:
      need_adapters(2);
      plan.passes.push_back(adapter_deltas(art.adapters[1]));
      break;
    case EvalKind::merged:
      if (!art.merged) throw ValidationError("merged strategy needs a merged adapter");
      plan.passes.push_back(art.merged->materialize());
      break;
    case EvalKind::calibrated: {
      if (!art.calibration) throw ValidationError("calibrated strategy needs a calibration set");
      if (art.merged) {
        plan.passes.push_back(calibrated_deltas(*art.merged, *art.calibration));
      } else {
        need_adapters(1);
        const std::vector<double> w(art.adapters.size(), 1.0 / static_cast<double>(art.adapters.size()));
        plan.passes.push_back(calibrated_deltas(merge_linear(art.adapters, w), *art.calibration));
      }
      break;
    }
    case EvalKind::multi_step:
      need_adapters(2);
      for (const auto& a : art.adapters) plan.passes.push_back(adapter_deltas(a));
      break;
    case EvalKind::joint_expert:
      if (!art.joint) throw ValidationError("joint_expert strategy needs a joint-expert adapter");
      plan.passes.push_back(adapter_deltas(*art.joint));
      break;
  }
  return plan;
}

namespace {

std::vector<std::pair<Tokens, Tokens>> char_pairs(const std::vector<std::string>& cand, const std::vector<std::string>& ref) {
  if (cand.size() != ref.size()) throw ValidationError("evaluation report: outputs and references differ in length");
  std::vector<std::pair<Tokens, Tokens>> pairs;
  pairs.reserve(cand.size());
  for (std::size_t i = 0; i < cand.size(); ++i) pairs.emplace_back(char_tokens(cand[i]), char_tokens(ref[i]));
  return pairs;
}

}  // namespace

double EvalReport::score(Metric m) const { return evaluate_set(char_pairs(outputs, references), m); }

EvalReport evaluate(ToyModel model, const EvalPlan& plan, const std::vector<Example>& examples, std::size_t max_len) {
  if (examples.empty()) throw ValidationError("evaluate: no examples");
  if (plan.passes.empty()) throw ValidationError("evaluate: plan has no passes");
  EvalReport report;
  report.strategy = plan.name;
  report.task = examples.front().task;
  report.n_examples = examples.size();

  // Run pass by pass over the whole set so each update set is attached once.
  std::vector<std::string> current;
  for (const auto& e : examples) current.push_back(e.input);
  std::size_t decode_calls = 0;
  for (const auto& pass : plan.passes) {
    model.attach(pass);
    for (auto& text : current) {
      const std::size_t limit = max_len ? max_len : 2 * text.size() + 2;
      text = generate(model, text, limit);
      ++decode_calls;
    }
  }
  report.passes_per_example = static_cast<double>(decode_calls) / static_cast<double>(examples.size());

  for (const auto& e : examples) report.references.push_back(e.output);
  const auto pairs = char_pairs(current, report.references);
  report.exact_match = evaluate_set(pairs, Metric::exact_match);
  report.rouge_l = evaluate_set(pairs, Metric::rouge_l);
  report.weighted_rouge = evaluate_set(pairs, Metric::weighted_rouge);
  report.outputs = std::move(current);
  return report;
}

}  // namespace compomerge

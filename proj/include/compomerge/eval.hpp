#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "compomerge/calibration.hpp"
#include "compomerge/merge.hpp"
#include "compomerge/metrics.hpp"
#include "compomerge/model.hpp"
#include "compomerge/tasks.hpp"

namespace compomerge {

/// Argmax decoding from the model's attached updates. Stops at `stop_token`
/// (not included in the result) or after `max_len` tokens. The argmax runs
/// over the stop token and the character ids, ties go to the lowest id.
std::vector<int> decode_greedy(const ToyModel& m, std::span<const int> prompt, std::size_t max_len,
                               int stop_token = kStopToken);

/// Input text, separator, then greedy decode; returns the decoded text.
std::string generate(const ToyModel& m, const std::string& input, std::size_t max_len);

enum class EvalKind { zero_shot, main_lora, aux_lora, merged, calibrated, multi_step, joint_expert };

std::string_view to_string(EvalKind k);
EvalKind parse_eval_kind(std::string_view name);

/// Artifacts an evaluation may draw on. `adapters` are the single-task LoRAs
/// in composition order (main first).
struct EvalArtifacts {
  std::vector<Adapter> adapters;
  std::optional<MergedAdapter> merged;
  std::optional<CalibrationSet> calibration;
  std::optional<Adapter> joint;
};

/// Ordered list of update sets; each one is a full decode pass, and pass k
/// receives the decoded output of pass k-1 as its input.
struct EvalPlan {
  std::string name;
  std::vector<DeltaMapF32> passes;
};

/// Resolve a strategy against the artifacts; throws ValidationError when one is missing.
/// `merged` uses artifacts.merged; `calibrated` applies the calibration to artifacts.merged
/// (or to the uniform linear merge of `adapters` when no merge is given).
EvalPlan plan_for(EvalKind kind, const EvalArtifacts& artifacts, const std::string& label = {});

struct EvalReport {
  std::string strategy;
  std::string task;
  std::size_t n_examples = 0;
  double exact_match = 0.0;     // percent
  double rouge_l = 0.0;         // percent, character tokens
  double weighted_rouge = 0.0;  // percent, character tokens
  double passes_per_example = 0.0;
  std::vector<std::string> outputs;
  std::vector<std::string> references;

  /// Any metric over (outputs, references), percent, character tokens.
  double score(Metric m) const;
};

/// Decode every example under the plan and score against its reference.
/// Decoding runs `max_len` tokens at most per pass; 0 means 2 * input length + 2.
EvalReport evaluate(ToyModel model, const EvalPlan& plan, const std::vector<Example>& examples,
                    std::size_t max_len = 0);

}  // namespace compomerge

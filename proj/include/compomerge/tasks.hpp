#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace compomerge {

enum class TaskRole { main, auxiliary };

/// A deterministic string -> string transform over the toy alphabet.
struct TaskSpec {
  std::string name;
  TaskRole role = TaskRole::main;
  std::function<std::string(std::string_view)> transform;
};

/// Ordered tasks; the first is applied first.
using ComposedTask = std::vector<TaskSpec>;

/// T_N(...T_2(T_1(x))).
std::string compose(const ComposedTask& tasks, std::string_view x);

/// Task names joined with '+', e.g. "first_half+caesar1".
std::string composed_name(const ComposedTask& tasks);

/// Lowercase a-z and space. Separator and stop live outside it.
inline constexpr std::string_view kToyAlphabet = "abcdefghijklmnopqrstuvwxyz ";

/// Registry of built-in tasks:
///   copy (main)         identity; used to pretrain the toy base
///   first_half (main)   first ceil(n/2) characters
///   reverse (main)      characters in reverse order
///   caesar1 (aux)       letters shifted by +1 with z -> a
///   caesar_minus1 (aux) inverse of caesar1
///   atbash (aux)        a <-> z, b <-> y, ... (its own inverse)
const std::map<std::string, TaskSpec>& builtin_tasks();
const TaskSpec& task_by_name(std::string_view name);
ComposedTask compose_by_names(const std::vector<std::string>& names);

struct Example {
  std::string input;
  std::string output;
  std::string task;
  bool operator==(const Example&) const = default;
};

enum class Split { train, validation, test };
std::string_view to_string(Split s);

struct Dataset {
  Split split = Split::train;
  std::vector<Example> examples;
  bool operator==(const Dataset&) const = default;
};

struct SplitRatios {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
};

struct DatasetSplits {
  Dataset train;
  Dataset validation;
  Dataset test;
};

struct GenOptions {
  std::size_t min_len = 8;
  std::size_t max_len = 8;
  bool include_space = false;
};

/// n distinct random inputs, outputs by `compose`, partitioned into
/// train/validation/test (train and validation sizes rounded, test takes the rest).
DatasetSplits gen_dataset(const ComposedTask& task, std::size_t n, std::uint64_t seed, SplitRatios ratios = {},
                          GenOptions options = {});

/// One {"input","output","task"} object per line.
void save_jsonl(const Dataset& ds, const std::filesystem::path& path);

struct JsonlLoad {
  Dataset dataset;
  std::size_t blank_lines = 0;
};

/// Blank lines are skipped and counted; a malformed line raises ParseError with its line number.
JsonlLoad load_jsonl(const std::filesystem::path& path, Split split = Split::train);

}  // namespace compomerge

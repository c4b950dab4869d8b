#include "compomerge/tasks.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "compomerge/errors.hpp"
#include "compomerge/rng.hpp"
#include "json.hpp"

namespace compomerge {

using nlohmann::json;

std::string compose(const ComposedTask& tasks, std::string_view x) {
  std::string y(x);
  for (const auto& t : tasks) y = t.transform(y);
  return y;
}

std::string composed_name(const ComposedTask& tasks) {
  std::string name;
  for (std::size_t i = 0; i < tasks.size(); ++i) name += (i ? "+" : "") + tasks[i].name;
  return name;
}

namespace {

std::string map_letters(std::string_view s, char (*f)(char)) {
  std::string out(s);
  for (auto& c : out)
    if (c >= 'a' && c <= 'z') c = f(c);
  return out;
}

std::map<std::string, TaskSpec> make_registry() {
  std::map<std::string, TaskSpec> r;
  auto add = [&](std::string name, TaskRole role, std::function<std::string(std::string_view)> f) {
    r.emplace(name, TaskSpec{name, role, std::move(f)});
  };
  add("copy", TaskRole::main, [](std::string_view s) { return std::string(s); });
  add("first_half", TaskRole::main, [](std::string_view s) { return std::string(s.substr(0, (s.size() + 1) / 2)); });
  add("reverse", TaskRole::main, [](std::string_view s) { return std::string(s.rbegin(), s.rend()); });
  add("caesar1", TaskRole::auxiliary, [](std::string_view s) {
    return map_letters(s, [](char c) { return static_cast<char>('a' + (c - 'a' + 1) % 26); });
  });
  add("caesar_minus1", TaskRole::auxiliary, [](std::string_view s) {
    return map_letters(s, [](char c) { return static_cast<char>('a' + (c - 'a' + 25) % 26); });
  });
  add("atbash", TaskRole::auxiliary, [](std::string_view s) {
    return map_letters(s, [](char c) { return static_cast<char>('z' - (c - 'a')); });
  });
  return r;
}

}  // namespace

const std::map<std::string, TaskSpec>& builtin_tasks() {
  static const auto registry = make_registry();
  return registry;
}

const TaskSpec& task_by_name(std::string_view name) {
  const auto& r = builtin_tasks();
  auto it = r.find(std::string(name));
  if (it == r.end()) {
    std::string known;
    for (const auto& [n, _] : r) known += (known.empty() ? "" : ", ") + n;
    throw ValidationError("unknown task '" + std::string(name) + "' (known: " + known + ")");
  }
  return it->second;
}

ComposedTask compose_by_names(const std::vector<std::string>& names) {
  if (names.empty()) throw ValidationError("composition needs at least one task");
  ComposedTask tasks;
  for (const auto& n : names) tasks.push_back(task_by_name(n));
  return tasks;
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

DatasetSplits gen_dataset(const ComposedTask& task, std::size_t n, std::uint64_t seed, SplitRatios ratios,
                          GenOptions options) {
  if (task.empty()) throw ValidationError("gen_dataset: empty composition");
  if (ratios.train < 0 || ratios.validation < 0 || ratios.test < 0 ||
      std::fabs(ratios.train + ratios.validation + ratios.test - 1.0) > 1e-9) {
    throw ValidationError("gen_dataset: split ratios must be non-negative and sum to 1");
  }
  if (options.min_len == 0 || options.min_len > options.max_len) throw ValidationError("gen_dataset: bad length range");

  const auto n_train = static_cast<std::size_t>(std::llround(ratios.train * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(ratios.validation * static_cast<double>(n)));
  if (n_train + n_val > n) throw ValidationError("gen_dataset: split sizes exceed n");
  const std::size_t n_test = n - n_train - n_val;
  if ((ratios.train > 0 && n_train == 0) || (ratios.validation > 0 && n_val == 0) || (ratios.test > 0 && n_test == 0)) {
    throw ValidationError("gen_dataset: n = " + std::to_string(n) + " leaves a requested split empty");
  }

  const std::string_view alphabet = options.include_space ? kToyAlphabet : kToyAlphabet.substr(0, 26);
  double space = 0.0;
  for (std::size_t len = options.min_len; len <= options.max_len; ++len)
    space += std::pow(static_cast<double>(alphabet.size()), static_cast<double>(len));
  if (static_cast<double>(n) > space / 2) throw ValidationError("gen_dataset: n too large for the input space");

  SeededRng rng(seed);
  const std::string label = composed_name(task);
  std::set<std::string> seen;
  std::vector<Example> all;
  all.reserve(n);
  while (all.size() < n) {
    const std::size_t len = options.min_len + rng.below(options.max_len - options.min_len + 1);
    std::string x(len, ' ');
    for (auto& c : x) c = alphabet[rng.below(alphabet.size())];
    if (!seen.insert(x).second) continue;
    all.push_back({x, compose(task, x), label});
  }

  DatasetSplits out;
  out.train.split = Split::train;
  out.validation.split = Split::validation;
  out.test.split = Split::test;
  out.train.examples.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.validation.examples.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train),
                                 all.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  out.test.examples.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), all.end());
  return out;
}

void save_jsonl(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const auto& e : ds.examples) {
    out << json{{"input", e.input}, {"output", e.output}, {"task", e.task}}.dump() << '\n';
  }
  if (!out) throw IoError("write failure on '" + path.string() + "'");
}

JsonlLoad load_jsonl(const std::filesystem::path& path, Split split) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  JsonlLoad result;
  result.dataset.split = split;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) {
      ++result.blank_lines;
      continue;
    }
    try {
      const json j = json::parse(line);
      result.dataset.examples.push_back(
          {j.at("input").get<std::string>(), j.at("output").get<std::string>(), j.value("task", std::string{})});
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (in.bad()) throw IoError("read failure on '" + path.string() + "'");
  return result;
}

}  // namespace compomerge

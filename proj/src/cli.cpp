#include "compomerge/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "compomerge/calibration.hpp"
#include "compomerge/errors.hpp"
#include "compomerge/eval.hpp"
#include "compomerge/merge.hpp"
#include "compomerge/model.hpp"
#include "compomerge/tasks.hpp"
#include "compomerge/train.hpp"

#ifndef COMPOMERGE_VERSION
#define COMPOMERGE_VERSION "unknown"
#endif

namespace compomerge {

using nlohmann::json;
namespace fs = std::filesystem;

std::string version_string() { return COMPOMERGE_VERSION; }

std::string RunManifest::to_json() const {
  json j;
  j["command"] = command;
  j["config"] = config_json.empty() ? json::object() : json::parse(config_json);
  j["seed"] = seed;
  j["artifacts"] = artifacts;
  j["version"] = version;
  j["duration_s"] = duration_s;
  j["exit_code"] = exit_code;
  return j.dump();
}

void append_manifest(const RunManifest& m, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot open '" + path.string() + "' for appending");
  out << m.to_json() << '\n';
  if (!out) throw IoError("write failure on '" + path.string() + "'");
}

std::vector<ModuleStats> inspect_deltas(const std::map<ModuleKey, TensorF32>& deltas, std::size_t bins) {
  if (bins == 0) throw ValidationError("inspect: bins must be at least 1");
  std::vector<ModuleStats> out;
  for (const auto& [key, d] : deltas) {
    ModuleStats s;
    s.key = key;
    const auto v = d.data();
    s.numel = v.size();
    if (v.empty()) throw DegenerateInputError("inspect: empty update for " + key_str(key));
    double sum = 0.0, sq = 0.0, amax = 0.0;
    s.min = s.max = v[0];
    for (float x : v) {
      sum += x;
      sq += static_cast<double>(x) * x;
      s.min = std::min<double>(s.min, x);
      s.max = std::max<double>(s.max, x);
      amax = std::max(amax, std::abs(static_cast<double>(x)));
    }
    const double n = static_cast<double>(v.size());
    s.frobenius = std::sqrt(sq);
    s.mean = sum / n;
    double var = 0.0;
    for (float x : v) var += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(var / n);
    s.range = amax > 0.0 ? amax : 1.0;
    s.histogram.assign(bins, 0);
    for (float x : v) {
      const double pos = (x + s.range) / (2.0 * s.range) * static_cast<double>(bins);
      const auto idx = std::min(bins - 1, static_cast<std::size_t>(std::max(0.0, std::floor(pos))));
      ++s.histogram[idx];
    }
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, mode);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.precision(10);
  return out;
}

}  // namespace

void write_stats_csv(const std::vector<ModuleStats>& stats, const fs::path& path) {
  auto out = open_out(path);
  out << "layer,component,numel,frobenius,mean,std,min,max\n";
  for (const auto& s : stats) {
    out << s.key.layer << ',' << to_string(s.key.comp) << ',' << s.numel << ',' << s.frobenius << ',' << s.mean << ','
        << s.stddev << ',' << s.min << ',' << s.max << '\n';
  }
  if (!out) throw IoError("write failure on '" + path.string() + "'");
}

void write_histogram_csv(const std::vector<ModuleStats>& stats, const fs::path& path) {
  auto out = open_out(path);
  out << "layer,component,bin,lo,hi,count\n";
  for (const auto& s : stats) {
    const double width = 2.0 * s.range / static_cast<double>(s.histogram.size());
    for (std::size_t b = 0; b < s.histogram.size(); ++b) {
      out << s.key.layer << ',' << to_string(s.key.comp) << ',' << b << ',' << -s.range + width * b << ','
          << -s.range + width * (b + 1) << ',' << s.histogram[b] << '\n';
    }
  }
  if (!out) throw IoError("write failure on '" + path.string() + "'");
}

namespace {

struct Common {
  std::uint64_t seed = 0;
  std::string config;
  std::string manifest = "compomerge_runs.jsonl";
};

using Artifacts = std::vector<std::string>;

struct Command {
  CLI::App* app = nullptr;
  Common common;
  std::function<Artifacts(std::ostream&)> run;
};

void add_common(Command& c) {
  c.app->add_option("--seed", c.common.seed, "Random seed")->envname("COMPOMERGE_SEED");
  c.app->add_option("--config", c.common.config, "JSON file of option defaults; flags win");
  c.app->add_option("--manifest", c.common.manifest, "Run log (JSONL, appended)")->envname("COMPOMERGE_MANIFEST");
}

ToyModel load_model(const std::string& path) { return ToyModel::load(path, ModelSpec::toy()); }

Dataset load_data(const std::string& path) {
  auto ds = load_jsonl(path).dataset;
  if (ds.examples.empty()) throw ValidationError("'" + path + "' holds no examples");
  return ds;
}

std::vector<Adapter> load_adapters(const std::vector<std::string>& paths) {
  std::vector<Adapter> out;
  for (const auto& p : paths) out.push_back(load_adapter(p, ModelSpec::toy()));
  return out;
}

DeltaMapF32 adapter_delta_map(const Adapter& a) {
  DeltaMapF32 out;
  for (const auto& [key, _] : a.tensors) out.emplace(key, delta_weight(a, key.layer, key.comp));
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

// ---- gen-toy-data

void setup_gen(Command& c) {
  struct Opts {
    std::string main, aux, aux2, out_dir, model_out;
    std::size_t n = 2000, min_len = 8, max_len = 8;
    double train = 0.8, val = 0.1;
    bool include_space = false;
    PretrainConfig pretrain;
  };
  auto o = std::make_shared<Opts>();
  auto* a = c.app;
  a->add_option("--main", o->main, "Main task name")->required();
  a->add_option("--aux", o->aux, "Auxiliary task applied after the main task");
  a->add_option("--aux2", o->aux2, "Second auxiliary task");
  a->add_option("--n", o->n, "Number of distinct examples");
  a->add_option("--min-len", o->min_len, "Minimum input length");
  a->add_option("--max-len", o->max_len, "Maximum input length");
  a->add_flag("--include-space", o->include_space, "Allow spaces inside inputs");
  a->add_option("--train-ratio", o->train, "Train fraction");
  a->add_option("--val-ratio", o->val, "Validation fraction; test takes the rest");
  a->add_option("--out-dir", o->out_dir, "Directory for train/validation/test.jsonl")->required();
  a->add_option("--model-out", o->model_out, "Also write a toy base model here");
  a->add_option("--pretrain-steps", o->pretrain.steps, "Copy-task steps for the base model (0 = random weights)");
  c.run = [o, &common = c.common](std::ostream& out) {
    std::vector<std::string> names{o->main};
    if (!o->aux.empty()) names.push_back(o->aux);
    if (!o->aux2.empty()) names.push_back(o->aux2);
    const auto task = compose_by_names(names);
    const SplitRatios ratios{o->train, o->val, 1.0 - o->train - o->val};
    const auto splits = gen_dataset(task, o->n, common.seed, ratios, {o->min_len, o->max_len, o->include_space});
    Artifacts arts;
    const fs::path dir = o->out_dir;
    fs::create_directories(dir);
    for (const auto* ds : {&splits.train, &splits.validation, &splits.test}) {
      const auto path = dir / (std::string(to_string(ds->split)) + ".jsonl");
      save_jsonl(*ds, path);
      arts.push_back(path.string());
    }
    if (!o->model_out.empty()) {
      pretrain_base(ModelSpec::toy(), common.seed, o->pretrain).save(o->model_out);
      arts.push_back(o->model_out);
    }
    out << composed_name(task) << ": " << splits.train.examples.size() << " train, "
        << splits.validation.examples.size() << " validation, " << splits.test.examples.size() << " test\n";
    return arts;
  };
}

// ---- train-lora

void add_train_options(CLI::App* a, TrainConfig& cfg) {
  a->add_option("--lr", cfg.lr, "Adam learning rate");
  a->add_option("--steps", cfg.steps, "Optimizer steps");
  a->add_option("--batch-size", cfg.batch_size, "Examples per step");
  a->add_option("--subset", cfg.subset, "Train on at most this many examples (0 = all)");
}

void setup_train_lora(Command& c) {
  struct Opts {
    std::string model, train, out, task_name;
    LoraShape shape;
    TrainConfig cfg = TrainConfig::lora_defaults();
  };
  auto o = std::make_shared<Opts>();
  auto* a = c.app;
  a->add_option("--model", o->model, "Toy base model (.safetensors)")->required();
  a->add_option("--train", o->train, "Training JSONL")->required();
  a->add_option("-o,--out", o->out, "Output adapter (.safetensors)")->required();
  a->add_option("--rank", o->shape.rank, "LoRA rank r");
  a->add_option("--alpha", o->shape.alpha, "LoRA alpha");
  a->add_option("--dropout", o->shape.dropout, "LoRA dropout (recorded only)");
  a->add_option("--task-name", o->task_name, "Task label stored in the adapter");
  add_train_options(a, o->cfg);
  c.run = [o, &common = c.common](std::ostream& out) {
    const auto model = load_model(o->model);
    const auto data = load_data(o->train);
    auto cfg = o->cfg;
    cfg.seed = common.seed;
    const std::string name = o->task_name.empty() ? data.examples.front().task : o->task_name;
    TrainLog log;
    const auto adapter = train_single_task_lora(model, data, o->shape, cfg, name, &log);
    save_adapter(adapter, o->out);
    out << "trained " << name << " adapter, final step loss " << log.step_losses.back() << '\n';
    return Artifacts{o->out, config_path_for(o->out).string()};
  };
}

// ---- merge

void setup_merge(Command& c) {
  struct Opts {
    std::vector<std::string> adapters;
    std::string out, spec_path, model, train;
    std::string strategy = "linear";
    std::vector<double> weights;
    MergeSpec defaults;
    std::size_t batch_size = 16;
  };
  auto o = std::make_shared<Opts>();
  auto* a = c.app;
  a->add_option("adapters", o->adapters, "Input adapters (.safetensors)")->required();
  a->add_option("-o,--out", o->out, "Merged output (.safetensors)")->required();
  a->add_option("--spec", o->spec_path, "Merge-spec JSON; explicit flags override it");
  a->add_option("--strategy", o->strategy, "linear|concat|ties|dare|slerp|lorahub|lm_cocktail|dam");
  a->add_option("--weights", o->weights, "Comma-separated adapter weights")->delimiter(',')->allow_extra_args(false);
  a->add_option("--density", o->defaults.density, "TIES/DARE density");
  a->add_option("--slerp-t", o->defaults.slerp_t, "Slerp interpolation t");
  a->add_option("--budget", o->defaults.budget, "LoraHub loss evaluations");
  a->add_option("--temperature", o->defaults.temperature, "LM-Cocktail temperature");
  a->add_option("--steps", o->defaults.steps, "DAM optimizer steps");
  a->add_option("--lr", o->defaults.lr, "DAM learning rate");
  a->add_option("--batch-size", o->batch_size, "DAM batch size");
  a->add_option("--model", o->model, "Toy base model (lorahub, lm_cocktail, dam)");
  a->add_option("--train", o->train, "Training/validation JSONL (lorahub, lm_cocktail, dam)");
  c.run = [o, a, &common = c.common](std::ostream& out) {
    MergeSpec spec;
    if (!o->spec_path.empty()) {
      std::ifstream in(o->spec_path);
      if (!in) throw IoError("cannot open '" + o->spec_path + "' for reading");
      std::stringstream ss;
      ss << in.rdbuf();
      spec = MergeSpec::from_json(ss.str());
    }
    const auto given = [&](const char* name) { return o->spec_path.empty() || a->get_option(name)->count() > 0; };
    if (given("--strategy")) spec.strategy = parse_strategy(o->strategy);
    if (given("--weights")) spec.weights = o->weights;
    if (given("--density")) spec.density = o->defaults.density;
    if (given("--slerp-t")) spec.slerp_t = o->defaults.slerp_t;
    if (given("--budget")) spec.budget = o->defaults.budget;
    if (given("--temperature")) spec.temperature = o->defaults.temperature;
    if (given("--steps")) spec.steps = o->defaults.steps;
    if (given("--lr")) spec.lr = o->defaults.lr;
    if (given("--seed")) spec.seed = common.seed;

    const auto adapters = load_adapters(o->adapters);
    spec.validate(adapters.size());
    const auto w = spec.weights_for(adapters.size());
    const auto need_model = [&] {
      if (o->model.empty() || o->train.empty())
        throw ValidationError(std::string(to_string(spec.strategy)) + " needs --model and --train");
      return std::make_pair(load_model(o->model), load_data(o->train));
    };
    std::optional<MergedAdapter> merged;
    switch (spec.strategy) {
      case MergeStrategy::linear: merged = merge_linear(adapters, w); break;
      case MergeStrategy::concat: merged = merge_concat(adapters, w); break;
      case MergeStrategy::ties: merged = merge_ties(adapters, w, spec.density); break;
      case MergeStrategy::dare: merged = merge_dare(adapters, w, spec.density, spec.seed); break;
      case MergeStrategy::slerp: merged = merge_slerp(adapters, spec.slerp_t); break;
      case MergeStrategy::lorahub: {
        const auto [model, data] = need_model();
        const auto res = merge_lorahub(
            adapters,
            [&](const MergedAdapter& m) {
              const auto d = to_f64(m.materialize());
              return dataset_loss(model, data.examples, &d);
            },
            spec.budget, spec.seed);
        out << "lorahub weights:";
        for (double x : res.weights) out << ' ' << x;
        out << " (loss " << res.loss << ", " << res.evaluations << " evaluations)\n";
        merged = res.merged;
        break;
      }
      case MergeStrategy::lm_cocktail: {
        const auto [model, data] = need_model();
        std::vector<double> losses;
        for (const auto& ad : adapters) {
          const auto d = to_f64(adapter_delta_map(ad));
          losses.push_back(dataset_loss(model, data.examples, &d));
        }
        merged = merge_lmcocktail(adapters, losses, spec.temperature);
        break;
      }
      case MergeStrategy::dam: {
        const auto [model, data] = need_model();
        TrainConfig cfg;
        cfg.lr = spec.lr;
        cfg.steps = spec.steps;
        cfg.batch_size = o->batch_size;
        cfg.seed = spec.seed;
        merged = merge_dam(model, adapters, data, cfg);
        break;
      }
    }
    save_merged(*merged, o->out);
    out << to_string(spec.strategy) << " merge of " << adapters.size() << " adapters -> " << o->out
        << (merged->is_factor_form() ? " (factor form)\n" : " (delta form)\n");
    Artifacts arts{o->out};
    if (merged->is_factor_form()) arts.push_back(config_path_for(o->out).string());
    return arts;
  };
}

// ---- calibrate

void setup_calibrate(Command& c) {
  struct Opts {
    std::string model, merged, train, out, task_label;
    std::vector<std::string> adapters;
    std::vector<double> weights;
    std::string variant = "lora", scope = "per_compositional_task", dtype = "f32";
    std::size_t rank = kDefaultCalibRank;
    TrainConfig cfg = TrainConfig::calibration_defaults();
  };
  auto o = std::make_shared<Opts>();
  auto* a = c.app;
  a->add_option("adapters", o->adapters, "Single-task adapters to merge linearly (instead of --merged)");
  a->add_option("--merged", o->merged, "Factor-form linear merge (.safetensors)");
  a->add_option("--weights", o->weights, "Linear-merge weights for positional adapters")->delimiter(',')->allow_extra_args(false);
  a->add_option("--model", o->model, "Toy base model (.safetensors)")->required();
  a->add_option("--train", o->train, "Composed-task training JSONL")->required();
  a->add_option("-o,--out", o->out, "Output calibration (.safetensors)")->required();
  a->add_option("--calib-variant", o->variant, "bias|lora");
  a->add_option("--calib-rank", o->rank, "Calibration LoRA rank s");
  a->add_option("--scope", o->scope, "per_compositional_task|shared_across_tasks");
  a->add_option("--task-label", o->task_label, "Label stored with the calibration");
  a->add_option("--dtype", o->dtype, "Storage dtype: f32|bf16");
  add_train_options(a, o->cfg);
  c.run = [o, &common = c.common](std::ostream& out) {
    if (o->merged.empty() == o->adapters.empty())
      throw ValidationError("calibrate: give either --merged or positional adapters");
    std::optional<MergedAdapter> merged;
    if (!o->merged.empty()) {
      merged = load_merged(o->merged, ModelSpec::toy());
    } else {
      const auto adapters = load_adapters(o->adapters);
      MergeSpec spec;
      spec.weights = o->weights;
      spec.validate(adapters.size());
      merged = merge_linear(adapters, spec.weights_for(adapters.size()));
    }
    if (!merged->is_factor_form()) throw ValidationError("calibrate: calibration sits on a factor-form linear merge");
    safetensors::Dtype dtype;
    if (o->dtype == "f32") dtype = safetensors::Dtype::f32;
    else if (o->dtype == "bf16") dtype = safetensors::Dtype::bf16;
    else throw ValidationError("unknown dtype '" + o->dtype + "'");

    const auto model = load_model(o->model);
    const auto data = load_data(o->train);
    CalibShape shape{parse_calib_variant(o->variant), o->rank, parse_shared_scope(o->scope),
                     o->task_label.empty() ? data.examples.front().task : o->task_label};
    auto cfg = o->cfg;
    cfg.seed = common.seed;
    TrainLog log;
    const auto calib = train_calibration(model, *merged, shape, data, cfg, &log);
    const auto bytes = save_calibration(calib, o->out, dtype);
    out << to_string(calib.variant()) << " calibration, " << stored_scalars(calib) << " parameters, " << bytes
        << " bytes, final step loss " << log.step_losses.back() << '\n';
    return Artifacts{o->out};
  };
}

// ---- eval

void setup_eval(Command& c) {
  struct Opts {
    std::string model, strategy, merged, calib, joint, data, label, out = "-";
    std::vector<std::string> adapters;
    std::vector<std::string> metrics{"exact_match", "rouge_l", "weighted_rouge"};
    std::size_t max_len = 0;
    bool append = false;
  };
  auto o = std::make_shared<Opts>();
  auto* a = c.app;
  a->add_option("--model", o->model, "Toy base model (.safetensors)")->required();
  a->add_option("--strategy", o->strategy,
                "zero_shot|main_lora|aux_lora|merged|calibrated|multi_step|joint_expert")
      ->required();
  a->add_option("--adapters", o->adapters, "Single-task adapters in composition order")->delimiter(',')->allow_extra_args(false);
  a->add_option("--merged", o->merged, "Merged adapter (.safetensors)");
  a->add_option("--calib", o->calib, "Calibration (.safetensors)");
  a->add_option("--joint", o->joint, "Joint-expert adapter (.safetensors)");
  a->add_option("--data", o->data, "Test JSONL")->required();
  a->add_option("--metric", o->metrics, "Metrics to report")->delimiter(',')->allow_extra_args(false);
  a->add_option("--label", o->label, "Strategy label written to the CSV");
  a->add_option("--max-len", o->max_len, "Decode limit per pass (0 = 2 * input length + 2)");
  a->add_option("-o,--out", o->out, "CSV output ('-' = stdout)");
  a->add_flag("--append", o->append, "Append rows to an existing CSV");
  c.run = [o](std::ostream& out) {
    std::vector<Metric> metrics;
    for (const auto& m : o->metrics) metrics.push_back(parse_metric(m));
    const auto kind = parse_eval_kind(o->strategy);
    EvalArtifacts art;
    art.adapters = load_adapters(o->adapters);
    if (!o->merged.empty()) art.merged = load_merged(o->merged, ModelSpec::toy());
    if (!o->calib.empty()) art.calibration = load_calibration(o->calib, ModelSpec::toy());
    if (!o->joint.empty()) art.joint = load_adapter(o->joint, ModelSpec::toy());
    const auto model = load_model(o->model);
    const auto data = load_data(o->data);
    const auto report = evaluate(model, plan_for(kind, art, o->label), data.examples, o->max_len);

    std::ostringstream rows;
    rows.precision(10);
    for (auto m : metrics) {
      rows << csv_field(report.strategy) << ',' << csv_field(report.task) << ',' << to_string(m) << ','
           << report.score(m) << ',' << report.passes_per_example << '\n';
    }
    const std::string header = "strategy,task,metric,score_percent,passes_per_example\n";
    if (o->out == "-") {
      out << header << rows.str();
      return Artifacts{};
    }
    const bool has_content = o->append && fs::exists(o->out) && fs::file_size(o->out) > 0;
    auto f = open_out(o->out, o->append ? std::ios::app : std::ios::out);
    if (!has_content) f << header;
    f << rows.str();
    if (!f) throw IoError("write failure on '" + o->out + "'");
    return Artifacts{o->out};
  };
}

// ---- inspect

void setup_inspect(Command& c) {
  struct Opts {
    std::string merged, calib, out_dir;
    std::size_t bins = kHistogramBins;
  };
  auto o = std::make_shared<Opts>();
  auto* a = c.app;
  a->add_option("--merged", o->merged, "Merged adapter or single adapter (.safetensors)")->required();
  a->add_option("--calib", o->calib, "Calibration to apply on top of the merge");
  a->add_option("--out-dir", o->out_dir, "Directory for stats.csv and histogram.csv")->required();
  a->add_option("--bins", o->bins, "Histogram bins");
  c.run = [o](std::ostream& out) {
    const auto merged = load_merged(o->merged, ModelSpec::toy());
    const auto deltas = o->calib.empty() ? merged.materialize()
                                         : calibrated_deltas(merged, load_calibration(o->calib, ModelSpec::toy()));
    const auto stats = inspect_deltas(deltas, o->bins);
    const fs::path dir = o->out_dir;
    write_stats_csv(stats, dir / "stats.csv");
    write_histogram_csv(stats, dir / "histogram.csv");
    double total = 0.0;
    for (const auto& s : stats) total += s.frobenius * s.frobenius;
    out << stats.size() << " modules, overall Frobenius norm " << std::sqrt(total) << '\n';
    return Artifacts{(dir / "stats.csv").string(), (dir / "histogram.csv").string()};
  };
}

std::string option_key(const CLI::Option* opt) {
  if (!opt->get_lnames().empty()) return opt->get_lnames().front();
  if (!opt->get_snames().empty()) return opt->get_snames().front();
  return opt->get_name();
}

bool mentions(const std::vector<std::string>& args, const std::string& flag) {
  return std::any_of(args.begin(), args.end(),
                     [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
}

std::string config_value(const json& v, const std::string& key) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number()) return v.dump();
  if (v.is_array()) {
    std::string joined;
    for (const auto& x : v) {
      if (!joined.empty()) joined += ',';
      joined += config_value(x, key);
    }
    return joined;
  }
  throw ValidationError("config: unsupported value for '" + key + "'");
}

// Turns a --config JSON object into flag tokens placed before the user's own,
// skipping keys the command line already sets.
std::vector<std::string> expand_config(const std::vector<std::string>& args, CLI::App* sub) {
  std::string path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  json cfg;
  try {
    cfg = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError("config '" + path + "': " + e.what());
  }
  if (!cfg.is_object()) throw ParseError("config '" + path + "': top level must be an object");
  std::vector<std::string> injected;
  for (const auto& [key, value] : cfg.items()) {
    std::string flag = key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    flag = "--" + flag;
    const auto* opt = sub->get_option_no_throw(flag);
    if (opt == nullptr || flag == "--config")
      throw ValidationError("config '" + path + "': unknown option '" + key + "' for " + sub->get_name());
    if (mentions(args, flag) || value.is_null()) continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) injected.push_back(flag);
      continue;
    }
    injected.push_back(flag);
    injected.push_back(config_value(value, key));
  }
  std::vector<std::string> out{args.front()};
  out.insert(out.end(), injected.begin(), injected.end());
  out.insert(out.end(), args.begin() + 1, args.end());
  return out;
}

std::string resolved_config(const CLI::App* sub) {
  json j = json::object();
  for (const auto* opt : sub->get_options()) {
    const auto key = option_key(opt);
    if (key == "help") continue;
    if (opt->count() > 0) {
      const auto& res = opt->results();
      j[key] = res.size() == 1 ? json(res.front()) : json(res);
    } else if (opt->get_default_str() == "{}") {
      j[key] = json::array();
    } else if (!opt->get_default_str().empty()) {
      j[key] = opt->get_default_str();
    }
  }
  return j.dump();
}

}  // namespace

int cmd_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Adapter merging and learnable calibration for compositional tasks", "compomerge"};
  app.set_version_flag("--version", version_string());
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  std::vector<std::unique_ptr<Command>> commands;
  const auto add = [&](const char* name, const char* help, void (*setup)(Command&)) {
    auto c = std::make_unique<Command>();
    c->app = app.add_subcommand(name, help);
    add_common(*c);
    setup(*c);
    commands.push_back(std::move(c));
  };
  add("gen-toy-data", "Generate a composed toy task dataset", setup_gen);
  add("train-lora", "Train a single-task LoRA on the toy model", setup_train_lora);
  add("merge", "Merge adapters", setup_merge);
  add("calibrate", "Train a learnable calibration on a linear merge", setup_calibrate);
  add("eval", "Evaluate a strategy on a test set; CSV output", setup_eval);
  add("inspect", "Norms, spread and histograms of merged or calibrated updates", setup_inspect);

  Command* chosen = nullptr;
  std::vector<std::string> argv = args;
  const auto start = std::chrono::steady_clock::now();
  try {
    if (!argv.empty()) {
      for (auto& c : commands)
        if (c->app->get_name() == argv.front()) chosen = c.get();
      if (chosen) argv = expand_config(argv, chosen->app);
    }
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  }

  try {
    std::reverse(argv.begin(), argv.end());
    app.parse(argv);
  } catch (const CLI::CallForHelp&) {
    out << (chosen ? chosen->app->help() : app.help());
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << version_string() << '\n';
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << (chosen ? chosen->app->help() : app.help());
    return kExitUsage;
  }

  int code = kExitOk;
  Artifacts artifacts;
  try {
    artifacts = chosen->run(out);
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    code = kExitIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    code = kExitValidation;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    code = kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    code = kExitValidation;
  }

  RunManifest m;
  m.command = chosen->app->get_name();
  m.config_json = resolved_config(chosen->app);
  m.seed = chosen->common.seed;
  m.artifacts = artifacts;
  m.version = version_string();
  m.duration_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  m.exit_code = code;
  try {
    append_manifest(m, chosen->common.manifest);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    if (code == kExitOk) code = kExitIo;
  }
  return code;
}

int cmd_dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cmd_dispatch(args, std::cout, std::cerr);
}

}  // namespace compomerge

#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "compomerge/adapter.hpp"

namespace compomerge {

/// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitIo = 2;
inline constexpr int kExitUsage = 64;

/// Runs one subcommand: gen-toy-data, train-lora, merge, calibrate, eval, inspect.
/// `args` excludes the program name.
int cmd_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cmd_dispatch(int argc, char** argv);

/// One line of the append-only run log.
struct RunManifest {
  std::string command;
  std::string config_json;  // resolved options as a JSON object
  std::uint64_t seed = 0;
  std::vector<std::string> artifacts;
  std::string version;
  double duration_s = 0.0;
  int exit_code = 0;

  std::string to_json() const;
};

void append_manifest(const RunManifest& m, const std::filesystem::path& path);

/// git-describe string baked in at build time.
std::string version_string();

inline constexpr std::size_t kHistogramBins = 64;

struct ModuleStats {
  ModuleKey key;
  std::size_t numel = 0;
  double frobenius = 0.0;
  double mean = 0.0;
  double stddev = 0.0;
  double min = 0.0;
  double max = 0.0;
  double range = 0.0;               // histogram spans [-range, range]
  std::vector<std::size_t> histogram;
};

/// Per-module norm, spread and a symmetric value histogram.
std::vector<ModuleStats> inspect_deltas(const std::map<ModuleKey, TensorF32>& deltas,
                                        std::size_t bins = kHistogramBins);

void write_stats_csv(const std::vector<ModuleStats>& stats, const std::filesystem::path& path);
void write_histogram_csv(const std::vector<ModuleStats>& stats, const std::filesystem::path& path);

}  // namespace compomerge

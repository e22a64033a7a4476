#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcads/model.hpp"

namespace mcads {

struct TrainConfig {
  double lr = 1e-4;
  int batch = 8;
  int epochs = 1;
  int max_steps = 0;  // 0: no cap; otherwise stop after this many optimizer steps
  std::uint64_t seed = 0;
  std::string checkpoint_dir = "runs/default";
  int checkpoint_interval = 0;  // epochs between epoch_<n>.mct snapshots; 0 disables
  double val_fraction = 0.2;
  bool augment = true;
  bool recalibrate_bn = true;
};

struct SynthConfig {
  int n = 8;
  int size = 64;
  std::uint64_t seed = 0;
};

struct DataConfig {
  std::string dataset_dir;  // empty: use the synthetic generator
  SynthConfig synth;
  int patch = 256;
  int stride = 128;
};

struct EvalConfig {
  double threshold = 0.5;
  std::string output_dir = "predictions";
  bool write_probabilities = false;
  int summary_size = 256;  // input extent used for MAC estimates
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;
  bool f64 = false;
  int threads = 1;

  DType dtype() const { return f64 ? DType::f64 : DType::f32; }
};

nlohmann::json to_json(const RunConfig& cfg);

// Overlays `j` onto the defaults. Unknown keys and mistyped values throw
// ShapeError naming the offending path.
RunConfig config_from_json(const nlohmann::json& j);

RunConfig load_config(const std::filesystem::path& path);

// "a.b.c=value": value is parsed as JSON when possible, else taken as a
// string. The key must exist.
void apply_override(RunConfig& cfg, const std::string& assignment);

// Applies every assignment in order, then validates once, so coupled values
// (patch and stride) can change together.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& assignments);

// Rejects values outside their domain (non-positive sizes, patch < stride...).
void validate(const RunConfig& cfg);

}  // namespace mcads

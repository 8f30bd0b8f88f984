#pragma once
// Run configuration shared by the CLI subcommands: one JSON document with
// sections data/model/train/augment/mining/stain/detect/eval. Every field is
// optional and defaults are what the struct initializers say; unknown keys
// are rejected with their full path. The resolved document round-trips, so
// the copy echoed into an output directory can be reused as-is.

#include <filesystem>
#include <string>
#include <vector>

#include "mitodet/model.hpp"
#include "mitodet/stain.hpp"
#include "mitodet/synth.hpp"
#include "mitodet/train.hpp"

namespace mitodet {

struct DataConfig {
  SynthSpec synth;
  double split_ratio = 0.75;
  // Negative grid: stride between candidate centers and the minimum distance
  // from any mitotic annotation.
  double min_neg_distance = 25.0;
  int neg_stride = 12;
};

struct MiningConfig {
  std::vector<int64_t> sizes;  // empty -> auto bracketing search
  int seeds = 3;
  double match_radius = 30.0;
  int tile = 512;
  int64_t min_auto_size = 16;
  int64_t hard_count = 0;  // mine-hard: refs to export; 0 = scores only
  double accept_threshold = 0.5;
  double dedup_distance = 12.0;
  int eval_batch = 64;
};

struct DetectConfig {
  int tile = 512;
  double threshold = 0.5;
  double ensemble_radius = 15.0;
  bool dump_maps = false;
};

struct EvalConfig {
  double match_radius = 30.0;
};

struct RunConfig {
  DataConfig data;
  std::string model_preset = "desk";
  ModelConfig model = desk_config();  // preset resolved, overrides applied
  TrainConfig train;
  MiningConfig mining;
  ScreenConfig stain;
  DetectConfig detect;
  EvalConfig eval;

  static RunConfig from_json_text(const std::string& text);
  static RunConfig load(const std::filesystem::path& file);
  std::string to_json_text() const;
  // Writes the resolved document (conventionally resolved_config.json).
  void save(const std::filesystem::path& file) const;
};

}  // namespace mitodet

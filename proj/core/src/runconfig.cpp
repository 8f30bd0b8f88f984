#include "mitodet/runconfig.hpp"

#include <fstream>
#include <initializer_list>
#include <sstream>

#include "json_detail.hpp"
#include "mitodet/augment.hpp"
#include "mitodet/rng.hpp"

namespace mitodet {

namespace {

void check_keys(const json& j, const std::string& path,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw ValidationError("config: '" + path + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok)
      throw ValidationError("config: unknown key '" +
                            (path.empty() ? key : path + "." + key) + "'");
  }
}

template <typename T>
void fetch(const json& j, const std::string& path, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError("config: '" +
                          (path.empty() ? key : path + "." + key) +
                          "' has the wrong type");
  }
}

void parse_data(const json& j, DataConfig& out) {
  check_keys(j, "data", {"synth", "split_ratio", "min_neg_distance", "neg_stride"});
  if (j.contains("synth")) {
    const json& s = j.at("synth");
    check_keys(s, "data.synth",
               {"images", "width", "height", "domains", "positives_per_image",
                "impostors_per_image", "ink_total"});
    fetch(s, "data.synth", "images", out.synth.images);
    fetch(s, "data.synth", "width", out.synth.width);
    fetch(s, "data.synth", "height", out.synth.height);
    fetch(s, "data.synth", "domains", out.synth.domains);
    fetch(s, "data.synth", "positives_per_image", out.synth.positives_per_image);
    fetch(s, "data.synth", "impostors_per_image", out.synth.impostors_per_image);
    fetch(s, "data.synth", "ink_total", out.synth.ink_total);
  }
  fetch(j, "data", "split_ratio", out.split_ratio);
  fetch(j, "data", "min_neg_distance", out.min_neg_distance);
  fetch(j, "data", "neg_stride", out.neg_stride);
}

void parse_model(const json& j, std::string& preset, ModelConfig& out) {
  check_keys(j, "model",
             {"preset", "stem_kernel", "stem_channels", "stages", "bottleneck",
              "head_channels", "receptive_field", "output_stride"});
  fetch(j, "model", "preset", preset);
  if (preset == "desk") {
    out = desk_config();
  } else if (preset == "paper") {
    out = paper_config();
  } else {
    throw ValidationError("config: model.preset must be 'desk' or 'paper', got '" +
                          preset + "'");
  }
  fetch(j, "model", "stem_kernel", out.stem_kernel);
  fetch(j, "model", "stem_channels", out.stem_channels);
  fetch(j, "model", "bottleneck", out.bottleneck);
  fetch(j, "model", "head_channels", out.head_channels);
  if (j.contains("stages")) {
    const json& stages = j.at("stages");
    if (!stages.is_array())
      throw ValidationError("config: 'model.stages' must be an array");
    out.stages.clear();
    int i = 0;
    for (const auto& sj : stages) {
      const std::string path = "model.stages[" + std::to_string(i++) + "]";
      check_keys(sj, path, {"blocks", "channels", "down_kernel", "down_stride"});
      StageConfig sc;
      fetch(sj, path, "blocks", sc.blocks);
      fetch(sj, path, "channels", sc.channels);
      fetch(sj, path, "down_kernel", sc.down_kernel);
      fetch(sj, path, "down_stride", sc.down_stride);
      out.stages.push_back(sc);
    }
  }
  // Any structural override shifts the chain, so refresh the declared
  // geometry unless the user pinned it explicitly.
  if (!j.contains("receptive_field") && !j.contains("output_stride")) {
    const auto [rf, stride] = receptive_field(layer_chain(out));
    out.receptive_field = rf;
    out.output_stride = stride;
  }
  fetch(j, "model", "receptive_field", out.receptive_field);
  fetch(j, "model", "output_stride", out.output_stride);
  out.validate();
}

void parse_train(const json& j, TrainConfig& out) {
  check_keys(j, "train",
             {"lr_max", "momentum", "weight_decay", "batch", "cycle",
              "max_iters", "seed", "policy", "eval_every", "patch_margin",
              "eval_batch"});
  fetch(j, "train", "lr_max", out.lr_max);
  fetch(j, "train", "momentum", out.momentum);
  fetch(j, "train", "weight_decay", out.weight_decay);
  fetch(j, "train", "batch", out.batch);
  fetch(j, "train", "cycle", out.cycle);
  fetch(j, "train", "max_iters", out.max_iters);
  fetch(j, "train", "seed", out.seed);
  fetch(j, "train", "policy", out.policy);
  fetch(j, "train", "eval_every", out.eval_every);
  fetch(j, "train", "patch_margin", out.patch_margin);
  fetch(j, "train", "eval_batch", out.eval_batch);
}

void parse_mining(const json& j, MiningConfig& out) {
  check_keys(j, "mining",
             {"sizes", "seeds", "match_radius", "tile", "min_auto_size",
              "hard_count", "accept_threshold", "dedup_distance", "eval_batch"});
  fetch(j, "mining", "sizes", out.sizes);
  fetch(j, "mining", "seeds", out.seeds);
  fetch(j, "mining", "match_radius", out.match_radius);
  fetch(j, "mining", "tile", out.tile);
  fetch(j, "mining", "min_auto_size", out.min_auto_size);
  fetch(j, "mining", "hard_count", out.hard_count);
  fetch(j, "mining", "accept_threshold", out.accept_threshold);
  fetch(j, "mining", "dedup_distance", out.dedup_distance);
  fetch(j, "mining", "eval_batch", out.eval_batch);
}

void parse_stain(const json& j, ScreenConfig& out) {
  check_keys(j, "stain",
             {"beta", "alpha_pct", "window", "density_threshold",
              "max_per_image", "min_separation", "od_norm_cap"});
  fetch(j, "stain", "beta", out.beta);
  fetch(j, "stain", "alpha_pct", out.alpha_pct);
  fetch(j, "stain", "window", out.window);
  fetch(j, "stain", "density_threshold", out.density_threshold);
  fetch(j, "stain", "max_per_image", out.max_per_image);
  fetch(j, "stain", "min_separation", out.min_separation);
  fetch(j, "stain", "od_norm_cap", out.od_norm_cap);
}

void parse_detect(const json& j, DetectConfig& out) {
  check_keys(j, "detect", {"tile", "threshold", "ensemble_radius", "dump_maps"});
  fetch(j, "detect", "tile", out.tile);
  fetch(j, "detect", "threshold", out.threshold);
  fetch(j, "detect", "ensemble_radius", out.ensemble_radius);
  fetch(j, "detect", "dump_maps", out.dump_maps);
}

}  // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  check_keys(j, "", {"data", "model", "train", "augment", "mining", "stain",
                     "detect", "eval"});
  RunConfig cfg;
  if (j.contains("data")) parse_data(j.at("data"), cfg.data);
  if (j.contains("model")) parse_model(j.at("model"), cfg.model_preset, cfg.model);
  if (j.contains("train")) parse_train(j.at("train"), cfg.train);
  if (j.contains("augment")) {
    check_keys(j.at("augment"), "augment", {"policy"});
    std::string policy = cfg.train.policy;
    fetch(j.at("augment"), "augment", "policy", policy);
    cfg.train.policy = policy;
  }
  if (j.contains("mining")) parse_mining(j.at("mining"), cfg.mining);
  if (j.contains("stain")) parse_stain(j.at("stain"), cfg.stain);
  if (j.contains("detect")) parse_detect(j.at("detect"), cfg.detect);
  if (j.contains("eval")) {
    check_keys(j.at("eval"), "eval", {"match_radius"});
    fetch(j.at("eval"), "eval", "match_radius", cfg.eval.match_radius);
  }
  cfg.data.synth.validate();
  cfg.train.validate();
  if (cfg.train.policy != "none") policy_by_name(cfg.train.policy);
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read config " + file.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_json_text(buf.str());
}

std::string RunConfig::to_json_text() const {
  json stages = json::array();
  for (const auto& s : model.stages)
    stages.push_back(json{{"blocks", s.blocks},
                          {"channels", s.channels},
                          {"down_kernel", s.down_kernel},
                          {"down_stride", s.down_stride}});
  json j{
      {"data",
       {{"synth",
         {{"images", data.synth.images},
          {"width", data.synth.width},
          {"height", data.synth.height},
          {"domains", data.synth.domains},
          {"positives_per_image", data.synth.positives_per_image},
          {"impostors_per_image", data.synth.impostors_per_image},
          {"ink_total", data.synth.ink_total}}},
        {"split_ratio", data.split_ratio},
        {"min_neg_distance", data.min_neg_distance},
        {"neg_stride", data.neg_stride}}},
      {"model",
       {{"preset", model_preset},
        {"stem_kernel", model.stem_kernel},
        {"stem_channels", model.stem_channels},
        {"stages", stages},
        {"bottleneck", model.bottleneck},
        {"head_channels", model.head_channels},
        {"receptive_field", model.receptive_field},
        {"output_stride", model.output_stride}}},
      {"train",
       {{"lr_max", train.lr_max},
        {"momentum", train.momentum},
        {"weight_decay", train.weight_decay},
        {"batch", train.batch},
        {"cycle", train.cycle},
        {"max_iters", train.max_iters},
        {"seed", train.seed},
        {"policy", train.policy},
        {"eval_every", train.eval_every},
        {"patch_margin", train.patch_margin},
        {"eval_batch", train.eval_batch}}},
      {"augment", {{"policy", train.policy}}},
      {"mining",
       {{"sizes", mining.sizes},
        {"seeds", mining.seeds},
        {"match_radius", mining.match_radius},
        {"tile", mining.tile},
        {"min_auto_size", mining.min_auto_size},
        {"hard_count", mining.hard_count},
        {"accept_threshold", mining.accept_threshold},
        {"dedup_distance", mining.dedup_distance},
        {"eval_batch", mining.eval_batch}}},
      {"stain",
       {{"beta", stain.beta},
        {"alpha_pct", stain.alpha_pct},
        {"window", stain.window},
        {"density_threshold", stain.density_threshold},
        {"max_per_image", stain.max_per_image},
        {"min_separation", stain.min_separation},
        {"od_norm_cap", stain.od_norm_cap}}},
      {"detect",
       {{"tile", detect.tile},
        {"threshold", detect.threshold},
        {"ensemble_radius", detect.ensemble_radius},
        {"dump_maps", detect.dump_maps}}},
      {"eval", {{"match_radius", eval.match_radius}}}};
  return j.dump(2) + "\n";
}

void RunConfig::save(const std::filesystem::path& file) const {
  std::ofstream out(file);
  if (!out) throw IoError("cannot write " + file.string());
  out << to_json_text();
  if (!out) throw IoError("short write on " + file.string());
}

}  // namespace mitodet

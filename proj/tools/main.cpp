// mitodet: mitosis-detection pipeline driver. Subcommands mirror the staged
// workflow: synthesize data, split, train, mine hard negatives, search the
// subset-size regime, screen stains for extra negatives, run dense inference,
// calibrate the detection threshold, ensemble two detectors, evaluate.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mitodet/dataset.hpp"
#include "mitodet/detect.hpp"
#include "mitodet/manifest.hpp"
#include "mitodet/metrics.hpp"
#include "mitodet/mining.hpp"
#include "mitodet/model.hpp"
#include "mitodet/rng.hpp"
#include "mitodet/runconfig.hpp"
#include "mitodet/stain.hpp"
#include "mitodet/synth.hpp"
#include "mitodet/train.hpp"
#include "mitodet/weights_io.hpp"

namespace fs = std::filesystem;
using namespace mitodet;

namespace {

struct Common {
  std::string config;
  std::string out;
  uint64_t seed = 0;
  bool seed_set = false;
  int threads = 1;
  bool deterministic = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "run config JSON");
  cmd->add_option("--out", c.out, "output directory")->required();
  cmd->add_option("--seed", c.seed, "override train.seed")
      ->each([&c](const std::string&) { c.seed_set = true; });
  cmd->add_option("--threads", c.threads, "worker threads (numerics are serial)");
  cmd->add_flag("--deterministic", c.deterministic,
                "force single-threaded numerics");
}

// Loads the config, applies the seed override and echoes the resolved
// document into the output directory.
RunConfig setup(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : RunConfig::load(c.config);
  if (c.seed_set) cfg.train.seed = c.seed;
  fs::create_directories(c.out);
  cfg.save(fs::path(c.out) / "resolved_config.json");
  return cfg;
}

std::vector<ImageRecord> records_for_split(const std::vector<ImageRecord>& all,
                                           const SplitManifest& split,
                                           const std::string& subset) {
  if (subset == "train") return select_records(all, split.train_ids);
  if (subset == "val") return select_records(all, split.val_ids);
  throw ValidationError("unknown subset '" + subset + "', expected train|val|all");
}

void write_refs(const fs::path& file, const std::vector<PatchRef>& refs) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : refs)
    arr.push_back(nlohmann::json{
        {"image_id", r.image_id}, {"cx", r.cx}, {"cy", r.cy}});
  std::ofstream out(file);
  if (!out) throw IoError("cannot write " + file.string());
  out << nlohmann::json{{"patches", arr}}.dump(2) << "\n";
}

std::vector<PatchRef> read_refs(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read " + file.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(file.string() + ": " + e.what());
  }
  std::vector<PatchRef> refs;
  try {
    for (const auto& pj : j.at("patches")) {
      PatchRef r;
      r.image_id = pj.at("image_id").get<std::string>();
      r.cx = pj.at("cx").get<int>();
      r.cy = pj.at("cy").get<int>();
      r.label = PatchLabel::Negative;
      refs.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(file.string() + ": " + e.what());
  }
  return refs;
}

struct SplitInputs {
  std::vector<ImageRecord> all;
  std::vector<ImageRecord> train;
  std::vector<ImageRecord> val;
};

SplitInputs load_split_inputs(const std::string& manifest_path,
                              const std::string& split_path) {
  SplitInputs si;
  si.all = load_manifest(manifest_path);
  const SplitManifest split = load_split(split_path);
  si.train = select_records(si.all, split.train_ids);
  si.val = select_records(si.all, split.val_ids);
  return si;
}

int cmd_synth(const Common& c) {
  const RunConfig cfg = setup(c);
  const auto records = generate_synthetic_dataset(
      cfg.data.synth, cfg.train.seed, (fs::path(c.out) / "data").string());
  int positives = 0;
  for (const auto& r : records) positives += r.mitosis_count();
  std::printf("synth: %zu images, %d mitotic annotations -> %s\n",
              records.size(), positives,
              (fs::path(c.out) / "data" / "manifest.json").c_str());
  return 0;
}

int cmd_split(const Common& c, const std::string& manifest_path) {
  const RunConfig cfg = setup(c);
  const auto records = load_manifest(manifest_path);
  const SplitManifest split =
      stratified_split(records, cfg.data.split_ratio, cfg.train.seed);
  save_split(split, (fs::path(c.out) / "split.json").string());
  std::printf("split: %zu train / %zu val images -> %s\n",
              split.train_ids.size(), split.val_ids.size(),
              (fs::path(c.out) / "split.json").c_str());
  return 0;
}

int cmd_train(const Common& c, const std::string& manifest_path,
              const std::string& split_path, const std::string& negatives_path,
              const std::string& extra_negatives_path) {
  const RunConfig cfg = setup(c);
  const SplitInputs si = load_split_inputs(manifest_path, split_path);
  const ImageStore store = ImageStore::load(si.all);
  PatchSets sets =
      default_patch_sets(si.train, si.val, cfg.data.min_neg_distance,
                         cfg.data.neg_stride, cfg.train.seed);
  if (!negatives_path.empty()) sets.train_neg = read_refs(negatives_path);
  if (!extra_negatives_path.empty()) {
    const auto extra = read_refs(extra_negatives_path);
    sets.train_neg.insert(sets.train_neg.end(), extra.begin(), extra.end());
  }
  std::printf("train: %zu pos / %zu neg patches, val %zu pos / %zu neg\n",
              sets.train_pos.size(), sets.train_neg.size(),
              sets.val_pos.size(), sets.val_neg.size());
  const TrainOutcome outcome =
      train_model(store, sets, cfg.model, cfg.train, c.out);
  if (outcome.diverged) {
    std::fprintf(stderr,
                 "train: diverged at iteration %lld; best checkpoint kept "
                 "(iteration %lld)\n",
                 (long long)outcome.stopped_iter, (long long)outcome.best_iter);
  }
  std::printf("train: best val loss %.6f at iteration %lld -> %s\n",
              outcome.best_val_loss, (long long)outcome.best_iter,
              (fs::path(c.out) / "best.gnet").c_str());
  return 0;
}

int cmd_mine_hard(const Common& c, const std::string& manifest_path,
                  const std::string& split_path, const std::string& weights) {
  const RunConfig cfg = setup(c);
  const SplitInputs si = load_split_inputs(manifest_path, split_path);
  const ImageStore store = ImageStore::load(si.all);
  const PatchSets sets =
      default_patch_sets(si.train, si.val, cfg.data.min_neg_distance,
                         cfg.data.neg_stride, cfg.train.seed);
  Model model = load_weights(weights);
  const auto scored =
      score_negatives(model, sets.train_neg, store, cfg.mining.eval_batch);

  const fs::path scored_csv = fs::path(c.out) / "scored.csv";
  FILE* f = std::fopen(scored_csv.string().c_str(), "w");
  if (!f) throw IoError("cannot write " + scored_csv.string());
  std::fprintf(f, "image_id,cx,cy,score\n");
  for (const auto& s : scored)
    std::fprintf(f, "%s,%d,%d,%.6f\n", s.ref.image_id.c_str(), s.ref.cx,
                 s.ref.cy, s.score);
  std::fclose(f);
  std::printf("mine-hard: scored %zu negatives -> %s\n", scored.size(),
              scored_csv.c_str());

  if (cfg.mining.hard_count > 0) {
    const auto hard = select_hard(scored, cfg.mining.hard_count);
    const fs::path hard_json = fs::path(c.out) / "hard_negatives.json";
    write_refs(hard_json, hard);
    std::printf("mine-hard: kept top %lld -> %s\n",
                (long long)cfg.mining.hard_count, hard_json.c_str());
  }
  return 0;
}

int cmd_regime_search(const Common& c, const std::string& manifest_path,
                      const std::string& split_path,
                      const std::string& weights) {
  const RunConfig cfg = setup(c);
  const SplitInputs si = load_split_inputs(manifest_path, split_path);
  const ImageStore store = ImageStore::load(si.all);
  const PatchSets sets =
      default_patch_sets(si.train, si.val, cfg.data.min_neg_distance,
                         cfg.data.neg_stride, cfg.train.seed);
  Model base = load_weights(weights);
  RegimeConfig rcfg;
  rcfg.sizes = cfg.mining.sizes;
  rcfg.seeds = cfg.mining.seeds;
  rcfg.match_radius = cfg.mining.match_radius;
  rcfg.tile = cfg.mining.tile;
  rcfg.min_auto_size = cfg.mining.min_auto_size;
  const RegimeReport report =
      regime_search(base, store, sets, si.val, cfg.model, cfg.train, rcfg);

  std::ofstream js(fs::path(c.out) / "regime.json");
  js << report.to_json_text();
  std::ofstream cs(fs::path(c.out) / "regime.csv");
  cs << report.to_csv();
  for (const auto& cell : report.cells)
    std::printf("regime: size %-8lld %-7s AP %.4f +- %.4f\n",
                (long long)cell.size, cell.method.c_str(), cell.ap_mean,
                cell.ap_std);
  std::printf("regime: baseline (all %lld negatives) AP %.4f\n",
              (long long)report.negatives_total, report.baseline_mean);
  return 0;
}

int cmd_stain_screen(const Common& c, const std::string& manifest_path,
                     const std::string& split_path,
                     const std::string& weights) {
  const RunConfig cfg = setup(c);
  const SplitInputs si = load_split_inputs(manifest_path, split_path);
  auto candidates = screen_candidates(si.train, cfg.stain);

  std::vector<ScoredNegative> scored;
  if (!weights.empty()) {
    Model model = load_weights(weights);
    const ImageStore store = ImageStore::load(si.train);
    const auto refs = to_patch_refs(candidates);
    scored = score_negatives(model, refs, store, cfg.mining.eval_batch);
    for (size_t i = 0; i < candidates.size(); ++i)
      candidates[i].model_score = scored[i].score;
  }

  const fs::path csv = fs::path(c.out) / "screened.csv";
  FILE* f = std::fopen(csv.string().c_str(), "w");
  if (!f) throw IoError("cannot write " + csv.string());
  std::fprintf(f, "image_id,cx,cy,density,model_score\n");
  for (const auto& cand : candidates)
    std::fprintf(f, "%s,%d,%d,%.6f,%.6f\n", cand.image_id.c_str(), cand.cx,
                 cand.cy, cand.density,
                 weights.empty() ? -1.0 : cand.model_score);
  std::fclose(f);
  std::printf("stain-screen: %zu candidates -> %s\n", candidates.size(),
              csv.c_str());

  if (!weights.empty()) {
    const PatchSets sets =
        default_patch_sets(si.train, si.val, cfg.data.min_neg_distance,
                           cfg.data.neg_stride, cfg.train.seed);
    const auto enriched =
        merge_screened(sets.train_neg, scored, cfg.mining.accept_threshold,
                       cfg.mining.dedup_distance);
    const fs::path out_json = fs::path(c.out) / "enriched_negatives.json";
    write_refs(out_json, enriched);
    std::printf("stain-screen: negatives %zu -> %zu after enrichment -> %s\n",
                sets.train_neg.size(), enriched.size(), out_json.c_str());
  }
  return 0;
}

int cmd_infer(const Common& c, const std::string& manifest_path,
              const std::string& split_path, const std::string& subset,
              const std::string& weights) {
  const RunConfig cfg = setup(c);
  std::vector<ImageRecord> records = load_manifest(manifest_path);
  if (subset != "all") {
    if (split_path.empty())
      throw ValidationError("--subset " + subset + " requires --split");
    records = records_for_split(records, load_split(split_path), subset);
  }
  Model model = load_weights(weights);
  std::vector<DetectionSet> sets;
  for (const auto& rec : records) {
    const ImageU8 img = read_png(rec.file);
    const PredictionMap map = dense_forward(model, img, rec.id, cfg.detect.tile);
    if (cfg.detect.dump_maps) {
      fs::create_directories(fs::path(c.out) / "maps");
      write_prediction_map(fs::path(c.out) / "maps" / (rec.id + ".f32"), map);
    }
    sets.push_back(local_maxima(map, cfg.detect.threshold));
  }
  const fs::path csv = fs::path(c.out) / "detections.csv";
  write_detections_csv(csv, sets);
  size_t total = 0;
  for (const auto& s : sets) total += s.detections.size();
  std::printf("infer: %zu detections over %zu images (threshold %.3f) -> %s\n",
              total, sets.size(), cfg.detect.threshold, csv.c_str());
  return 0;
}

int cmd_calibrate(const Common& c, const std::string& manifest_path,
                  const std::string& split_path, const std::string& weights) {
  const RunConfig cfg = setup(c);
  const SplitInputs si = load_split_inputs(manifest_path, split_path);
  Model model = load_weights(weights);
  const double t = calibrate_threshold(model, si.val, cfg.eval.match_radius,
                                       cfg.detect.tile);
  std::ofstream js(fs::path(c.out) / "threshold.json");
  js << nlohmann::json{{"threshold", t},
                       {"match_radius", cfg.eval.match_radius}}
            .dump(2)
     << "\n";
  std::printf("calibrate: threshold %.6f -> %s\n", t,
              (fs::path(c.out) / "threshold.json").c_str());
  return 0;
}

int cmd_ensemble(const Common& c, const std::string& a_path,
                 const std::string& b_path) {
  const RunConfig cfg = setup(c);
  const auto a_sets = read_detections_csv(a_path);
  const auto b_sets = read_detections_csv(b_path);
  std::map<std::string, const DetectionSet*> b_by_id;
  for (const auto& s : b_sets) b_by_id[s.image_id] = &s;
  std::set<std::string> seen;
  std::vector<DetectionSet> merged;
  for (const auto& a : a_sets) {
    seen.insert(a.image_id);
    DetectionSet empty;
    empty.image_id = a.image_id;
    const auto it = b_by_id.find(a.image_id);
    merged.push_back(ensemble_agreement(
        a, it == b_by_id.end() ? empty : *it->second, cfg.detect.ensemble_radius));
  }
  for (const auto& b : b_sets) {
    if (seen.count(b.image_id)) continue;
    DetectionSet empty;
    empty.image_id = b.image_id;
    merged.push_back(ensemble_agreement(empty, b, cfg.detect.ensemble_radius));
  }
  const fs::path csv = fs::path(c.out) / "detections.csv";
  write_detections_csv(csv, merged);
  size_t total = 0;
  for (const auto& s : merged) total += s.detections.size();
  std::printf("ensemble: %zu agreed detections -> %s\n", total, csv.c_str());
  return 0;
}

int cmd_evaluate(const Common& c, const std::string& manifest_path,
                 const std::string& detections_path) {
  const RunConfig cfg = setup(c);
  const auto records = load_manifest(manifest_path);
  const auto sets = read_detections_csv(detections_path);
  std::map<std::string, const DetectionSet*> by_id;
  for (const auto& s : sets) by_id[s.image_id] = &s;
  for (const auto& s : sets) {
    bool known = false;
    for (const auto& rec : records) known = known || rec.id == s.image_id;
    if (!known)
      throw ValidationError("evaluate: detections reference unknown image '" +
                            s.image_id + "'");
  }

  const auto gts = ground_truth(records);
  std::vector<ImageCounts> counts;
  std::vector<DetectionSet> all_sets;
  for (size_t i = 0; i < records.size(); ++i) {
    DetectionSet empty;
    empty.image_id = records[i].id;
    const auto it = by_id.find(records[i].id);
    const DetectionSet& dets = it == by_id.end() ? empty : *it->second;
    const MatchResult m =
        match_detections(dets, gts[i].points, cfg.eval.match_radius);
    counts.push_back({records[i].id, m.tp, m.fp, m.fn});
    all_sets.push_back(dets);
  }
  const auto rows = per_domain_report(counts, records);
  write_report_csv(fs::path(c.out) / "report.csv", rows);
  const PRCurve curve = average_precision(all_sets, gts, cfg.eval.match_radius);
  write_pr_csv(fs::path(c.out) / "pr.csv", curve);

  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_json.push_back(nlohmann::json{{"domain", r.domain},
                                       {"tp", r.tp},
                                       {"fp", r.fp},
                                       {"fn", r.fn},
                                       {"f1", r.f1}});
    std::printf("evaluate: %-10s tp %-5lld fp %-5lld fn %-5lld f1 %.4f\n",
                r.domain.c_str(), (long long)r.tp, (long long)r.fp,
                (long long)r.fn, r.f1);
  }
  std::printf("evaluate: AP %.4f\n", curve.ap);
  std::ofstream js(fs::path(c.out) / "report.json");
  js << nlohmann::json{{"rows", rows_json}, {"ap", curve.ap}}.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mitosis detection pipeline"};
  app.require_subcommand(1);

  Common common;
  std::string manifest_path, split_path, weights_path;
  std::string negatives_path, extra_negatives_path;
  std::string a_path, b_path, detections_path;
  std::string subset = "all";

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_common(synth, common);

  CLI::App* split = app.add_subcommand("split", "stratified train/val split");
  add_common(split, common);
  split->add_option("--manifest", manifest_path)->required();

  CLI::App* train = app.add_subcommand("train", "train a detector");
  add_common(train, common);
  train->add_option("--manifest", manifest_path)->required();
  train->add_option("--split", split_path)->required();
  train->add_option("--negatives", negatives_path,
                    "replace the negative patch set (refs JSON)");
  train->add_option("--extra-negatives", extra_negatives_path,
                    "append extra negatives (refs JSON)");

  CLI::App* mine = app.add_subcommand("mine-hard", "score and rank negatives");
  add_common(mine, common);
  mine->add_option("--manifest", manifest_path)->required();
  mine->add_option("--split", split_path)->required();
  mine->add_option("--weights", weights_path)->required();

  CLI::App* regime =
      app.add_subcommand("regime-search", "subset-size regime search");
  add_common(regime, common);
  regime->add_option("--manifest", manifest_path)->required();
  regime->add_option("--split", split_path)->required();
  regime->add_option("--weights", weights_path)->required();

  CLI::App* screen =
      app.add_subcommand("stain-screen", "stain-unmixing negative enrichment");
  add_common(screen, common);
  screen->add_option("--manifest", manifest_path)->required();
  screen->add_option("--split", split_path)->required();
  screen->add_option("--weights", weights_path,
                     "score candidates and emit enriched negatives");

  CLI::App* infer = app.add_subcommand("infer", "dense inference + detections");
  add_common(infer, common);
  infer->add_option("--manifest", manifest_path)->required();
  infer->add_option("--split", split_path);
  infer->add_option("--subset", subset, "train|val|all (default all)");
  infer->add_option("--weights", weights_path)->required();

  CLI::App* calibrate =
      app.add_subcommand("calibrate", "pick the F1-optimal threshold");
  add_common(calibrate, common);
  calibrate->add_option("--manifest", manifest_path)->required();
  calibrate->add_option("--split", split_path)->required();
  calibrate->add_option("--weights", weights_path)->required();

  CLI::App* ensemble =
      app.add_subcommand("ensemble", "agreement of two detection sets");
  add_common(ensemble, common);
  ensemble->add_option("--a", a_path, "detections CSV")->required();
  ensemble->add_option("--b", b_path, "detections CSV")->required();

  CLI::App* evaluate = app.add_subcommand("evaluate", "F1/AP report");
  add_common(evaluate, common);
  evaluate->add_option("--manifest", manifest_path)->required();
  evaluate->add_option("--detections", detections_path)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(common);
    if (split->parsed()) return cmd_split(common, manifest_path);
    if (train->parsed())
      return cmd_train(common, manifest_path, split_path, negatives_path,
                       extra_negatives_path);
    if (mine->parsed())
      return cmd_mine_hard(common, manifest_path, split_path, weights_path);
    if (regime->parsed())
      return cmd_regime_search(common, manifest_path, split_path, weights_path);
    if (screen->parsed())
      return cmd_stain_screen(common, manifest_path, split_path, weights_path);
    if (infer->parsed())
      return cmd_infer(common, manifest_path, split_path, subset, weights_path);
    if (calibrate->parsed())
      return cmd_calibrate(common, manifest_path, split_path, weights_path);
    if (ensemble->parsed()) return cmd_ensemble(common, a_path, b_path);
    if (evaluate->parsed())
      return cmd_evaluate(common, manifest_path, detections_path);
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fatal: %s\n", e.what());
    return 2;
  }
  return 0;
}

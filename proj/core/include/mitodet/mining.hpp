#pragma once
// Hard-negative scoring, ranking and selection, the subset-size regime
// search over random vs hard-negative sampling, and merging of screened
// candidates into the training negatives.

#include <string>
#include <vector>

#include "mitodet/dataset.hpp"
#include "mitodet/manifest.hpp"
#include "mitodet/model.hpp"
#include "mitodet/train.hpp"

namespace mitodet {

struct ScoredNegative {
  PatchRef ref;
  float score = 0.0f;  // softmax mitosis probability
};

// One score per ref in input order, eval-mode batch norm, no augmentation.
std::vector<ScoredNegative> score_negatives(Model& model,
                                            const std::vector<PatchRef>& negatives,
                                            const ImageStore& store,
                                            int eval_batch = 64);

// The k highest-scoring refs; ties broken by (image_id, cy, cx) so selections
// nest monotonically in k.
std::vector<PatchRef> select_hard(const std::vector<ScoredNegative>& scored,
                                  int64_t k);

// Screened refs scoring >= accept_threshold are appended unless an existing
// ref on the same image lies within dedup_distance px; originals are never
// touched.
std::vector<PatchRef> merge_screened(const std::vector<PatchRef>& negatives,
                                     const std::vector<ScoredNegative>& screened,
                                     double accept_threshold,
                                     double dedup_distance = 12.0);

struct RegimeCell {
  int64_t size = 0;
  std::string method;  // "random" | "hnm"
  std::vector<int> seeds;
  std::vector<double> ap;
  double ap_mean = 0.0;
  double ap_std = 0.0;
};

struct RegimeReport {
  std::vector<RegimeCell> cells;  // sorted by (size, method)
  std::vector<double> baseline_ap;  // all-negatives trainings, one per seed
  double baseline_mean = 0.0;
  int64_t negatives_total = 0;

  std::string to_json_text() const;
  static RegimeReport from_json_text(const std::string& text);
  // size,method,seed,ap rows, baseline as method "baseline".
  std::string to_csv() const;
};

struct RegimeConfig {
  std::vector<int64_t> sizes;  // empty -> auto bracketing search
  int seeds = 3;
  double match_radius = 30.0;
  int tile = 512;
  // Auto mode: geometric grid |neg|, |neg|/2, ... down to this floor, then
  // two bisection refinements around the best hnm size.
  int64_t min_auto_size = 16;
};

// Scores all negatives with the base model, then for each (size, method,
// seed) trains a fresh model on all positives plus the subset and measures
// detection AP on the validation records. Divergent sub-trainings are
// reported on stderr and their seed skipped.
RegimeReport regime_search(Model& base, const ImageStore& store,
                           const PatchSets& sets,
                           const std::vector<ImageRecord>& val_records,
                           const ModelConfig& mcfg, const TrainConfig& tcfg,
                           const RegimeConfig& rcfg);

}  // namespace mitodet

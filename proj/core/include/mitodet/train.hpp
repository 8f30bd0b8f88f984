#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mitodet/dataset.hpp"
#include "mitodet/manifest.hpp"
#include "mitodet/model.hpp"

namespace mitodet {

struct TrainConfig {
  double lr_max = 0.03;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch = 128;
  int64_t cycle = 10000;       // warm-restart period, iterations
  int64_t max_iters = 150000;
  uint64_t seed = 1;
  std::string policy = "A";    // augmentation preset; "none" disables
  int64_t eval_every = 100;
  int patch_margin = 12;       // extraction headroom for shift augmentation
  int eval_batch = 64;

  void validate() const;
  std::string to_json_text() const;
  static TrainConfig from_json_text(const std::string& text);
};

// Desk-scale override of the published schedule: same optimizer shape,
// minutes instead of days.
TrainConfig desk_train_config();

// Cosine schedule with warm restarts, lr_min = 0:
// lr(t) = lr_max/2 * (1 + cos(pi * (t mod cycle) / cycle)).
double lr_at(int64_t iter, const TrainConfig& cfg);

// batch/2 positives and batch/2 negatives, uniform with replacement, so the
// smaller class is oversampled. Positives fill the first half.
std::vector<PatchRef> balanced_sampler(const std::vector<PatchRef>& pos,
                                       const std::vector<PatchRef>& neg,
                                       int batch, Rng& rng);

// Mean 2-class cross-entropy over logits [n][1][2][1][1] with labels in
// {0, 1}; dlogits holds d(mean loss)/d(logit).
struct LossResult {
  double loss = 0.0;
  GTensor dlogits;
};
LossResult softmax_cross_entropy(const GTensor& logits,
                                 const std::vector<int>& labels);

// Momentum SGD over the model's trainable parameters:
// v <- momentum*v - lr*(g + weight_decay*w); w <- w + v. Weight decay is
// skipped where ParamRef::decay is false (batch-norm shift/scale). Throws
// ValidationError naming the tensor on a non-finite gradient.
struct SgdState {
  std::vector<std::vector<float>> velocity;  // aligned with trainable params
};
void sgd_step(Model& model, SgdState& state, double lr,
              const TrainConfig& cfg);

// In-memory image table for patch extraction by reference.
class ImageStore {
 public:
  static ImageStore load(const std::vector<ImageRecord>& records);
  void insert(const std::string& id, ImageU8 img);
  const ImageU8& image(const std::string& id) const;
  ImageU8 patch(const PatchRef& ref, int size, int margin) const;

 private:
  std::map<std::string, ImageU8> images_;
};

// Patch reference sets feeding one training run.
struct PatchSets {
  std::vector<PatchRef> train_pos;
  std::vector<PatchRef> train_neg;
  std::vector<PatchRef> val_pos;
  std::vector<PatchRef> val_neg;
};

// All training positives/negatives plus the fixed validation-loss set: every
// validation positive and an equal-count seeded random negative sample.
PatchSets default_patch_sets(const std::vector<ImageRecord>& train_recs,
                             const std::vector<ImageRecord>& val_recs,
                             double min_dist, int neg_stride, uint64_t seed);

struct TrainOutcome {
  Model model;  // best-validation weights
  int64_t best_iter = -1;
  double best_val_loss = 0.0;
  int64_t stopped_iter = 0;
  bool diverged = false;
  std::string log_csv;  // iter, lr, train_loss, val_loss
};

// Runs the loop; when out_dir is non-empty writes metrics.csv, best.gnet and
// best.json (iteration, validation loss, config fingerprint, rng state)
// there. Single-threaded and bit-deterministic for a fixed seed.
TrainOutcome train_model(const ImageStore& store, const PatchSets& sets,
                         const ModelConfig& mcfg, const TrainConfig& tcfg,
                         const std::filesystem::path& out_dir = {});

// Mean validation loss of a model over a fixed set, eval-mode batch norm.
double validation_loss(Model& model, const ImageStore& store,
                       const std::vector<PatchRef>& pos,
                       const std::vector<PatchRef>& neg, int eval_batch);

}  // namespace mitodet

#include "mitodet/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "json_detail.hpp"
#include "mitodet/augment.hpp"
#include "mitodet/weights_io.hpp"

namespace mitodet {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Rng stream ids: 0 init, 1 batch sampler, 16+ one per training patch.
constexpr uint64_t kStreamInit = 0;
constexpr uint64_t kStreamSampler = 1;
constexpr uint64_t kStreamValNeg = 0x56414c4e45ull;
constexpr uint64_t kStreamPatchBase = 16;

std::vector<std::vector<float>> snapshot_params(const Model& m) {
  std::vector<std::vector<float>> s;
  s.reserve(m.params().size());
  for (const auto& p : m.params()) s.push_back(*p.value);
  return s;
}

void restore_params(Model& m, const std::vector<std::vector<float>>& s) {
  auto& params = m.params();
  for (size_t i = 0; i < params.size(); ++i) *params[i].value = s[i];
}

void append_row(std::string& csv, int64_t iter, double lr, double train_loss,
                double val_loss) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%lld,%.8f,%.8f,%.8f\n",
                static_cast<long long>(iter), lr, train_loss, val_loss);
  csv += buf;
}

}  // namespace

void TrainConfig::validate() const {
  if (lr_max <= 0.0) throw ValidationError("train config: lr_max must be > 0");
  if (momentum < 0.0 || momentum >= 1.0)
    throw ValidationError("train config: momentum must lie in [0, 1)");
  if (weight_decay < 0.0)
    throw ValidationError("train config: weight_decay must be >= 0");
  if (batch < 2 || batch % 2 != 0)
    throw ValidationError("train config: batch must be even and >= 2");
  if (cycle < 1) throw ValidationError("train config: cycle must be >= 1");
  if (max_iters < 0)
    throw ValidationError("train config: max_iters must be >= 0");
  if (max_iters > 0 && cycle > max_iters)
    throw ValidationError("train config: cycle must not exceed max_iters");
  if (eval_every < 1)
    throw ValidationError("train config: eval_every must be >= 1");
  if (eval_batch < 1)
    throw ValidationError("train config: eval_batch must be >= 1");
  if (policy != "none") {
    policy_by_name(policy);
    if (patch_margin < 12)
      throw ValidationError(
          "train config: patch_margin must be >= 12 when augmenting");
  }
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"lr_max", c.lr_max},
           {"momentum", c.momentum},
           {"weight_decay", c.weight_decay},
           {"batch", c.batch},
           {"cycle", c.cycle},
           {"max_iters", c.max_iters},
           {"seed", c.seed},
           {"policy", c.policy},
           {"eval_every", c.eval_every},
           {"patch_margin", c.patch_margin},
           {"eval_batch", c.eval_batch}};
}

void from_json(const json& j, TrainConfig& c) {
  c.lr_max = j.value("lr_max", c.lr_max);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch = j.value("batch", c.batch);
  c.cycle = j.value("cycle", c.cycle);
  c.max_iters = j.value("max_iters", c.max_iters);
  c.seed = j.value("seed", c.seed);
  c.policy = j.value("policy", c.policy);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.patch_margin = j.value("patch_margin", c.patch_margin);
  c.eval_batch = j.value("eval_batch", c.eval_batch);
}

std::string TrainConfig::to_json_text() const { return json(*this).dump(2) + "\n"; }

TrainConfig TrainConfig::from_json_text(const std::string& text) {
  TrainConfig c = json::parse(text).get<TrainConfig>();
  c.validate();
  return c;
}

TrainConfig desk_train_config() {
  TrainConfig c;
  c.batch = 12;
  c.cycle = 500;
  c.max_iters = 2000;
  c.eval_every = 100;
  return c;
}

double lr_at(int64_t iter, const TrainConfig& cfg) {
  if (iter < 0) throw ValidationError("lr_at: iteration must be >= 0");
  const double t = double(iter % cfg.cycle);
  return 0.5 * cfg.lr_max * (1.0 + std::cos(kPi * t / double(cfg.cycle)));
}

std::vector<PatchRef> balanced_sampler(const std::vector<PatchRef>& pos,
                                       const std::vector<PatchRef>& neg,
                                       int batch, Rng& rng) {
  if (pos.empty()) throw ValidationError("balanced_sampler: no positives");
  if (neg.empty()) throw ValidationError("balanced_sampler: no negatives");
  if (batch < 2 || batch % 2 != 0)
    throw ValidationError("balanced_sampler: batch must be even and >= 2");
  std::vector<PatchRef> out;
  out.reserve(batch);
  for (int i = 0; i < batch / 2; ++i)
    out.push_back(pos[size_t(rng.uniform_int(0, int64_t(pos.size()) - 1))]);
  for (int i = 0; i < batch / 2; ++i)
    out.push_back(neg[size_t(rng.uniform_int(0, int64_t(neg.size()) - 1))]);
  return out;
}

LossResult softmax_cross_entropy(const GTensor& logits,
                                 const std::vector<int>& labels) {
  if (logits.o != 1 || logits.c != 2 || logits.h != 1 || logits.w != 1)
    throw ValidationError("cross_entropy: logits must be [n][1][2][1][1]");
  if (size_t(logits.n) != labels.size())
    throw ValidationError("cross_entropy: labels/logits size mismatch");
  LossResult res;
  res.dlogits = GTensor(logits.n, 1, 2, 1, 1);
  double total = 0.0;
  const double inv_n = 1.0 / double(logits.n);
  for (int i = 0; i < logits.n; ++i) {
    const double l0 = logits.at(i, 0, 0, 0, 0);
    const double l1 = logits.at(i, 0, 1, 0, 0);
    const int y = labels[size_t(i)];
    if (y != 0 && y != 1)
      throw ValidationError("cross_entropy: labels must be 0 or 1");
    const double m = std::max(l0, l1);
    const double lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
    total += lse - (y == 0 ? l0 : l1);
    const double p0 = std::exp(l0 - lse);
    const double p1 = std::exp(l1 - lse);
    res.dlogits.at(i, 0, 0, 0, 0) = float((p0 - (y == 0 ? 1.0 : 0.0)) * inv_n);
    res.dlogits.at(i, 0, 1, 0, 0) = float((p1 - (y == 1 ? 1.0 : 0.0)) * inv_n);
  }
  res.loss = total * inv_n;
  return res;
}

void sgd_step(Model& model, SgdState& state, double lr,
              const TrainConfig& cfg) {
  auto& params = model.params();
  if (state.velocity.empty()) {
    for (const auto& p : params)
      if (p.trainable) state.velocity.emplace_back(p.value->size(), 0.0f);
  }
  size_t vi = 0;
  for (const auto& p : params) {
    if (!p.trainable) continue;
    std::vector<float>& w = *p.value;
    const std::vector<float>& g = *p.grad;
    std::vector<float>& v = state.velocity[vi++];
    const float wd = p.decay ? float(cfg.weight_decay) : 0.0f;
    const float mom = float(cfg.momentum);
    const float flr = float(lr);
    for (size_t i = 0; i < w.size(); ++i) {
      if (!std::isfinite(g[i]))
        throw ValidationError("sgd_step: non-finite gradient in tensor '" +
                              p.name + "'");
      v[i] = mom * v[i] - flr * (g[i] + wd * w[i]);
      w[i] += v[i];
    }
  }
}

ImageStore ImageStore::load(const std::vector<ImageRecord>& records) {
  ImageStore store;
  for (const auto& rec : records) store.images_[rec.id] = read_png(rec.file);
  return store;
}

void ImageStore::insert(const std::string& id, ImageU8 img) {
  images_[id] = std::move(img);
}

const ImageU8& ImageStore::image(const std::string& id) const {
  auto it = images_.find(id);
  if (it == images_.end())
    throw ValidationError("image store: unknown image id '" + id + "'");
  return it->second;
}

ImageU8 ImageStore::patch(const PatchRef& ref, int size, int margin) const {
  return extract_patch(image(ref.image_id), ref.cx, ref.cy, size, margin);
}

PatchSets default_patch_sets(const std::vector<ImageRecord>& train_recs,
                             const std::vector<ImageRecord>& val_recs,
                             double min_dist, int neg_stride, uint64_t seed) {
  PatchSets sets;
  for (const auto& rec : train_recs) {
    auto pos = positive_refs(rec);
    sets.train_pos.insert(sets.train_pos.end(), pos.begin(), pos.end());
    auto neg = enumerate_negative_centers(rec, min_dist, neg_stride);
    sets.train_neg.insert(sets.train_neg.end(), neg.begin(), neg.end());
  }
  std::vector<PatchRef> val_neg_pool;
  for (const auto& rec : val_recs) {
    auto pos = positive_refs(rec);
    sets.val_pos.insert(sets.val_pos.end(), pos.begin(), pos.end());
    auto neg = enumerate_negative_centers(rec, min_dist, neg_stride);
    val_neg_pool.insert(val_neg_pool.end(), neg.begin(), neg.end());
  }
  if (sets.train_pos.empty())
    throw ValidationError("training split has no positive annotations");
  if (sets.train_neg.empty())
    throw ValidationError("training split yields no negative centers");
  if (sets.val_pos.empty())
    throw ValidationError("validation split has no positive annotations");

  Rng rng = Rng::split(seed, kStreamValNeg);
  for (size_t i = val_neg_pool.size(); i > 1; --i)
    std::swap(val_neg_pool[i - 1],
              val_neg_pool[size_t(rng.uniform_int(0, int64_t(i) - 1))]);
  const size_t want = std::min(val_neg_pool.size(), sets.val_pos.size());
  sets.val_neg.assign(val_neg_pool.begin(), val_neg_pool.begin() + want);
  return sets;
}

double validation_loss(Model& model, const ImageStore& store,
                       const std::vector<PatchRef>& pos,
                       const std::vector<PatchRef>& neg, int eval_batch) {
  const int rf = model.config().receptive_field;
  std::vector<const PatchRef*> refs;
  std::vector<int> labels;
  for (const auto& r : pos) {
    refs.push_back(&r);
    labels.push_back(1);
  }
  for (const auto& r : neg) {
    refs.push_back(&r);
    labels.push_back(0);
  }
  if (refs.empty())
    throw ValidationError("validation_loss: empty validation set");
  double total = 0.0;
  for (size_t start = 0; start < refs.size(); start += size_t(eval_batch)) {
    const size_t stop = std::min(refs.size(), start + size_t(eval_batch));
    std::vector<ImageU8> patches;
    std::vector<int> batch_labels;
    for (size_t i = start; i < stop; ++i) {
      patches.push_back(store.patch(*refs[i], rf, 0));
      batch_labels.push_back(labels[i]);
    }
    GTensor logits = model.forward(patches_to_tensor(patches), Mode::Eval);
    total += softmax_cross_entropy(logits, batch_labels).loss * double(stop - start);
  }
  return total / double(refs.size());
}

TrainOutcome train_model(const ImageStore& store, const PatchSets& sets,
                         const ModelConfig& mcfg, const TrainConfig& tcfg,
                         const std::filesystem::path& out_dir) {
  mcfg.validate();
  tcfg.validate();
  const int rf = mcfg.receptive_field;

  Model model(mcfg);
  {
    Rng init_rng = Rng::split(tcfg.seed, kStreamInit);
    model.init_params(init_rng);
  }
  Rng sampler_rng = Rng::split(tcfg.seed, kStreamSampler);
  SgdState sgd;
  const bool augment = tcfg.policy != "none";
  const AugPolicy policy = augment ? policy_by_name(tcfg.policy) : AugPolicy{};

  std::string csv = "iter,lr,train_loss,val_loss\n";
  std::vector<std::vector<float>> best_snap;
  std::string best_rng_state;
  int64_t best_iter = -1;
  double best_val = std::numeric_limits<double>::infinity();
  double window_sum = 0.0;
  int64_t window_count = 0;
  bool diverged = false;
  int64_t iter = 0;

  auto evaluate = [&](int64_t at) {
    const double val = validation_loss(model, store, sets.val_pos,
                                       sets.val_neg, tcfg.eval_batch);
    const double train_avg =
        window_count > 0 ? window_sum / double(window_count)
                         : std::numeric_limits<double>::quiet_NaN();
    append_row(csv, at, lr_at(at, tcfg), train_avg, val);
    window_sum = 0.0;
    window_count = 0;
    if (val < best_val) {
      best_val = val;
      best_iter = at;
      best_snap = snapshot_params(model);
      best_rng_state = sampler_rng.state_string();
    }
  };

  for (iter = 0; iter < tcfg.max_iters; ++iter) {
    if (iter % tcfg.eval_every == 0) evaluate(iter);

    auto refs = balanced_sampler(sets.train_pos, sets.train_neg, tcfg.batch,
                                 sampler_rng);
    std::vector<ImageU8> patches;
    std::vector<int> labels;
    patches.reserve(refs.size());
    for (size_t slot = 0; slot < refs.size(); ++slot) {
      const PatchRef& ref = refs[slot];
      labels.push_back(ref.label == PatchLabel::Positive ? 1 : 0);
      if (augment) {
        ImageU8 margined = store.patch(ref, rf, tcfg.patch_margin);
        Rng patch_rng = Rng::split(
            tcfg.seed,
            kStreamPatchBase + uint64_t(iter) * uint64_t(tcfg.batch) + slot);
        patches.push_back(apply_policy(margined, policy, patch_rng, rf));
      } else {
        patches.push_back(store.patch(ref, rf, 0));
      }
    }

    model.zero_grads();
    GTensor logits = model.forward(patches_to_tensor(patches), Mode::Train);
    LossResult ce = softmax_cross_entropy(logits, labels);
    if (!std::isfinite(ce.loss)) {
      diverged = true;
      break;
    }
    window_sum += ce.loss;
    window_count++;
    model.backward(ce.dlogits);
    try {
      sgd_step(model, sgd, lr_at(iter, tcfg), tcfg);
    } catch (const ValidationError&) {
      diverged = true;
      break;
    }
  }
  if (!diverged) evaluate(tcfg.max_iters);

  TrainOutcome out{
      .model = std::move(model),
      .best_iter = best_iter,
      .best_val_loss = best_val,
      .stopped_iter = diverged ? iter : tcfg.max_iters,
      .diverged = diverged,
      .log_csv = std::move(csv),
  };
  if (best_iter >= 0) restore_params(out.model, best_snap);

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream(out_dir / "metrics.csv") << out.log_csv;
    save_weights(out.model, out_dir / "best.gnet");
    json side{{"iteration", out.best_iter},
              {"val_loss", out.best_val_loss},
              {"diverged", out.diverged},
              {"config_fingerprint", mcfg.fingerprint()},
              {"train_config", json(tcfg)},
              {"rng_state", best_rng_state}};
    std::ofstream(out_dir / "best.json") << side.dump(2) << "\n";
  }
  return out;
}

}  // namespace mitodet

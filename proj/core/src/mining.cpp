#include "mitodet/mining.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include <json.hpp>

#include "mitodet/detect.hpp"
#include "mitodet/metrics.hpp"
#include "mitodet/rng.hpp"

namespace mitodet {

namespace {

using json = nlohmann::json;

bool ref_before(const PatchRef& a, const PatchRef& b) {
  if (a.image_id != b.image_id) return a.image_id < b.image_id;
  if (a.cy != b.cy) return a.cy < b.cy;
  return a.cx < b.cx;
}

uint64_t mix(uint64_t h, uint64_t v) {
  return h ^ (v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2));
}

// Deterministic, enumeration-order-independent seed per sub-training.
uint64_t cell_seed(uint64_t base, int64_t size, int method_id, int seed_index) {
  uint64_t h = mix(base, 0x6d696e65ull);
  h = mix(h, uint64_t(size));
  h = mix(h, uint64_t(method_id));
  return mix(h, uint64_t(seed_index));
}

std::vector<PatchRef> random_subset(const std::vector<PatchRef>& negatives,
                                    int64_t k, Rng& rng) {
  std::vector<PatchRef> pool = negatives;
  for (int64_t i = 0; i < k; ++i) {
    const int64_t j = rng.uniform_int(i, int64_t(pool.size()) - 1);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(size_t(k));
  return pool;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double m = mean_of(v);
  double acc = 0.0;
  for (const double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / double(v.size()));
}

}  // namespace

std::vector<ScoredNegative> score_negatives(Model& model,
                                            const std::vector<PatchRef>& negatives,
                                            const ImageStore& store,
                                            int eval_batch) {
  if (eval_batch < 1)
    throw ValidationError("score_negatives: eval_batch must be >= 1");
  const int rf = model.config().receptive_field;
  std::vector<ScoredNegative> out;
  out.reserve(negatives.size());
  for (size_t start = 0; start < negatives.size(); start += size_t(eval_batch)) {
    const size_t end = std::min(negatives.size(), start + size_t(eval_batch));
    std::vector<ImageU8> patches;
    patches.reserve(end - start);
    for (size_t i = start; i < end; ++i)
      patches.push_back(store.patch(negatives[i], rf, 0));
    GTensor logits = model.forward(patches_to_tensor(patches), Mode::Eval);
    for (size_t i = start; i < end; ++i) {
      const int bi = int(i - start);
      const float l0 = logits.at(bi, 0, 0, 0, 0);
      const float l1 = logits.at(bi, 0, 1, 0, 0);
      const float m = std::max(l0, l1);
      const float e0 = std::exp(l0 - m);
      const float e1 = std::exp(l1 - m);
      out.push_back({negatives[i], e1 / (e0 + e1)});
    }
  }
  return out;
}

std::vector<PatchRef> select_hard(const std::vector<ScoredNegative>& scored,
                                  int64_t k) {
  if (k < 0 || k > int64_t(scored.size()))
    throw ValidationError("select_hard: k=" + std::to_string(k) +
                          " outside [0, " + std::to_string(scored.size()) + "]");
  std::vector<int64_t> order(scored.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    if (scored[a].score != scored[b].score)
      return scored[a].score > scored[b].score;
    return ref_before(scored[a].ref, scored[b].ref);
  });
  std::vector<PatchRef> out;
  out.reserve(size_t(k));
  for (int64_t i = 0; i < k; ++i) out.push_back(scored[order[i]].ref);
  return out;
}

std::vector<PatchRef> merge_screened(const std::vector<PatchRef>& negatives,
                                     const std::vector<ScoredNegative>& screened,
                                     double accept_threshold,
                                     double dedup_distance) {
  std::vector<PatchRef> out = negatives;
  const double d2max = dedup_distance * dedup_distance;
  for (const auto& s : screened) {
    if (s.score < accept_threshold) continue;
    bool duplicate = false;
    for (const auto& r : out) {
      if (r.image_id != s.ref.image_id) continue;
      const double dx = double(r.cx) - s.ref.cx;
      const double dy = double(r.cy) - s.ref.cy;
      if (dx * dx + dy * dy <= d2max) {
        duplicate = true;
        break;
      }
    }
    if (duplicate) continue;
    PatchRef ref = s.ref;
    ref.label = PatchLabel::Negative;
    out.push_back(ref);
  }
  return out;
}

namespace {

struct CellRuns {
  std::vector<int> seeds;
  std::vector<double> ap;
};

// Fresh training on all positives plus the given negatives; detection AP on
// the validation images, or no value when the training diverges.
class RegimeRunner {
 public:
  RegimeRunner(const ImageStore& store, const PatchSets& sets,
               const std::vector<ImageRecord>& val_records,
               const ModelConfig& mcfg, const TrainConfig& tcfg,
               const RegimeConfig& rcfg)
      : store_(store), sets_(sets), val_records_(val_records), mcfg_(mcfg),
        tcfg_(tcfg), rcfg_(rcfg), gts_(ground_truth(val_records)) {}

  CellRuns run_cell(int64_t size, const std::string& method,
                    const std::vector<PatchRef>& hard_order) {
    CellRuns runs;
    const int method_id = method == "hnm" ? 1 : (method == "random" ? 0 : 2);
    for (int si = 0; si < rcfg_.seeds; ++si) {
      PatchSets sub = sets_;
      if (method == "hnm") {
        sub.train_neg.assign(hard_order.begin(), hard_order.begin() + size);
      } else if (method == "random") {
        Rng rng = Rng::split(cell_seed(tcfg_.seed, size, method_id, si),
                             0x53554253ull);
        sub.train_neg = random_subset(sets_.train_neg, size, rng);
      }
      TrainConfig sub_cfg = tcfg_;
      sub_cfg.seed = cell_seed(tcfg_.seed, size, method_id, si) | 1;
      TrainOutcome outcome = train_model(store_, sub, mcfg_, sub_cfg);
      if (outcome.diverged) {
        std::fprintf(stderr,
                     "regime-search: training diverged (size=%lld method=%s "
                     "seed=%d), skipping\n",
                     (long long)size, method.c_str(), si);
        continue;
      }
      runs.seeds.push_back(si);
      runs.ap.push_back(validation_ap(outcome.model));
    }
    return runs;
  }

 private:
  double validation_ap(Model& model) {
    std::vector<DetectionSet> dets;
    for (const auto& rec : val_records_) {
      PredictionMap map =
          dense_forward(model, store_.image(rec.id), rec.id, rcfg_.tile);
      dets.push_back(local_maxima(map, 0.0));
    }
    return average_precision(dets, gts_, rcfg_.match_radius).ap;
  }

  const ImageStore& store_;
  const PatchSets& sets_;
  const std::vector<ImageRecord>& val_records_;
  const ModelConfig& mcfg_;
  const TrainConfig& tcfg_;
  const RegimeConfig& rcfg_;
  std::vector<ImageGroundTruth> gts_;
};

}  // namespace

RegimeReport regime_search(Model& base, const ImageStore& store,
                           const PatchSets& sets,
                           const std::vector<ImageRecord>& val_records,
                           const ModelConfig& mcfg, const TrainConfig& tcfg,
                           const RegimeConfig& rcfg) {
  const int64_t total = int64_t(sets.train_neg.size());
  if (total == 0) throw ValidationError("regime_search: no negatives");
  if (rcfg.seeds < 1) throw ValidationError("regime_search: seeds must be >= 1");

  std::vector<int64_t> sizes = rcfg.sizes;
  for (const int64_t s : sizes)
    if (s < 1 || s > total)
      throw ValidationError("regime_search: size " + std::to_string(s) +
                            " outside [1, " + std::to_string(total) + "]");
  const bool auto_mode = sizes.empty();
  if (auto_mode) {
    const int64_t floor_size = std::max<int64_t>(1, rcfg.min_auto_size);
    for (int64_t s = total; s >= floor_size; s /= 2) {
      sizes.push_back(s);
      if (s == 1) break;
    }
  }
  std::sort(sizes.begin(), sizes.end());
  sizes.erase(std::unique(sizes.begin(), sizes.end()), sizes.end());

  const std::vector<ScoredNegative> scored =
      score_negatives(base, sets.train_neg, store);
  const std::vector<PatchRef> hard_order = select_hard(scored, total);

  RegimeRunner runner(store, sets, val_records, mcfg, tcfg, rcfg);
  RegimeReport report;
  report.negatives_total = total;

  auto eval_size = [&](int64_t size) {
    for (const std::string method : {"random", "hnm"}) {
      CellRuns runs = runner.run_cell(size, method, hard_order);
      if (runs.ap.empty()) {
        std::fprintf(stderr,
                     "regime-search: all seeds diverged (size=%lld method=%s), "
                     "cell dropped\n",
                     (long long)size, method.c_str());
        continue;
      }
      RegimeCell cell;
      cell.size = size;
      cell.method = method;
      cell.seeds = runs.seeds;
      cell.ap = runs.ap;
      cell.ap_mean = mean_of(runs.ap);
      cell.ap_std = std_of(runs.ap);
      report.cells.push_back(std::move(cell));
    }
  };
  for (const int64_t size : sizes) eval_size(size);

  if (auto_mode) {
    // Two bisection refinements around the best hnm size.
    for (int round = 0; round < 2; ++round) {
      std::vector<std::pair<int64_t, double>> hnm;
      for (const auto& c : report.cells)
        if (c.method == "hnm") hnm.emplace_back(c.size, c.ap_mean);
      std::sort(hnm.begin(), hnm.end());
      size_t best = 0;
      for (size_t i = 1; i < hnm.size(); ++i)
        if (hnm[i].second > hnm[best].second) best = i;
      std::vector<int64_t> mids;
      if (best > 0) mids.push_back((hnm[best - 1].first + hnm[best].first) / 2);
      if (best + 1 < hnm.size())
        mids.push_back((hnm[best].first + hnm[best + 1].first) / 2);
      for (const int64_t m : mids) {
        if (m < 1 || m > total) continue;
        bool seen = false;
        for (const auto& c : report.cells) seen = seen || c.size == m;
        if (!seen) eval_size(m);
      }
    }
  }

  std::sort(report.cells.begin(), report.cells.end(),
            [](const RegimeCell& a, const RegimeCell& b) {
              if (a.size != b.size) return a.size < b.size;
              return a.method < b.method;
            });

  // All-negatives baseline, one fresh training per seed.
  CellRuns baseline = runner.run_cell(total, "baseline", hard_order);
  report.baseline_ap = baseline.ap;
  report.baseline_mean = mean_of(baseline.ap);
  return report;
}

std::string RegimeReport::to_json_text() const {
  json cells_json = json::array();
  for (const auto& c : cells) {
    cells_json.push_back(json{{"size", c.size},
                              {"method", c.method},
                              {"seeds", c.seeds},
                              {"ap", c.ap},
                              {"ap_mean", c.ap_mean},
                              {"ap_std", c.ap_std}});
  }
  json j{{"negatives_total", negatives_total},
         {"baseline_ap", baseline_ap},
         {"baseline_mean", baseline_mean},
         {"cells", cells_json}};
  return j.dump(2) + "\n";
}

RegimeReport RegimeReport::from_json_text(const std::string& text) {
  RegimeReport report;
  try {
    const json j = json::parse(text);
    report.negatives_total = j.at("negatives_total").get<int64_t>();
    report.baseline_ap = j.at("baseline_ap").get<std::vector<double>>();
    report.baseline_mean = j.at("baseline_mean").get<double>();
    for (const auto& cj : j.at("cells")) {
      RegimeCell c;
      c.size = cj.at("size").get<int64_t>();
      c.method = cj.at("method").get<std::string>();
      c.seeds = cj.at("seeds").get<std::vector<int>>();
      c.ap = cj.at("ap").get<std::vector<double>>();
      c.ap_mean = cj.at("ap_mean").get<double>();
      c.ap_std = cj.at("ap_std").get<double>();
      report.cells.push_back(std::move(c));
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("regime report: ") + e.what());
  }
  return report;
}

std::string RegimeReport::to_csv() const {
  std::string out = "size,method,seed,ap\n";
  char row[128];
  for (const auto& c : cells) {
    for (size_t i = 0; i < c.ap.size(); ++i) {
      std::snprintf(row, sizeof(row), "%lld,%s,%d,%.6f\n", (long long)c.size,
                    c.method.c_str(), c.seeds[i], c.ap[i]);
      out += row;
    }
  }
  for (size_t i = 0; i < baseline_ap.size(); ++i) {
    std::snprintf(row, sizeof(row), "%lld,baseline,%d,%.6f\n",
                  (long long)negatives_total, int(i), baseline_ap[i]);
    out += row;
  }
  return out;
}

}  // namespace mitodet

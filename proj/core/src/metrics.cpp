#include "mitodet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "mitodet/rng.hpp"

namespace mitodet {

namespace {

double dist2(double ax, double ay, double bx, double by) {
  const double dx = ax - bx;
  const double dy = ay - by;
  return dx * dx + dy * dy;
}

// Indices of dets in matching order: score descending, position ascending.
std::vector<int> score_order(const std::vector<Detection>& dets) {
  std::vector<int> order(dets.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    if (dets[a].y != dets[b].y) return dets[a].y < dets[b].y;
    return dets[a].x < dets[b].x;
  });
  return order;
}

// Nearest unmatched ground truth within radius, ties -> lowest index.
int claim_nearest(const Detection& d, const std::vector<Point>& gts,
                  std::vector<char>& taken, double radius) {
  const double r2 = radius * radius;
  int best = -1;
  double best_d2 = 0.0;
  for (size_t g = 0; g < gts.size(); ++g) {
    if (taken[g]) continue;
    const double d2 = dist2(d.x, d.y, gts[g].x, gts[g].y);
    if (d2 > r2) continue;
    if (best < 0 || d2 < best_d2) {
      best = int(g);
      best_d2 = d2;
    }
  }
  if (best >= 0) taken[best] = 1;
  return best;
}

}  // namespace

MatchResult match_detections(const DetectionSet& dets,
                             const std::vector<Point>& gts, double radius) {
  if (radius <= 0.0) throw ValidationError("match_detections: radius must be positive");
  MatchResult res;
  std::vector<char> taken(gts.size(), 0);
  for (int di : score_order(dets.detections)) {
    const int g = claim_nearest(dets.detections[di], gts, taken, radius);
    if (g >= 0) {
      res.pairs.emplace_back(di, g);
      ++res.tp;
    } else {
      ++res.fp;
    }
  }
  res.fn = int64_t(gts.size()) - res.tp;
  return res;
}

double f1_score(int64_t tp, int64_t fp, int64_t fn) {
  const int64_t den = 2 * tp + fp + fn;
  return den == 0 ? 0.0 : 2.0 * double(tp) / double(den);
}

PRCurve average_precision(const std::vector<DetectionSet>& dets,
                          const std::vector<ImageGroundTruth>& gts,
                          double radius) {
  size_t total_gt = 0;
  std::map<std::string, const std::vector<Point>*> gt_by_image;
  for (const auto& g : gts) {
    gt_by_image[g.image_id] = &g.points;
    total_gt += g.points.size();
  }
  if (total_gt == 0)
    throw ValidationError("average_precision: no ground-truth positives");

  // Pool detections; greedy matching in global score order is the same as
  // re-matching at every threshold, so each detection gets one TP/FP flag.
  struct Pooled {
    float score;
    std::string image_id;
    double x, y;
    bool tp = false;
  };
  std::vector<Pooled> pool;
  for (const auto& set : dets)
    for (const auto& d : set.detections)
      pool.push_back({d.score, set.image_id, d.x, d.y});
  std::stable_sort(pool.begin(), pool.end(), [](const Pooled& a, const Pooled& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });

  std::map<std::string, std::vector<char>> taken;
  for (const auto& g : gts) taken[g.image_id].assign(g.points.size(), 0);
  for (auto& p : pool) {
    auto it = gt_by_image.find(p.image_id);
    if (it == gt_by_image.end()) continue;
    Detection d;
    d.x = p.x;
    d.y = p.y;
    d.score = p.score;
    p.tp = claim_nearest(d, *it->second, taken[p.image_id], radius) >= 0;
  }

  PRCurve curve;
  int64_t tp = 0;
  double prev_recall = 0.0;
  size_t i = 0;
  while (i < pool.size()) {
    const float threshold = pool[i].score;
    for (; i < pool.size() && pool[i].score == threshold; ++i)
      if (pool[i].tp) ++tp;
    PRPoint pt;
    pt.threshold = threshold;
    pt.precision = double(tp) / double(i);
    pt.recall = double(tp) / double(total_gt);
    curve.ap += (pt.recall - prev_recall) * pt.precision;
    prev_recall = pt.recall;
    curve.points.push_back(pt);
  }
  return curve;
}

std::vector<ImageGroundTruth> ground_truth(const std::vector<ImageRecord>& records) {
  std::vector<ImageGroundTruth> out;
  for (const auto& rec : records) {
    ImageGroundTruth g;
    g.image_id = rec.id;
    for (const auto& a : rec.annotations)
      if (a.label == Label::MitoticFigure) g.points.push_back({a.x, a.y});
    out.push_back(std::move(g));
  }
  return out;
}

std::vector<DomainRow> per_domain_report(const std::vector<ImageCounts>& counts,
                                         const std::vector<ImageRecord>& records) {
  std::map<std::string, std::string> domain_of;
  std::set<std::string> domains;
  for (const auto& rec : records) {
    domain_of[rec.id] = rec.domain;
    domains.insert(rec.domain);
  }
  std::map<std::string, DomainRow> by_domain;
  for (const auto& d : domains) by_domain[d].domain = d;
  DomainRow overall;
  overall.domain = "overall";
  for (const auto& c : counts) {
    auto it = domain_of.find(c.image_id);
    if (it == domain_of.end())
      throw ValidationError("per_domain_report: image '" + c.image_id +
                            "' missing from the manifest");
    DomainRow& row = by_domain[it->second];
    row.tp += c.tp;
    row.fp += c.fp;
    row.fn += c.fn;
    overall.tp += c.tp;
    overall.fp += c.fp;
    overall.fn += c.fn;
  }
  std::vector<DomainRow> rows;
  for (auto& [_, row] : by_domain) {
    row.f1 = f1_score(row.tp, row.fp, row.fn);
    rows.push_back(row);
  }
  overall.f1 = f1_score(overall.tp, overall.fp, overall.fn);
  rows.push_back(overall);
  return rows;
}

void write_report_csv(const std::filesystem::path& file,
                      const std::vector<DomainRow>& rows) {
  FILE* f = std::fopen(file.string().c_str(), "w");
  if (!f) throw IoError("cannot write " + file.string());
  std::fprintf(f, "domain,tp,fp,fn,f1\n");
  for (const auto& r : rows)
    std::fprintf(f, "%s,%lld,%lld,%lld,%.6f\n", r.domain.c_str(),
                 (long long)r.tp, (long long)r.fp, (long long)r.fn, r.f1);
  std::fclose(f);
}

void write_pr_csv(const std::filesystem::path& file, const PRCurve& curve) {
  FILE* f = std::fopen(file.string().c_str(), "w");
  if (!f) throw IoError("cannot write " + file.string());
  std::fprintf(f, "threshold,precision,recall\n");
  for (const auto& p : curve.points)
    std::fprintf(f, "%.8f,%.6f,%.6f\n", p.threshold, p.precision, p.recall);
  std::fclose(f);
}

}  // namespace mitodet

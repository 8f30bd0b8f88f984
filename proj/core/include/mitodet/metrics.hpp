#pragma once
// Detection matching, F1, average precision and per-domain reports.

#include <filesystem>
#include <string>
#include <vector>

#include "mitodet/detect.hpp"
#include "mitodet/manifest.hpp"

namespace mitodet {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct MatchResult {
  int64_t tp = 0;
  int64_t fp = 0;
  int64_t fn = 0;
  // (detection index, annotation index) per true positive.
  std::vector<std::pair<int, int>> pairs;
};

// Greedy matching in descending detection-score order; each detection takes
// the nearest unmatched ground-truth point within radius (ties: lowest
// annotation index).
MatchResult match_detections(const DetectionSet& dets,
                             const std::vector<Point>& gts, double radius);

// 2tp / (2tp + fp + fn); 0 when the denominator is 0.
double f1_score(int64_t tp, int64_t fp, int64_t fn);

struct PRPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

struct PRCurve {
  std::vector<PRPoint> points;  // descending threshold
  double ap = 0.0;
};

// Ground truth for one image: the mitotic annotation centers.
struct ImageGroundTruth {
  std::string image_id;
  std::vector<Point> points;
};

// Pools detections across images, sweeps every unique score as a threshold
// and integrates the step PR curve: AP = sum (r_i - r_{i-1}) * p_i. Greedy
// matching is prefix-consistent in score order, so each detection's TP/FP
// status is decided once.
PRCurve average_precision(const std::vector<DetectionSet>& dets,
                          const std::vector<ImageGroundTruth>& gts,
                          double radius);

struct DomainRow {
  std::string domain;
  int64_t tp = 0;
  int64_t fp = 0;
  int64_t fn = 0;
  double f1 = 0.0;
};

struct ImageCounts {
  std::string image_id;
  int64_t tp = 0;
  int64_t fp = 0;
  int64_t fn = 0;
};

// One row per domain (sorted by name) plus a final "overall" row; every F1
// comes from pooled counts, never from averaging per-domain scores.
std::vector<DomainRow> per_domain_report(const std::vector<ImageCounts>& counts,
                                         const std::vector<ImageRecord>& records);

// Mitotic annotation centers per record, for feeding the matchers.
std::vector<ImageGroundTruth> ground_truth(const std::vector<ImageRecord>& records);

void write_report_csv(const std::filesystem::path& file,
                      const std::vector<DomainRow>& rows);
void write_pr_csv(const std::filesystem::path& file, const PRCurve& curve);

}  // namespace mitodet

#pragma once
// Dense whole-image inference, local-maxima candidate extraction, threshold
// calibration and two-model agreement ensembling.

#include <filesystem>
#include <string>
#include <vector>

#include "mitodet/image.hpp"
#include "mitodet/manifest.hpp"
#include "mitodet/model.hpp"

namespace mitodet {

// Mitosis-probability map over a full image. Entry (mx, my) scores the
// rf x rf window whose center sits at input pixel (mx*stride + offset,
// my*stride + offset).
struct PredictionMap {
  std::string image_id;
  int width = 0;
  int height = 0;
  int stride = 0;
  int offset = 0;
  std::vector<float> values;

  float at(int x, int y) const { return values[size_t(y) * width + x]; }
  float& at(int x, int y) { return values[size_t(y) * width + x]; }
};

struct Detection {
  double x = 0.0;
  double y = 0.0;
  float score = 0.0f;
};

// Detections sorted by descending score (ties by y then x).
struct DetectionSet {
  std::string image_id;
  std::vector<Detection> detections;
};

// Softmax mitosis-probability map, eval-mode batch norm. The image is
// processed in tiles no larger than tile x tile input pixels; stitching is
// exact because every map cell sees the same rf x rf window either way.
PredictionMap dense_forward(Model& model, const ImageU8& image,
                            const std::string& image_id, int tile = 512);

// Cells >= threshold that strictly dominate their 8-neighborhood. A connected
// equal-valued plateau counts once, represented by its lexicographically
// first cell (smallest y, then x), and only when every border neighbor is
// strictly smaller; a constant map therefore yields nothing.
DetectionSet local_maxima(const PredictionMap& map, double threshold);

// Largest threshold maximizing F1 over the validation records, candidates
// being the unique detection scores. No detections at all -> 0.5 plus a
// warning on stderr.
double calibrate_threshold(Model& model, const std::vector<ImageRecord>& records,
                           double match_radius, int tile = 512);

// Greedy mutual matching by descending score sum (ties: smaller distance,
// then canonical position order). Matched pairs merge to their midpoint with
// the mean score; unmatched detections drop out.
DetectionSet ensemble_agreement(const DetectionSet& a, const DetectionSet& b,
                                double radius);

// CSV round-trip: header image_id,x,y,score with 3-decimal scores.
void write_detections_csv(const std::filesystem::path& file,
                          const std::vector<DetectionSet>& sets);
std::vector<DetectionSet> read_detections_csv(const std::filesystem::path& file);

// Raw little-endian f32 dump plus a JSON sidecar (<stem>.json) carrying the
// shape and the coordinate mapping.
void write_prediction_map(const std::filesystem::path& raw_file,
                          const PredictionMap& map);
PredictionMap read_prediction_map(const std::filesystem::path& raw_file);

}  // namespace mitodet

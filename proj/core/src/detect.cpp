#include "mitodet/detect.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "mitodet/metrics.hpp"
#include "mitodet/rng.hpp"

namespace mitodet {

namespace {

struct Endpoint {
  double y, x;
};

bool endpoint_less(const Endpoint& a, const Endpoint& b) {
  if (a.y != b.y) return a.y < b.y;
  return a.x < b.x;
}

void sort_detections(std::vector<Detection>& dets) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
}

}  // namespace

PredictionMap dense_forward(Model& model, const ImageU8& image,
                            const std::string& image_id, int tile) {
  const int rf = model.config().receptive_field;
  const int stride = model.config().output_stride;
  if (image.width < rf || image.height < rf)
    throw ValidationError("dense_forward: image " + std::to_string(image.width) +
                          "x" + std::to_string(image.height) +
                          " smaller than the receptive field " + std::to_string(rf));
  if (tile < rf)
    throw ValidationError("dense_forward: tile smaller than the receptive field");

  PredictionMap map;
  map.image_id = image_id;
  map.width = (image.width - rf) / stride + 1;
  map.height = (image.height - rf) / stride + 1;
  map.stride = stride;
  map.offset = rf / 2 - 1;
  map.values.resize(size_t(map.width) * map.height);

  // Map cells per tile such that the input block stays within tile pixels.
  const int block = std::max(1, (tile - rf) / stride + 1);
  for (int my0 = 0; my0 < map.height; my0 += block) {
    const int mh = std::min(block, map.height - my0);
    for (int mx0 = 0; mx0 < map.width; mx0 += block) {
      const int mw = std::min(block, map.width - mx0);
      const int in_w = (mw - 1) * stride + rf;
      const int in_h = (mh - 1) * stride + rf;
      const ImageU8 sub =
          crop_reflect(image, mx0 * stride, my0 * stride, in_w, in_h);
      GTensor logits = model.forward(image_to_tensor(sub), Mode::Eval);
      for (int y = 0; y < mh; ++y) {
        for (int x = 0; x < mw; ++x) {
          const float l0 = logits.at(0, 0, 0, y, x);
          const float l1 = logits.at(0, 0, 1, y, x);
          const float m = std::max(l0, l1);
          const float e0 = std::exp(l0 - m);
          const float e1 = std::exp(l1 - m);
          map.at(mx0 + x, my0 + y) = e1 / (e0 + e1);
        }
      }
    }
  }
  return map;
}

DetectionSet local_maxima(const PredictionMap& map, double threshold) {
  DetectionSet out;
  out.image_id = map.image_id;
  const int w = map.width, h = map.height;
  std::vector<char> visited(size_t(w) * h, 0);
  std::vector<int> queue;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const size_t i0 = size_t(y) * w + x;
      if (visited[i0]) continue;
      const float v = map.values[i0];
      // Flood the equal-valued plateau; it counts once, via its smallest
      // (y, x) cell, and only if every differing border neighbor is lower.
      queue.clear();
      queue.push_back(int(i0));
      visited[i0] = 1;
      bool dominated = false;
      bool has_border = false;
      int rep_y = y, rep_x = x;
      for (size_t qi = 0; qi < queue.size(); ++qi) {
        const int cy = queue[qi] / w;
        const int cx = queue[qi] % w;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            if (dy == 0 && dx == 0) continue;
            const int ny = cy + dy, nx = cx + dx;
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            const size_t ni = size_t(ny) * w + nx;
            const float nv = map.values[ni];
            if (nv == v) {
              if (!visited[ni]) {
                visited[ni] = 1;
                queue.push_back(int(ni));
                if (ny < rep_y || (ny == rep_y && nx < rep_x)) {
                  rep_y = ny;
                  rep_x = nx;
                }
              }
            } else {
              has_border = true;
              if (nv > v) dominated = true;
            }
          }
        }
      }
      if (!dominated && has_border && v >= threshold) {
        Detection d;
        d.x = double(rep_x) * map.stride + map.offset;
        d.y = double(rep_y) * map.stride + map.offset;
        d.score = v;
        out.detections.push_back(d);
      }
    }
  }
  sort_detections(out.detections);
  return out;
}

double calibrate_threshold(Model& model, const std::vector<ImageRecord>& records,
                           double match_radius, int tile) {
  std::vector<DetectionSet> sets;
  std::vector<float> scores;
  for (const auto& rec : records) {
    const ImageU8 img = read_png(rec.file);
    sets.push_back(local_maxima(dense_forward(model, img, rec.id, tile), 0.0));
    for (const auto& d : sets.back().detections) scores.push_back(d.score);
  }
  if (scores.empty()) {
    std::fprintf(stderr,
                 "calibrate: no detections on the validation set, "
                 "falling back to threshold 0.5\n");
    return 0.5;
  }
  std::vector<double> candidates(scores.begin(), scores.end());
  candidates.push_back(0.5);
  std::sort(candidates.begin(), candidates.end(), std::greater<>());
  candidates.erase(std::unique(candidates.begin(), candidates.end()),
                   candidates.end());

  const auto gts = ground_truth(records);
  std::map<std::string, const std::vector<Point>*> gt_by_image;
  for (const auto& g : gts) gt_by_image[g.image_id] = &g.points;

  double best_t = candidates.front();
  double best_f1 = -1.0;
  for (const double t : candidates) {
    int64_t tp = 0, fp = 0, fn = 0;
    for (const auto& set : sets) {
      DetectionSet kept;
      kept.image_id = set.image_id;
      for (const auto& d : set.detections)
        if (d.score >= t) kept.detections.push_back(d);
      const MatchResult m =
          match_detections(kept, *gt_by_image.at(set.image_id), match_radius);
      tp += m.tp;
      fp += m.fp;
      fn += m.fn;
    }
    const double f1 = f1_score(tp, fp, fn);
    if (f1 > best_f1) {
      best_f1 = f1;
      best_t = t;
    }
  }
  return best_t;
}

DetectionSet ensemble_agreement(const DetectionSet& a, const DetectionSet& b,
                                double radius) {
  if (a.image_id != b.image_id)
    throw ValidationError("ensemble_agreement: detection sets belong to '" +
                          a.image_id + "' and '" + b.image_id + "'");
  struct Pair {
    int ia, ib;
    double sum, dist;
    Endpoint lo, hi;
  };
  std::vector<Pair> pairs;
  for (size_t i = 0; i < a.detections.size(); ++i) {
    for (size_t j = 0; j < b.detections.size(); ++j) {
      const Detection& da = a.detections[i];
      const Detection& db = b.detections[j];
      const double dist = std::hypot(da.x - db.x, da.y - db.y);
      if (dist > radius) continue;
      Endpoint pa{da.y, da.x}, pb{db.y, db.x};
      const bool a_first = endpoint_less(pa, pb);
      pairs.push_back({int(i), int(j), double(da.score) + db.score, dist,
                       a_first ? pa : pb, a_first ? pb : pa});
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& p, const Pair& q) {
    if (p.sum != q.sum) return p.sum > q.sum;
    if (p.dist != q.dist) return p.dist < q.dist;
    if (p.lo.y != q.lo.y) return p.lo.y < q.lo.y;
    if (p.lo.x != q.lo.x) return p.lo.x < q.lo.x;
    if (p.hi.y != q.hi.y) return p.hi.y < q.hi.y;
    return p.hi.x < q.hi.x;
  });
  std::vector<char> used_a(a.detections.size(), 0), used_b(b.detections.size(), 0);
  DetectionSet out;
  out.image_id = a.image_id;
  for (const auto& p : pairs) {
    if (used_a[p.ia] || used_b[p.ib]) continue;
    used_a[p.ia] = 1;
    used_b[p.ib] = 1;
    const Detection& da = a.detections[p.ia];
    const Detection& db = b.detections[p.ib];
    Detection d;
    d.x = 0.5 * (da.x + db.x);
    d.y = 0.5 * (da.y + db.y);
    d.score = 0.5f * (da.score + db.score);
    out.detections.push_back(d);
  }
  sort_detections(out.detections);
  return out;
}

void write_detections_csv(const std::filesystem::path& file,
                          const std::vector<DetectionSet>& sets) {
  FILE* f = std::fopen(file.string().c_str(), "w");
  if (!f) throw IoError("cannot write " + file.string());
  std::fprintf(f, "image_id,x,y,score\n");
  for (const auto& set : sets)
    for (const auto& d : set.detections)
      std::fprintf(f, "%s,%g,%g,%.3f\n", set.image_id.c_str(), d.x, d.y,
                   d.score);
  std::fclose(f);
}

std::vector<DetectionSet> read_detections_csv(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read " + file.string());
  std::string line;
  if (!std::getline(in, line) || line != "image_id,x,y,score")
    throw ValidationError(file.string() + ": expected header image_id,x,y,score");
  std::vector<DetectionSet> sets;
  std::map<std::string, size_t> index;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const size_t c1 = line.find(',');
    const size_t c2 = line.find(',', c1 + 1);
    const size_t c3 = line.find(',', c2 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos ||
        c3 == std::string::npos)
      throw ValidationError(file.string() + ":" + std::to_string(lineno) +
                            ": malformed detection row");
    Detection d;
    try {
      d.x = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
      d.y = std::stod(line.substr(c2 + 1, c3 - c2 - 1));
      d.score = std::stof(line.substr(c3 + 1));
    } catch (const std::exception&) {
      throw ValidationError(file.string() + ":" + std::to_string(lineno) +
                            ": malformed detection row");
    }
    const std::string id = line.substr(0, c1);
    auto [it, inserted] = index.try_emplace(id, sets.size());
    if (inserted) {
      sets.emplace_back();
      sets.back().image_id = id;
    }
    sets[it->second].detections.push_back(d);
  }
  return sets;
}

void write_prediction_map(const std::filesystem::path& raw_file,
                          const PredictionMap& map) {
  static_assert(std::endian::native == std::endian::little);
  std::ofstream out(raw_file, std::ios::binary);
  if (!out) throw IoError("cannot write " + raw_file.string());
  out.write(reinterpret_cast<const char*>(map.values.data()),
            std::streamsize(map.values.size() * sizeof(float)));
  if (!out) throw IoError("short write on " + raw_file.string());
  out.close();

  nlohmann::json j{{"image_id", map.image_id}, {"height", map.height},
                   {"width", map.width},       {"stride", map.stride},
                   {"offset", map.offset}};
  std::filesystem::path side = raw_file;
  side.replace_extension(".json");
  std::ofstream js(side);
  if (!js) throw IoError("cannot write " + side.string());
  js << j.dump(2) << "\n";
}

PredictionMap read_prediction_map(const std::filesystem::path& raw_file) {
  std::filesystem::path side = raw_file;
  side.replace_extension(".json");
  std::ifstream js(side);
  if (!js) throw IoError("cannot read " + side.string());
  nlohmann::json j;
  try {
    js >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(side.string() + ": " + e.what());
  }
  PredictionMap map;
  try {
    map.image_id = j.at("image_id").get<std::string>();
    map.height = j.at("height").get<int>();
    map.width = j.at("width").get<int>();
    map.stride = j.at("stride").get<int>();
    map.offset = j.at("offset").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(side.string() + ": " + e.what());
  }
  if (map.width <= 0 || map.height <= 0)
    throw ValidationError(side.string() + ": non-positive map shape");
  map.values.resize(size_t(map.width) * map.height);
  std::ifstream in(raw_file, std::ios::binary);
  if (!in) throw IoError("cannot read " + raw_file.string());
  in.read(reinterpret_cast<char*>(map.values.data()),
          std::streamsize(map.values.size() * sizeof(float)));
  if (in.gcount() != std::streamsize(map.values.size() * sizeof(float)))
    throw ValidationError(raw_file.string() + ": truncated prediction map");
  return map;
}

}  // namespace mitodet

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "mitodet/detect.hpp"
#include "mitodet/image.hpp"
#include "mitodet/metrics.hpp"
#include "mitodet/model.hpp"
#include "mitodet/rng.hpp"
#include "mitodet/synth.hpp"
#include "oracles.hpp"

using namespace mitodet;

namespace {

ImageU8 noise_image(Rng& r, int w, int h) {
  ImageU8 img(w, h);
  for (auto& b : img.pixels) b = uint8_t(r.uniform_int(0, 255));
  return img;
}

Model seeded_model(uint64_t seed) {
  Model m(desk_config());
  Rng r(seed);
  m.init_params(r);
  return m;
}

float patch_prob(Model& m, const ImageU8& img, int x0, int y0) {
  const int rf = m.config().receptive_field;
  const auto logits = m.forward_patch(crop_reflect(img, x0, y0, rf, rf));
  return 1.0f / (1.0f + std::exp(logits[0] - logits[1]));
}

PredictionMap random_map(Rng& r) {
  PredictionMap map;
  map.image_id = "m";
  map.width = 1 + int(r.uniform_int(0, 11));
  map.height = 1 + int(r.uniform_int(0, 11));
  map.stride = 1 + int(r.uniform_int(0, 7));
  map.offset = int(r.uniform_int(0, 40));
  map.values.resize(size_t(map.width) * map.height);
  // Few distinct levels so plateaus and ties are the norm, not the exception.
  for (auto& v : map.values) v = float(r.uniform_int(0, 4)) / 4.0f;
  return map;
}

bool same_detections(const std::vector<Detection>& a,
                     const std::vector<Detection>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].x != b[i].x) return false;
    if (a[i].y != b[i].y) return false;
    if (a[i].score != b[i].score) return false;
  }
  return true;
}

bool same_detections(const DetectionSet& a, const DetectionSet& b) {
  return a.image_id == b.image_id && same_detections(a.detections, b.detections);
}

}  // namespace

TEST_CASE("dense map geometry follows the window arithmetic") {
  Model m = seeded_model(7);
  Rng r(1);
  const ImageU8 img = noise_image(r, 94, 86);
  const PredictionMap map = dense_forward(m, img, "geo");
  CHECK(map.image_id == "geo");
  CHECK(map.width == 3);
  CHECK(map.height == 2);
  CHECK(map.stride == 8);
  CHECK(map.offset == 38);
  CHECK(map.values.size() == 6);
}

TEST_CASE("dense probabilities match per-patch forward passes") {
  Model m = seeded_model(8);
  Rng r(2);
  const int stride = m.config().output_stride;
  for (const auto& [w, h] : {std::pair{94, 86}, {78, 78}, {103, 91}}) {
    const ImageU8 img = noise_image(r, w, h);
    const PredictionMap map = dense_forward(m, img, "img");
    for (int my = 0; my < map.height; ++my)
      for (int mx = 0; mx < map.width; ++mx)
        CHECK(std::abs(map.at(mx, my) -
                       patch_prob(m, img, mx * stride, my * stride)) <= 1e-4f);
  }
}

TEST_CASE("tiling never changes the map") {
  Model m = seeded_model(9);
  Rng r(3);
  const ImageU8 img = noise_image(r, 160, 150);
  const PredictionMap whole = dense_forward(m, img, "img", 4096);
  for (const int tile : {78, 100, 127}) {
    const PredictionMap tiled = dense_forward(m, img, "img", tile);
    REQUIRE(tiled.values.size() == whole.values.size());
    for (size_t i = 0; i < whole.values.size(); ++i)
      CHECK(std::abs(tiled.values[i] - whole.values[i]) <= 1e-6f);
  }
}

TEST_CASE("dense_forward rejects undersized images and tiles") {
  Model m = seeded_model(10);
  Rng r(4);
  const ImageU8 small = noise_image(r, 77, 100);
  CHECK_THROWS_AS(dense_forward(m, small, "img"), ValidationError);
  const ImageU8 ok = noise_image(r, 80, 80);
  CHECK_THROWS_AS(dense_forward(m, ok, "img", 77), ValidationError);
}

TEST_CASE("dense map commutes with quarter-turn rotation") {
  Model m = seeded_model(11);
  Rng r(5);
  const int side = m.config().receptive_field + 2 * m.config().output_stride;
  const ImageU8 img = noise_image(r, side, side);
  const PredictionMap base = dense_forward(m, img, "img");
  const PredictionMap rot = dense_forward(m, rot90_ccw(img), "img");
  REQUIRE(rot.width == base.height);
  REQUIRE(rot.height == base.width);
  for (int y = 0; y < rot.height; ++y)
    for (int x = 0; x < rot.width; ++x)
      CHECK(std::abs(rot.at(x, y) - base.at(base.width - 1 - y, x)) <= 1e-4f);
}

TEST_CASE("local_maxima matches the union-find oracle on 1000 maps") {
  Rng r(77);
  for (int trial = 0; trial < 1000; ++trial) {
    const PredictionMap map = random_map(r);
    const double threshold = double(r.uniform_int(0, 4)) / 4.0 - 0.01;
    const DetectionSet got = local_maxima(map, threshold);
    const auto want = oracle::brute_local_maxima(map, threshold);
    CHECK(got.image_id == map.image_id);
    CHECK(same_detections(got.detections, want));
  }
}

TEST_CASE("local_maxima plateau and border rules") {
  PredictionMap map;
  map.image_id = "p";
  map.width = 5;
  map.height = 4;
  map.stride = 8;
  map.offset = 38;
  map.values.assign(20, 0.1f);

  SUBCASE("constant map yields nothing") {
    CHECK(local_maxima(map, 0.0).detections.empty());
  }
  SUBCASE("single cell map yields nothing") {
    PredictionMap one;
    one.width = one.height = 1;
    one.stride = 1;
    one.values = {0.9f};
    CHECK(local_maxima(one, 0.0).detections.empty());
  }
  SUBCASE("plateau reports its first cell in scan order") {
    map.at(2, 1) = map.at(3, 1) = map.at(2, 2) = 0.8f;
    const DetectionSet dets = local_maxima(map, 0.5);
    REQUIRE(dets.detections.size() == 1);
    CHECK(dets.detections[0].x == 2 * 8 + 38);
    CHECK(dets.detections[0].y == 1 * 8 + 38);
    CHECK(dets.detections[0].score == 0.8f);
  }
  SUBCASE("a diagonal superior kills the plateau") {
    map.at(2, 1) = map.at(3, 1) = 0.8f;
    map.at(4, 2) = 0.9f;
    const DetectionSet dets = local_maxima(map, 0.5);
    REQUIRE(dets.detections.size() == 1);
    CHECK(dets.detections[0].score == 0.9f);
  }
  SUBCASE("threshold filters but equality passes") {
    map.at(2, 1) = 0.8f;
    CHECK(local_maxima(map, 0.8).detections.size() == 1);
    CHECK(local_maxima(map, 0.8000001).detections.empty());
  }
  SUBCASE("detections come out score-descending") {
    map.at(1, 1) = 0.6f;
    map.at(3, 2) = 0.9f;
    const DetectionSet dets = local_maxima(map, 0.0);
    REQUIRE(dets.detections.size() == 2);
    CHECK(dets.detections[0].score == 0.9f);
    CHECK(dets.detections[1].score == 0.6f);
  }
}

TEST_CASE("calibrate_threshold picks the largest threshold with peak f1") {
  oracle::TempDir tmp("calib");
  SynthSpec spec;
  spec.images = 4;
  spec.width = 160;
  spec.height = 160;
  spec.domains = 2;
  spec.positives_per_image = 3;
  spec.impostors_per_image = 2;
  spec.ink_total = 0;
  const auto records =
      generate_synthetic_dataset(spec, 5, (tmp.path / "data").string());

  Model m = seeded_model(12);
  const double radius = 30.0;
  const double got = calibrate_threshold(m, records, radius);

  std::vector<DetectionSet> sets;
  std::set<double> scores;
  for (const auto& rec : records) {
    sets.push_back(local_maxima(dense_forward(m, read_png(rec.file), rec.id), 0.0));
    for (const auto& d : sets.back().detections) scores.insert(double(d.score));
  }
  REQUIRE(!scores.empty());
  scores.insert(0.5);

  const auto gts = ground_truth(records);
  const auto f1_at = [&](double t) {
    int64_t tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < sets.size(); ++i) {
      DetectionSet kept;
      kept.image_id = sets[i].image_id;
      for (const auto& d : sets[i].detections)
        if (d.score >= t) kept.detections.push_back(d);
      const MatchResult mr = match_detections(kept, gts[i].points, radius);
      tp += mr.tp;
      fp += mr.fp;
      fn += mr.fn;
    }
    return f1_score(tp, fp, fn);
  };

  double best_f1 = -1.0, best_t = 0.0;
  for (auto it = scores.rbegin(); it != scores.rend(); ++it) {
    const double f1 = f1_at(*it);
    if (f1 > best_f1) {
      best_f1 = f1;
      best_t = *it;
    }
  }
  CHECK(got == best_t);
  CHECK(f1_at(got) == best_f1);

  CHECK(calibrate_threshold(m, {}, radius) == 0.5);
}

TEST_CASE("ensemble_agreement matches the repeated-argmax oracle on 1000 instances") {
  Rng r(99);
  for (int trial = 0; trial < 1000; ++trial) {
    DetectionSet a, b;
    a.image_id = b.image_id = "img";
    const int na = int(r.uniform_int(0, 9));
    const int nb = int(r.uniform_int(0, 9));
    for (int i = 0; i < na; ++i)
      a.detections.push_back({double(r.uniform_int(0, 20)), double(r.uniform_int(0, 20)),
                              float(r.uniform_int(0, 4)) / 4.0f});
    for (int i = 0; i < nb; ++i)
      b.detections.push_back({double(r.uniform_int(0, 20)), double(r.uniform_int(0, 20)),
                              float(r.uniform_int(0, 4)) / 4.0f});
    const double radius = r.uniform(1.0, 10.0);
    const DetectionSet got = ensemble_agreement(a, b, radius);
    const auto want = oracle::brute_agreement(a, b, radius);
    CHECK(got.image_id == "img");
    CHECK(same_detections(got.detections, want));
    const DetectionSet swapped = ensemble_agreement(b, a, radius);
    CHECK(same_detections(got, swapped));
  }
}

TEST_CASE("ensemble_agreement hand cases") {
  DetectionSet a, b;
  a.image_id = b.image_id = "img";
  a.detections = {{10.0, 10.0, 0.9f}, {50.0, 50.0, 0.8f}};
  b.detections = {{12.0, 10.0, 0.7f}, {90.0, 90.0, 0.95f}};
  const DetectionSet out = ensemble_agreement(a, b, 5.0);
  REQUIRE(out.detections.size() == 1);
  CHECK(out.detections[0].x == 11.0);
  CHECK(out.detections[0].y == 10.0);
  CHECK(out.detections[0].score == doctest::Approx(0.8f));

  DetectionSet other;
  other.image_id = "else";
  CHECK_THROWS_AS(ensemble_agreement(a, other, 5.0), ValidationError);
}

TEST_CASE("detections csv round trips") {
  oracle::TempDir tmp("detcsv");
  std::vector<DetectionSet> sets(2);
  sets[0].image_id = "img_a";
  sets[0].detections = {{120.0, 44.5, 0.875f}, {10.25, 99.0, 0.125f}};
  sets[1].image_id = "img_b";
  sets[1].detections = {{3.0, 4.0, 1.0f}};
  const auto file = tmp.path / "dets.csv";
  write_detections_csv(file, sets);

  std::ifstream in(file);
  std::string header;
  std::getline(in, header);
  CHECK(header == "image_id,x,y,score");

  const auto back = read_detections_csv(file);
  REQUIRE(back.size() == 2);
  CHECK(same_detections(back[0], sets[0]));
  CHECK(same_detections(back[1], sets[1]));
}

TEST_CASE("detections csv rejects malformed input") {
  oracle::TempDir tmp("detbad");
  const auto write = [&](const char* name, const std::string& body) {
    const auto p = tmp.path / name;
    std::ofstream(p) << body;
    return p;
  };
  CHECK_THROWS_AS(read_detections_csv(tmp.path / "missing.csv"), IoError);
  CHECK_THROWS_AS(read_detections_csv(write("h.csv", "id,x,y\nimg,1,2\n")),
                  ValidationError);
  CHECK_THROWS_AS(
      read_detections_csv(write("c.csv", "image_id,x,y,score\nimg,1,2\n")),
      ValidationError);
  CHECK_THROWS_WITH_AS(
      read_detections_csv(write("f.csv", "image_id,x,y,score\nimg,1,zz,0.5\n")),
      doctest::Contains(":2"), ValidationError);
}

TEST_CASE("prediction map round trips bitwise") {
  oracle::TempDir tmp("pmap");
  PredictionMap map;
  map.image_id = "img7";
  map.width = 5;
  map.height = 3;
  map.stride = 8;
  map.offset = 38;
  Rng r(6);
  map.values.resize(15);
  for (auto& v : map.values) v = float(r.normal());

  const auto raw = tmp.path / "map.f32";
  write_prediction_map(raw, map);
  CHECK(std::filesystem::exists(tmp.path / "map.json"));
  const PredictionMap back = read_prediction_map(raw);
  CHECK(back.image_id == map.image_id);
  CHECK(back.width == map.width);
  CHECK(back.height == map.height);
  CHECK(back.stride == map.stride);
  CHECK(back.offset == map.offset);
  REQUIRE(back.values.size() == map.values.size());
  for (size_t i = 0; i < map.values.size(); ++i)
    CHECK(back.values[i] == map.values[i]);

  std::filesystem::resize_file(raw, 7);
  CHECK_THROWS_WITH_AS(read_prediction_map(raw), doctest::Contains("truncated"),
                       ValidationError);
  std::filesystem::remove(tmp.path / "map.json");
  CHECK_THROWS_AS(read_prediction_map(raw), IoError);
}

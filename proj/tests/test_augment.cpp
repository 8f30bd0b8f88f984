#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "mitodet/augment.hpp"
#include "mitodet/rng.hpp"
#include "oracles.hpp"

using namespace mitodet;

namespace {

ImageU8 noise_image(int w, int h, uint64_t seed) {
  Rng r(seed);
  ImageU8 img(w, h);
  for (auto& p : img.pixels) p = uint8_t(r.uniform_int(0, 255));
  return img;
}

struct Row {
  TransformKind kind;
  double lo, hi, probability;
};

void check_policy(const AugPolicy& p, const std::vector<Row>& rows) {
  REQUIRE(p.transforms.size() == rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    CHECK(p.transforms[i].kind == rows[i].kind);
    CHECK(p.transforms[i].lo == rows[i].lo);
    CHECK(p.transforms[i].hi == rows[i].hi);
    CHECK(p.transforms[i].probability == rows[i].probability);
  }
}

}  // namespace

TEST_CASE("policy presets carry the published rows") {
  check_policy(policy_a(), {
      {TransformKind::Transpose, 0.0, 0.0, 0.5},
      {TransformKind::Elastic, -8.0, 8.0, 1.0},
      {TransformKind::Shift, -12.0, 12.0, 1.0},
      {TransformKind::Zoom, -0.10, 0.20, 0.5},
      {TransformKind::HueRotate, 0.0, 360.0, 0.8},
      {TransformKind::ColorShift, -51.0, 51.0, 0.8},
      {TransformKind::Contrast, 0.8, 1.2, 0.8},
      {TransformKind::Gamma, 1.0, 1.0, 0.0},
  });
  check_policy(policy_b(), {
      {TransformKind::Transpose, 0.0, 0.0, 0.5},
      {TransformKind::Elastic, -8.0, 8.0, 0.5},
      {TransformKind::Shift, -12.0, 12.0, 1.0},
      {TransformKind::Zoom, -0.10, 0.20, 0.5},
      {TransformKind::HueRotate, -60.0, 60.0, 0.5},
      {TransformKind::ColorShift, -51.0, 51.0, 0.5},
      {TransformKind::Contrast, 0.8, 1.2, 0.5},
      {TransformKind::Gamma, 0.8, 1.2, 0.5},
  });
  CHECK(policy_by_name("A").name == "A");
  CHECK(policy_by_name("b").name == "B");
  CHECK_THROWS_AS(policy_by_name("C"), ValidationError);
}

TEST_CASE("policy json round trips and validates") {
  const AugPolicy a = policy_a();
  const AugPolicy back = AugPolicy::from_json_text(a.to_json_text());
  CHECK(back.name == a.name);
  REQUIRE(back.transforms.size() == a.transforms.size());
  for (size_t i = 0; i < a.transforms.size(); ++i) {
    CHECK(back.transforms[i].kind == a.transforms[i].kind);
    CHECK(back.transforms[i].lo == a.transforms[i].lo);
    CHECK(back.transforms[i].probability == a.transforms[i].probability);
  }
  CHECK_THROWS_AS(AugPolicy::from_json_text(
                      R"({"transforms":[{"kind":"zoom","range":[0,1],"probability":1.5}]})"),
                  ValidationError);
  CHECK_THROWS_AS(AugPolicy::from_json_text(
                      R"({"transforms":[{"kind":"zoom","range":[1,0],"probability":0.5}]})"),
                  ValidationError);
  CHECK_THROWS_AS(AugPolicy::from_json_text(
                      R"({"transforms":[{"kind":"sharpen","probability":0.5}]})"),
                  ValidationError);
}

TEST_CASE("sample_plan draws the documented parameter counts and ranges") {
  Rng r(5);
  const AugPolicy b = policy_b();
  std::map<TransformKind, size_t> count_for = {
      {TransformKind::Transpose, 0}, {TransformKind::Elastic, 32},
      {TransformKind::Shift, 2},     {TransformKind::Zoom, 1},
      {TransformKind::HueRotate, 1}, {TransformKind::ColorShift, 3},
      {TransformKind::Contrast, 3},  {TransformKind::Gamma, 3}};
  std::map<TransformKind, std::pair<double, double>> range_for;
  for (const auto& row : b.transforms) range_for[row.kind] = {row.lo, row.hi};
  for (int trial = 0; trial < 400; ++trial) {
    const auto plan = sample_plan(b, r);
    for (const auto& t : plan) {
      CHECK(t.params.size() == count_for.at(t.kind));
      const auto [lo, hi] = range_for.at(t.kind);
      for (double v : t.params) {
        CHECK(v >= lo);
        CHECK(v <= hi);
      }
      if (t.kind == TransformKind::Shift)
        for (double v : t.params) CHECK(v == std::floor(v));
    }
  }
}

TEST_CASE("sample_plan is seed-deterministic and keeps row order") {
  const AugPolicy a = policy_a();
  Rng r1(77), r2(77);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p1 = sample_plan(a, r1);
    const auto p2 = sample_plan(a, r2);
    REQUIRE(p1.size() == p2.size());
    int prev = -1;
    for (size_t i = 0; i < p1.size(); ++i) {
      CHECK(p1[i].kind == p2[i].kind);
      CHECK(p1[i].params == p2[i].params);
      int row = -1;
      for (size_t k = 0; k < a.transforms.size(); ++k)
        if (a.transforms[k].kind == p1[i].kind) row = int(k);
      CHECK(row > prev);
      prev = row;
    }
  }
}

TEST_CASE("firing frequencies land within two points of the table") {
  const int draws = 10000;
  for (const AugPolicy& policy : {policy_a(), policy_b()}) {
    Rng r(policy.name == "A" ? 11 : 12);
    std::map<TransformKind, int> fired;
    for (int i = 0; i < draws; ++i)
      for (const auto& t : sample_plan(policy, r)) fired[t.kind]++;
    for (const auto& row : policy.transforms) {
      const double freq = double(fired[row.kind]) / draws;
      CHECK(std::fabs(freq - row.probability) <= 0.02);
    }
  }
}

TEST_CASE("identity parameters leave pixels untouched") {
  const ImageU8 src = noise_image(102, 102, 31);
  const ImageU8 plain = apply_plan(src, {}, 78);

  auto identical = [&](const std::vector<AppliedTransform>& plan) {
    return apply_plan(src, plan, 78).pixels == plain.pixels;
  };
  CHECK(identical({{TransformKind::Zoom, {0.0}}}));
  CHECK(identical({{TransformKind::HueRotate, {0.0}}}));
  CHECK(identical({{TransformKind::HueRotate, {360.0}}}));
  CHECK(identical({{TransformKind::ColorShift, {0.0, 0.0, 0.0}}}));
  CHECK(identical({{TransformKind::Contrast, {1.0, 1.0, 1.0}}}));
  CHECK(identical({{TransformKind::Gamma, {1.0, 1.0, 1.0}}}));
  CHECK(identical({{TransformKind::Shift, {0.0, 0.0}}}));
  CHECK(identical({{TransformKind::Elastic, std::vector<double>(32, 0.0)}}));
}

TEST_CASE("plain apply_plan takes the center crop") {
  const ImageU8 src = noise_image(102, 102, 32);
  const ImageU8 out = apply_plan(src, {}, 78);
  CHECK(out.width == 78);
  CHECK(out.height == 78);
  for (int y = 0; y < 78; ++y)
    for (int x = 0; x < 78; ++x)
      for (int c = 0; c < 3; ++c)
        CHECK(out.px(x, y)[c] == src.px(x + 12, y + 12)[c]);
  CHECK_THROWS_AS(apply_plan(noise_image(90, 90, 33), {}, 78), ValidationError);
}

TEST_CASE("shift translates the crop window") {
  const ImageU8 src = noise_image(102, 102, 34);
  const ImageU8 out =
      apply_plan(src, {{TransformKind::Shift, {5.0, -3.0}}}, 78);
  for (int y = 0; y < 78; ++y)
    for (int x = 0; x < 78; ++x)
      for (int c = 0; c < 3; ++c)
        CHECK(out.px(x, y)[c] == src.px(x + 12 + 5, y + 12 - 3)[c]);
}

TEST_CASE("transpose mirrors across the diagonal and swaps pending shifts") {
  const ImageU8 src = noise_image(102, 102, 35);
  const ImageU8 t = apply_plan(src, {{TransformKind::Transpose, {}}}, 78);
  for (int y = 0; y < 78; ++y)
    for (int x = 0; x < 78; ++x)
      for (int c = 0; c < 3; ++c)
        CHECK(t.px(x, y)[c] == src.px(y + 12, x + 12)[c]);

  const ImageU8 twice = apply_plan(
      src, {{TransformKind::Transpose, {}}, {TransformKind::Transpose, {}}}, 78);
  CHECK(twice.pixels == apply_plan(src, {}, 78).pixels);

  const ImageU8 lhs = apply_plan(
      src, {{TransformKind::Shift, {4.0, 0.0}}, {TransformKind::Transpose, {}}},
      78);
  const ImageU8 rhs = apply_plan(
      src, {{TransformKind::Transpose, {}}, {TransformKind::Shift, {0.0, 4.0}}},
      78);
  CHECK(lhs.pixels == rhs.pixels);
}

TEST_CASE("constant elastic grids act as pure translations") {
  const ImageU8 src = noise_image(102, 102, 36);
  std::vector<double> grid(32);
  for (int i = 0; i < 16; ++i) {
    grid[size_t(i) * 2] = 3.0;       // dx
    grid[size_t(i) * 2 + 1] = -2.0;  // dy
  }
  const ImageU8 out = apply_plan(src, {{TransformKind::Elastic, grid}}, 78);
  for (int y = 0; y < 78; ++y)
    for (int x = 0; x < 78; ++x)
      for (int c = 0; c < 3; ++c)
        CHECK(out.px(x, y)[c] == src.px(x + 12 + 3, y + 12 - 2)[c]);
}

TEST_CASE("zoom keeps the exact center and rescales distances") {
  FloatPatch img(9, 9);
  for (int y = 0; y < 9; ++y)
    for (int x = 0; x < 9; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = float(10 * x + y);
  const float center = img.at(4, 4, 0);
  zoom_patch(img, 1.0);  // 2x magnification
  CHECK(img.at(4, 4, 0) == center);
  // A pixel 2 px from the center now samples the point 1 px from it.
  CHECK(img.at(6, 4, 0) == doctest::Approx(10 * 5 + 4).epsilon(1e-6));
  CHECK_THROWS_AS(zoom_patch(img, -1.0), ValidationError);
}

TEST_CASE("channel transforms follow their formulas") {
  FloatPatch img(1, 1);
  img.at(0, 0, 0) = 100.0f;
  img.at(0, 0, 1) = 200.0f;
  img.at(0, 0, 2) = 30.0f;

  FloatPatch shifted = img;
  color_shift(shifted, 60.0, 60.0, -40.0);
  CHECK(shifted.at(0, 0, 0) == 160.0f);
  CHECK(shifted.at(0, 0, 1) == 255.0f);  // clamped
  CHECK(shifted.at(0, 0, 2) == 0.0f);

  FloatPatch contrasted = img;
  contrast_correct(contrasted, 1.2, 0.8, 1.0);
  CHECK(contrasted.at(0, 0, 0) == doctest::Approx(128 + 1.2 * (100 - 128)));
  CHECK(contrasted.at(0, 0, 1) == doctest::Approx(128 + 0.8 * (200 - 128)));
  CHECK(contrasted.at(0, 0, 2) == 30.0f);

  FloatPatch gammaed = img;
  gamma_correct(gammaed, 2.0, 1.0, 0.5);
  CHECK(gammaed.at(0, 0, 0) ==
        doctest::Approx(255.0 * std::pow(100.0 / 255.0, 2.0)).epsilon(1e-6));
  CHECK(gammaed.at(0, 0, 1) == doctest::Approx(200.0).epsilon(1e-6));
  CHECK(gammaed.at(0, 0, 2) ==
        doctest::Approx(255.0 * std::pow(30.0 / 255.0, 0.5)).epsilon(1e-6));
}

TEST_CASE("hue rotation is cyclic and preserves grays") {
  FloatPatch img(2, 1);
  img.at(0, 0, 0) = 200.0f;  // saturated red-ish
  img.at(0, 0, 1) = 40.0f;
  img.at(0, 0, 2) = 40.0f;
  img.at(1, 0, 0) = 90.0f;  // gray stays gray under any hue
  img.at(1, 0, 1) = 90.0f;
  img.at(1, 0, 2) = 90.0f;

  FloatPatch three = img;
  for (int i = 0; i < 3; ++i) hue_rotate(three, 120.0);
  for (int c = 0; c < 3; ++c) {
    CHECK(std::fabs(three.at(0, 0, c) - img.at(0, 0, c)) < 1e-2);
    CHECK(three.at(1, 0, c) == 90.0f);
  }

  FloatPatch once = img;
  hue_rotate(once, 120.0);
  // 120 degrees sends the red channel's value to green.
  CHECK(std::fabs(once.at(0, 0, 1) - 200.0f) < 1e-2);
  CHECK(std::fabs(once.at(0, 0, 0) - 40.0f) < 1e-2);
  FloatPatch negative = img;
  hue_rotate(negative, -240.0);
  for (int c = 0; c < 3; ++c)
    CHECK(std::fabs(negative.at(0, 0, c) - once.at(0, 0, c)) < 1e-2);
}

TEST_CASE("quantize rounds half away from zero and clamps") {
  FloatPatch img(2, 2);
  img.at(0, 0, 0) = 99.4f;
  img.at(0, 0, 1) = 99.5f;
  img.at(0, 0, 2) = -3.0f;
  img.at(1, 0, 0) = 260.0f;
  img.at(1, 0, 1) = 0.0f;
  img.at(1, 0, 2) = 255.0f;
  const ImageU8 q = quantize(img);
  CHECK(q.px(0, 0)[0] == 99);
  CHECK(q.px(0, 0)[1] == 100);
  CHECK(q.px(0, 0)[2] == 0);
  CHECK(q.px(1, 0)[0] == 255);
  CHECK(q.px(1, 0)[1] == 0);
  CHECK(q.px(1, 0)[2] == 255);
  const FloatPatch back = to_float(q);
  CHECK(back.at(0, 0, 0) == 99.0f);
}

TEST_CASE("apply_policy is reproducible for a fixed rng") {
  const ImageU8 src = noise_image(110, 110, 40);
  Rng r1(9), r2(9);
  const ImageU8 a = apply_policy(src, policy_a(), r1);
  const ImageU8 b = apply_policy(src, policy_a(), r2);
  CHECK(a.width == 78);
  CHECK(a.pixels == b.pixels);

  Rng r3(10);
  bool any_diff = false;
  for (int i = 0; i < 5 && !any_diff; ++i)
    any_diff = apply_policy(src, policy_a(), r3).pixels != a.pixels;
  CHECK(any_diff);
}

#include "mitodet/augment.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "json_detail.hpp"

namespace mitodet {

namespace {

struct KindName {
  TransformKind kind;
  const char* name;
};

constexpr KindName kKindNames[] = {
    {TransformKind::Transpose, "transpose"},
    {TransformKind::Elastic, "elastic"},
    {TransformKind::Shift, "shift"},
    {TransformKind::Zoom, "zoom"},
    {TransformKind::HueRotate, "hue_rotate"},
    {TransformKind::ColorShift, "color_shift"},
    {TransformKind::Contrast, "contrast"},
    {TransformKind::Gamma, "gamma"},
};

// Bilinear sample with reflect borders; exact at integer coordinates.
float sample_bilinear(const FloatPatch& img, double x, double y, int c) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0;
  const double fy = y - y0;
  const int xa = reflect_index(x0, img.width);
  const int xb = reflect_index(x0 + 1, img.width);
  const int ya = reflect_index(y0, img.height);
  const int yb = reflect_index(y0 + 1, img.height);
  const double top = (1.0 - fx) * img.at(xa, ya, c) + fx * img.at(xb, ya, c);
  const double bot = (1.0 - fx) * img.at(xa, yb, c) + fx * img.at(xb, yb, c);
  return static_cast<float>((1.0 - fy) * top + fy * bot);
}

void rgb_to_hls(double r, double g, double b, double& h, double& l, double& s) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  l = (mx + mn) / 2.0;
  if (mx == mn) {
    h = 0.0;
    s = 0.0;
    return;
  }
  const double d = mx - mn;
  s = l > 0.5 ? d / (2.0 - mx - mn) : d / (mx + mn);
  double hh;
  if (mx == r)
    hh = (g - b) / d;
  else if (mx == g)
    hh = 2.0 + (b - r) / d;
  else
    hh = 4.0 + (r - g) / d;
  h = hh / 6.0;
  h -= std::floor(h);  // turns in [0, 1)
}

double hue_channel(double m1, double m2, double h) {
  h -= std::floor(h);
  if (h < 1.0 / 6.0) return m1 + (m2 - m1) * 6.0 * h;
  if (h < 0.5) return m2;
  if (h < 2.0 / 3.0) return m1 + (m2 - m1) * (2.0 / 3.0 - h) * 6.0;
  return m1;
}

void hls_to_rgb(double h, double l, double s, double& r, double& g, double& b) {
  if (s == 0.0) {
    r = g = b = l;
    return;
  }
  const double m2 = l <= 0.5 ? l * (1.0 + s) : l + s - l * s;
  const double m1 = 2.0 * l - m2;
  r = hue_channel(m1, m2, h + 1.0 / 3.0);
  g = hue_channel(m1, m2, h);
  b = hue_channel(m1, m2, h - 1.0 / 3.0);
}

int scalar_count(TransformKind kind) {
  switch (kind) {
    case TransformKind::Transpose:
      return 0;
    case TransformKind::Elastic:
      return -1;  // grid-sized, handled separately
    case TransformKind::Shift:
      return 2;
    case TransformKind::Zoom:
    case TransformKind::HueRotate:
      return 1;
    case TransformKind::ColorShift:
    case TransformKind::Contrast:
    case TransformKind::Gamma:
      return 3;
  }
  return 0;
}

}  // namespace

const char* transform_kind_name(TransformKind kind) {
  for (const auto& kn : kKindNames)
    if (kn.kind == kind) return kn.name;
  return "unknown";
}

TransformKind transform_kind_from_name(const std::string& name) {
  for (const auto& kn : kKindNames)
    if (name == kn.name) return kn.kind;
  throw ValidationError("augment: unknown transform kind '" + name + "'");
}

void to_json(json& j, const TransformSpec& t) {
  j = json{{"kind", transform_kind_name(t.kind)},
           {"range", {t.lo, t.hi}},
           {"probability", t.probability}};
}

void from_json(const json& j, TransformSpec& t) {
  t.kind = transform_kind_from_name(j.at("kind").get<std::string>());
  if (j.contains("range")) {
    t.lo = j.at("range").at(0).get<double>();
    t.hi = j.at("range").at(1).get<double>();
  }
  t.probability = j.at("probability").get<double>();
  if (t.probability < 0.0 || t.probability > 1.0)
    throw ValidationError("augment: probability must lie in [0, 1]");
  if (t.lo > t.hi)
    throw ValidationError("augment: transform range is inverted");
}

void to_json(json& j, const AugPolicy& p) {
  j = json{{"name", p.name}, {"transforms", p.transforms}};
}

void from_json(const json& j, AugPolicy& p) {
  p.name = j.value("name", std::string("custom"));
  p.transforms = j.at("transforms").get<std::vector<TransformSpec>>();
}

std::string AugPolicy::to_json_text() const {
  return json(*this).dump(2) + "\n";
}

AugPolicy AugPolicy::from_json_text(const std::string& text) {
  json j = json::parse(text);
  return j.get<AugPolicy>();
}

AugPolicy policy_a() {
  AugPolicy p;
  p.name = "A";
  p.transforms = {
      {TransformKind::Transpose, 0.0, 0.0, 0.5},
      {TransformKind::Elastic, -8.0, 8.0, 1.0},
      {TransformKind::Shift, -12.0, 12.0, 1.0},
      {TransformKind::Zoom, -0.10, 0.20, 0.5},
      {TransformKind::HueRotate, 0.0, 360.0, 0.8},
      {TransformKind::ColorShift, -51.0, 51.0, 0.8},
      {TransformKind::Contrast, 0.8, 1.2, 0.8},
      {TransformKind::Gamma, 1.0, 1.0, 0.0},
  };
  return p;
}

AugPolicy policy_b() {
  AugPolicy p;
  p.name = "B";
  p.transforms = {
      {TransformKind::Transpose, 0.0, 0.0, 0.5},
      {TransformKind::Elastic, -8.0, 8.0, 0.5},
      {TransformKind::Shift, -12.0, 12.0, 1.0},
      {TransformKind::Zoom, -0.10, 0.20, 0.5},
      {TransformKind::HueRotate, -60.0, 60.0, 0.5},
      {TransformKind::ColorShift, -51.0, 51.0, 0.5},
      {TransformKind::Contrast, 0.8, 1.2, 0.5},
      {TransformKind::Gamma, 0.8, 1.2, 0.5},
  };
  return p;
}

AugPolicy policy_by_name(const std::string& name) {
  if (name == "A" || name == "a") return policy_a();
  if (name == "B" || name == "b") return policy_b();
  throw ValidationError("augment: no policy preset named '" + name +
                        "' (expected \"A\" or \"B\")");
}

std::vector<double> sample_elastic_grid(double lo, double hi, Rng& rng,
                                        int grid) {
  if (grid < 2) throw ValidationError("augment: elastic grid must be >= 2");
  std::vector<double> disp(size_t(grid) * grid * 2);
  for (auto& d : disp) d = rng.uniform(lo, hi);
  return disp;
}

std::vector<AppliedTransform> sample_plan(const AugPolicy& policy, Rng& rng) {
  std::vector<AppliedTransform> plan;
  for (const auto& row : policy.transforms) {
    const bool fired = rng.uniform() < row.probability;
    if (!fired) continue;
    AppliedTransform t;
    t.kind = row.kind;
    if (row.kind == TransformKind::Elastic) {
      t.params = sample_elastic_grid(row.lo, row.hi, rng);
    } else if (row.kind == TransformKind::Shift) {
      const auto ilo = static_cast<int64_t>(std::ceil(row.lo));
      const auto ihi = static_cast<int64_t>(std::floor(row.hi));
      if (ilo > ihi)
        throw ValidationError("augment: shift range holds no integer");
      t.params.push_back(static_cast<double>(rng.uniform_int(ilo, ihi)));
      t.params.push_back(static_cast<double>(rng.uniform_int(ilo, ihi)));
    } else {
      for (int k = 0; k < scalar_count(row.kind); ++k)
        t.params.push_back(rng.uniform(row.lo, row.hi));
    }
    plan.push_back(std::move(t));
  }
  return plan;
}

FloatPatch to_float(const ImageU8& img) {
  FloatPatch out(img.width, img.height);
  for (size_t i = 0; i < img.pixels.size(); ++i)
    out.rgb[i] = static_cast<float>(img.pixels[i]);
  return out;
}

ImageU8 quantize(const FloatPatch& img) {
  ImageU8 out(img.width, img.height);
  for (size_t i = 0; i < img.rgb.size(); ++i)
    out.pixels[i] = static_cast<uint8_t>(
        std::clamp<long>(std::lround(img.rgb[i]), 0, 255));
  return out;
}

void transpose_patch(FloatPatch& img) {
  FloatPatch out(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(x, y, c);
  img = std::move(out);
}

void elastic_deform(FloatPatch& img, const std::vector<double>& grid_disp) {
  int grid = 2;
  while (size_t(grid) * grid * 2 < grid_disp.size()) ++grid;
  if (size_t(grid) * grid * 2 != grid_disp.size() || grid < 2)
    throw ValidationError(
        "augment: elastic displacement list must hold 2*g*g values");
  const double sx = double(grid - 1) / std::max(1, img.width - 1);
  const double sy = double(grid - 1) / std::max(1, img.height - 1);
  auto disp = [&](int gy, int gx, int axis) {
    return grid_disp[(size_t(gy) * grid + gx) * 2 + axis];
  };
  FloatPatch out(img.width, img.height);
  for (int y = 0; y < img.height; ++y) {
    const double gy = y * sy;
    const int g0 = std::min(grid - 2, static_cast<int>(gy));
    const double fy = gy - g0;
    for (int x = 0; x < img.width; ++x) {
      const double gx = x * sx;
      const int h0 = std::min(grid - 2, static_cast<int>(gx));
      const double fx = gx - h0;
      double d[2];
      for (int axis = 0; axis < 2; ++axis) {
        const double top = (1.0 - fx) * disp(g0, h0, axis) +
                           fx * disp(g0, h0 + 1, axis);
        const double bot = (1.0 - fx) * disp(g0 + 1, h0, axis) +
                           fx * disp(g0 + 1, h0 + 1, axis);
        d[axis] = (1.0 - fy) * top + fy * bot;
      }
      for (int c = 0; c < 3; ++c)
        out.at(x, y, c) = sample_bilinear(img, x + d[0], y + d[1], c);
    }
  }
  img = std::move(out);
}

void zoom_patch(FloatPatch& img, double alpha) {
  const double f = 1.0 + alpha;
  if (f <= 0.0) throw ValidationError("augment: zoom factor must be positive");
  if (f == 1.0) return;
  const double cx = (img.width - 1) / 2.0;
  const double cy = (img.height - 1) / 2.0;
  FloatPatch out(img.width, img.height);
  for (int y = 0; y < img.height; ++y) {
    const double sy = cy + (y - cy) / f;
    for (int x = 0; x < img.width; ++x) {
      const double sx = cx + (x - cx) / f;
      for (int c = 0; c < 3; ++c)
        out.at(x, y, c) = sample_bilinear(img, sx, sy, c);
    }
  }
  img = std::move(out);
}

void hue_rotate(FloatPatch& img, double degrees) {
  double turns = degrees / 360.0;
  turns -= std::floor(turns);
  if (turns == 0.0) return;  // full circles are exact identities
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double r = img.at(x, y, 0) / 255.0;
      const double g = img.at(x, y, 1) / 255.0;
      const double b = img.at(x, y, 2) / 255.0;
      double h, l, s;
      rgb_to_hls(r, g, b, h, l, s);
      h += turns;
      h -= std::floor(h);
      double ro, go, bo;
      hls_to_rgb(h, l, s, ro, go, bo);
      img.at(x, y, 0) = static_cast<float>(ro * 255.0);
      img.at(x, y, 1) = static_cast<float>(go * 255.0);
      img.at(x, y, 2) = static_cast<float>(bo * 255.0);
    }
  }
}

void color_shift(FloatPatch& img, double cr, double cg, double cb) {
  const double c[3] = {cr, cg, cb};
  for (size_t i = 0; i < img.rgb.size(); ++i)
    img.rgb[i] = static_cast<float>(
        std::clamp(img.rgb[i] + c[i % 3], 0.0, 255.0));
}

void contrast_correct(FloatPatch& img, double mr, double mg, double mb) {
  const double m[3] = {mr, mg, mb};
  for (size_t i = 0; i < img.rgb.size(); ++i)
    img.rgb[i] = static_cast<float>(
        std::clamp(128.0 + m[i % 3] * (img.rgb[i] - 128.0), 0.0, 255.0));
}

void gamma_correct(FloatPatch& img, double gr, double gg, double gb) {
  const double g[3] = {gr, gg, gb};
  for (size_t i = 0; i < img.rgb.size(); ++i) {
    const double v = std::clamp(double(img.rgb[i]), 0.0, 255.0) / 255.0;
    img.rgb[i] = static_cast<float>(255.0 * std::pow(v, g[i % 3]));
  }
}

ImageU8 apply_plan(const ImageU8& patch_with_margin,
                   const std::vector<AppliedTransform>& plan, int out_size) {
  if (out_size < 1) throw ValidationError("augment: out_size must be >= 1");
  const int need = out_size + 24;
  if (patch_with_margin.width < need || patch_with_margin.height < need)
    throw ValidationError(
        "augment: patch must carry at least 12 px of margin around the " +
        std::to_string(out_size) + "x" + std::to_string(out_size) + " core");
  FloatPatch img = to_float(patch_with_margin);
  long shift_x = 0, shift_y = 0;
  for (const auto& t : plan) {
    switch (t.kind) {
      case TransformKind::Transpose:
        transpose_patch(img);
        std::swap(shift_x, shift_y);
        break;
      case TransformKind::Elastic:
        elastic_deform(img, t.params);
        break;
      case TransformKind::Shift:
        shift_x += std::lround(t.params.at(0));
        shift_y += std::lround(t.params.at(1));
        break;
      case TransformKind::Zoom:
        zoom_patch(img, t.params.at(0));
        break;
      case TransformKind::HueRotate:
        hue_rotate(img, t.params.at(0));
        break;
      case TransformKind::ColorShift:
        color_shift(img, t.params.at(0), t.params.at(1), t.params.at(2));
        break;
      case TransformKind::Contrast:
        contrast_correct(img, t.params.at(0), t.params.at(1), t.params.at(2));
        break;
      case TransformKind::Gamma:
        gamma_correct(img, t.params.at(0), t.params.at(1), t.params.at(2));
        break;
    }
  }
  const long bx = (img.width - out_size) / 2 + shift_x;
  const long by = (img.height - out_size) / 2 + shift_y;
  ImageU8 out(out_size, out_size);
  for (int y = 0; y < out_size; ++y) {
    const int sy = reflect_index(static_cast<int>(by + y), img.height);
    for (int x = 0; x < out_size; ++x) {
      const int sx = reflect_index(static_cast<int>(bx + x), img.width);
      for (int c = 0; c < 3; ++c)
        out.pixels[(size_t(y) * out_size + x) * 3 + c] =
            static_cast<uint8_t>(
                std::clamp<long>(std::lround(img.at(sx, sy, c)), 0, 255));
    }
  }
  return out;
}

ImageU8 apply_policy(const ImageU8& patch_with_margin, const AugPolicy& policy,
                     Rng& rng, int out_size) {
  return apply_plan(patch_with_margin, sample_plan(policy, rng), out_size);
}

}  // namespace mitodet

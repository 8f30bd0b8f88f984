#include "mitodet/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json_detail.hpp"
#include "mitodet/image.hpp"
#include "mitodet/rng.hpp"

namespace mitodet {

namespace fs = std::filesystem;

namespace {

using Vec3 = std::array<double, 3>;

Vec3 normalize(const Vec3& v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  return {v[0] / n, v[1] / n, v[2] / n};
}

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
          a[0] * b[1] - a[1] * b[0]};
}

// Smooth noise in [-1,1]: random grid values, bilinear interpolation.
struct ValueNoise {
  int gw, gh, step;
  std::vector<double> grid;

  ValueNoise(int w, int h, int step_, Rng& rng) : step(step_) {
    gw = w / step + 2;
    gh = h / step + 2;
    grid.resize(size_t(gw) * gh);
    for (auto& v : grid) v = rng.uniform(-1.0, 1.0);
  }

  double at(double x, double y) const {
    const double gx = x / step, gy = y / step;
    const int x0 = static_cast<int>(gx), y0 = static_cast<int>(gy);
    const double fx = gx - x0, fy = gy - y0;
    auto g = [&](int xi, int yi) {
      return grid[size_t(std::min(yi, gh - 1)) * gw + std::min(xi, gw - 1)];
    };
    const double top = g(x0, y0) * (1 - fx) + g(x0 + 1, y0) * fx;
    const double bot = g(x0, y0 + 1) * (1 - fx) + g(x0 + 1, y0 + 1) * fx;
    return top * (1 - fy) + bot * fy;
  }
};

struct Blob {
  double x = 0, y = 0;
  double a = 0, b = 0;       // ellipse semi-axes
  double theta = 0;          // orientation
  double wob1 = 0, wob2 = 0;  // boundary wobble amplitudes
  int k1 = 3, k2 = 5;        // wobble harmonics
  double ph1 = 0, ph2 = 0;
  double edge = 1.5;         // soft edge width, px
  double strength = 1.0;     // OD magnitude
  bool textured = false;

  double radius() const { return std::max(a, b); }

  // Coverage in [0,1] of pixel center (px,py).
  double alpha(double px, double py) const {
    const double dx = px - x, dy = py - y;
    const double u = dx * std::cos(theta) + dy * std::sin(theta);
    const double v = -dx * std::sin(theta) + dy * std::cos(theta);
    const double rho = std::sqrt((u / a) * (u / a) + (v / b) * (v / b));
    const double phi = std::atan2(v, u);
    const double w = 1.0 + wob1 * std::sin(k1 * phi + ph1) +
                     wob2 * std::sin(k2 * phi + ph2);
    const double e = edge / std::min(a, b);
    return std::clamp((w - rho) / e, 0.0, 1.0);
  }
};

struct Placer {
  std::vector<std::array<double, 2>> points;
  std::vector<std::array<double, 3>> avoid;  // x, y, min separation

  bool try_place(Rng& rng, double lo_x, double hi_x, double lo_y, double hi_y,
                 double min_sep, int tries, double& out_x, double& out_y) {
    for (int t = 0; t < tries; ++t) {
      const double x = rng.uniform(lo_x, hi_x);
      const double y = rng.uniform(lo_y, hi_y);
      bool ok = true;
      for (const auto& p : points) {
        const double dx = x - p[0], dy = y - p[1];
        if (dx * dx + dy * dy < min_sep * min_sep) {
          ok = false;
          break;
        }
      }
      if (ok) {
        for (const auto& a : avoid) {
          const double dx = x - a[0], dy = y - a[1];
          if (dx * dx + dy * dy < a[2] * a[2]) {
            ok = false;
            break;
          }
        }
      }
      if (ok) {
        points.push_back({x, y});
        out_x = x;
        out_y = y;
        return true;
      }
    }
    return false;
  }
};

struct DomainStain {
  Vec3 h, e, residual;
};

DomainStain domain_stain(uint64_t seed, int domain) {
  Rng rng = Rng::split(seed, 1000000 + static_cast<uint64_t>(domain));
  auto perturb = [&](Vec3 v) {
    for (auto& c : v) c = std::max(0.01, c + rng.uniform(-0.05, 0.05));
    return normalize(v);
  };
  DomainStain d;
  d.h = perturb(reference_hematoxylin());
  d.e = perturb(reference_eosin());
  d.residual = normalize(cross(d.h, d.e));
  return d;
}

}  // namespace

std::array<double, 3> reference_hematoxylin() {
  return normalize(Vec3{0.65, 0.70, 0.29});
}

std::array<double, 3> reference_eosin() {
  return normalize(Vec3{0.07, 0.99, 0.11});
}

void SynthSpec::validate() const {
  if (images < 1) throw ValidationError("synth spec: need at least 1 image");
  if (width < 128 || height < 128)
    throw ValidationError("synth spec: images must be at least 128x128");
  if (domains < 1 || domains > images)
    throw ValidationError("synth spec: domains must be in [1, images]");
  if (positives_per_image < 0 || impostors_per_image < 0 || ink_total < 0)
    throw ValidationError("synth spec: negative object count");
  if (ink_total > images)
    throw ValidationError("synth spec: at most one ink artifact per image");
}

std::string SynthSpec::to_json_text() const {
  json j{{"images", images},         {"width", width},
         {"height", height},         {"domains", domains},
         {"positives_per_image", positives_per_image},
         {"impostors_per_image", impostors_per_image},
         {"ink_total", ink_total}};
  return j.dump(2) + "\n";
}

SynthSpec SynthSpec::from_json_text(const std::string& text) {
  const json j = json::parse(text);
  SynthSpec s;
  s.images = j.value("images", s.images);
  s.width = j.value("width", s.width);
  s.height = j.value("height", s.height);
  s.domains = j.value("domains", s.domains);
  s.positives_per_image = j.value("positives_per_image", s.positives_per_image);
  s.impostors_per_image = j.value("impostors_per_image", s.impostors_per_image);
  s.ink_total = j.value("ink_total", s.ink_total);
  s.validate();
  return s;
}

std::vector<ImageRecord> generate_synthetic_dataset(const SynthSpec& spec,
                                                    uint64_t seed,
                                                    const std::string& out_dir) {
  spec.validate();
  fs::create_directories(fs::path(out_dir) / "images");

  std::vector<DomainStain> stains;
  for (int d = 0; d < spec.domains; ++d) stains.push_back(domain_stain(seed, d));

  std::vector<ImageRecord> records;
  json log_inks = json::array();

  const int W = spec.width, H = spec.height;
  for (int i = 0; i < spec.images; ++i) {
    Rng rng = Rng::split(seed, static_cast<uint64_t>(i));
    const int d = i % spec.domains;
    const DomainStain& st = stains[d];

    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "img%03d", i);
    ImageRecord rec;
    rec.id = idbuf;
    rec.file = std::string("images/") + idbuf + ".png";
    rec.domain = "d" + std::to_string(d);
    rec.width = W;
    rec.height = H;

    // Background: smoothly varying H/E mixture, hue balance per domain.
    const double dh = 1.0 + 0.25 * ((d % 3) - 1);   // 0.75, 1.0, 1.25
    const double de = 1.0 - 0.20 * ((d % 3) - 1);
    ValueNoise lf1(W, H, 20, rng), lf2(W, H, 20, rng);
    ValueNoise hf(W, H, 3, rng);  // chromatin texture field

    Placer objects;   // positives + impostors, mutually separated
    Placer nuclei;    // faint background nuclei
    std::vector<Blob> blobs;
    std::vector<Blob> ink_blobs;

    // Ink artifacts go down first; image i gets one while i < ink_total.
    // Cells are then sampled clear of the ink disk.
    if (i < spec.ink_total) {
      const double margin = 60.0;
      Blob b;
      b.x = std::round(rng.uniform(margin, W - 1 - margin));
      b.y = std::round(rng.uniform(margin, H - 1 - margin));
      // Sized close to the 78 px screening window so the box-averaged
      // density peaks sharply at the blob center instead of on a plateau.
      b.a = b.b = rng.uniform(39.0, 40.0);
      b.theta = 0.0;
      b.wob1 = 0.04;
      b.k1 = 3;
      b.ph1 = rng.uniform(0.0, 6.2831853);
      b.edge = 2.0;
      b.strength = rng.uniform(1.4, 1.7);
      ink_blobs.push_back(b);
      objects.avoid.push_back({b.x, b.y, 62.0});
      log_inks.push_back({{"image_id", rec.id},
                          {"x", static_cast<int>(b.x)},
                          {"y", static_cast<int>(b.y)},
                          {"radius", b.a},
                          {"residual_od", b.strength}});
    }

    auto sample_cell = [&](bool positive) {
      const double margin = 40.0;
      double x, y;
      if (!objects.try_place(rng, margin, W - 1 - margin, margin,
                             H - 1 - margin, 36.0, 4000, x, y))
        throw ValidationError("synth spec too dense: cannot place objects in '" +
                              rec.id + "'");
      Blob b;
      b.x = std::round(x);
      b.y = std::round(y);
      const double r = rng.uniform(6.0, 9.0);
      const double ecc = rng.uniform(1.05, 1.45);
      b.a = r * ecc;
      b.b = r / ecc;
      b.theta = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      b.strength = rng.uniform(1.2, 1.7);
      if (positive) {
        b.wob1 = rng.uniform(0.16, 0.26);
        b.wob2 = rng.uniform(0.08, 0.16);
        b.k1 = rng.uniform_int(2, 3);
        b.k2 = rng.uniform_int(4, 7);
        b.ph1 = rng.uniform(0.0, 6.2831853);
        b.ph2 = rng.uniform(0.0, 6.2831853);
        b.edge = 1.2;
        b.textured = true;
      } else {
        // Impostor: same color and size, but a smooth regular disk.
        b.a = b.b = r;
        b.edge = 2.5;
        b.textured = false;
      }
      blobs.push_back(b);
      Annotation a;
      a.x = b.x;
      a.y = b.y;
      a.label = positive ? Label::MitoticFigure : Label::NonMitoticFigure;
      rec.annotations.push_back(a);
    };
    for (int p = 0; p < spec.positives_per_image; ++p) sample_cell(true);
    for (int p = 0; p < spec.impostors_per_image; ++p) sample_cell(false);

    // Ordinary nuclei, kept clear of the labeled objects. Dense enough that
    // the in-plane angular spread of tissue dominates the OD scatter.
    const int nuclei_count = (W * H) / 600;
    for (int nid = 0; nid < nuclei_count; ++nid) {
      double x, y;
      if (!nuclei.try_place(rng, 8.0, W - 9.0, 8.0, H - 9.0, 14.0, 40, x, y))
        continue;
      bool clear = true;
      for (const auto& p : objects.points) {
        const double dx = x - p[0], dy = y - p[1];
        if (dx * dx + dy * dy < 30.0 * 30.0) {
          clear = false;
          break;
        }
      }
      if (!clear) continue;
      Blob b;
      b.x = x;
      b.y = y;
      const double r = rng.uniform(3.5, 6.5);
      const double ecc = rng.uniform(1.0, 1.3);
      b.a = r * ecc;
      b.b = r / ecc;
      b.theta = rng.uniform(0.0, 6.2831853);
      b.strength = rng.uniform(0.5, 1.0);
      b.edge = 1.5;
      blobs.push_back(b);
    }

    // In-plane pedestal per ink blob keeping its OD non-negative per channel.
    std::vector<double> ink_peds;
    for (const auto& b : ink_blobs) {
      double ped = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double he = st.h[c] + st.e[c];
        ped = std::max(ped, (0.02 - b.strength * st.residual[c]) / he);
      }
      ink_peds.push_back(ped);
    }

    // Rasterize optical densities, then expose to RGB.
    ImageU8 img;
    img.width = W;
    img.height = H;
    img.pixels.assign(size_t(W) * H * 3, 0);
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const double ch = dh * (0.08 + 0.05 * lf1.at(x, y));
        const double ce = de * (0.18 + 0.08 * lf2.at(x, y));
        Vec3 od = {ch * st.h[0] + ce * st.e[0], ch * st.h[1] + ce * st.e[1],
                   ch * st.h[2] + ce * st.e[2]};
        for (const auto& b : blobs) {
          if (std::abs(x - b.x) > b.radius() * 1.6 ||
              std::abs(y - b.y) > b.radius() * 1.6)
            continue;
          double a = b.alpha(x, y);
          if (a <= 0.0) continue;
          double s = b.strength;
          if (b.textured) s *= std::max(0.25, 1.0 + 0.45 * hf.at(x, y));
          const double oh = a * s * 0.9, oe = a * s * 0.1;
          for (int c = 0; c < 3; ++c) od[c] += oh * st.h[c] + oe * st.e[c];
        }
        for (size_t bi = 0; bi < ink_blobs.size(); ++bi) {
          const Blob& b = ink_blobs[bi];
          if (std::abs(x - b.x) > b.radius() * 1.6 ||
              std::abs(y - b.y) > b.radius() * 1.6)
            continue;
          const double a = b.alpha(x, y);
          if (a <= 0.0) continue;
          for (int c = 0; c < 3; ++c) {
            od[c] += a * (b.strength * st.residual[c] +
                          ink_peds[bi] * (st.h[c] + st.e[c]));
          }
        }
        for (int c = 0; c < 3; ++c) {
          const double inten = 256.0 * std::pow(10.0, -std::max(0.0, od[c])) - 1.0;
          img.px(x, y)[c] =
              static_cast<uint8_t>(std::clamp(std::lround(inten), 0l, 255l));
        }
      }
    }
    write_png(fs::path(out_dir) / rec.file, img);
    records.push_back(std::move(rec));
  }

  const std::string manifest_path =
      (fs::path(out_dir) / "manifest.json").string();
  save_manifest(records, manifest_path);

  json domains = json::array();
  for (int d = 0; d < spec.domains; ++d) {
    domains.push_back({{"name", "d" + std::to_string(d)},
                       {"hematoxylin", stains[d].h},
                       {"eosin", stains[d].e},
                       {"residual", stains[d].residual}});
  }
  json log{{"seed", seed},
           {"spec", json::parse(spec.to_json_text())},
           {"domains", domains},
           {"inks", log_inks}};
  std::ofstream os((fs::path(out_dir) / "synth_log.json").string(),
                   std::ios::trunc);
  os << log.dump(2) << "\n";

  return load_manifest(manifest_path);
}

std::vector<InkTruth> load_ink_truth(const std::string& synth_log_path) {
  std::ifstream is(synth_log_path);
  if (!is) throw IoError("cannot open '" + synth_log_path + "'");
  const json j = json::parse(is);
  std::vector<InkTruth> out;
  for (const auto& ji : j.at("inks")) {
    InkTruth t;
    t.image_id = ji.at("image_id").get<std::string>();
    t.x = ji.at("x").get<int>();
    t.y = ji.at("y").get<int>();
    t.radius = ji.at("radius").get<double>();
    t.residual_od = ji.at("residual_od").get<double>();
    out.push_back(t);
  }
  return out;
}

}  // namespace mitodet

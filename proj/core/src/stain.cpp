#include "mitodet/stain.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

#include "mitodet/rng.hpp"

namespace mitodet {

namespace {

// Flip so the largest-magnitude component is positive.
Eigen::Vector3d fix_sign(Eigen::Vector3d v) {
  int imax = 0;
  for (int i = 1; i < 3; ++i)
    if (std::abs(v[i]) > std::abs(v[imax])) imax = i;
  if (v[imax] < 0.0) v = -v;
  return v;
}

std::array<double, 3> to_array(const Eigen::Vector3d& v) {
  return {v[0], v[1], v[2]};
}

double percentile(std::vector<double>& sorted_vals, double pct) {
  const auto n = sorted_vals.size();
  const auto idx = static_cast<size_t>(std::clamp(
      std::lround(pct / 100.0 * double(n - 1)), 0l, long(n - 1)));
  return sorted_vals[idx];
}

}  // namespace

ODImage to_optical_density(const ImageU8& img, double i0) {
  ODImage out(img.width, img.height);
  // 256 possible inputs only, so precompute the transfer curve.
  std::array<float, 256> lut;
  for (int i = 0; i < 256; ++i)
    lut[i] = static_cast<float>(-std::log10((i + 1.0) / (i0 + 1.0)));
  for (size_t i = 0; i < img.pixels.size(); ++i) out.od[i] = lut[img.pixels[i]];
  return out;
}

ImageU8 from_optical_density(const ODImage& od, double i0) {
  ImageU8 out(od.width, od.height);
  for (size_t i = 0; i < od.od.size(); ++i) {
    const double intensity = (i0 + 1.0) * std::pow(10.0, -double(od.od[i])) - 1.0;
    out.pixels[i] =
        static_cast<uint8_t>(std::clamp<long>(std::lround(intensity), 0, 255));
  }
  return out;
}

StainBasis estimate_basis(const ODImage& od, double beta, double alpha_pct) {
  std::vector<Eigen::Vector3d> fg;
  const size_t n_px = size_t(od.width) * od.height;
  for (size_t i = 0; i < n_px; ++i) {
    const Eigen::Vector3d v(od.od[3 * i], od.od[3 * i + 1], od.od[3 * i + 2]);
    if (v.norm() > beta) fg.push_back(v);
  }
  if (fg.size() < 100)
    throw ValidationError(
        "insufficient tissue: " + std::to_string(fg.size()) +
        " foreground pixels above beta, need at least 100");

  Eigen::Matrix3d scatter = Eigen::Matrix3d::Zero();
  for (const auto& v : fg) scatter += v * v.transpose();
  scatter /= double(fg.size());

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(scatter);
  // Eigen sorts eigenvalues ascending; the top two span the stain plane.
  const Eigen::Vector3d e1 = fix_sign(eig.eigenvectors().col(2));
  const Eigen::Vector3d e2 = fix_sign(eig.eigenvectors().col(1));

  std::vector<double> angles;
  angles.reserve(fg.size());
  for (const auto& v : fg) angles.push_back(std::atan2(v.dot(e2), v.dot(e1)));
  std::sort(angles.begin(), angles.end());
  const double phi_lo = percentile(angles, alpha_pct);
  const double phi_hi = percentile(angles, 100.0 - alpha_pct);

  const Eigen::Vector3d v_lo = std::cos(phi_lo) * e1 + std::sin(phi_lo) * e2;
  const Eigen::Vector3d v_hi = std::cos(phi_hi) * e1 + std::sin(phi_hi) * e2;
  // Hematoxylin is the blue-dominant extreme (blue = channel 2).
  const bool lo_is_h = v_lo[2] >= v_hi[2];
  const Eigen::Vector3d h = lo_is_h ? v_lo : v_hi;
  const Eigen::Vector3d e = lo_is_h ? v_hi : v_lo;
  const Eigen::Vector3d residual = fix_sign(e1.cross(e2).normalized());

  StainBasis basis;
  basis.columns[0] = to_array(h.normalized());
  basis.columns[1] = to_array(e.normalized());
  basis.columns[2] = to_array(residual);
  return basis;
}

DensityMap residual_density_map(const ODImage& od, const StainBasis& basis,
                                int window) {
  if (window < 1) throw ValidationError("stain: window must be >= 1");
  DensityMap map;
  map.offset = (window - 1) / 2;
  if (od.width < window || od.height < window) return map;
  map.width = od.width - window + 1;
  map.height = od.height - window + 1;
  map.density.assign(size_t(map.width) * map.height, 0.0f);

  const auto& r = basis.columns[2];
  const int w = od.width, h = od.height;
  // Integral image of |<OD, residual>| with a zero top row and left column.
  std::vector<double> integral(size_t(w + 1) * (h + 1), 0.0);
  for (int y = 0; y < h; ++y) {
    double row = 0.0;
    for (int x = 0; x < w; ++x) {
      const double p = std::abs(od.at(x, y, 0) * r[0] + od.at(x, y, 1) * r[1] +
                                od.at(x, y, 2) * r[2]);
      row += p;
      integral[size_t(y + 1) * (w + 1) + (x + 1)] =
          integral[size_t(y) * (w + 1) + (x + 1)] + row;
    }
  }
  const double inv_area = 1.0 / (double(window) * window);
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      const double sum = integral[size_t(y + window) * (w + 1) + (x + window)] -
                         integral[size_t(y) * (w + 1) + (x + window)] -
                         integral[size_t(y + window) * (w + 1) + x] +
                         integral[size_t(y) * (w + 1) + x];
      map.at(x, y) = static_cast<float>(sum * inv_area);
    }
  }
  return map;
}

std::vector<ScreenedCandidate> screen_image(const ImageU8& img,
                                            const std::string& image_id,
                                            const ScreenConfig& cfg) {
  if (cfg.density_threshold <= 0.0)
    throw ValidationError("stain: density threshold must be positive");
  const ODImage od = to_optical_density(img);
  ODImage masked = od;
  if (cfg.od_norm_cap > 0.0) {
    const double cap2 = cfg.od_norm_cap * cfg.od_norm_cap;
    const size_t n_px = size_t(od.width) * od.height;
    for (size_t i = 0; i < n_px; ++i) {
      const double n2 = double(od.od[3 * i]) * od.od[3 * i] +
                        double(od.od[3 * i + 1]) * od.od[3 * i + 1] +
                        double(od.od[3 * i + 2]) * od.od[3 * i + 2];
      if (n2 > cap2)
        masked.od[3 * i] = masked.od[3 * i + 1] = masked.od[3 * i + 2] = 0.0f;
    }
  }
  StainBasis basis;
  try {
    basis = estimate_basis(masked, cfg.beta, cfg.alpha_pct);
  } catch (const ValidationError&) {
    return {};  // blank or near-blank image: nothing to screen
  }
  const DensityMap map = residual_density_map(od, basis, cfg.window);

  struct Peak {
    int x, y;
    float d;
  };
  std::vector<Peak> peaks;
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      const float d = map.at(x, y);
      if (!(d > cfg.density_threshold)) continue;
      bool is_max = true;
      for (int dy = -1; dy <= 1 && is_max; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          if (dx == 0 && dy == 0) continue;
          const int nx = x + dx, ny = y + dy;
          if (nx < 0 || ny < 0 || nx >= map.width || ny >= map.height) continue;
          if (map.at(nx, ny) > d) {
            is_max = false;
            break;
          }
        }
      }
      if (is_max) peaks.push_back({x, y, d});
    }
  }
  std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
    if (a.d != b.d) return a.d > b.d;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });

  std::vector<ScreenedCandidate> kept;
  const double min_sep2 = double(cfg.min_separation) * cfg.min_separation;
  for (const auto& p : peaks) {
    if (int(kept.size()) >= cfg.max_per_image) break;
    const int cx = p.x + map.offset, cy = p.y + map.offset;
    bool clear = true;
    for (const auto& k : kept) {
      const double dx = cx - k.cx, dy = cy - k.cy;
      if (dx * dx + dy * dy < min_sep2) {
        clear = false;
        break;
      }
    }
    if (clear) kept.push_back({image_id, cx, cy, p.d, 0.0});
  }
  return kept;
}

std::vector<ScreenedCandidate> screen_candidates(
    const std::vector<ImageRecord>& records, const ScreenConfig& cfg) {
  std::vector<ScreenedCandidate> all;
  for (const auto& rec : records) {
    const ImageU8 img = read_png(rec.file);
    auto found = screen_image(img, rec.id, cfg);
    all.insert(all.end(), found.begin(), found.end());
  }
  std::sort(all.begin(), all.end(),
            [](const ScreenedCandidate& a, const ScreenedCandidate& b) {
              if (a.density != b.density) return a.density > b.density;
              if (a.image_id != b.image_id) return a.image_id < b.image_id;
              if (a.cy != b.cy) return a.cy < b.cy;
              return a.cx < b.cx;
            });
  return all;
}

std::vector<PatchRef> to_patch_refs(const std::vector<ScreenedCandidate>& cs) {
  std::vector<PatchRef> refs;
  refs.reserve(cs.size());
  for (const auto& c : cs)
    refs.push_back({c.image_id, c.cx, c.cy, PatchLabel::Negative});
  return refs;
}

}  // namespace mitodet

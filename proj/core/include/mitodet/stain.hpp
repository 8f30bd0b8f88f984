#pragma once

#include <array>
#include <string>
#include <vector>

#include "mitodet/dataset.hpp"
#include "mitodet/image.hpp"
#include "mitodet/manifest.hpp"

namespace mitodet {

// Optical-density image: 3 nonnegative f32 values per pixel.
struct ODImage {
  int width = 0;
  int height = 0;
  std::vector<float> od;  // row-major, 3 per pixel

  ODImage() = default;
  ODImage(int w, int h) : width(w), height(h), od(size_t(w) * h * 3, 0.0f) {}

  float at(int x, int y, int c) const {
    return od[(size_t(y) * width + x) * 3 + c];
  }
  float& at(int x, int y, int c) {
    return od[(size_t(y) * width + x) * 3 + c];
  }
};

// Unit-norm OD direction columns: hematoxylin, eosin, residual. The
// residual is the unit normal of the H/E plane; H is the blue-dominant
// column of the two in-plane directions.
struct StainBasis {
  std::array<std::array<double, 3>, 3> columns{};  // [col][component]

  std::array<double, 3> hematoxylin() const { return columns[0]; }
  std::array<double, 3> eosin() const { return columns[1]; }
  std::array<double, 3> residual() const { return columns[2]; }
};

// OD_c = -log10((I_c + 1) / (i0 + 1)); the +1 keeps I=0 finite and makes
// I=i0 map to exactly zero.
ODImage to_optical_density(const ImageU8& img, double i0 = 255.0);
ImageU8 from_optical_density(const ODImage& od, double i0 = 255.0);

// Macenko-style basis estimation: pixels with ||OD|| > beta define a
// scatter matrix whose top-2 eigenvectors span the stain plane; H and E sit
// at the alpha_pct / (100 - alpha_pct) angle percentiles of the projected
// foreground. Throws ValidationError("insufficient tissue ...") when fewer
// than 100 pixels pass the beta cut.
StainBasis estimate_basis(const ODImage& od, double beta = 0.15,
                          double alpha_pct = 1.0);

// Box-averaged |<OD, residual>| over a square window; entry (x, y) covers
// the window with top-left (x, y), i.e. image center (x + offset, y + offset).
struct DensityMap {
  int width = 0;
  int height = 0;
  int offset = 0;  // map index -> image center coordinate shift
  std::vector<float> density;

  float at(int x, int y) const { return density[size_t(y) * width + x]; }
  float& at(int x, int y) { return density[size_t(y) * width + x]; }
};

DensityMap residual_density_map(const ODImage& od, const StainBasis& basis,
                                int window = 78);

struct ScreenConfig {
  double beta = 0.15;
  double alpha_pct = 1.0;
  int window = 78;
  double density_threshold = 0.25;
  int max_per_image = 10;
  int min_separation = 78;
  // Pixels darker than this OD norm (saturated ink, pen, dust) are masked
  // out of basis estimation so artifacts cannot pull the stain plane toward
  // themselves. The density map still scores every pixel.
  double od_norm_cap = 1.5;
};

struct ScreenedCandidate {
  std::string image_id;
  int cx = 0;
  int cy = 0;
  double density = 0.0;
  double model_score = 0.0;  // filled in by mining when a model filters
};

// Screens one image with a basis estimated from that image. Candidates are
// density-map local maxima above the threshold, kept greedily from the
// densest down with min_separation spacing, capped at max_per_image.
std::vector<ScreenedCandidate> screen_image(const ImageU8& img,
                                            const std::string& image_id,
                                            const ScreenConfig& cfg);

// Runs screen_image over every record; images whose basis estimation finds
// insufficient tissue contribute no candidates. Result is sorted by
// descending density (ties by image_id, then y, then x).
std::vector<ScreenedCandidate> screen_candidates(
    const std::vector<ImageRecord>& records, const ScreenConfig& cfg);

std::vector<PatchRef> to_patch_refs(const std::vector<ScreenedCandidate>& cs);

}  // namespace mitodet

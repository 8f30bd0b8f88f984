#pragma once

#include <string>
#include <vector>

#include "mitodet/image.hpp"
#include "mitodet/rng.hpp"

namespace mitodet {

enum class TransformKind {
  Transpose,
  Elastic,
  Shift,
  Zoom,
  HueRotate,
  ColorShift,
  Contrast,
  Gamma,
};

const char* transform_kind_name(TransformKind kind);
TransformKind transform_kind_from_name(const std::string& name);

// One augmentation row: fires with `probability`; each sampled scalar is
// drawn uniformly from [lo, hi]. The kind fixes how many scalars are drawn
// (shift 2, zoom/hue 1, color/contrast/gamma 3 per channel, elastic one per
// control-grid displacement component, transpose none). Zoom stores the
// fractional magnification alpha, so -0.10 means "-10%".
struct TransformSpec {
  TransformKind kind = TransformKind::Transpose;
  double lo = 0.0;
  double hi = 0.0;
  double probability = 0.0;
};

// Ordered transform list; presets "A" and "B" ship with the library.
struct AugPolicy {
  std::string name;
  std::vector<TransformSpec> transforms;

  std::string to_json_text() const;
  static AugPolicy from_json_text(const std::string& text);
};

AugPolicy policy_a();
AugPolicy policy_b();
AugPolicy policy_by_name(const std::string& name);

// A transform that fired during one stochastic pass, with its drawn params.
struct AppliedTransform {
  TransformKind kind = TransformKind::Transpose;
  std::vector<double> params;
};

// Scans the policy rows in order; each row fires independently with its
// probability and, when fired, draws its parameters. Pure in (policy, rng).
std::vector<AppliedTransform> sample_plan(const AugPolicy& policy, Rng& rng);

// Working image for the float pipeline; values live on the 0..255 scale and
// are quantized exactly once when the final crop is taken.
struct FloatPatch {
  int width = 0;
  int height = 0;
  std::vector<float> rgb;  // row-major, 3 floats per pixel

  FloatPatch() = default;
  FloatPatch(int w, int h) : width(w), height(h), rgb(size_t(w) * h * 3, 0.0f) {}

  float at(int x, int y, int c) const {
    return rgb[(size_t(y) * width + x) * 3 + c];
  }
  float& at(int x, int y, int c) {
    return rgb[(size_t(y) * width + x) * 3 + c];
  }
};

FloatPatch to_float(const ImageU8& img);
ImageU8 quantize(const FloatPatch& img);

// Individual transforms. Geometric ops resample with reflect borders;
// identity parameters reproduce the input bit-for-bit.
void transpose_patch(FloatPatch& img);
void elastic_deform(FloatPatch& img, const std::vector<double>& grid_disp);
void zoom_patch(FloatPatch& img, double alpha);
void hue_rotate(FloatPatch& img, double degrees);
void color_shift(FloatPatch& img, double cr, double cg, double cb);
void contrast_correct(FloatPatch& img, double mr, double mg, double mb);
void gamma_correct(FloatPatch& img, double gr, double gg, double gb);

// Displacements for a grid x grid control lattice, row-major, dx then dy
// per point, each uniform in [lo, hi] pixels.
std::vector<double> sample_elastic_grid(double lo, double hi, Rng& rng,
                                        int grid = 4);

// Runs a sampled plan over a margined patch and takes the final center
// crop. Spatial shifts translate the crop window; the crop itself uses
// reflect indexing, so custom policies may shift past the margin.
ImageU8 apply_plan(const ImageU8& patch_with_margin,
                   const std::vector<AppliedTransform>& plan, int out_size);

// sample_plan + apply_plan. The input must carry at least 12 px of margin
// around the out_size x out_size core.
ImageU8 apply_policy(const ImageU8& patch_with_margin, const AugPolicy& policy,
                     Rng& rng, int out_size = 78);

}  // namespace mitodet

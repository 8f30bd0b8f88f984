#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mitodet/manifest.hpp"

namespace mitodet {

struct SynthSpec {
  int images = 24;
  int width = 256, height = 256;
  int domains = 3;            // each domain: perturbed stain pair + background
  int positives_per_image = 5;
  int impostors_per_image = 4;
  int ink_total = 3;          // ink artifacts across the whole set

  void validate() const;
  std::string to_json_text() const;
  static SynthSpec from_json_text(const std::string& text);
};

struct InkTruth {
  std::string image_id;
  int x = 0, y = 0;
  double radius = 0.0;
  double residual_od = 0.0;  // planted OD along the plane normal
};

// Writes out_dir/images/*.png, out_dir/manifest.json and
// out_dir/synth_log.json (per-domain stain vectors, object lists, ink ground
// truth), then returns the reloaded manifest. Deterministic given
// (spec, seed): byte-identical files on rerun.
//
// Positives are dark, boundary-wobbled, chromatin-textured ellipses
// (mitotic-figure annotations); impostors share the color distribution but
// are smooth regular disks (non-mitotic-figure annotations); ink artifacts
// carry optical density far out of the synthetic H/E plane.
std::vector<ImageRecord> generate_synthetic_dataset(const SynthSpec& spec,
                                                    uint64_t seed,
                                                    const std::string& out_dir);

// Ground truth recorded by the generator, reloaded from synth_log.json.
std::vector<InkTruth> load_ink_truth(const std::string& synth_log_path);

// Reference H&E optical-density column vectors used by the generator
// (before per-domain perturbation), unit norm.
std::array<double, 3> reference_hematoxylin();
std::array<double, 3> reference_eosin();

}  // namespace mitodet

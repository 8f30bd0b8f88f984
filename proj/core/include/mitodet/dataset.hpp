#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mitodet/image.hpp"
#include "mitodet/manifest.hpp"

namespace mitodet {

enum class PatchLabel { Positive, Negative };

struct PatchRef {
  std::string image_id;
  int cx = 0, cy = 0;
  PatchLabel label = PatchLabel::Negative;
};

// Greedy per-domain split: images are seed-shuffled, stable-sorted by
// descending mitosis count, then assigned to whichever side is furthest
// below its mitosis quota, subject to a train-side image capacity of
// round(ratio*n) clamped to [1, n-1] (a 1-image domain goes to train).
SplitManifest stratified_split(const std::vector<ImageRecord>& records,
                               double ratio, uint64_t seed);

// Stride-spaced grid centers (offset stride/2 from the border) at Euclidean
// distance >= min_dist from every mitotic-figure annotation.
std::vector<PatchRef> enumerate_negative_centers(const ImageRecord& record,
                                                 double min_dist, int stride);

// Positive patch refs: one per mitotic-figure annotation, rounded centers.
std::vector<PatchRef> positive_refs(const ImageRecord& record);

// Square crop of side size+2*margin whose unmargined window has its center
// pixel at (cx, cy); reflect padding outside image bounds. The window's
// top-left is (cx - (size-1)/2 - margin, cy - (size-1)/2 - margin).
ImageU8 extract_patch(const ImageU8& image, int cx, int cy, int size,
                      int margin);

}  // namespace mitodet

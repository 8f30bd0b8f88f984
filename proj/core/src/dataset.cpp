#include "mitodet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "mitodet/rng.hpp"

namespace mitodet {

SplitManifest stratified_split(const std::vector<ImageRecord>& records,
                               double ratio, uint64_t seed) {
  if (records.empty()) throw ValidationError("stratified_split: no records");
  if (!(ratio > 0.0 && ratio < 1.0))
    throw ValidationError("stratified_split: ratio must be in (0,1)");

  std::map<std::string, std::vector<const ImageRecord*>> by_domain;
  for (const auto& r : records) by_domain[r.domain].push_back(&r);

  SplitManifest out;
  uint64_t domain_stream = 0;
  for (auto& [domain, imgs] : by_domain) {
    Rng rng = Rng::split(seed, domain_stream++);
    // Seeded shuffle breaks ties among equal-count images, then a stable
    // sort orders by descending mitosis count.
    for (size_t i = imgs.size(); i > 1; --i) {
      std::swap(imgs[i - 1], imgs[rng.uniform_int(0, static_cast<int>(i) - 1)]);
    }
    std::stable_sort(imgs.begin(), imgs.end(),
                     [](const ImageRecord* a, const ImageRecord* b) {
                       return a->mitosis_count() > b->mitosis_count();
                     });

    const int n = static_cast<int>(imgs.size());
    const int cap_train =
        (n == 1) ? 1
                 : std::clamp(static_cast<int>(std::lround(ratio * n)), 1,
                              n - 1);
    const int cap_val = n - cap_train;
    int total_mitoses = 0;
    for (const auto* r : imgs) total_mitoses += r->mitosis_count();
    const double train_quota = ratio * total_mitoses;
    const double val_quota = (1.0 - ratio) * total_mitoses;

    DomainStats st;
    for (const auto* r : imgs) {
      const bool train_full = st.train_images >= cap_train;
      const bool val_full = st.val_images >= cap_val;
      bool to_train;
      if (train_full) {
        to_train = false;
      } else if (val_full) {
        to_train = true;
      } else {
        const double train_deficit = train_quota - st.train_mitoses;
        const double val_deficit = val_quota - st.val_mitoses;
        to_train = train_deficit >= val_deficit;
      }
      if (to_train) {
        out.train_ids.push_back(r->id);
        st.train_images++;
        st.train_mitoses += r->mitosis_count();
      } else {
        out.val_ids.push_back(r->id);
        st.val_images++;
        st.val_mitoses += r->mitosis_count();
      }
    }
    out.stats[domain] = st;
  }
  std::sort(out.train_ids.begin(), out.train_ids.end());
  std::sort(out.val_ids.begin(), out.val_ids.end());
  return out;
}

std::vector<PatchRef> enumerate_negative_centers(const ImageRecord& record,
                                                 double min_dist, int stride) {
  if (min_dist <= 0.0)
    throw ValidationError("enumerate_negative_centers: min_dist must be > 0");
  if (stride < 1)
    throw ValidationError("enumerate_negative_centers: stride must be >= 1");
  std::vector<PatchRef> out;
  const double d2 = min_dist * min_dist;
  for (int cy = stride / 2; cy < record.height; cy += stride) {
    for (int cx = stride / 2; cx < record.width; cx += stride) {
      bool ok = true;
      for (const auto& a : record.annotations) {
        if (a.label != Label::MitoticFigure) continue;
        const double dx = cx - a.x, dy = cy - a.y;
        if (dx * dx + dy * dy < d2) {
          ok = false;
          break;
        }
      }
      if (ok) out.push_back({record.id, cx, cy, PatchLabel::Negative});
    }
  }
  return out;
}

std::vector<PatchRef> positive_refs(const ImageRecord& record) {
  std::vector<PatchRef> out;
  for (const auto& a : record.annotations) {
    if (a.label != Label::MitoticFigure) continue;
    out.push_back({record.id, static_cast<int>(std::lround(a.x)),
                   static_cast<int>(std::lround(a.y)), PatchLabel::Positive});
  }
  return out;
}

ImageU8 extract_patch(const ImageU8& image, int cx, int cy, int size,
                      int margin) {
  if (size < 1 || margin < 0)
    throw ValidationError("extract_patch: bad size/margin");
  const int side = size + 2 * margin;
  const int x0 = cx - (size - 1) / 2 - margin;
  const int y0 = cy - (size - 1) / 2 - margin;
  return crop_reflect(image, x0, y0, side, side);
}

}  // namespace mitodet

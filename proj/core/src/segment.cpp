#include "wsss/segment.hpp"

#include <algorithm>
#include <stdexcept>

namespace wsss {

std::vector<int> predict_classes(const std::vector<float>& probs, float tau) {
  if (tau <= 0.0f || tau >= 1.0f)
    throw std::invalid_argument("predict_classes: tau must be in (0,1)");
  std::vector<int> out;
  for (size_t s = 0; s < probs.size(); ++s)
    if (probs[s] >= tau) out.push_back(static_cast<int>(s));
  return out;
}

SegmentationMap assemble(const HeatmapSet& heatmaps, const std::vector<int>& classes,
                         const std::vector<float>& probs, int out_h, int out_w) {
  if (!heatmaps.normalized)
    throw std::invalid_argument("assemble: heatmaps must be normalized");
  const int h = heatmaps.maps.dim(1), w = heatmaps.maps.dim(2);

  SegmentationMap seg;
  seg.classes = classes;

  if (classes.empty()) {
    // fall back to the top image-level class so pixel F1 stays defined
    seg.fallback = true;
    int best = 0;
    for (size_t s = 1; s < probs.size(); ++s)
      if (probs[s] > probs[best]) best = static_cast<int>(s);
    seg.labels = LabelMap(out_h, out_w);
    std::fill(seg.labels.labels.begin(), seg.labels.labels.end(),
              static_cast<uint8_t>(best));
    return seg;
  }

  // gather the selected channels, upsample, argmax over them only
  Tensor selected(Shape{static_cast<int>(classes.size()), h, w});
  for (size_t i = 0; i < classes.size(); ++i) {
    const int cls = classes[i];
    if (cls < 0 || cls >= heatmaps.maps.dim(0))
      throw std::invalid_argument("assemble: class " + std::to_string(cls) +
                                  " out of heatmap range");
    std::copy_n(heatmaps.maps.data.begin() + static_cast<size_t>(cls) * h * w, h * w,
                selected.data.begin() + i * static_cast<size_t>(h) * w);
  }
  const Tensor up = bilinear_upsample(selected, out_h, out_w);
  const LabelMap local = argmax_channel(up);
  seg.labels = LabelMap(out_h, out_w);
  for (size_t p = 0; p < local.labels.size(); ++p)
    seg.labels.labels[p] = static_cast<uint8_t>(classes[local.labels[p]]);
  return seg;
}

}  // namespace wsss

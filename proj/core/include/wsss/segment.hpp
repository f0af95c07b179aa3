#pragma once

#include <vector>

#include "wsss/explain.hpp"
#include "wsss/tensor.hpp"

namespace wsss {

struct SegmentationMap {
  LabelMap labels;            // image-resolution class indices
  std::vector<int> classes;   // predicted class set used for the argmax
  bool fallback = false;      // set when no class passed the threshold
};

// { s : probs_s >= tau }. May be empty.
std::vector<int> predict_classes(const std::vector<float>& probs, float tau);

// Upsample the selected heatmap channels to HxW and take the per-pixel
// argmax over them (ties to the lowest class index). An empty class set
// labels every pixel with the top image-level class instead.
SegmentationMap assemble(const HeatmapSet& heatmaps, const std::vector<int>& classes,
                         const std::vector<float>& probs, int out_h, int out_w);

}  // namespace wsss

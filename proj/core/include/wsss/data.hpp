#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "wsss/tensor.hpp"

namespace wsss {

// Synthetic "forest tile" corpus: rectangular stands of classes 1..S-1 over
// a Cleared (class 0) background, one spectral signature per class plus
// Gaussian texture noise. 4 channels emulate RGB+NIR; the NIR channel
// carries the largest inter-class separation.
struct SyntheticConfig {
  int height = 64;
  int width = 64;
  int channels = 4;
  int num_classes = 5;  // 0 Cleared, 1 Pine, 2 Spruce, 3 Beech, 4 Oak
  int total_samples = 856;  // split 70/15/15 -> 600/128/128
  int min_regions = 1;
  int max_regions = 4;
  float min_region_fraction = 0.15f;  // of each image dimension
  float max_region_fraction = 0.6f;
  // share of samples fully covered by one stand (no Cleared pixels); these
  // are the negative examples that let the classifier localize class 0
  float full_cover_fraction = 0.25f;
  float noise_sigma = 0.05f;
  // per-class 4-channel means; defaults separated by >= 4 sigma in NIR
  std::vector<std::array<float, 4>> signatures = {
      {0.35f, 0.40f, 0.30f, 0.10f},
      {0.25f, 0.45f, 0.20f, 0.30f},
      {0.15f, 0.35f, 0.25f, 0.50f},
      {0.45f, 0.55f, 0.30f, 0.70f},
      {0.55f, 0.30f, 0.35f, 0.90f},
  };

  void validate() const;  // throws on infeasible constraints
};

struct Sample {
  Tensor image;               // C x H x W
  std::vector<float> labels;  // binary, length S
  LabelMap reference;         // per-pixel class indices (evaluation use only)
};

struct Dataset {
  std::vector<Sample> train, val, test;
};

// Deterministic given the seed; each sample is seeded by (seed, split,
// index) so generation order does not matter. Labels are recomputed from
// the painted reference map.
Dataset generate(const SyntheticConfig& cfg, uint64_t seed);

// Directory layout: manifest.json + samples/<split>/<idx>.img.wsst,
// .lbl.wsst, .ref.wsst. Round-trips bitwise.
void save_dataset(const Dataset& ds, const SyntheticConfig& cfg, uint64_t seed,
                  const std::filesystem::path& dir);

struct LoadedDataset {
  Dataset data;
  SyntheticConfig config;
  uint64_t seed = 0;
};
LoadedDataset load_dataset(const std::filesystem::path& dir);

// 70/15/15 of the total budget, rounded down, remainder to train.
struct SplitSizes {
  int train, val, test;
};
SplitSizes split_sizes(int total);

}  // namespace wsss

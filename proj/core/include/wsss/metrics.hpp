#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "wsss/data.hpp"
#include "wsss/explain.hpp"
#include "wsss/model.hpp"
#include "wsss/segment.hpp"

namespace wsss {

// Row-major S x S confusion counts, row = reference class, col = predicted.
struct Confusion {
  int num_classes = 0;
  std::vector<long long> counts;

  explicit Confusion(int s)
      : num_classes(s), counts(static_cast<size_t>(s) * s, 0) {}
  long long& at(int ref, int pred) {
    return counts[static_cast<size_t>(ref) * num_classes + pred];
  }
  long long at(int ref, int pred) const {
    return counts[static_cast<size_t>(ref) * num_classes + pred];
  }
  void add(const LabelMap& pred, const LabelMap& ref);
};

struct PixelF1Result {
  std::vector<float> f1, precision, recall;
  float macro = 0.0f;  // unweighted mean over classes present in ref or pred
  Confusion confusion{0};
};

PixelF1Result pixel_f1(const LabelMap& pred, const LabelMap& ref, int num_classes);
PixelF1Result f1_from_confusion(const Confusion& conf);

struct EvalReport {
  Method method = Method::Cam;
  std::vector<float> f1_per_class;
  std::vector<float> precision, recall;
  float f1_macro = 0.0f;
  Confusion confusion{0};
  long long params = 0;
  double seg_time_ms_mean = 0.0;
  double seg_time_ms_std = 0.0;
  long long backward_passes = 0;  // total over the evaluated images
};

// One full WSSS step for one image: forward, threshold at tau, method
// heatmaps, assembly at image resolution.
SegmentationMap run_wsss(const Model& model, const Tensor& image, Method method,
                         float tau, int seed_count);

struct SegTime {
  double mean_ms = 0.0;  // median of per-repetition means
  double std_ms = 0.0;   // stddev across repetitions
};

// Wall-clock time of heatmap computation + assembly per image, I/O
// excluded, single-threaded. Requires repetitions >= 3.
SegTime measure_seg_time(const Model& model, const std::vector<Sample>& images,
                         Method method, float tau, int seed_count, int repetitions);

struct SeedSweepResult {
  std::vector<int> candidates;      // deduplicated, ascending
  std::vector<float> macro_f1;      // per candidate
  int best_e = 0;                   // argmax, ties to the smallest E
};

SeedSweepResult sweep_seeds(const Model& model, const std::vector<Sample>& val_set,
                            const std::vector<int>& candidates, float tau,
                            int threads = 1);

// Label maps for every image of `set`, in index order. With threads > 1 the
// images are segmented on per-thread model copies; results are identical to
// the serial path. Backward passes are accumulated onto `model`'s counter.
std::vector<LabelMap> segment_all(const Model& model, const std::vector<Sample>& set,
                                  Method method, float tau, int seed_count,
                                  int threads);

struct CompareOptions {
  float tau = 0.5f;
  int seed_count = 10;
  int timing_repetitions = 3;
  int threads = 1;  // per-image parallelism for the F1 pass; timing stays serial
  // when set, exported per-image label maps land here as
  // <method>/<idx>.seg.wsst (+ .ppm)
  std::optional<std::filesystem::path> export_dir;
};

std::vector<EvalReport> compare_methods(const Model& model,
                                        const std::vector<Sample>& test_set,
                                        const std::vector<Method>& methods,
                                        const CompareOptions& opts);

std::string report_table(const std::vector<EvalReport>& reports);
std::string report_json(const std::vector<EvalReport>& reports);

}  // namespace wsss

#pragma once

#include <string>
#include <vector>

#include "wsss/model.hpp"
#include "wsss/pcm.hpp"
#include "wsss/tensor.hpp"

namespace wsss {

enum class Method { Cam, GradCam, Pcm, Sem };

std::string method_name(Method m);
Method method_from_name(const std::string& name);

// Per-class spatial maps at feature resolution. When normalized, every
// channel lies in [0,1] (non-constant channels attain both ends).
struct HeatmapSet {
  Tensor maps;  // S x h x w
  bool normalized = false;
  Method method = Method::Cam;
  std::vector<int> classes;  // classes actually computed (GradCAM only fills these)
};

struct SeedSet {
  std::vector<std::pair<int, int>> coords;  // (row, col), distinct, length E
  int source_class = -1;
};

// CAM: the head's raw maps, min-max normalized per class. No extra passes.
HeatmapSet cam(const ForwardCache& cache);

// GradCAM: channel weights are the spatial mean of d score_s / d F, one
// backward pass per requested class; recombined like a CAM. No ReLU on the
// combined map.
HeatmapSet gradcam(const Model& model, const Tensor& image,
                   const std::vector<int>& classes);

// PCM: propagate raw CAMs through the cosine self-attention of K, then
// normalize per class.
HeatmapSet pcm_refine(const PcmBranch& branch, const Tensor& low_feats,
                      const Tensor& features, const Tensor& image_on_grid,
                      const Tensor& cams, bool relu_row_normalize = false);

// Image-level probabilities of the PCM branch (GAP over raw P, sigmoid).
std::vector<float> pcm_scores(const Tensor& refined_raw);

// Coordinates of the E largest values of a class map, ties broken
// row-major.
SeedSet top_e_seeds(const Tensor& class_map, int e, int source_class = -1);

// SEM: per class, cosine-similarity maps from the top-E seed feature
// vectors, pixelwise max across seeds, then normalized.
HeatmapSet sem(const Tensor& cams, const Tensor& features, int e);

// Unnormalized SEM maps (values in [-1, 1]); used by tests and by sem().
Tensor sem_raw(const Tensor& cams, const Tensor& features, int e);

// Per-channel min-max normalization of an S x h x w stack.
Tensor normalize_channels(const Tensor& maps);

// Convenience dispatcher used by the segmentation/evaluation pipeline:
// runs a forward pass and produces the method's normalized heatmaps for
// `classes` (GradCAM restricts work to those classes; the others compute
// all channels).
HeatmapSet compute_heatmaps(const Model& model, const Tensor& image, Method method,
                            const std::vector<int>& classes, int seed_count);

}  // namespace wsss

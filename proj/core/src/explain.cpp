#include "wsss/explain.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>

namespace wsss {

std::string method_name(Method m) {
  switch (m) {
    case Method::Cam: return "cam";
    case Method::GradCam: return "gradcam";
    case Method::Pcm: return "pcm";
    case Method::Sem: return "sem";
  }
  return "?";
}

Method method_from_name(const std::string& name) {
  if (name == "cam") return Method::Cam;
  if (name == "gradcam") return Method::GradCam;
  if (name == "pcm") return Method::Pcm;
  if (name == "sem") return Method::Sem;
  throw std::invalid_argument("unknown method: " + name);
}

Tensor normalize_channels(const Tensor& maps) {
  const int s = maps.dim(0), h = maps.dim(1), w = maps.dim(2);
  Tensor out(maps.shape);
  for (int c = 0; c < s; ++c) {
    Tensor chan(Shape{h, w});
    std::copy_n(maps.data.begin() + static_cast<size_t>(c) * h * w, h * w,
                chan.data.begin());
    const Tensor norm = minmax_normalize(chan);
    std::copy(norm.data.begin(), norm.data.end(),
              out.data.begin() + static_cast<size_t>(c) * h * w);
  }
  return out;
}

HeatmapSet cam(const ForwardCache& cache) {
  if (!cache.valid) throw std::logic_error("cam: no cached forward pass");
  HeatmapSet hm;
  hm.maps = normalize_channels(cache.cams);
  hm.normalized = true;
  hm.method = Method::Cam;
  hm.classes.resize(cache.cams.dim(0));
  std::iota(hm.classes.begin(), hm.classes.end(), 0);
  return hm;
}

HeatmapSet gradcam(const Model& model, const Tensor& image,
                   const std::vector<int>& classes) {
  const ForwardCache& cache = model.cache();
  if (!cache.valid) throw std::logic_error("gradcam: no cached forward pass");
  const int s = model.config().num_classes;
  const int c = cache.features.dim(0);
  const int h = cache.features.dim(1), w = cache.features.dim(2);
  const int hw = h * w;

  HeatmapSet hm;
  hm.method = Method::GradCam;
  hm.maps = Tensor(Shape{s, h, w});
  hm.classes = classes;
  for (int cls : classes) {
    const Tensor grad = model.grad_wrt_features(image, cls);
    float* dst = hm.maps.data.data() + static_cast<size_t>(cls) * hw;
    for (int ch = 0; ch < c; ++ch) {
      // mean gradient is the channel weight
      const float* g = grad.data.data() + static_cast<size_t>(ch) * hw;
      float weight = 0.0f;
      for (int p = 0; p < hw; ++p) weight += g[p];
      weight /= static_cast<float>(hw);
      const float* f = cache.features.data.data() + static_cast<size_t>(ch) * hw;
      for (int p = 0; p < hw; ++p) dst[p] += weight * f[p];
    }
  }
  hm.maps = normalize_channels(hm.maps);
  hm.normalized = true;
  return hm;
}

HeatmapSet pcm_refine(const PcmBranch& branch, const Tensor& low_feats,
                      const Tensor& features, const Tensor& image_on_grid,
                      const Tensor& cams, bool relu_row_normalize) {
  const Tensor k = pcm_embed(branch, low_feats, features, image_on_grid);
  const Tensor refined = pcm_apply(pcm_attention(k), cams, relu_row_normalize);
  HeatmapSet hm;
  hm.maps = normalize_channels(refined);
  hm.normalized = true;
  hm.method = Method::Pcm;
  hm.classes.resize(cams.dim(0));
  std::iota(hm.classes.begin(), hm.classes.end(), 0);
  return hm;
}

std::vector<float> pcm_scores(const Tensor& refined_raw) {
  return sigmoid(global_avg_pool(refined_raw));
}

SeedSet top_e_seeds(const Tensor& class_map, int e, int source_class) {
  if (class_map.rank() != 2)
    throw std::invalid_argument("top_e_seeds: expected HxW map, got " +
                                class_map.shape.str());
  const int h = class_map.dim(0), w = class_map.dim(1);
  if (e < 1 || e > h * w)
    throw std::invalid_argument("top_e_seeds: E=" + std::to_string(e) +
                                " out of range 1.." + std::to_string(h * w));
  std::vector<int> idx(static_cast<size_t>(h) * w);
  std::iota(idx.begin(), idx.end(), 0);
  // stable sort keeps row-major order among ties
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return class_map.data[a] > class_map.data[b];
  });
  SeedSet seeds;
  seeds.source_class = source_class;
  seeds.coords.reserve(e);
  for (int i = 0; i < e; ++i) seeds.coords.emplace_back(idx[i] / w, idx[i] % w);
  return seeds;
}

Tensor sem_raw(const Tensor& cams, const Tensor& features, int e) {
  const int s = cams.dim(0), h = cams.dim(1), w = cams.dim(2);
  const int c = features.dim(0);
  if (features.dim(1) != h || features.dim(2) != w)
    throw std::invalid_argument("sem: features " + features.shape.str() +
                                " and cams " + cams.shape.str() +
                                " must share the spatial grid");
  const int hw = h * w;

  // feature columns, position-major for cheap cosine lookups
  std::vector<float> cols(static_cast<size_t>(hw) * c);
  for (int p = 0; p < hw; ++p)
    for (int ch = 0; ch < c; ++ch)
      cols[static_cast<size_t>(p) * c + ch] =
          features.data[static_cast<size_t>(ch) * hw + p];

  Tensor out(Shape{s, h, w});
  for (int cls = 0; cls < s; ++cls) {
    Tensor class_map(Shape{h, w});
    std::copy_n(cams.data.begin() + static_cast<size_t>(cls) * hw, hw,
                class_map.data.begin());
    const SeedSet seeds = top_e_seeds(class_map, e, cls);
    float* dst = out.data.data() + static_cast<size_t>(cls) * hw;
    std::fill_n(dst, hw, -1.0f);
    for (const auto& [sy, sx] : seeds.coords) {
      const float* seed_col = cols.data() + (static_cast<size_t>(sy) * w + sx) * c;
      for (int p = 0; p < hw; ++p) {
        const float sim =
            cosine_similarity(seed_col, cols.data() + static_cast<size_t>(p) * c, c);
        dst[p] = std::max(dst[p], sim);
      }
    }
  }
  return out;
}

HeatmapSet sem(const Tensor& cams, const Tensor& features, int e) {
  HeatmapSet hm;
  hm.maps = normalize_channels(sem_raw(cams, features, e));
  hm.normalized = true;
  hm.method = Method::Sem;
  hm.classes.resize(cams.dim(0));
  std::iota(hm.classes.begin(), hm.classes.end(), 0);
  return hm;
}

HeatmapSet compute_heatmaps(const Model& model, const Tensor& image, Method method,
                            const std::vector<int>& classes, int seed_count) {
  const ForwardCache& cache = model.cache();
  switch (method) {
    case Method::Cam:
      return cam(cache);
    case Method::GradCam:
      return gradcam(model, image, classes);
    case Method::Sem:
      return sem(cache.cams, cache.features, seed_count);
    case Method::Pcm: {
      if (!model.pcm())
        throw std::logic_error("pcm heatmaps requested but the model has no PCM branch");
      const int h = cache.features.dim(1), w = cache.features.dim(2);
      return pcm_refine(*model.pcm(), avg_pool_to(cache.stage_out.front(), h, w),
                        cache.features, avg_pool_to(cache.input, h, w), cache.cams);
    }
  }
  throw std::logic_error("unreachable");
}

}  // namespace wsss

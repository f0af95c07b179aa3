#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace wsss {

// Axis roles used by shape-aware containers (manifest metadata, diagnostics).
enum class Axis : uint8_t { Channel, Height, Width, Class };

// Ordered axis sizes, up to 4 axes. Every dim must be >= 1.
struct Shape {
  std::vector<int> dims;

  Shape() = default;
  Shape(std::initializer_list<int> d) : dims(d) { validate(); }
  explicit Shape(std::vector<int> d) : dims(std::move(d)) { validate(); }

  void validate() const {
    if (dims.empty() || dims.size() > 4)
      throw std::invalid_argument("Shape: rank must be 1..4, got " +
                                  std::to_string(dims.size()));
    for (int d : dims)
      if (d < 1)
        throw std::invalid_argument("Shape: every dim must be >= 1, got " +
                                    std::to_string(d));
  }

  int rank() const { return static_cast<int>(dims.size()); }

  long long numel() const {
    long long n = 1;
    for (int d : dims) n *= d;
    return n;
  }

  bool operator==(const Shape& o) const { return dims == o.dims; }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::string s = "[";
    for (size_t i = 0; i < dims.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(dims[i]);
    }
    return s + "]";
  }
};

// Dense row-major f32 tensor. The universal carrier for images, feature
// maps and heatmaps. data.size() == shape.numel() always.
struct Tensor {
  Shape shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(shape.numel(), 0.0f) {}
  Tensor(Shape s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<long long>(data.size()) != shape.numel())
      throw std::invalid_argument("Tensor: data length " +
                                  std::to_string(data.size()) +
                                  " does not match shape " + shape.str());
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, float v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  int dim(int i) const { return shape.dims[i]; }
  int rank() const { return shape.rank(); }
  long long numel() const { return static_cast<long long>(data.size()); }

  float& at(int i) { return data[i]; }
  float at(int i) const { return data[i]; }
  float& at(int i, int j) { return data[static_cast<size_t>(i) * dim(1) + j]; }
  float at(int i, int j) const { return data[static_cast<size_t>(i) * dim(1) + j]; }
  float& at(int i, int j, int k) {
    return data[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
  }
  float at(int i, int j, int k) const {
    return data[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
  }
  float& at(int i, int j, int k, int l) {
    return data[((static_cast<size_t>(i) * dim(1) + j) * dim(2) + k) * dim(3) + l];
  }
  float at(int i, int j, int k, int l) const {
    return data[((static_cast<size_t>(i) * dim(1) + j) * dim(2) + k) * dim(3) + l];
  }
};

// Per-pixel class indices, u8 payload.
struct LabelMap {
  int h = 0;
  int w = 0;
  std::vector<uint8_t> labels;

  LabelMap() = default;
  LabelMap(int h_, int w_) : h(h_), w(w_), labels(static_cast<size_t>(h_) * w_, 0) {}

  uint8_t& at(int y, int x) { return labels[static_cast<size_t>(y) * w + x]; }
  uint8_t at(int y, int x) const { return labels[static_cast<size_t>(y) * w + x]; }

  bool operator==(const LabelMap& o) const {
    return h == o.h && w == o.w && labels == o.labels;
  }
};

// --- numeric kernels ---
// All kernels are pure, single-threaded and use a fixed accumulation order
// (row-major, innermost over the kernel window), so repeated calls with the
// same inputs are bitwise identical.

// Direct cross-correlation. input C_in x H x W, weight C_out x C_in x kh x kw,
// bias length C_out (empty = no bias). Zero padding.
Tensor conv2d(const Tensor& input, const Tensor& weight,
              const std::vector<float>& bias, int stride, int pad);

// Gradients of conv2d. grad_out has the forward output's shape.
struct Conv2dGrads {
  Tensor input;   // dL/d input
  Tensor weight;  // dL/d weight
  std::vector<float> bias;
};
Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& weight,
                            const Tensor& grad_out, int stride, int pad);

Tensor relu(const Tensor& t);

// Mean over H*W per channel of an SxHxW tensor.
std::vector<float> global_avg_pool(const Tensor& t);

std::vector<float> sigmoid(const std::vector<float>& v);

// Align-corners bilinear interpolation, channelwise. Requires H >= h, W >= w.
Tensor bilinear_upsample(const Tensor& t, int out_h, int out_w);

// Adaptive average pooling down to out_h x out_w (used to bring inputs onto
// the feature grid).
Tensor avg_pool_to(const Tensor& t, int out_h, int out_w);

// Gradient of avg_pool_to with respect to its input.
Tensor avg_pool_backward(const Tensor& grad_out, int in_h, int in_w);

// Zero-norm inputs return 0 rather than NaN.
float cosine_similarity(const float* a, const float* b, int n);
float cosine_similarity(const std::vector<float>& a, const std::vector<float>& b);

// Rescale a single HxW map to [0,1]. Constant maps become all zeros so a
// featureless channel can never win an argmax.
Tensor minmax_normalize(const Tensor& m);

// Per-pixel argmax over the class axis of an SxHxW tensor, ties to the
// lowest class index.
LabelMap argmax_channel(const Tensor& t);

}  // namespace wsss

#pragma once

#include "wsss/tensor.hpp"

namespace wsss {

// Pixel correlation module branch: three parallel 1x1 embeddings (low-level
// features, final features F, image pooled to the feature grid), each to
// `embed_dim` channels, concatenated and fused by one 1x1 conv into K.
struct PcmBranch {
  int embed_dim = 16;   // d
  int fused_dim = 32;   // channels of K

  // 1x1 convs stored as C_out x C_in x 1 x 1 weights plus bias.
  Tensor w_low, w_high, w_img, w_fuse;
  std::vector<float> b_low, b_high, b_img, b_fuse;

  long long param_count() const {
    auto n = [](const Tensor& w, const std::vector<float>& b) {
      return w.numel() + static_cast<long long>(b.size());
    };
    return n(w_low, b_low) + n(w_high, b_high) + n(w_img, b_img) + n(w_fuse, b_fuse);
  }
};

// Intermediate activations of one branch pass.
struct PcmForward {
  Tensor e_low, e_high, e_img;  // parallel embeddings, d x h x w each
  Tensor fused_in;              // concat, 3d x h x w
  Tensor k;                     // C' x h x w
  Tensor attn;                  // (h*w) x (h*w) cosine similarities
  Tensor refined;               // P, S x h x w (raw)
};

// Embeds the three inputs (already on the feature grid) into K.
Tensor pcm_embed(const PcmBranch& branch, const Tensor& low, const Tensor& high,
                 const Tensor& img);

// Cosine-similarity matrix over the spatial columns of K.
Tensor pcm_attention(const Tensor& k);

// P_{s,q} = sum_r attn_{q,r} * A_{s,r}, literally. Optionally clamps the
// attention at zero and normalizes each row to sum 1.
Tensor pcm_apply(const Tensor& attn, const Tensor& cams,
                 bool relu_row_normalize = false);

PcmForward pcm_forward(const PcmBranch& branch, const Tensor& low,
                       const Tensor& high, const Tensor& img, const Tensor& cams);

struct PcmGrads {
  Tensor w_low, w_high, w_img, w_fuse;
  std::vector<float> b_low, b_high, b_img, b_fuse;
  Tensor low, high, img, cams;  // gradients w.r.t. the branch inputs
};

// Full backward pass of the branch given dL/dP: parameter gradients plus
// the gradients flowing back into the three inputs and the CAMs.
PcmGrads pcm_backward(const PcmBranch& branch, const PcmForward& fw,
                      const Tensor& low, const Tensor& high, const Tensor& img,
                      const Tensor& cams, const Tensor& grad_refined);

}  // namespace wsss

#include "wsss/pcm.hpp"

#include <cmath>

namespace wsss {

namespace {

void require_grid(const Tensor& t, int h, int w, const char* name) {
  if (t.rank() != 3 || t.dim(1) != h || t.dim(2) != w)
    throw std::invalid_argument(std::string("pcm: ") + name + " shape " +
                                t.shape.str() + " is not on the feature grid " +
                                std::to_string(h) + "x" + std::to_string(w));
}

// 1x1 conv as a per-pixel matmul.
Tensor conv1x1(const Tensor& in, const Tensor& w, const std::vector<float>& b) {
  const int c_in = in.dim(0), h = in.dim(1), ww = in.dim(2);
  const int c_out = w.dim(0);
  Tensor out(Shape{c_out, h, ww});
  const int hw = h * ww;
  for (int oc = 0; oc < c_out; ++oc) {
    float* dst = out.data.data() + static_cast<size_t>(oc) * hw;
    for (int p = 0; p < hw; ++p) dst[p] = b[oc];
    for (int ic = 0; ic < c_in; ++ic) {
      const float wv = w.at(oc, ic, 0, 0);
      const float* src = in.data.data() + static_cast<size_t>(ic) * hw;
      for (int p = 0; p < hw; ++p) dst[p] += wv * src[p];
    }
  }
  return out;
}

// dL/d input and parameter grads of a 1x1 conv.
void conv1x1_backward(const Tensor& in, const Tensor& w, const Tensor& grad_out,
                      Tensor& grad_w, std::vector<float>& grad_b, Tensor* grad_in) {
  const int c_in = in.dim(0), hw = in.dim(1) * in.dim(2);
  const int c_out = w.dim(0);
  for (int oc = 0; oc < c_out; ++oc) {
    const float* go = grad_out.data.data() + static_cast<size_t>(oc) * hw;
    for (int p = 0; p < hw; ++p) grad_b[oc] += go[p];
    for (int ic = 0; ic < c_in; ++ic) {
      const float* src = in.data.data() + static_cast<size_t>(ic) * hw;
      float acc = 0.0f;
      for (int p = 0; p < hw; ++p) acc += go[p] * src[p];
      grad_w.at(oc, ic, 0, 0) += acc;
      if (grad_in) {
        float* gi = grad_in->data.data() + static_cast<size_t>(ic) * hw;
        const float wv = w.at(oc, ic, 0, 0);
        for (int p = 0; p < hw; ++p) gi[p] += wv * go[p];
      }
    }
  }
}

Tensor concat_channels(const Tensor& a, const Tensor& b, const Tensor& c) {
  const int h = a.dim(1), w = a.dim(2);
  Tensor out(Shape{a.dim(0) + b.dim(0) + c.dim(0), h, w});
  float* dst = out.data.data();
  dst = std::copy(a.data.begin(), a.data.end(), dst);
  dst = std::copy(b.data.begin(), b.data.end(), dst);
  std::copy(c.data.begin(), c.data.end(), dst);
  return out;
}

}  // namespace

Tensor pcm_embed(const PcmBranch& branch, const Tensor& low, const Tensor& high,
                 const Tensor& img) {
  const int h = high.dim(1), w = high.dim(2);
  require_grid(low, h, w, "low-level features");
  require_grid(img, h, w, "pooled image");
  const Tensor e_low = conv1x1(low, branch.w_low, branch.b_low);
  const Tensor e_high = conv1x1(high, branch.w_high, branch.b_high);
  const Tensor e_img = conv1x1(img, branch.w_img, branch.b_img);
  return conv1x1(concat_channels(e_low, e_high, e_img), branch.w_fuse, branch.b_fuse);
}

Tensor pcm_attention(const Tensor& k) {
  const int c = k.dim(0), hw = k.dim(1) * k.dim(2);
  Tensor attn(Shape{hw, hw});
  std::vector<float> col_q(c), col_r(c);
  // column norms first
  std::vector<float> norms(hw, 0.0f);
  for (int p = 0; p < hw; ++p) {
    float acc = 0.0f;
    for (int ch = 0; ch < c; ++ch) {
      const float v = k.data[static_cast<size_t>(ch) * hw + p];
      acc += v * v;
    }
    norms[p] = std::sqrt(acc);
  }
  for (int q = 0; q < hw; ++q) {
    for (int r = 0; r < hw; ++r) {
      if (norms[q] == 0.0f || norms[r] == 0.0f) {
        attn.at(q, r) = 0.0f;
        continue;
      }
      float dot = 0.0f;
      for (int ch = 0; ch < c; ++ch)
        dot += k.data[static_cast<size_t>(ch) * hw + q] *
               k.data[static_cast<size_t>(ch) * hw + r];
      attn.at(q, r) = dot / (norms[q] * norms[r]);
    }
  }
  return attn;
}

Tensor pcm_apply(const Tensor& attn, const Tensor& cams, bool relu_row_normalize) {
  const int s = cams.dim(0), h = cams.dim(1), w = cams.dim(2);
  const int hw = h * w;
  if (attn.dim(0) != hw || attn.dim(1) != hw)
    throw std::invalid_argument("pcm_apply: attention " + attn.shape.str() +
                                " does not match cam grid " + cams.shape.str());
  Tensor weights = attn;
  if (relu_row_normalize) {
    for (int q = 0; q < hw; ++q) {
      float sum = 0.0f;
      for (int r = 0; r < hw; ++r) {
        float& v = weights.at(q, r);
        v = std::max(v, 0.0f);
        sum += v;
      }
      if (sum > 0.0f)
        for (int r = 0; r < hw; ++r) weights.at(q, r) /= sum;
    }
  }
  Tensor out(Shape{s, h, w});
  for (int cls = 0; cls < s; ++cls) {
    const float* a = cams.data.data() + static_cast<size_t>(cls) * hw;
    float* dst = out.data.data() + static_cast<size_t>(cls) * hw;
    for (int q = 0; q < hw; ++q) {
      float acc = 0.0f;
      const float* row = weights.data.data() + static_cast<size_t>(q) * hw;
      for (int r = 0; r < hw; ++r) acc += row[r] * a[r];
      dst[q] = acc;
    }
  }
  return out;
}

PcmForward pcm_forward(const PcmBranch& branch, const Tensor& low,
                       const Tensor& high, const Tensor& img, const Tensor& cams) {
  const int h = high.dim(1), w = high.dim(2);
  require_grid(low, h, w, "low-level features");
  require_grid(img, h, w, "pooled image");
  require_grid(cams, h, w, "cams");
  PcmForward fw;
  fw.e_low = conv1x1(low, branch.w_low, branch.b_low);
  fw.e_high = conv1x1(high, branch.w_high, branch.b_high);
  fw.e_img = conv1x1(img, branch.w_img, branch.b_img);
  fw.fused_in = concat_channels(fw.e_low, fw.e_high, fw.e_img);
  fw.k = conv1x1(fw.fused_in, branch.w_fuse, branch.b_fuse);
  fw.attn = pcm_attention(fw.k);
  fw.refined = pcm_apply(fw.attn, cams);
  return fw;
}

PcmGrads pcm_backward(const PcmBranch& branch, const PcmForward& fw,
                      const Tensor& low, const Tensor& high, const Tensor& img,
                      const Tensor& cams, const Tensor& grad_refined) {
  const int s = cams.dim(0);
  const int hw = cams.dim(1) * cams.dim(2);
  const int c = fw.k.dim(0);

  // dL/d attn_{q,r} = sum_s dL/dP_{s,q} * A_{s,r}
  Tensor d_attn(Shape{hw, hw});
  for (int q = 0; q < hw; ++q) {
    for (int r = 0; r < hw; ++r) {
      float acc = 0.0f;
      for (int cls = 0; cls < s; ++cls)
        acc += grad_refined.data[static_cast<size_t>(cls) * hw + q] *
               cams.data[static_cast<size_t>(cls) * hw + r];
      d_attn.at(q, r) = acc;
    }
  }

  // dL/dK through the cosine similarities
  std::vector<float> norms(hw, 0.0f);
  for (int p = 0; p < hw; ++p) {
    float acc = 0.0f;
    for (int ch = 0; ch < c; ++ch) {
      const float v = fw.k.data[static_cast<size_t>(ch) * hw + p];
      acc += v * v;
    }
    norms[p] = std::sqrt(acc);
  }
  Tensor d_k(fw.k.shape);
  for (int q = 0; q < hw; ++q) {
    for (int r = 0; r < hw; ++r) {
      if (q == r) continue;  // cos(u,u) is constant
      const float g = d_attn.at(q, r);
      if (g == 0.0f || norms[q] == 0.0f || norms[r] == 0.0f) continue;
      const float cs = fw.attn.at(q, r);
      const float inv_qr = 1.0f / (norms[q] * norms[r]);
      const float inv_q2 = 1.0f / (norms[q] * norms[q]);
      const float inv_r2 = 1.0f / (norms[r] * norms[r]);
      for (int ch = 0; ch < c; ++ch) {
        const float kq = fw.k.data[static_cast<size_t>(ch) * hw + q];
        const float kr = fw.k.data[static_cast<size_t>(ch) * hw + r];
        d_k.data[static_cast<size_t>(ch) * hw + q] += g * (kr * inv_qr - cs * kq * inv_q2);
        d_k.data[static_cast<size_t>(ch) * hw + r] += g * (kq * inv_qr - cs * kr * inv_r2);
      }
    }
  }

  PcmGrads g;
  g.w_low = Tensor(branch.w_low.shape);
  g.w_high = Tensor(branch.w_high.shape);
  g.w_img = Tensor(branch.w_img.shape);
  g.w_fuse = Tensor(branch.w_fuse.shape);
  g.b_low.assign(branch.b_low.size(), 0.0f);
  g.b_high.assign(branch.b_high.size(), 0.0f);
  g.b_img.assign(branch.b_img.size(), 0.0f);
  g.b_fuse.assign(branch.b_fuse.size(), 0.0f);

  Tensor d_fused(fw.fused_in.shape);
  conv1x1_backward(fw.fused_in, branch.w_fuse, d_k, g.w_fuse, g.b_fuse, &d_fused);

  // split the concat gradient back into the three embeddings
  const int d = branch.embed_dim;
  auto slice = [&](int first) {
    Tensor t(Shape{d, cams.dim(1), cams.dim(2)});
    std::copy(d_fused.data.begin() + static_cast<size_t>(first) * hw,
              d_fused.data.begin() + static_cast<size_t>(first + d) * hw,
              t.data.begin());
    return t;
  };
  const Tensor d_low = slice(0), d_high = slice(d), d_img = slice(2 * d);
  g.low = Tensor(low.shape);
  g.high = Tensor(high.shape);
  g.img = Tensor(img.shape);
  conv1x1_backward(low, branch.w_low, d_low, g.w_low, g.b_low, &g.low);
  conv1x1_backward(high, branch.w_high, d_high, g.w_high, g.b_high, &g.high);
  conv1x1_backward(img, branch.w_img, d_img, g.w_img, g.b_img, &g.img);

  // dL/dA_{s,r} = sum_q dL/dP_{s,q} * attn_{q,r}
  g.cams = Tensor(cams.shape);
  for (int cls = 0; cls < s; ++cls) {
    const float* gp = grad_refined.data.data() + static_cast<size_t>(cls) * hw;
    float* ga = g.cams.data.data() + static_cast<size_t>(cls) * hw;
    for (int q = 0; q < hw; ++q) {
      const float* row = fw.attn.data.data() + static_cast<size_t>(q) * hw;
      for (int r = 0; r < hw; ++r) ga[r] += gp[q] * row[r];
    }
  }
  return g;
}

}  // namespace wsss

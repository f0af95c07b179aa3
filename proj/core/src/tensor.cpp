#include "wsss/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace wsss {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight,
              const std::vector<float>& bias, int stride, int pad) {
  require(input.rank() == 3, "conv2d: input must be CxHxW, got " + input.shape.str());
  require(weight.rank() == 4,
          "conv2d: weight must be C_out x C_in x kh x kw, got " + weight.shape.str());
  const int c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
  const int c_out = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  require(weight.dim(1) == c_in,
          "conv2d: input channels " + input.shape.str() +
              " do not match weight " + weight.shape.str());
  require(bias.empty() || static_cast<int>(bias.size()) == c_out,
          "conv2d: bias length " + std::to_string(bias.size()) +
              " does not match out channels " + std::to_string(c_out));
  require(stride >= 1 && pad >= 0, "conv2d: stride must be >=1 and pad >=0");
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (w + 2 * pad - kw) / stride + 1;
  require(oh >= 1 && ow >= 1,
          "conv2d: kernel " + weight.shape.str() + " does not fit input " +
              input.shape.str());

  Tensor out(Shape{c_out, oh, ow});
  const float* in = input.data.data();
  const float* wt = weight.data.data();
  float* o = out.data.data();
  for (int oc = 0; oc < c_out; ++oc) {
    const float b = bias.empty() ? 0.0f : bias[oc];
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        float acc = b;
        for (int ic = 0; ic < c_in; ++ic) {
          const float* in_c = in + static_cast<size_t>(ic) * h * w;
          const float* wt_c =
              wt + ((static_cast<size_t>(oc) * c_in + ic) * kh) * kw;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= w) continue;
              acc += wt_c[ky * kw + kx] * in_c[iy * w + ix];
            }
          }
        }
        o[(static_cast<size_t>(oc) * oh + oy) * ow + ox] = acc;
      }
    }
  }
  return out;
}

Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& weight,
                            const Tensor& grad_out, int stride, int pad) {
  const int c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
  const int c_out = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  require(grad_out.rank() == 3 && grad_out.dim(0) == c_out,
          "conv2d_backward: grad_out shape " + grad_out.shape.str() +
              " does not match weight " + weight.shape.str());
  const int oh = grad_out.dim(1), ow = grad_out.dim(2);

  Conv2dGrads g;
  g.input = Tensor(input.shape);
  g.weight = Tensor(weight.shape);
  g.bias.assign(c_out, 0.0f);

  const float* in = input.data.data();
  const float* wt = weight.data.data();
  const float* go = grad_out.data.data();
  float* gin = g.input.data.data();
  float* gwt = g.weight.data.data();

  for (int oc = 0; oc < c_out; ++oc) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const float d = go[(static_cast<size_t>(oc) * oh + oy) * ow + ox];
        g.bias[oc] += d;
        for (int ic = 0; ic < c_in; ++ic) {
          const float* in_c = in + static_cast<size_t>(ic) * h * w;
          float* gin_c = gin + static_cast<size_t>(ic) * h * w;
          const size_t wbase = ((static_cast<size_t>(oc) * c_in + ic) * kh) * kw;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= w) continue;
              gwt[wbase + ky * kw + kx] += d * in_c[iy * w + ix];
              gin_c[iy * w + ix] += d * wt[wbase + ky * kw + kx];
            }
          }
        }
      }
    }
  }
  return g;
}

Tensor relu(const Tensor& t) {
  Tensor out = t;
  for (float& v : out.data) v = std::max(v, 0.0f);
  return out;
}

std::vector<float> global_avg_pool(const Tensor& t) {
  require(t.rank() == 3, "global_avg_pool: expected SxHxW, got " + t.shape.str());
  const int s = t.dim(0), h = t.dim(1), w = t.dim(2);
  std::vector<float> out(s, 0.0f);
  const float inv = 1.0f / (static_cast<float>(h) * static_cast<float>(w));
  for (int c = 0; c < s; ++c) {
    float acc = 0.0f;
    const float* p = t.data.data() + static_cast<size_t>(c) * h * w;
    for (int i = 0; i < h * w; ++i) acc += p[i];
    out[c] = acc * inv;
  }
  return out;
}

std::vector<float> sigmoid(const std::vector<float>& v) {
  std::vector<float> out(v.size());
  for (size_t i = 0; i < v.size(); ++i)
    out[i] = 1.0f / (1.0f + std::exp(-v[i]));
  return out;
}

Tensor bilinear_upsample(const Tensor& t, int out_h, int out_w) {
  require(t.rank() == 3, "bilinear_upsample: expected SxHxW, got " + t.shape.str());
  const int s = t.dim(0), h = t.dim(1), w = t.dim(2);
  require(out_h >= h && out_w >= w,
          "bilinear_upsample: target " + std::to_string(out_h) + "x" +
              std::to_string(out_w) + " smaller than source " + t.shape.str());
  Tensor out(Shape{s, out_h, out_w});
  const float sy = out_h > 1 ? static_cast<float>(h - 1) / (out_h - 1) : 0.0f;
  const float sx = out_w > 1 ? static_cast<float>(w - 1) / (out_w - 1) : 0.0f;
  for (int c = 0; c < s; ++c) {
    const float* src = t.data.data() + static_cast<size_t>(c) * h * w;
    float* dst = out.data.data() + static_cast<size_t>(c) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const float fy = y * sy;
      const int y0 = std::min(static_cast<int>(fy), h - 1);
      const int y1 = std::min(y0 + 1, h - 1);
      const float wy = fy - y0;
      for (int x = 0; x < out_w; ++x) {
        const float fx = x * sx;
        const int x0 = std::min(static_cast<int>(fx), w - 1);
        const int x1 = std::min(x0 + 1, w - 1);
        const float wx = fx - x0;
        const float top = src[y0 * w + x0] * (1 - wx) + src[y0 * w + x1] * wx;
        const float bot = src[y1 * w + x0] * (1 - wx) + src[y1 * w + x1] * wx;
        dst[y * out_w + x] = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

Tensor avg_pool_to(const Tensor& t, int out_h, int out_w) {
  require(t.rank() == 3, "avg_pool_to: expected CxHxW, got " + t.shape.str());
  const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
  require(out_h >= 1 && out_w >= 1 && out_h <= h && out_w <= w,
          "avg_pool_to: bad target size");
  Tensor out(Shape{c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch) {
    const float* src = t.data.data() + static_cast<size_t>(ch) * h * w;
    float* dst = out.data.data() + static_cast<size_t>(ch) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const int y0 = y * h / out_h, y1 = (y + 1) * h / out_h;
      for (int x = 0; x < out_w; ++x) {
        const int x0 = x * w / out_w, x1 = (x + 1) * w / out_w;
        float acc = 0.0f;
        for (int iy = y0; iy < y1; ++iy)
          for (int ix = x0; ix < x1; ++ix) acc += src[iy * w + ix];
        dst[y * out_w + x] = acc / static_cast<float>((y1 - y0) * (x1 - x0));
      }
    }
  }
  return out;
}

Tensor avg_pool_backward(const Tensor& grad_out, int in_h, int in_w) {
  require(grad_out.rank() == 3, "avg_pool_backward: expected CxHxW grad");
  const int c = grad_out.dim(0), oh = grad_out.dim(1), ow = grad_out.dim(2);
  Tensor out(Shape{c, in_h, in_w});
  for (int ch = 0; ch < c; ++ch) {
    const float* src = grad_out.data.data() + static_cast<size_t>(ch) * oh * ow;
    float* dst = out.data.data() + static_cast<size_t>(ch) * in_h * in_w;
    for (int y = 0; y < oh; ++y) {
      const int y0 = y * in_h / oh, y1 = (y + 1) * in_h / oh;
      for (int x = 0; x < ow; ++x) {
        const int x0 = x * in_w / ow, x1 = (x + 1) * in_w / ow;
        const float g = src[y * ow + x] / static_cast<float>((y1 - y0) * (x1 - x0));
        for (int iy = y0; iy < y1; ++iy)
          for (int ix = x0; ix < x1; ++ix) dst[iy * in_w + ix] += g;
      }
    }
  }
  return out;
}

float cosine_similarity(const float* a, const float* b, int n) {
  float dot = 0.0f, na = 0.0f, nb = 0.0f;
  for (int i = 0; i < n; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0f || nb == 0.0f) return 0.0f;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

float cosine_similarity(const std::vector<float>& a, const std::vector<float>& b) {
  require(a.size() == b.size(), "cosine_similarity: length mismatch");
  return cosine_similarity(a.data(), b.data(), static_cast<int>(a.size()));
}

Tensor minmax_normalize(const Tensor& m) {
  Tensor out = m;
  if (m.data.empty()) return out;
  float lo = m.data[0], hi = m.data[0];
  for (float v : m.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi == lo) {
    std::fill(out.data.begin(), out.data.end(), 0.0f);
    return out;
  }
  // divide instead of multiplying by a reciprocal so the extremes land on
  // exactly 0 and 1; argmax ties at shared maxima then break consistently
  const float range = hi - lo;
  for (float& v : out.data) v = (v - lo) / range;
  return out;
}

LabelMap argmax_channel(const Tensor& t) {
  if (t.rank() != 3)
    throw std::invalid_argument("argmax_channel: expected SxHxW, got " +
                                t.shape.str());
  const int s = t.dim(0), h = t.dim(1), w = t.dim(2);
  LabelMap out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int best = 0;
      float best_v = t.at(0, y, x);
      for (int c = 1; c < s; ++c) {
        const float v = t.at(c, y, x);
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      out.at(y, x) = static_cast<uint8_t>(best);
    }
  }
  return out;
}

}  // namespace wsss

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "wsss/explain.hpp"
#include "wsss/model.hpp"
#include "wsss/pcm.hpp"

using namespace wsss;

namespace {

BackboneConfig small_config(bool pcm = false) {
  BackboneConfig cfg;
  cfg.in_channels = 3;
  cfg.stage_widths = {4, 6};
  cfg.num_classes = 3;
  cfg.pcm_branch = pcm;
  cfg.pcm_embed_dim = 3;
  cfg.pcm_fused_dim = 5;
  return cfg;
}

Tensor random_tensor(Shape s, std::mt19937& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(std::move(s));
  std::uniform_real_distribution<float> u(lo, hi);
  for (float& v : t.data) v = u(rng);
  return t;
}

float* head_weight_blob(Model& m) {
  // blobs: per-stage weight/bias pairs, then head weight, head bias, PCM
  auto blobs = m.parameter_blobs();
  return blobs[2 * m.stages().size()];
}

}  // namespace

TEST_CASE("method names round-trip") {
  for (Method m : {Method::Cam, Method::GradCam, Method::Pcm, Method::Sem})
    CHECK(method_from_name(method_name(m)) == m);
  CHECK_THROWS_AS(method_from_name("lime"), std::invalid_argument);
}

TEST_CASE("cam: one-hot head row returns the normalized feature channel") {
  Model model(small_config(), 11);
  auto sizes = model.parameter_sizes();
  float* hw_blob = head_weight_blob(model);
  const int c = model.config().feature_channels();
  const int s = model.config().num_classes;
  std::fill_n(hw_blob, static_cast<size_t>(s) * c, 0.0f);
  hw_blob[0 * c + 2] = 1.0f;  // class 0 reads feature channel 2 only
  (void)sizes;

  std::mt19937 rng(1);
  const Tensor img = random_tensor(Shape{3, 16, 16}, rng, 0.0f, 1.0f);
  model.forward(img);
  const HeatmapSet hm = cam(model.cache());
  CHECK(hm.normalized);
  CHECK(hm.method == Method::Cam);

  const Tensor& f = model.cache().features;
  const int fh = f.dim(1), fw = f.dim(2);
  Tensor chan(Shape{fh, fw});
  std::copy_n(f.data.begin() + static_cast<size_t>(2) * fh * fw, fh * fw,
              chan.data.begin());
  const Tensor want = minmax_normalize(chan);
  for (int p = 0; p < fh * fw; ++p)
    CHECK(hm.maps.data[p] == doctest::Approx(want.data[p]).epsilon(1e-6));
}

TEST_CASE("cam: all-zero head gives all-zero heatmaps") {
  Model model(small_config(), 12);
  float* hw_blob = head_weight_blob(model);
  auto blobs = model.parameter_blobs();
  const auto sizes = model.parameter_sizes();
  const size_t head_w = 2 * model.stages().size();
  std::fill_n(hw_blob, sizes[head_w], 0.0f);
  std::fill_n(blobs[head_w + 1], sizes[head_w + 1], 0.0f);  // head bias

  std::mt19937 rng(2);
  model.forward(random_tensor(Shape{3, 16, 16}, rng));
  const HeatmapSet hm = cam(model.cache());
  for (float v : hm.maps.data) CHECK(v == 0.0f);
}

TEST_CASE("cam: raw maps match the explicit weighted-sum oracle") {
  std::mt19937 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    Model model(small_config(), 20 + trial);
    const Tensor img = random_tensor(Shape{3, 16, 16}, rng);
    model.forward(img);
    const ForwardCache& cache = model.cache();
    const Tensor& f = cache.features;
    const int c = f.dim(0), h = f.dim(1), w = f.dim(2);
    for (int cls = 0; cls < model.config().num_classes; ++cls) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          float acc = model.cam_head().bias[cls];
          for (int ch = 0; ch < c; ++ch)
            acc += model.cam_head().weight.at(cls, ch, 0, 0) * f.at(ch, y, x);
          CHECK(std::abs(cache.cams.at(cls, y, x) - acc) < 1e-5f);
        }
      }
    }
    // the normalized set is exactly normalize_channels of the raw maps
    const HeatmapSet hm = cam(cache);
    const Tensor norm = normalize_channels(cache.cams);
    for (size_t i = 0; i < norm.data.size(); ++i)
      CHECK(hm.maps.data[i] == norm.data[i]);
  }
}

TEST_CASE("gradcam equals cam after normalization, and counts its passes") {
  std::mt19937 rng(4);
  for (int trial = 0; trial < 8; ++trial) {
    Model model(small_config(), 40 + trial);
    const Tensor img = random_tensor(Shape{3, 16, 16}, rng);
    model.forward(img);
    model.reset_backward_counter();

    std::vector<int> all(model.config().num_classes);
    std::iota(all.begin(), all.end(), 0);
    const HeatmapSet gc = gradcam(model, img, all);
    CHECK(model.backward_passes() ==
          static_cast<long long>(all.size()));  // one pass per class

    const HeatmapSet cm = cam(model.cache());
    for (size_t i = 0; i < cm.maps.data.size(); ++i)
      CHECK(std::abs(gc.maps.data[i] - cm.maps.data[i]) < 1e-5f);
  }
}

TEST_CASE("gradcam: unnormalized map is the cam map scaled by 1/(h*w)") {
  // recompute the combined map by hand from grad_wrt_features
  Model model(small_config(), 48);
  std::mt19937 rng(5);
  const Tensor img = random_tensor(Shape{3, 16, 16}, rng);
  model.forward(img);
  const ForwardCache& cache = model.cache();
  const Tensor& f = cache.features;
  const int c = f.dim(0), h = f.dim(1), w = f.dim(2);
  const float hw = static_cast<float>(h) * w;

  for (int cls = 0; cls < model.config().num_classes; ++cls) {
    const Tensor grad = model.grad_wrt_features(img, cls);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        float combined = 0.0f;
        for (int ch = 0; ch < c; ++ch) {
          float weight = 0.0f;
          for (int p = 0; p < h * w; ++p)
            weight += grad.data[static_cast<size_t>(ch) * h * w + p];
          weight /= hw;
          combined += weight * f.at(ch, y, x);
        }
        // cams carry the head bias; the gradient-based map does not
        const float cam_nobias = cache.cams.at(cls, y, x) - model.cam_head().bias[cls];
        CHECK(std::abs(combined - cam_nobias / hw) < 1e-5f);
      }
    }
  }
}

TEST_CASE("gradcam: zero head row yields a zero heatmap, empty list is empty") {
  Model model(small_config(), 49);
  float* hw_blob = head_weight_blob(model);
  const int c = model.config().feature_channels();
  std::fill_n(hw_blob + 1 * c, c, 0.0f);  // kill class 1

  std::mt19937 rng(6);
  const Tensor img = random_tensor(Shape{3, 16, 16}, rng);
  model.forward(img);
  const HeatmapSet gc = gradcam(model, img, {1});
  const int hw = gc.maps.dim(1) * gc.maps.dim(2);
  for (int p = 0; p < hw; ++p) CHECK(gc.maps.data[static_cast<size_t>(hw) + p] == 0.0f);

  const HeatmapSet empty = gradcam(model, img, {});
  CHECK(empty.classes.empty());
  for (float v : empty.maps.data) CHECK(v == 0.0f);
}

TEST_CASE("gradcam weights match finite differences of the mean gradient") {
  Model model(small_config(), 50);
  std::mt19937 rng(7);
  const Tensor img = random_tensor(Shape{3, 16, 16}, rng);
  model.forward(img);
  const Tensor f = model.cache().features;
  const int c = f.dim(0), h = f.dim(1), w = f.dim(2);
  const int hw = h * w;

  for (int cls = 0; cls < model.config().num_classes; ++cls) {
    const Tensor grad = model.grad_wrt_features(img, cls);
    for (int ch = 0; ch < c; ++ch) {
      float analytic = 0.0f;
      for (int p = 0; p < hw; ++p)
        analytic += grad.data[static_cast<size_t>(ch) * hw + p];
      analytic /= static_cast<float>(hw);

      // perturb the whole channel; the head is linear in F so the score
      // difference is hw * weight * eps
      const float eps = 1e-2f;
      auto score = [&](float delta) {
        Tensor fd = f;
        for (int p = 0; p < hw; ++p) fd.data[static_cast<size_t>(ch) * hw + p] += delta;
        return global_avg_pool(
            conv2d(fd, model.cam_head().weight, model.cam_head().bias, 1, 0))[cls];
      };
      // the score is linear in the channel shift with slope = channel weight
      const float fd = (score(eps) - score(-eps)) / (2 * eps);
      CHECK(std::abs(analytic * hw - fd) <= 1e-3f * std::max(1.0f, std::abs(fd)));
    }
  }
}

TEST_CASE("pcm: identical key columns wash every map out to zeros") {
  const int d = 3, cp = 4, h = 3, w = 3, s = 2;
  std::mt19937 rng(8);
  Tensor k(Shape{cp, h, w});
  for (int ch = 0; ch < cp; ++ch) {
    const float v = 0.5f + 0.25f * ch;
    for (int p = 0; p < h * w; ++p) k.data[static_cast<size_t>(ch) * h * w + p] = v;
  }
  const Tensor attn = pcm_attention(k);
  for (float v : attn.data) CHECK(v == doctest::Approx(1.0f).epsilon(1e-6));

  const Tensor cams = random_tensor(Shape{s, h, w}, rng);
  const Tensor refined = pcm_apply(attn, cams);
  // each refined map is constant (the row sums are all equal)
  for (int cls = 0; cls < s; ++cls) {
    const float first = refined.at(cls, 0, 0);
    for (int p = 0; p < h * w; ++p)
      CHECK(refined.data[static_cast<size_t>(cls) * h * w + p] ==
            doctest::Approx(first).epsilon(1e-5));
  }
  const Tensor norm = normalize_channels(refined);
  for (float v : norm.data) CHECK(std::abs(v) < 1e-4f);
  (void)d;
}

TEST_CASE("pcm: orthogonal key columns leave the maps unchanged") {
  // 4 positions, 4 channels, K = identity columns
  const int h = 2, w = 2, cp = 4;
  Tensor k(Shape{cp, h, w});
  for (int p = 0; p < 4; ++p) k.data[static_cast<size_t>(p) * 4 + p] = 1.0f;
  const Tensor attn = pcm_attention(k);
  for (int q = 0; q < 4; ++q)
    for (int r = 0; r < 4; ++r)
      CHECK(attn.at(q, r) == doctest::Approx(q == r ? 1.0f : 0.0f));

  std::mt19937 rng(9);
  const Tensor cams = random_tensor(Shape{3, h, w}, rng);
  const Tensor refined = pcm_apply(attn, cams);
  for (size_t i = 0; i < cams.data.size(); ++i)
    CHECK(refined.data[i] == doctest::Approx(cams.data[i]).epsilon(1e-6));
}

TEST_CASE("pcm: matches the quadruple-loop brute force on an 8x8 grid") {
  std::mt19937 rng(10);
  const int h = 8, w = 8, hw = h * w, cp = 5, s = 3;
  for (int trial = 0; trial < 3; ++trial) {
    const Tensor k = random_tensor(Shape{cp, h, w}, rng);
    const Tensor cams = random_tensor(Shape{s, h, w}, rng);
    const Tensor refined = pcm_apply(pcm_attention(k), cams);

    for (int cls = 0; cls < s; ++cls) {
      for (int q = 0; q < hw; ++q) {
        float acc = 0.0f;
        for (int r = 0; r < hw; ++r) {
          // cosine between columns q and r of K
          float dot = 0.0f, nq = 0.0f, nr = 0.0f;
          for (int ch = 0; ch < cp; ++ch) {
            const float a = k.data[static_cast<size_t>(ch) * hw + q];
            const float b = k.data[static_cast<size_t>(ch) * hw + r];
            dot += a * b;
            nq += a * a;
            nr += b * b;
          }
          const float sim =
              (nq == 0.0f || nr == 0.0f) ? 0.0f : dot / std::sqrt(nq * nr);
          acc += sim * cams.data[static_cast<size_t>(cls) * hw + r];
        }
        CHECK(std::abs(refined.data[static_cast<size_t>(cls) * hw + q] - acc) < 1e-5f);
      }
    }
  }
}

TEST_CASE("pcm: 2x2 grid equals the hand-expanded weighted sum exactly") {
  // K columns chosen so the similarities are simple fractions
  Tensor k(Shape{2, 2, 2});
  // columns (row-major positions): (1,0), (0,1), (1,0), (1,1)/sqrt2-like
  k.data = {1, 0, 1, 1,   // channel 0 over positions 0..3
            0, 1, 0, 1};  // channel 1
  const Tensor attn = pcm_attention(k);
  const float rt2 = 1.0f / std::sqrt(2.0f);
  // hand-computed cosine matrix
  const float want[16] = {1, 0, 1, rt2, 0, 1, 0, rt2, 1, 0, 1, rt2, rt2, rt2, rt2, 1};
  for (int i = 0; i < 16; ++i) CHECK(attn.data[i] == doctest::Approx(want[i]));

  Tensor cams(Shape{1, 2, 2});
  cams.data = {1, 2, 3, 4};
  const Tensor refined = pcm_apply(attn, cams);
  CHECK(refined.data[0] == doctest::Approx(1 + 3 + 4 * rt2));
  CHECK(refined.data[1] == doctest::Approx(2 + 4 * rt2));
  CHECK(refined.data[2] == doctest::Approx(1 + 3 + 4 * rt2));
  CHECK(refined.data[3] == doctest::Approx((1 + 2 + 3) * rt2 + 4));
}

TEST_CASE("pcm_refine validates the grid and normalizes its output") {
  Model model(small_config(true), 60);
  std::mt19937 rng(11);
  const Tensor img = random_tensor(Shape{3, 16, 16}, rng);
  model.forward(img);
  const ForwardCache& cache = model.cache();
  const int h = cache.features.dim(1), w = cache.features.dim(2);
  const Tensor low = avg_pool_to(cache.stage_out.front(), h, w);
  const Tensor img_grid = avg_pool_to(cache.input, h, w);

  const HeatmapSet hm = pcm_refine(*model.pcm(), low, cache.features, img_grid,
                                   cache.cams);
  CHECK(hm.normalized);
  CHECK(hm.method == Method::Pcm);
  for (float v : hm.maps.data) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }

  const Tensor bad = avg_pool_to(cache.input, h - 1, w);
  CHECK_THROWS_AS(pcm_refine(*model.pcm(), low, cache.features, bad, cache.cams),
                  std::invalid_argument);
}

TEST_CASE("pcm_scores is global mean then sigmoid") {
  Tensor p(Shape{2, 2, 2});
  std::fill(p.data.begin(), p.data.begin() + 4, 1.5f);   // class 0 constant
  p.data[4] = 0.0f; p.data[5] = 1.0f; p.data[6] = 2.0f; p.data[7] = 3.0f;
  const auto scores = pcm_scores(p);
  CHECK(scores[0] == doctest::Approx(1.0f / (1.0f + std::exp(-1.5f))).epsilon(1e-6));
  CHECK(scores[1] == doctest::Approx(1.0f / (1.0f + std::exp(-1.5f))).epsilon(1e-6));

  std::mt19937 rng(12);
  const Tensor q = random_tensor(Shape{3, 4, 4}, rng);
  const auto got = pcm_scores(q);
  for (int cls = 0; cls < 3; ++cls) {
    float mean = 0.0f;
    for (int i = 0; i < 16; ++i) mean += q.data[static_cast<size_t>(cls) * 16 + i];
    mean /= 16.0f;
    CHECK(std::abs(got[cls] - 1.0f / (1.0f + std::exp(-mean))) < 1e-6f);
  }
}

TEST_CASE("top_e_seeds") {
  Tensor m(Shape{3, 4});
  std::mt19937 rng(13);
  std::uniform_real_distribution<float> u(-1, 1);
  for (float& v : m.data) v = u(rng);

  SUBCASE("E = h*w returns every coordinate") {
    const SeedSet s = top_e_seeds(m, 12);
    CHECK(s.coords.size() == 12);
    std::vector<std::pair<int, int>> sorted = s.coords;
    std::sort(sorted.begin(), sorted.end());
    int i = 0;
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 4; ++x, ++i) CHECK(sorted[i] == std::make_pair(y, x));
  }

  SUBCASE("single spike wins E=1") {
    Tensor spike = Tensor::zeros(Shape{3, 4});
    spike.at(2, 1) = 5.0f;
    const SeedSet s = top_e_seeds(spike, 1, 7);
    CHECK(s.coords.size() == 1);
    CHECK(s.coords[0] == std::make_pair(2, 1));
    CHECK(s.source_class == 7);
  }

  SUBCASE("E=5 agrees with a full-sort oracle; coordinates distinct") {
    const SeedSet s = top_e_seeds(m, 5);
    std::vector<std::pair<float, int>> order;
    for (int i = 0; i < 12; ++i) order.push_back({-m.data[i], i});
    std::stable_sort(order.begin(), order.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    for (int i = 0; i < 5; ++i) {
      CHECK(s.coords[i].first == order[i].second / 4);
      CHECK(s.coords[i].second == order[i].second % 4);
    }
    auto dedup = s.coords;
    std::sort(dedup.begin(), dedup.end());
    CHECK(std::adjacent_find(dedup.begin(), dedup.end()) == dedup.end());
  }

  SUBCASE("ties break row-major") {
    const Tensor flat = Tensor::full(Shape{2, 3}, 1.0f);
    const SeedSet s = top_e_seeds(flat, 3);
    CHECK(s.coords[0] == std::make_pair(0, 0));
    CHECK(s.coords[1] == std::make_pair(0, 1));
    CHECK(s.coords[2] == std::make_pair(0, 2));
  }

  SUBCASE("E out of range is rejected") {
    CHECK_THROWS_AS(top_e_seeds(m, 0), std::invalid_argument);
    CHECK_THROWS_AS(top_e_seeds(m, 13), std::invalid_argument);
  }
}

TEST_CASE("sem: every seed coordinate scores exactly 1 before normalization") {
  std::mt19937 rng(14);
  for (int trial = 0; trial < 5; ++trial) {
    const int h = 6, w = 6, c = 5, s = 3, e = 4;
    // keep feature columns away from zero so self-similarity is defined
    const Tensor f = random_tensor(Shape{c, h, w}, rng, 0.1f, 1.0f);
    const Tensor cams = random_tensor(Shape{s, h, w}, rng);
    const Tensor raw = sem_raw(cams, f, e);
    for (int cls = 0; cls < s; ++cls) {
      Tensor cmap(Shape{h, w});
      std::copy_n(cams.data.begin() + static_cast<size_t>(cls) * h * w, h * w,
                  cmap.data.begin());
      for (const auto& [sy, sx] : top_e_seeds(cmap, e).coords)
        CHECK(std::abs(raw.at(cls, sy, sx) - 1.0f) <= 1e-6f);
    }
    for (float v : raw.data) {
      CHECK(v >= -1.0f - 1e-6f);
      CHECK(v <= 1.0f + 1e-6f);
    }
  }
}

TEST_CASE("sem: uniform features normalize to zeros") {
  const Tensor f = Tensor::full(Shape{4, 5, 5}, 0.7f);
  std::mt19937 rng(15);
  const Tensor cams = random_tensor(Shape{2, 5, 5}, rng);
  const HeatmapSet hm = sem(cams, f, 3);
  for (float v : hm.maps.data) CHECK(v == 0.0f);
}

TEST_CASE("sem: E = h*w equals the exhaustive brute force") {
  std::mt19937 rng(16);
  for (int trial = 0; trial < 3; ++trial) {
    const int h = 5, w = 5, c = 4, s = 2;
    const Tensor f = random_tensor(Shape{c, h, w}, rng);
    const Tensor cams = random_tensor(Shape{s, h, w}, rng);
    const Tensor raw = sem_raw(cams, f, h * w);

    // brute force: max over cosine to every position, seeds irrelevant at E=hw
    for (int cls = 0; cls < s; ++cls) {
      for (int p = 0; p < h * w; ++p) {
        float best = -1.0f;
        std::vector<float> col_p(c), col_q(c);
        for (int ch = 0; ch < c; ++ch)
          col_p[ch] = f.data[static_cast<size_t>(ch) * h * w + p];
        for (int q = 0; q < h * w; ++q) {
          for (int ch = 0; ch < c; ++ch)
            col_q[ch] = f.data[static_cast<size_t>(ch) * h * w + q];
          best = std::max(best, cosine_similarity(col_q, col_p));
        }
        CHECK(std::abs(raw.data[static_cast<size_t>(cls) * h * w + p] - best) < 1e-5f);
      }
    }
  }
}

TEST_CASE("sem is invariant to positive per-position feature scaling") {
  std::mt19937 rng(17);
  const int h = 6, w = 6, c = 5, s = 2, e = 7;
  const Tensor f = random_tensor(Shape{c, h, w}, rng, 0.1f, 1.0f);
  const Tensor cams = random_tensor(Shape{s, h, w}, rng);

  Tensor scaled = f;
  std::uniform_real_distribution<float> u(0.2f, 5.0f);
  for (int p = 0; p < h * w; ++p) {
    const float lambda = u(rng);
    for (int ch = 0; ch < c; ++ch)
      scaled.data[static_cast<size_t>(ch) * h * w + p] *= lambda;
  }
  const Tensor a = sem_raw(cams, f, e);
  const Tensor b = sem_raw(cams, scaled, e);
  for (size_t i = 0; i < a.data.size(); ++i)
    CHECK(std::abs(a.data[i] - b.data[i]) <= 1e-5f);
}

TEST_CASE("permuting cam channels permutes sem channels the same way") {
  std::mt19937 rng(18);
  const int h = 5, w = 5, c = 4, s = 3, e = 3;
  const Tensor f = random_tensor(Shape{c, h, w}, rng, 0.1f, 1.0f);
  const Tensor cams = random_tensor(Shape{s, h, w}, rng);
  const int perm[3] = {2, 0, 1};  // new channel i comes from old perm[i]

  Tensor permuted(cams.shape);
  for (int i = 0; i < s; ++i)
    std::copy_n(cams.data.begin() + static_cast<size_t>(perm[i]) * h * w, h * w,
                permuted.data.begin() + static_cast<size_t>(i) * h * w);

  const Tensor a = sem_raw(cams, f, e);
  const Tensor b = sem_raw(permuted, f, e);
  for (int i = 0; i < s; ++i)
    for (int p = 0; p < h * w; ++p)
      CHECK(b.data[static_cast<size_t>(i) * h * w + p] ==
            a.data[static_cast<size_t>(perm[i]) * h * w + p]);
}

TEST_CASE("compute_heatmaps dispatch") {
  Model plain(small_config(false), 70);
  std::mt19937 rng(19);
  const Tensor img = random_tensor(Shape{3, 16, 16}, rng);
  plain.forward(img);
  CHECK(compute_heatmaps(plain, img, Method::Cam, {0, 1, 2}, 4).method == Method::Cam);
  CHECK(compute_heatmaps(plain, img, Method::Sem, {0, 1, 2}, 4).method == Method::Sem);
  CHECK_THROWS_AS(compute_heatmaps(plain, img, Method::Pcm, {0, 1, 2}, 4),
                  std::logic_error);

  Model with_pcm(small_config(true), 71);
  with_pcm.forward(img);
  const HeatmapSet pm = compute_heatmaps(with_pcm, img, Method::Pcm, {0, 1, 2}, 4);
  CHECK(pm.method == Method::Pcm);
  CHECK(pm.normalized);
}

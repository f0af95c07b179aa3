#include "wsss/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "wsss/io.hpp"

namespace wsss {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kKernel = 3;
constexpr float kProbEps = 1e-7f;

void he_uniform_init(Tensor& w, int fan_in, std::mt19937& rng) {
  const float limit = std::sqrt(6.0f / static_cast<float>(fan_in));
  std::uniform_real_distribution<float> dist(-limit, limit);
  for (float& v : w.data) v = dist(rng);
}

}  // namespace

Model::Model(const BackboneConfig& cfg, uint64_t seed) : cfg_(cfg), seed_(seed) {
  if (cfg.stage_widths.empty())
    throw std::invalid_argument("Model: at least one backbone stage required");
  if (cfg.feature_channels() < cfg.num_classes)
    throw std::invalid_argument("Model: feature channels must be >= class count");

  std::mt19937 rng(static_cast<uint32_t>(seed ^ (seed >> 32)));
  int c_in = cfg.in_channels;
  for (int width : cfg.stage_widths) {
    ConvLayer layer;
    layer.weight = Tensor(Shape{width, c_in, kKernel, kKernel});
    layer.bias.assign(width, 0.0f);
    layer.stride = cfg.downsample;
    layer.pad = kKernel / 2;
    he_uniform_init(layer.weight, c_in * kKernel * kKernel, rng);
    stages_.push_back(std::move(layer));
    c_in = width;
  }
  head_.weight = Tensor(Shape{cfg.num_classes, cfg.feature_channels(), 1, 1});
  head_.bias.assign(cfg.num_classes, 0.0f);
  head_.stride = 1;
  head_.pad = 0;
  he_uniform_init(head_.weight, cfg.feature_channels(), rng);

  if (cfg.pcm_branch) {
    PcmBranch p;
    p.embed_dim = cfg.pcm_embed_dim;
    p.fused_dim = cfg.pcm_fused_dim;
    const int d = p.embed_dim;
    p.w_low = Tensor(Shape{d, cfg.stage_widths.front(), 1, 1});
    p.w_high = Tensor(Shape{d, cfg.feature_channels(), 1, 1});
    p.w_img = Tensor(Shape{d, cfg.in_channels, 1, 1});
    p.w_fuse = Tensor(Shape{p.fused_dim, 3 * d, 1, 1});
    p.b_low.assign(d, 0.0f);
    p.b_high.assign(d, 0.0f);
    p.b_img.assign(d, 0.0f);
    p.b_fuse.assign(p.fused_dim, 0.0f);
    he_uniform_init(p.w_low, cfg.stage_widths.front(), rng);
    he_uniform_init(p.w_high, cfg.feature_channels(), rng);
    he_uniform_init(p.w_img, cfg.in_channels, rng);
    he_uniform_init(p.w_fuse, 3 * d, rng);
    pcm_ = std::move(p);
  }
}

ForwardResult Model::forward(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != cfg_.in_channels)
    throw std::invalid_argument("forward: image " + image.shape.str() +
                                " does not match " +
                                std::to_string(cfg_.in_channels) + " input channels");
  cache_ = ForwardCache{};
  cache_.input = image;
  const Tensor* x = &cache_.input;
  for (const ConvLayer& layer : stages_) {
    Tensor z = conv2d(*x, layer.weight, layer.bias, layer.stride, layer.pad);
    cache_.stage_out.push_back(relu(z));
    x = &cache_.stage_out.back();
  }
  cache_.features = cache_.stage_out.back();
  cache_.cams = conv2d(cache_.features, head_.weight, head_.bias, 1, 0);
  cache_.scores = global_avg_pool(cache_.cams);
  cache_.probs = sigmoid(cache_.scores);
  cache_.valid = true;
  return ForwardResult{cache_.features, cache_.cams, cache_.scores, cache_.probs};
}

Tensor Model::grad_wrt_features(const Tensor& image, int cls) const {
  if (cls < 0 || cls >= cfg_.num_classes)
    throw std::invalid_argument("grad_wrt_features: class " + std::to_string(cls) +
                                " out of range 0.." + std::to_string(cfg_.num_classes - 1));
  if (!cache_.valid || cache_.input.shape != image.shape ||
      cache_.input.data != image.data)
    throw std::logic_error("grad_wrt_features: no cached forward pass for this image");

  const int h = cache_.cams.dim(1), w = cache_.cams.dim(2);
  Tensor d_cams(cache_.cams.shape);
  const float inv = 1.0f / static_cast<float>(h * w);
  std::fill_n(d_cams.data.begin() + static_cast<size_t>(cls) * h * w, h * w, inv);

  Conv2dGrads head_g =
      conv2d_backward(cache_.features, head_.weight, d_cams, 1, 0);
  Tensor d_features = head_g.input;

  // continue the sweep down the backbone (the score depends on it only
  // through F, but a backprop pass walks the whole network)
  Tensor dx = d_features;
  for (int i = static_cast<int>(stages_.size()) - 1; i >= 0; --i) {
    const Tensor& act = cache_.stage_out[i];
    for (size_t j = 0; j < dx.data.size(); ++j)
      if (act.data[j] <= 0.0f) dx.data[j] = 0.0f;
    const Tensor& in = i == 0 ? cache_.input : cache_.stage_out[i - 1];
    dx = conv2d_backward(in, stages_[i].weight, dx, stages_[i].stride,
                         stages_[i].pad)
             .input;
  }
  ++backward_passes_;
  return d_features;
}

long long Model::param_count() const {
  long long n = 0;
  for (const ConvLayer& l : stages_)
    n += l.weight.numel() + static_cast<long long>(l.bias.size());
  n += head_.weight.numel() + static_cast<long long>(head_.bias.size());
  if (pcm_) n += pcm_->param_count();
  return n;
}

std::vector<float*> Model::parameter_blobs() {
  std::vector<float*> out;
  for (ConvLayer& l : stages_) {
    out.push_back(l.weight.data.data());
    out.push_back(l.bias.data());
  }
  out.push_back(head_.weight.data.data());
  out.push_back(head_.bias.data());
  if (pcm_) {
    out.push_back(pcm_->w_low.data.data());
    out.push_back(pcm_->b_low.data());
    out.push_back(pcm_->w_high.data.data());
    out.push_back(pcm_->b_high.data());
    out.push_back(pcm_->w_img.data.data());
    out.push_back(pcm_->b_img.data());
    out.push_back(pcm_->w_fuse.data.data());
    out.push_back(pcm_->b_fuse.data());
  }
  return out;
}

std::vector<const float*> Model::parameter_blobs() const {
  auto blobs = const_cast<Model*>(this)->parameter_blobs();
  return std::vector<const float*>(blobs.begin(), blobs.end());
}

std::vector<long long> Model::parameter_sizes() const {
  std::vector<long long> out;
  for (const ConvLayer& l : stages_) {
    out.push_back(l.weight.numel());
    out.push_back(static_cast<long long>(l.bias.size()));
  }
  out.push_back(head_.weight.numel());
  out.push_back(static_cast<long long>(head_.bias.size()));
  if (pcm_) {
    out.push_back(pcm_->w_low.numel());
    out.push_back(static_cast<long long>(pcm_->b_low.size()));
    out.push_back(pcm_->w_high.numel());
    out.push_back(static_cast<long long>(pcm_->b_high.size()));
    out.push_back(pcm_->w_img.numel());
    out.push_back(static_cast<long long>(pcm_->b_img.size()));
    out.push_back(pcm_->w_fuse.numel());
    out.push_back(static_cast<long long>(pcm_->b_fuse.size()));
  }
  return out;
}

BceResult bce_loss(const std::vector<float>& probs, const std::vector<float>& labels) {
  if (probs.size() != labels.size())
    throw std::invalid_argument("bce_loss: size mismatch");
  const int s = static_cast<int>(probs.size());
  BceResult r;
  r.loss = 0.0f;
  r.grad_scores.resize(s);
  for (int i = 0; i < s; ++i) {
    const float p = std::clamp(probs[i], kProbEps, 1.0f - kProbEps);
    r.loss += -(labels[i] * std::log(p) + (1.0f - labels[i]) * std::log(1.0f - p));
    r.grad_scores[i] = (p - labels[i]) / static_cast<float>(s);
  }
  r.loss /= static_cast<float>(s);
  return r;
}

namespace {

struct PcmTrainInputs {
  Tensor low, img;
};

PcmTrainInputs pcm_inputs(const Model& model) {
  const ForwardCache& c = model.cache();
  const int h = c.features.dim(1), w = c.features.dim(2);
  return {avg_pool_to(c.stage_out.front(), h, w), avg_pool_to(c.input, h, w)};
}

float pcm_loss_only(const Model& model, const std::vector<float>& labels) {
  const auto in = pcm_inputs(model);
  const ForwardCache& c = model.cache();
  const Tensor k = pcm_embed(*model.pcm(), in.low, c.features, in.img);
  const Tensor refined = pcm_apply(pcm_attention(k), c.cams);
  return bce_loss(sigmoid(global_avg_pool(refined)), labels).loss;
}

}  // namespace

float compute_loss(const Model& model, const TrainSample& sample,
                   const TrainConfig& cfg) {
  model.forward(sample.image);
  float loss =
      cfg.head_loss_weight * bce_loss(model.cache().probs, sample.labels).loss;
  if (model.pcm()) loss += cfg.pcm_loss_weight * pcm_loss_only(model, sample.labels);
  return loss;
}

LossAndGrads compute_loss_and_grads(Model& model, const TrainSample& sample,
                                    const TrainConfig& cfg) {
  model.forward(sample.image);
  const ForwardCache& c = model.cache();
  const int h = c.cams.dim(1), w = c.cams.dim(2);
  const int hw = h * w;

  LossAndGrads out;
  const auto sizes = model.parameter_sizes();
  out.grads.assign(std::accumulate(sizes.begin(), sizes.end(), 0LL), 0.0f);

  // head BCE
  const BceResult head_bce = bce_loss(c.probs, sample.labels);
  out.loss = cfg.head_loss_weight * head_bce.loss;

  Tensor d_cams(c.cams.shape);
  for (int s = 0; s < model.config().num_classes; ++s) {
    const float g = cfg.head_loss_weight * head_bce.grad_scores[s] / hw;
    std::fill_n(d_cams.data.begin() + static_cast<size_t>(s) * hw, hw, g);
  }

  // PCM branch BCE; its gradient flows through the attention into the
  // branch parameters, the CAMs and the backbone features
  PcmGrads pcm_g;
  Tensor d_features_extra;
  Tensor d_stage0_extra;
  if (model.pcm()) {
    const auto in = pcm_inputs(model);
    const PcmForward fw =
        pcm_forward(*model.pcm(), in.low, c.features, in.img, c.cams);
    const BceResult pcm_bce =
        bce_loss(sigmoid(global_avg_pool(fw.refined)), sample.labels);
    out.loss += cfg.pcm_loss_weight * pcm_bce.loss;

    Tensor d_refined(fw.refined.shape);
    for (int s = 0; s < model.config().num_classes; ++s) {
      const float g = cfg.pcm_loss_weight * pcm_bce.grad_scores[s] / hw;
      std::fill_n(d_refined.data.begin() + static_cast<size_t>(s) * hw, hw, g);
    }
    pcm_g = pcm_backward(*model.pcm(), fw, in.low, c.features, in.img, c.cams,
                         d_refined);
    for (size_t j = 0; j < d_cams.data.size(); ++j)
      d_cams.data[j] += pcm_g.cams.data[j];
    d_features_extra = pcm_g.high;
    d_stage0_extra = avg_pool_backward(pcm_g.low, c.stage_out.front().dim(1),
                                       c.stage_out.front().dim(2));
  }

  Conv2dGrads head_g =
      conv2d_backward(c.features, model.cam_head().weight, d_cams, 1, 0);

  const int n_stages = static_cast<int>(model.stages().size());
  std::vector<Conv2dGrads> stage_g(n_stages);
  Tensor dx = head_g.input;
  if (model.pcm())
    for (size_t j = 0; j < dx.data.size(); ++j)
      dx.data[j] += d_features_extra.data[j];
  for (int i = n_stages - 1; i >= 0; --i) {
    if (model.pcm() && i == 0)
      for (size_t j = 0; j < dx.data.size(); ++j)
        dx.data[j] += d_stage0_extra.data[j];
    const Tensor& act = c.stage_out[i];
    for (size_t j = 0; j < dx.data.size(); ++j)
      if (act.data[j] <= 0.0f) dx.data[j] = 0.0f;
    const Tensor& in = i == 0 ? c.input : c.stage_out[i - 1];
    stage_g[i] = conv2d_backward(in, model.stages()[i].weight, dx,
                                 model.stages()[i].stride, model.stages()[i].pad);
    dx = std::move(stage_g[i].input);
  }

  // flatten in parameter_blobs() order
  float* dst = out.grads.data();
  auto emit_t = [&dst](const Tensor& t) {
    dst = std::copy(t.data.begin(), t.data.end(), dst);
  };
  auto emit_v = [&dst](const std::vector<float>& v) {
    dst = std::copy(v.begin(), v.end(), dst);
  };
  for (int i = 0; i < n_stages; ++i) {
    emit_t(stage_g[i].weight);
    emit_v(stage_g[i].bias);
  }
  emit_t(head_g.weight);
  emit_v(head_g.bias);
  if (model.pcm()) {
    emit_t(pcm_g.w_low);
    emit_v(pcm_g.b_low);
    emit_t(pcm_g.w_high);
    emit_v(pcm_g.b_high);
    emit_t(pcm_g.w_img);
    emit_v(pcm_g.b_img);
    emit_t(pcm_g.w_fuse);
    emit_v(pcm_g.b_fuse);
  }
  return out;
}

float image_level_macro_f1(const Model& model, const std::vector<TrainSample>& set,
                           float tau) {
  const int s = model.config().num_classes;
  std::vector<long long> tp(s, 0), fp(s, 0), fn(s, 0);
  for (const TrainSample& sample : set) {
    const auto fwd = model.forward(sample.image);
    for (int c = 0; c < s; ++c) {
      const bool pred = fwd.probs[c] >= tau;
      const bool ref = sample.labels[c] >= 0.5f;
      if (pred && ref)
        ++tp[c];
      else if (pred)
        ++fp[c];
      else if (ref)
        ++fn[c];
    }
  }
  float macro = 0.0f;
  for (int c = 0; c < s; ++c) {
    const long long denom = 2 * tp[c] + fp[c] + fn[c];
    macro += denom == 0 ? 1.0f : 2.0f * tp[c] / static_cast<float>(denom);
  }
  return macro / static_cast<float>(s);
}

TrainResult train(Model& model, const std::vector<TrainSample>& train_set,
                  const std::vector<TrainSample>& val_set, const TrainConfig& cfg) {
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  if (cfg.learning_rate < 0.0f)
    throw std::invalid_argument("train: learning rate must be >= 0");

  const auto sizes = model.parameter_sizes();
  const long long total = std::accumulate(sizes.begin(), sizes.end(), 0LL);
  std::vector<float> velocity(total, 0.0f);
  std::vector<float> batch_grad(total, 0.0f);

  TrainResult result;
  std::vector<float> best_params;
  auto snapshot = [&model, total]() {
    std::vector<float> flat(total);
    float* dst = flat.data();
    const auto blobs = model.parameter_blobs();
    const auto sz = model.parameter_sizes();
    for (size_t i = 0; i < blobs.size(); ++i) dst = std::copy_n(blobs[i], sz[i], dst);
    return flat;
  };
  auto restore = [&model](const std::vector<float>& flat) {
    const float* src = flat.data();
    auto blobs = model.parameter_blobs();
    const auto sz = model.parameter_sizes();
    for (size_t i = 0; i < blobs.size(); ++i) {
      std::copy_n(src, sz[i], blobs[i]);
      src += sz[i];
    }
  };

  std::vector<size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937 shuffle_rng(static_cast<uint32_t>(cfg.seed + 0x9e3779b9u * (epoch + 1)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    float epoch_loss = 0.0f;
    size_t pos = 0;
    while (pos < order.size()) {
      const size_t bsz = std::min<size_t>(cfg.batch_size, order.size() - pos);
      std::fill(batch_grad.begin(), batch_grad.end(), 0.0f);
      float batch_loss = 0.0f;
      for (size_t b = 0; b < bsz; ++b) {
        LossAndGrads lg = compute_loss_and_grads(model, train_set[order[pos + b]], cfg);
        batch_loss += lg.loss;
        for (long long j = 0; j < total; ++j) batch_grad[j] += lg.grads[j];
      }
      batch_loss /= static_cast<float>(bsz);
      if (!std::isfinite(batch_loss))
        throw std::runtime_error("train: loss diverged (non-finite) at epoch " +
                                 std::to_string(epoch));
      epoch_loss += batch_loss * bsz;

      const float inv_bsz = 1.0f / static_cast<float>(bsz);
      auto blobs = model.parameter_blobs();
      long long offset = 0;
      for (size_t i = 0; i < blobs.size(); ++i) {
        float* p = blobs[i];
        for (long long j = 0; j < sizes[i]; ++j) {
          const long long k = offset + j;
          velocity[k] = cfg.momentum * velocity[k] + batch_grad[k] * inv_bsz;
          p[j] -= cfg.learning_rate * velocity[k];
        }
        offset += sizes[i];
      }
      pos += bsz;
    }
    result.loss_history.push_back(epoch_loss / static_cast<float>(train_set.size()));

    const float val_f1 =
        val_set.empty() ? 0.0f : image_level_macro_f1(model, val_set, cfg.tau);
    result.val_f1_history.push_back(val_f1);
    if (result.best_epoch < 0 || val_f1 > result.best_val_f1) {
      result.best_epoch = epoch;
      result.best_val_f1 = val_f1;
      best_params = snapshot();
    }
  }
  if (!val_set.empty() && !best_params.empty()) restore(best_params);
  return result;
}

// --- checkpoint I/O ---

namespace {

json config_to_json(const BackboneConfig& c) {
  return json{{"in_channels", c.in_channels},
              {"stage_widths", c.stage_widths},
              {"downsample", c.downsample},
              {"num_classes", c.num_classes},
              {"pcm_branch", c.pcm_branch},
              {"pcm_embed_dim", c.pcm_embed_dim},
              {"pcm_fused_dim", c.pcm_fused_dim}};
}

BackboneConfig config_from_json(const json& j) {
  BackboneConfig c;
  c.in_channels = j.at("in_channels");
  c.stage_widths = j.at("stage_widths").get<std::vector<int>>();
  c.downsample = j.at("downsample");
  c.num_classes = j.at("num_classes");
  c.pcm_branch = j.at("pcm_branch");
  c.pcm_embed_dim = j.at("pcm_embed_dim");
  c.pcm_fused_dim = j.at("pcm_fused_dim");
  return c;
}

struct NamedParam {
  std::string name;
  Tensor* tensor;
  std::vector<float>* bias;
};

std::vector<NamedParam> named_params(std::vector<ConvLayer>& stages, ConvLayer& head,
                                     std::optional<PcmBranch>& pcm) {
  std::vector<NamedParam> out;
  for (size_t i = 0; i < stages.size(); ++i) {
    out.push_back({"stage" + std::to_string(i) + ".weight", &stages[i].weight, nullptr});
    out.push_back({"stage" + std::to_string(i) + ".bias", nullptr, &stages[i].bias});
  }
  out.push_back({"head.weight", &head.weight, nullptr});
  out.push_back({"head.bias", nullptr, &head.bias});
  if (pcm) {
    out.push_back({"pcm.low.weight", &pcm->w_low, nullptr});
    out.push_back({"pcm.low.bias", nullptr, &pcm->b_low});
    out.push_back({"pcm.high.weight", &pcm->w_high, nullptr});
    out.push_back({"pcm.high.bias", nullptr, &pcm->b_high});
    out.push_back({"pcm.img.weight", &pcm->w_img, nullptr});
    out.push_back({"pcm.img.bias", nullptr, &pcm->b_img});
    out.push_back({"pcm.fuse.weight", &pcm->w_fuse, nullptr});
    out.push_back({"pcm.fuse.bias", nullptr, &pcm->b_fuse});
  }
  return out;
}

}  // namespace

void Model::save(const fs::path& dir) const {
  fs::create_directories(dir / "tensors");
  auto& self = const_cast<Model&>(*this);
  json layers = json::array();
  for (const NamedParam& p : named_params(self.stages_, self.head_, self.pcm_)) {
    Tensor t = p.tensor ? *p.tensor
                        : Tensor(Shape{static_cast<int>(p.bias->size())}, *p.bias);
    write_tensor(dir / "tensors" / (p.name + ".wsst"), t);
    layers.push_back({{"name", p.name}, {"shape", t.shape.dims}});
  }
  json manifest{{"format_version", 1},
                {"seed", seed_},
                {"config", config_to_json(cfg_)},
                {"layers", layers}};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw std::runtime_error("checkpoint: cannot write manifest in " + dir.string());
  os << manifest.dump(2) << "\n";
}

Model Model::load(const fs::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is)
    throw std::runtime_error("checkpoint: missing manifest: " +
                             (dir / "manifest.json").string());
  json manifest = json::parse(is);
  Model m(config_from_json(manifest.at("config")), manifest.at("seed").get<uint64_t>());
  for (const NamedParam& p : named_params(m.stages_, m.head_, m.pcm_)) {
    const Tensor t = read_tensor(dir / "tensors" / (p.name + ".wsst"));
    if (p.tensor) {
      if (t.shape != p.tensor->shape)
        throw std::runtime_error("checkpoint: shape mismatch for " + p.name + ": file " +
                                 t.shape.str() + " vs model " + p.tensor->shape.str());
      *p.tensor = t;
    } else {
      if (t.numel() != static_cast<long long>(p.bias->size()))
        throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
      *p.bias = t.data;
    }
  }
  return m;
}

}  // namespace wsss

#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "wsss/pcm.hpp"
#include "wsss/tensor.hpp"

namespace wsss {

struct BackboneConfig {
  int in_channels = 4;                     // RGB + NIR analog
  std::vector<int> stage_widths = {16, 32, 64};
  int downsample = 2;                      // stride per stage
  int num_classes = 5;                     // S
  bool pcm_branch = false;
  int pcm_embed_dim = 16;
  int pcm_fused_dim = 32;

  int feature_channels() const { return stage_widths.back(); }
};

struct ConvLayer {
  Tensor weight;             // C_out x C_in x kh x kw
  std::vector<float> bias;
  int stride = 1;
  int pad = 0;
};

// Activations kept from the last forward pass, reused by backprop and by
// the explanation methods.
struct ForwardCache {
  Tensor input;
  std::vector<Tensor> stage_out;  // post-ReLU activations per stage
  Tensor features;                // F, alias of stage_out.back()
  Tensor cams;                    // A = 1x1 head over F (raw, unnormalized)
  std::vector<float> scores;      // global average pool of A
  std::vector<float> probs;       // sigmoid(scores)
  bool valid = false;
};

struct ForwardResult {
  const Tensor& features;
  const Tensor& cams;
  const std::vector<float>& scores;
  const std::vector<float>& probs;
};

// Small multi-label CNN: conv stages -> F -> 1x1 CAM head -> GAP -> sigmoid.
// All backprop is hand-written.
class Model {
 public:
  explicit Model(const BackboneConfig& cfg, uint64_t seed);

  const BackboneConfig& config() const { return cfg_; }
  const std::vector<ConvLayer>& stages() const { return stages_; }
  const ConvLayer& cam_head() const { return head_; }
  const std::optional<PcmBranch>& pcm() const { return pcm_; }

  ForwardResult forward(const Tensor& image) const;
  const ForwardCache& cache() const { return cache_; }

  // Exact analytic gradient of the pre-sigmoid score for class `cls` with
  // respect to every element of F. Requires a cached forward pass for this
  // image. Runs a full backward sweep (through the head and down the
  // backbone), mirroring what backprop-based explanation costs; increments
  // the backward-pass counter.
  Tensor grad_wrt_features(const Tensor& image, int cls) const;

  long long param_count() const;

  long long backward_passes() const { return backward_passes_; }
  void reset_backward_counter() const { backward_passes_ = 0; }
  void add_backward_passes(long long n) const { backward_passes_ += n; }

  // checkpoint: directory with manifest.json plus one WSST file per parameter
  void save(const std::filesystem::path& dir) const;
  static Model load(const std::filesystem::path& dir);

  // flat views over all trainable parameters, used by the trainer and by
  // gradient checks
  std::vector<float*> parameter_blobs();
  std::vector<const float*> parameter_blobs() const;
  std::vector<long long> parameter_sizes() const;

 private:
  Model() = default;
  friend struct Trainer;

  BackboneConfig cfg_;
  uint64_t seed_ = 0;
  std::vector<ConvLayer> stages_;
  ConvLayer head_;  // 1x1, C -> S
  std::optional<PcmBranch> pcm_;
  mutable ForwardCache cache_;
  mutable long long backward_passes_ = 0;
};

struct BceResult {
  float loss;
  std::vector<float> grad_scores;  // dLoss/dScores = (p - y)/S
};

// Mean binary cross entropy over classes. Probabilities are clamped to
// [1e-7, 1 - 1e-7] before the logs.
BceResult bce_loss(const std::vector<float>& probs, const std::vector<float>& labels);

struct TrainConfig {
  int epochs = 30;
  int batch_size = 16;
  float learning_rate = 0.003f;
  float momentum = 0.9f;
  uint64_t seed = 42;
  float head_loss_weight = 1.0f;
  float pcm_loss_weight = 1.0f;  // used only when the PCM branch exists
  float tau = 0.5f;              // threshold for the validation image-level F1
};

struct TrainSample {
  Tensor image;
  std::vector<float> labels;  // binary, length S
};

struct TrainResult {
  std::vector<float> loss_history;     // mean train loss per epoch
  std::vector<float> val_f1_history;   // image-level macro F1 per epoch
  int best_epoch = -1;
  float best_val_f1 = 0.0f;
};

// SGD with momentum; deterministic given the seed (initialization, batch
// order and accumulation order are all fixed). Keeps the best-validation
// parameters. Throws if the loss goes non-finite, naming the epoch.
TrainResult train(Model& model, const std::vector<TrainSample>& train_set,
                  const std::vector<TrainSample>& val_set, const TrainConfig& cfg);

// Total loss (head BCE, plus the PCM branch BCE when enabled) for one
// sample; no gradients, used by the trainer's divergence check and by
// finite-difference tests.
float compute_loss(const Model& model, const TrainSample& sample,
                   const TrainConfig& cfg);

// Loss plus the analytic gradient of every trainable parameter, flattened
// in the order of Model::parameter_blobs(). The PCM term backpropagates
// through the attention into the CAMs and the backbone, so the gradients
// cover the full loss.
struct LossAndGrads {
  float loss;
  std::vector<float> grads;
};
LossAndGrads compute_loss_and_grads(Model& model, const TrainSample& sample,
                                    const TrainConfig& cfg);

// Image-level multi-label macro F1 at threshold tau (0/0 counts as 1).
float image_level_macro_f1(const Model& model, const std::vector<TrainSample>& set,
                           float tau);

}  // namespace wsss

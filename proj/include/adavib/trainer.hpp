#pragma once

// Projector fine-tuning: AdamW with decoupled weight decay, linear warmup
// followed by polynomial decay, gradient accumulation, per-step curves, and
// greedy-decoding evaluation with the hallucination proxy.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adavib/adaptive_beta.hpp"
#include "adavib/projector.hpp"
#include "adavib/toy_model.hpp"

namespace adavib {

struct TrainConfig {
  TrainMode mode = TrainMode::AdaVIB;
  double base_beta = 1e-7;
  double lr = 3e-5;
  double weight_decay = 0.05;
  std::size_t micro_batch = 2;
  std::size_t grad_accum = 8;
  std::size_t epochs = 1;
  double warmup_fraction = 0.1;
  double poly_decay_power = 1.0;
  double dropout_rate = 0.1;
  std::uint64_t seed = 0;
  KlDirection kl_direction = KlDirection::AsPrinted;
  bool pooled_posterior = false;
  double sigma_floor = 1e-8;
  // Scale-head initialization: weight gain and bias (softplus(bias) is the
  // starting noise level).
  double sigma_init_gain = 0.1;
  double sigma_init_bias = 0.0;

  void validate() const;
  LossOptions loss_options() const;
  VibConfig vib_config() const;

  bool operator==(const TrainConfig&) const = default;
};

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double ce = 0.0;
  double kl = 0.0;
  double entropy = 0.0;  // similarity entropy H, nats, averaged over the step's samples
  double effective_beta = 0.0;
  double grad_norm = 0.0;

  bool operator==(const StepRecord&) const = default;
};

struct TrainingLog {
  std::vector<StepRecord> steps;

  // Bias-corrected exponential moving average of every numeric column
  // (step and lr are copied through).
  std::vector<StepRecord> smoothed(double factor = 0.98) const;

  bool operator==(const TrainingLog&) const = default;
};

// Linear ramp 0→lr over the first ⌈warmup_fraction·total⌉ steps, then
// lr·(1 − progress)^power reaching 0 at `total_steps`.
double lr_at_step(std::size_t step, std::size_t total_steps, const TrainConfig& cfg);
std::size_t warmup_steps(std::size_t total_steps, const TrainConfig& cfg);

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Vector> m;
  std::vector<Vector> v;
  std::size_t t = 0;
};

// One AdamW update: p ← p·(1 − lr·wd), then the bias-corrected moment step.
void optimizer_step(std::span<const ParamView> params, std::span<const ConstParamView> grads,
                    AdamState& state, double lr, double weight_decay, const AdamHyper& hyper = {});

// Trained projector plus the config that produced it. Deterministic modes
// carry no scale head.
struct Checkpoint {
  static constexpr int kVersion = 1;

  TrainConfig config;
  std::size_t vocab_size = 0;
  MlpProjectorParams mu_head;
  std::optional<MlpProjectorParams> sigma_head;

  // Requires a scale head.
  VibProjectorParams vib_params() const;
  bool operator==(const Checkpoint&) const = default;
};

struct TrainResult {
  Checkpoint checkpoint;
  TrainingLog log;
  std::size_t optimizer_steps = 0;
  // Number of Gaussian posteriors built (stays 0 in deterministic modes).
  std::size_t gaussian_stats_built = 0;
};

std::size_t steps_per_epoch(std::size_t n_samples, const TrainConfig& cfg);

// Fine-tunes a projector whose mean head starts from `pretrained`. Samples
// are visited in a seeded per-epoch shuffle; each sample's noise comes from
// its own stream keyed by (seed, epoch, sample id), so the batching layout
// does not change what is drawn.
// Called after every training forward, before its backward.
using ForwardObserver = std::function<void(const DataSample&, const LossResult&)>;

TrainResult train(const TrainConfig& cfg, std::span<const DataSample> train_set,
                  const MlpProjectorParams& pretrained, const FrozenDecoderParams& decoder,
                  const ForwardObserver& observe = {});

struct EvalOptions {
  std::size_t max_decode_len = 16;
  TokenLayout layout;
};

struct SampleEval {
  std::size_t id = 0;
  std::vector<TokenId> decoded;
  std::vector<ObjectId> hallucinated_objects;
  double entropy = 0.0;
  double normalized_entropy = 0.0;
  double max_similarity = 0.0;
  std::size_t bucket = 0;
};

struct EvalReport {
  std::vector<SampleEval> samples;
  double mean_entropy = 0.0;
  std::size_t hallucinated = 0;
  double proxy_rate = 0.0;
  BucketHistogram bucket_all{};
  BucketHistogram bucket_hallucinated{};

  // Share of hallucinated samples whose max similarity is in bucket `b`
  // (0 when nothing was hallucinated).
  double hallucinated_share(std::size_t b) const;
};

// Expected soft tokens E[z] = mu for features v (pooled when the
// checkpoint's posterior is pooled).
Matrix expected_tokens(const Checkpoint& checkpoint, const Matrix& v);

// Greedy decoding from the expected soft tokens (mean head).
EvalReport evaluate(const Checkpoint& checkpoint, std::span<const DataSample> eval_set,
                    const FrozenDecoderParams& decoder, const EvalOptions& options = {});

}  // namespace adavib

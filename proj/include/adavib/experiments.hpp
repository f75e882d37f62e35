#pragma once

// The desk-scale experiment world: a synthetic biased dataset, a seeded
// frozen decoder, and a projector pretrained on unbiased scenes, plus the
// training presets and comparisons run by the CLI and the acceptance suite.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "adavib/data_io.hpp"
#include "adavib/halluc_metrics.hpp"
#include "adavib/trainer.hpp"

namespace adavib {

struct ToyWorldConfig {
  std::size_t d_z = 16;
  std::size_t d_model = 256;
  std::size_t hidden = 32;
  DecoderInit decoder_init{1.0, 1.0, 3.0};
  std::uint64_t decoder_seed = 11;

  // The readout is fitted once, by softmax regression on captions of
  // unbiased scenes whose soft tokens are the summed embeddings of the
  // present objects, then frozen. Zero samples keeps the random readout.
  std::size_t decoder_fit_samples = 2000;
  std::size_t decoder_fit_epochs = 30;
  double decoder_fit_lr = 2e-2;

  // Alignment stage: plain cross-entropy on scenes without co-occurrence
  // bias, standing in for the projector's pretraining.
  std::size_t pretrain_samples = 2000;
  std::size_t pretrain_epochs = 10;
  double pretrain_lr = 1e-2;
  double projector_init_gain = 1.0;

  void validate() const;
};

struct ToyWorld {
  SynthDataset data;
  FrozenDecoderParams decoder;
  MlpProjectorParams pretrained;
};

FrozenDecoderParams make_toy_decoder(const SynthConfig& synth, const ToyWorldConfig& world);

// Soft tokens of a perfectly aligned projector: every row is the sum of the
// embeddings of the sample's objects.
Matrix ideal_tokens(const DataSample& sample, const FrozenDecoderParams& decoder,
                    const TokenLayout& layout);

// Deterministic-mode checkpoint trained on unbiased scenes over the same
// object signatures.
Checkpoint pretrain_projector(const SynthConfig& synth, const ToyWorldConfig& world,
                                      const FrozenDecoderParams& decoder);

ToyWorld build_toy_world(const SynthConfig& synth, const ToyWorldConfig& world = {});

// Fine-tuning defaults for the toy: optimizer, schedule and batching as in
// TrainConfig, with the learning rate and base beta rescaled for a model
// a few thousand parameters in size.
inline constexpr double kToyLearningRate = 3e-3;
inline constexpr double kToyBaseBeta = 1e-5;
inline constexpr double kToySigmaInitBias = -5.0;
TrainConfig toy_train_config(TrainMode mode, std::uint64_t seed);

struct ModeOutcome {
  TrainMode mode = TrainMode::FT;
  TrainResult trained;
  EvalReport flip;
};

ModeOutcome run_mode(const ToyWorld& world, const TrainConfig& cfg);

struct SweepPoint {
  double base_beta = 0.0;
  double proxy_rate = 0.0;
};

// Trains mode `cfg.mode` once per beta (same seed) and scores the flip split.
std::vector<SweepPoint> beta_sweep(const ToyWorld& world, const TrainConfig& cfg,
                                   std::span<const double> betas);

// A random small problem for finite-difference checking: |V| = 8,
// d_z in [2, 4], tokens in [1, 3], all parameters and inputs drawn from
// `seed`.
struct GradCheckInstance {
  DataSample sample;
  VibProjectorParams params;
  PriorSpec prior;
  FrozenDecoderParams decoder;
  NoiseDraws noise;
  LossOptions options;
  double base_beta = 0.0;
};
GradCheckInstance make_grad_check_instance(std::uint64_t seed, TrainMode mode = TrainMode::AdaVIB,
                                           KlDirection direction = KlDirection::AsPrinted);
GradCheckReport run_grad_check(const GradCheckInstance& inst, double step = 1e-6,
                               const GradientTamper& tamper = {});

// Decoded sequences rendered as captions (object names joined by spaces)
// for CHAIR scoring; vocabulary object i names toy object i.
std::vector<CaptionRecord> eval_captions(const EvalReport& report,
                                         std::span<const DataSample> samples,
                                         const ObjectVocabulary& vocab);

enum class PopeSplit { Random, Popular, Adversarial };
const char* to_string(PopeSplit s);

// Yes/no probes about object presence. Every sample contributes one
// positive probe (a gold object) and one negative probe whose object is
// drawn uniformly (Random), from the most frequent training objects
// (Popular) or from the partners of present trigger objects (Adversarial).
struct PopeProbe {
  std::size_t sample_id = 0;
  ObjectId object = 0;
  bool gold_yes = false;
};
std::vector<PopeProbe> pope_probes(const SynthDataset& data, std::span<const DataSample> samples,
                                   PopeSplit split, std::uint64_t seed);

// The model answers yes when greedy decoding emits the probed object.
std::vector<Answer> answer_probes(const EvalReport& report, std::span<const DataSample> samples,
                                  std::span<const PopeProbe> probes, const TokenLayout& layout);

}  // namespace adavib

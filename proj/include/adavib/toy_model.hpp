#pragma once

// Frozen toy language model and the loss around the projector.
//
// The decoder reads the mean of every context vector it sees (all soft
// visual tokens, the embedded prompt and the embedded target prefix),
// squashes it through a fixed tanh layer and reads out vocabulary logits:
//
//   ctx_t   = mean(z rows, E[q], E[y_<t])
//   logits_t = R · tanh(M · ctx_t)
//
// Only projector parameters ever receive gradients.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adavib/adaptive_beta.hpp"
#include "adavib/numerics.hpp"
#include "adavib/projector.hpp"

namespace adavib {

using TokenId = std::size_t;
using ObjectId = std::size_t;

// Vocabulary layout shared by the data generator, decoder and metrics:
// token 0 ends a sequence, the next n_objects tokens name objects, the rest
// are filler (prompt words).
struct TokenLayout {
  std::size_t vocab_size = 64;
  std::size_t n_objects = 8;

  static constexpr TokenId kEos = 0;
  static constexpr TokenId kFirstObject = 1;

  bool is_object(TokenId t) const { return t >= kFirstObject && t < kFirstObject + n_objects; }
  ObjectId object_of(TokenId t) const { return t - kFirstObject; }
  TokenId token_of(ObjectId o) const { return o + kFirstObject; }
  void validate() const;
};

struct FrozenDecoderParams {
  FrozenEmbeddings token_embeddings;  // |V| × d_z, shared with the similarity analysis
  Matrix readout;                     // |V| × d_model
  Matrix mixing;                      // d_model × d_z

  std::size_t vocab_size() const { return token_embeddings.vocab_size(); }
  std::size_t d_z() const { return token_embeddings.dim(); }
  std::size_t d_model() const { return mixing.rows(); }
  void validate() const;

  bool operator==(const FrozenDecoderParams&) const = default;
};

struct DecoderInit {
  double embedding_scale = 1.0;  // entry std of E
  double readout_gain = 1.0;     // R ~ N(0, gain²/d_model)
  double mixing_gain = 1.0;      // M ~ N(0, gain²/d_z)
};

FrozenDecoderParams make_frozen_decoder(std::size_t vocab_size, std::size_t d_z,
                                        std::size_t d_model, SeededRng& rng,
                                        const DecoderInit& init = {});

struct DataSample {
  std::size_t id = 0;
  Matrix v;  // tokens × input_dim
  std::vector<TokenId> prompt;
  std::vector<TokenId> target;
  std::vector<ObjectId> gold_objects;
  // Some object in gold_objects was added by the co-occurrence rule rather
  // than drawn on its own.
  bool present_spurious = false;

  bool operator==(const DataSample&) const = default;
};

// Logits for predicting target[position] given target[0..position).
Vector decode_logits(const Matrix& z, std::span<const TokenId> prompt,
                     std::span<const TokenId> target, const FrozenDecoderParams& decoder,
                     std::size_t position);

// Teacher-forced mean over positions of −log p(target_t | z, prompt, target_<t).
double sequence_ce(const Matrix& z, std::span<const TokenId> prompt,
                   std::span<const TokenId> target, const FrozenDecoderParams& decoder);

// Greedy decoding; ties go to the lowest token id. Stops after max_len
// tokens or when the end token is produced (not included in the output).
std::vector<TokenId> greedy_decode(const Matrix& z, std::span<const TokenId> prompt,
                                   const FrozenDecoderParams& decoder, std::size_t max_len);

enum class TrainMode {
  FT,              // deterministic MLP, cross-entropy only
  FT_DropIn,       // + dropout on projector input
  FT_DropOut,      // + dropout on projector output
  VIB_FixedBeta,   // bottleneck with constant beta
  AdaVIB,          // bottleneck with entropy-adaptive beta
  AdaVIB_NoRepar,  // adaptive beta, decoder sees mu instead of a sample
};

const char* to_string(TrainMode m);
TrainMode train_mode_from_string(const std::string& s);
bool uses_bottleneck(TrainMode m);
inline constexpr TrainMode kAllModes[] = {TrainMode::FT,         TrainMode::FT_DropIn,
                                          TrainMode::FT_DropOut, TrainMode::VIB_FixedBeta,
                                          TrainMode::AdaVIB,     TrainMode::AdaVIB_NoRepar};

struct LossOptions {
  TrainMode mode = TrainMode::AdaVIB;
  VibConfig vib;
  double dropout_rate = 0.1;
  // When set, use this effective beta instead of adapting it from the
  // similarity entropy.
  std::optional<double> frozen_beta;
};

// All randomness consumed by one training forward pass.
struct NoiseDraws {
  Matrix eps;          // tokens × d_z (bottleneck modes)
  Matrix input_mask;   // tokens × input_dim, inverted-dropout scaled (FT_DropIn)
  Matrix output_mask;  // tokens × d_z (FT_DropOut)
};

NoiseDraws draw_noise(SeededRng& rng, const LossOptions& options, std::size_t tokens,
                      std::size_t input_dim, std::size_t d_z);
// eps = 0, masks of ones: the constant-noise hook.
NoiseDraws zero_noise(const LossOptions& options, std::size_t tokens, std::size_t input_dim,
                      std::size_t d_z);

struct LossBreakdown {
  double ce = 0.0;
  double kl = 0.0;
  double effective_beta = 0.0;
  double total = 0.0;
};

struct PositionCache {
  Vector context;
  Vector hidden;  // tanh(M · context)
  Vector probs;
  double count = 0.0;  // number of vectors averaged into context
};

struct LossIntermediates {
  TrainMode mode = TrainMode::AdaVIB;
  std::vector<TokenId> target;
  Matrix projector_input;  // v after the optional input mask
  MlpCache mlp_cache;      // deterministic modes
  VibForward vib;          // bottleneck modes
  Matrix z;                // what the decoder consumed
  std::vector<PositionCache> positions;
  Matrix d_ce_d_z;  // decoder is frozen, so dCE/dz is computed during the forward
  double effective_beta = 0.0;
  std::uint64_t params_fingerprint = 0;
  NoiseDraws noise;
  bool ready = false;
};

struct LossResult {
  LossBreakdown loss;
  SimilarityStats similarity;
  LossIntermediates cache;
};

// One training forward pass. Bottleneck modes run the stochastic
// projector, pool z, measure similarity entropy, set beta and add the KL
// term; deterministic modes use params.mu_head as the MLP projector.
// `beta` carries base_beta in and receives the per-sample effective beta.
LossResult total_loss(const DataSample& sample, const VibProjectorParams& params,
                      const PriorSpec& prior, const FrozenDecoderParams& decoder,
                      BetaState& beta, SeededRng& rng, const LossOptions& options);
LossResult total_loss(const DataSample& sample, const VibProjectorParams& params,
                      const PriorSpec& prior, const FrozenDecoderParams& decoder,
                      BetaState& beta, const NoiseDraws& noise, const LossOptions& options);

// Gradients of ce_scale·CE + kl_scale·beta_eff·KL with respect to every
// projector parameter. beta_eff is a constant here. Throws StateError if the
// intermediates are missing or were produced with different parameters.
VibProjectorParams backward_all(const LossIntermediates& cache, const VibProjectorParams& params,
                                double ce_scale = 1.0, double kl_scale = 1.0);

// Hash of every parameter's bit pattern.
std::uint64_t fingerprint(const VibProjectorParams& params);

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t checked = 0;
};

using GradientTamper = std::function<void(VibProjectorParams&)>;

// Central differences over every projector scalar with the noise draws and
// the effective beta held fixed. Relative error per entry is
// |g_analytic − g_fd| / max(|g_fd|, 1e-8). `tamper` may corrupt the analytic
// gradients (sabotage fixtures).
GradCheckReport grad_check(const DataSample& sample, const VibProjectorParams& params,
                           const PriorSpec& prior, const FrozenDecoderParams& decoder,
                           double base_beta, const NoiseDraws& noise, const LossOptions& options,
                           double step = 1e-6, const GradientTamper& tamper = {});

}  // namespace adavib

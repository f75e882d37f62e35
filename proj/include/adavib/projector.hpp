#pragma once

// Vision-language projectors: the deterministic two-layer MLP baseline and
// the variational bottleneck built from two such heads (a mean head and a
// softplus-activated scale head), with the closed-form diagonal Gaussian KL
// and hand-written reverse-mode gradients.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "adavib/numerics.hpp"

namespace adavib {

// z_j = w_h · GeLU(w_z · v_j + b_z) + b_h, applied to every token row.
struct MlpProjectorParams {
  Matrix w_z;  // hidden × input
  Vector b_z;  // hidden
  Matrix w_h;  // output × hidden
  Vector b_h;  // output

  std::size_t input_dim() const { return w_z.cols(); }
  std::size_t hidden_dim() const { return w_z.rows(); }
  std::size_t output_dim() const { return w_h.rows(); }

  // Throws DimensionError on inconsistent shapes, DomainError on non-finite entries.
  void validate() const;

  static MlpProjectorParams zeros(std::size_t input, std::size_t hidden, std::size_t output);

  bool operator==(const MlpProjectorParams&) const = default;
};

// Weights ~ N(0, gain²/fan_in), biases filled with `bias`.
MlpProjectorParams init_mlp(std::size_t input, std::size_t hidden, std::size_t output,
                            SeededRng& rng, double gain = 1.0, double bias = 0.0);

struct VibProjectorParams {
  MlpProjectorParams mu_head;
  MlpProjectorParams sigma_head;

  std::size_t input_dim() const { return mu_head.input_dim(); }
  std::size_t latent_dim() const { return mu_head.output_dim(); }

  void validate() const;

  static VibProjectorParams zeros_like(const VibProjectorParams& shape);

  bool operator==(const VibProjectorParams&) const = default;
};

// mu_head copied from a pretrained/baseline projector; sigma_head freshly
// drawn. The sigma bias sets the initial noise scale through softplus.
VibProjectorParams init_vib_from(const MlpProjectorParams& pretrained, SeededRng& rng,
                                 double sigma_gain = 0.1, double sigma_bias = 0.0);

// Named, mutable view onto one parameter tensor (biases are 1×n).
struct ParamView {
  std::string name;
  std::size_t rows;
  std::size_t cols;
  std::span<double> values;
};
struct ConstParamView {
  std::string name;
  std::size_t rows;
  std::size_t cols;
  std::span<const double> values;
};

// Order: mu_head.{w_z,b_z,w_h,b_h}, sigma_head.{w_z,b_z,w_h,b_h}.
std::vector<ParamView> param_views(VibProjectorParams& params);
std::vector<ConstParamView> param_views(const VibProjectorParams& params);
std::size_t param_count(const VibProjectorParams& params);

enum class KlDirection {
  // KL(N_r ‖ N_θ), the orientation of the closed form as written.
  AsPrinted,
  // KL(N_θ ‖ N_r), the orientation of the objective's compression term.
  PosteriorToPrior,
};

const char* to_string(KlDirection d);
KlDirection kl_direction_from_string(const std::string& s);

struct PriorSpec {
  Vector mu_r;
  Vector sigma_r;

  static PriorSpec standard(std::size_t d_z);
  std::size_t dim() const { return mu_r.size(); }
};

struct GaussianStats {
  Matrix mu;     // tokens × d_z
  Matrix sigma;  // tokens × d_z, > 0

  std::size_t d_z() const { return mu.cols(); }
  std::size_t tokens() const { return mu.rows(); }
};

struct ReparamSample {
  Matrix z;
  Matrix eps;
  GaussianStats stats;
};

struct VibConfig {
  KlDirection kl_direction = KlDirection::AsPrinted;
  // Compute (mu, sigma) once from the token-averaged input and broadcast.
  bool pooled_posterior = false;
  double sigma_floor = 1e-8;
};

struct MlpCache {
  Matrix input;
  Matrix pre;  // tokens × hidden, before GeLU
  Matrix act;  // tokens × hidden, after GeLU
};

Matrix mlp_forward(const Matrix& v, const MlpProjectorParams& params);
Matrix mlp_forward(const Matrix& v, const MlpProjectorParams& params, MlpCache& cache);

struct MlpBackward {
  MlpProjectorParams grads;
  Matrix d_input;
};

MlpBackward mlp_backward(const MlpCache& cache, const MlpProjectorParams& params,
                         const Matrix& d_out);

// Training-mode forward pass plus everything projector_backward needs.
struct VibForward {
  ReparamSample sample;
  double kl = 0.0;

  MlpCache mu_cache;
  MlpCache sigma_cache;
  Matrix sigma_raw;  // scale-head output before softplus
  PriorSpec prior;
  VibConfig config;
  bool ready = false;
};

// Draws eps ~ N(0, I) from `rng`.
VibForward vib_forward_train(const Matrix& v, const VibProjectorParams& params,
                             const PriorSpec& prior, const VibConfig& config, SeededRng& rng);
// Uses the supplied eps (tokens × d_z); a zero matrix gives z = mu.
VibForward vib_forward_train(const Matrix& v, const VibProjectorParams& params,
                             const PriorSpec& prior, const VibConfig& config, const Matrix& eps);

// Expected value of z: the mean head only, no sampling.
Matrix vib_forward_eval(const Matrix& v, const VibProjectorParams& params,
                        const VibConfig& config = {});

// Closed-form KL between diagonal Gaussians, summed over d_z and averaged
// over token rows.
double kl_diag_gaussian(const GaussianStats& stats, const PriorSpec& prior,
                        KlDirection direction);

// d kl_diag_gaussian / d(mu, sigma), same averaging as the value.
GaussianStats kl_diag_gaussian_grad(const GaussianStats& stats, const PriorSpec& prior,
                                    KlDirection direction);

struct VibGradients {
  VibProjectorParams params;
  Matrix d_input;
};

// Reverse pass through z = mu + sigma ⊙ eps (eps held constant) and the KL
// term. `d_z` is dL/dz; `d_kl` scales the KL gradient. With `z_is_mean` the
// forward consumer saw mu instead of the sample, so sigma only receives the
// KL gradient.
VibGradients projector_backward(const VibForward& forward, const VibProjectorParams& params,
                                const Matrix& d_z, double d_kl, bool z_is_mean = false);

}  // namespace adavib

#include "adavib/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <utility>

#include "adavib/errors.hpp"

namespace adavib {

void TokenLayout::validate() const {
  if (n_objects == 0) {
    throw ConfigError("token layout: need at least one object");
  }
  if (kFirstObject + n_objects > vocab_size) {
    throw ConfigError("token layout: " + std::to_string(n_objects) +
                      " objects do not fit a vocabulary of " + std::to_string(vocab_size));
  }
}

void FrozenDecoderParams::validate() const {
  if (readout.rows() != vocab_size()) {
    throw DimensionError("decoder: readout rows must equal vocabulary size");
  }
  if (readout.cols() != mixing.rows()) {
    throw DimensionError("decoder: readout cols must equal d_model");
  }
  if (mixing.cols() != d_z()) {
    throw DimensionError("decoder: mixing cols must equal embedding dim");
  }
}

FrozenDecoderParams make_frozen_decoder(std::size_t vocab_size, std::size_t d_z,
                                        std::size_t d_model, SeededRng& rng,
                                        const DecoderInit& init) {
  Matrix emb(vocab_size, d_z);
  for (double& x : emb.values()) {
    x = init.embedding_scale * rng.normal();
  }
  Matrix readout(vocab_size, d_model);
  const double rs = init.readout_gain / std::sqrt(static_cast<double>(d_model));
  for (double& x : readout.values()) {
    x = rs * rng.normal();
  }
  Matrix mixing(d_model, d_z);
  const double ms = init.mixing_gain / std::sqrt(static_cast<double>(d_z));
  for (double& x : mixing.values()) {
    x = ms * rng.normal();
  }
  FrozenDecoderParams d{FrozenEmbeddings(std::move(emb)), std::move(readout), std::move(mixing)};
  d.validate();
  return d;
}

namespace {

void check_tokens(std::span<const TokenId> ids, std::size_t vocab, const char* what) {
  for (TokenId t : ids) {
    if (t >= vocab) {
      throw InvalidArgument(std::string(what) + ": token id " + std::to_string(t) +
                            " outside vocabulary of " + std::to_string(vocab));
    }
  }
}

// Sum of z rows and prompt embeddings: the part of the context shared by
// every position.
Vector base_context_sum(const Matrix& z, std::span<const TokenId> prompt,
                        const FrozenDecoderParams& decoder) {
  if (z.cols() != decoder.d_z()) {
    throw DimensionError("decoder: z has " + std::to_string(z.cols()) + " dims, decoder expects " +
                         std::to_string(decoder.d_z()));
  }
  check_tokens(prompt, decoder.vocab_size(), "prompt");
  Vector sum(decoder.d_z(), 0.0);
  for (std::size_t r = 0; r < z.rows(); ++r) {
    for (std::size_t c = 0; c < z.cols(); ++c) {
      sum[c] += z(r, c);
    }
  }
  for (TokenId t : prompt) {
    const auto e = decoder.token_embeddings.row(t);
    for (std::size_t c = 0; c < sum.size(); ++c) {
      sum[c] += e[c];
    }
  }
  return sum;
}

PositionCache run_position(const Vector& sum, double count, const FrozenDecoderParams& decoder) {
  PositionCache pc;
  pc.count = count;
  pc.context.resize(sum.size());
  for (std::size_t c = 0; c < sum.size(); ++c) {
    pc.context[c] = sum[c] / count;
  }
  pc.hidden = matvec(decoder.mixing, pc.context);
  for (double& h : pc.hidden) {
    h = std::tanh(h);
  }
  pc.probs = matvec(decoder.readout, pc.hidden);  // logits until the caller normalizes
  return pc;
}

void add_embedding(Vector& sum, const FrozenDecoderParams& decoder, TokenId t) {
  const auto e = decoder.token_embeddings.row(t);
  for (std::size_t c = 0; c < sum.size(); ++c) {
    sum[c] += e[c];
  }
}

// Teacher-forced pass over all target positions; fills probs.
std::vector<PositionCache> run_teacher_forced(const Matrix& z, std::span<const TokenId> prompt,
                                              std::span<const TokenId> target,
                                              const FrozenDecoderParams& decoder) {
  if (target.empty()) {
    throw InvalidArgument("sequence_ce: empty target");
  }
  check_tokens(target, decoder.vocab_size(), "target");
  Vector sum = base_context_sum(z, prompt, decoder);
  double count = static_cast<double>(z.rows() + prompt.size());
  std::vector<PositionCache> out;
  out.reserve(target.size());
  for (std::size_t t = 0; t < target.size(); ++t) {
    PositionCache pc = run_position(sum, count, decoder);
    pc.probs = softmax(pc.probs);
    out.push_back(std::move(pc));
    add_embedding(sum, decoder, target[t]);
    count += 1.0;
  }
  return out;
}

double mean_ce(const std::vector<PositionCache>& positions, std::span<const TokenId> target) {
  double ce = 0.0;
  for (std::size_t t = 0; t < target.size(); ++t) {
    // Clamp keeps saturated logits from producing log(0).
    ce -= std::log(std::max(positions[t].probs[target[t]], 1e-300));
  }
  return ce / static_cast<double>(target.size());
}

// dCE/dz. The decoder is frozen, so this is all the backward pass needs
// from it. Every z row enters each context through the same mean, so all
// rows share one gradient.
Matrix ce_gradient_wrt_z(const std::vector<PositionCache>& positions,
                         std::span<const TokenId> target, std::size_t z_rows,
                         const FrozenDecoderParams& decoder) {
  const double inv_p = 1.0 / static_cast<double>(target.size());
  Vector g(decoder.d_z(), 0.0);
  for (std::size_t t = 0; t < target.size(); ++t) {
    const PositionCache& pc = positions[t];
    Vector d_logits = pc.probs;
    d_logits[target[t]] -= 1.0;
    for (double& x : d_logits) {
      x *= inv_p;
    }
    Vector d_pre = transposed_matvec(decoder.readout, d_logits);
    for (std::size_t k = 0; k < d_pre.size(); ++k) {
      d_pre[k] *= 1.0 - pc.hidden[k] * pc.hidden[k];
    }
    const Vector d_ctx = transposed_matvec(decoder.mixing, d_pre);
    for (std::size_t c = 0; c < g.size(); ++c) {
      g[c] += d_ctx[c] / pc.count;
    }
  }
  Matrix out(z_rows, g.size());
  for (std::size_t r = 0; r < z_rows; ++r) {
    std::copy(g.begin(), g.end(), out.row(r).begin());
  }
  return out;
}

}  // namespace

Vector decode_logits(const Matrix& z, std::span<const TokenId> prompt,
                     std::span<const TokenId> target, const FrozenDecoderParams& decoder,
                     std::size_t position) {
  if (position > target.size()) {
    throw InvalidArgument("decode_logits: position past end of target");
  }
  check_tokens(target.first(position), decoder.vocab_size(), "target");
  Vector sum = base_context_sum(z, prompt, decoder);
  double count = static_cast<double>(z.rows() + prompt.size());
  for (std::size_t t = 0; t < position; ++t) {
    add_embedding(sum, decoder, target[t]);
    count += 1.0;
  }
  if (count == 0.0) {
    throw InvalidArgument("decode_logits: empty context");
  }
  return run_position(sum, count, decoder).probs;
}

double sequence_ce(const Matrix& z, std::span<const TokenId> prompt,
                   std::span<const TokenId> target, const FrozenDecoderParams& decoder) {
  return mean_ce(run_teacher_forced(z, prompt, target, decoder), target);
}

std::vector<TokenId> greedy_decode(const Matrix& z, std::span<const TokenId> prompt,
                                   const FrozenDecoderParams& decoder, std::size_t max_len) {
  Vector sum = base_context_sum(z, prompt, decoder);
  double count = static_cast<double>(z.rows() + prompt.size());
  if (count == 0.0) {
    throw InvalidArgument("greedy_decode: empty context");
  }
  std::vector<TokenId> out;
  while (out.size() < max_len) {
    const Vector logits = run_position(sum, count, decoder).probs;
    TokenId best = 0;
    for (TokenId t = 1; t < logits.size(); ++t) {
      if (logits[t] > logits[best]) {
        best = t;
      }
    }
    if (best == TokenLayout::kEos) {
      break;
    }
    out.push_back(best);
    add_embedding(sum, decoder, best);
    count += 1.0;
  }
  return out;
}

const char* to_string(TrainMode m) {
  switch (m) {
    case TrainMode::FT: return "FT";
    case TrainMode::FT_DropIn: return "FT_DropIn";
    case TrainMode::FT_DropOut: return "FT_DropOut";
    case TrainMode::VIB_FixedBeta: return "VIB_FixedBeta";
    case TrainMode::AdaVIB: return "AdaVIB";
    case TrainMode::AdaVIB_NoRepar: return "AdaVIB_NoRepar";
  }
  return "?";
}

TrainMode train_mode_from_string(const std::string& s) {
  for (TrainMode m : kAllModes) {
    if (s == to_string(m)) {
      return m;
    }
  }
  throw ConfigError("unknown training mode '" + s + "'");
}

bool uses_bottleneck(TrainMode m) {
  return m == TrainMode::VIB_FixedBeta || m == TrainMode::AdaVIB ||
         m == TrainMode::AdaVIB_NoRepar;
}

namespace {

Matrix dropout_mask(SeededRng& rng, std::size_t rows, std::size_t cols, double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout rate must be in [0, 1)");
  }
  Matrix m(rows, cols);
  const double keep_scale = 1.0 / (1.0 - rate);
  for (double& x : m.values()) {
    x = rng.uniform() < rate ? 0.0 : keep_scale;
  }
  return m;
}

void hash_bytes(std::uint64_t& h, std::span<const double> values) {
  for (double x : values) {
    std::uint64_t bits;
    std::memcpy(&bits, &x, sizeof bits);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xFFu;
      h *= 0x100000001B3ULL;
    }
  }
}

}  // namespace

NoiseDraws draw_noise(SeededRng& rng, const LossOptions& options, std::size_t tokens,
                      std::size_t input_dim, std::size_t d_z) {
  NoiseDraws n;
  if (uses_bottleneck(options.mode)) {
    n.eps = sample_standard_normal(rng, tokens, d_z);
  } else if (options.mode == TrainMode::FT_DropIn) {
    n.input_mask = dropout_mask(rng, tokens, input_dim, options.dropout_rate);
  } else if (options.mode == TrainMode::FT_DropOut) {
    n.output_mask = dropout_mask(rng, tokens, d_z, options.dropout_rate);
  }
  return n;
}

NoiseDraws zero_noise(const LossOptions& options, std::size_t tokens, std::size_t input_dim,
                      std::size_t d_z) {
  NoiseDraws n;
  if (uses_bottleneck(options.mode)) {
    n.eps = Matrix(tokens, d_z, 0.0);
  } else if (options.mode == TrainMode::FT_DropIn) {
    n.input_mask = Matrix(tokens, input_dim, 1.0);
  } else if (options.mode == TrainMode::FT_DropOut) {
    n.output_mask = Matrix(tokens, d_z, 1.0);
  }
  return n;
}

std::uint64_t fingerprint(const VibProjectorParams& params) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& view : param_views(params)) {
    hash_bytes(h, view.values);
  }
  return h;
}

LossResult total_loss(const DataSample& sample, const VibProjectorParams& params,
                      const PriorSpec& prior, const FrozenDecoderParams& decoder,
                      BetaState& beta, SeededRng& rng, const LossOptions& options) {
  const NoiseDraws noise =
      draw_noise(rng, options, sample.v.rows(), sample.v.cols(), params.latent_dim());
  return total_loss(sample, params, prior, decoder, beta, noise, options);
}

LossResult total_loss(const DataSample& sample, const VibProjectorParams& params,
                      const PriorSpec& prior, const FrozenDecoderParams& decoder,
                      BetaState& beta, const NoiseDraws& noise, const LossOptions& options) {
  if (params.latent_dim() != decoder.d_z()) {
    throw DimensionError("total_loss: projector d_z " + std::to_string(params.latent_dim()) +
                         " does not match decoder " + std::to_string(decoder.d_z()));
  }
  LossResult r;
  LossIntermediates& c = r.cache;
  c.mode = options.mode;
  c.target = sample.target;
  c.noise = noise;
  c.projector_input = sample.v;

  const bool bottleneck = uses_bottleneck(options.mode);
  if (options.mode == TrainMode::FT_DropIn) {
    if (!noise.input_mask.same_shape(sample.v)) {
      throw DimensionError("total_loss: input mask shape mismatch");
    }
    for (std::size_t i = 0; i < c.projector_input.size(); ++i) {
      c.projector_input.values()[i] *= noise.input_mask.values()[i];
    }
  }

  if (bottleneck) {
    c.vib = vib_forward_train(c.projector_input, params, prior, options.vib, noise.eps);
    c.z = options.mode == TrainMode::AdaVIB_NoRepar ? c.vib.sample.stats.mu : c.vib.sample.z;
    r.loss.kl = c.vib.kl;
  } else {
    c.z = mlp_forward(c.projector_input, params.mu_head, c.mlp_cache);
    if (options.mode == TrainMode::FT_DropOut) {
      if (!noise.output_mask.same_shape(c.z)) {
        throw DimensionError("total_loss: output mask shape mismatch");
      }
      for (std::size_t i = 0; i < c.z.size(); ++i) {
        c.z.values()[i] *= noise.output_mask.values()[i];
      }
    }
  }

  r.similarity = similarity_distribution(pool_tokens(c.z), decoder.token_embeddings);
  if (bottleneck) {
    if (options.frozen_beta) {
      beta.effective_beta = *options.frozen_beta;
    } else if (options.mode == TrainMode::VIB_FixedBeta) {
      beta.effective_beta = beta.base_beta;
    } else {
      beta = adapt_beta(std::move(beta), r.similarity, beta.history.size());
    }
    r.loss.effective_beta = beta.effective_beta;
  }

  c.positions = run_teacher_forced(c.z, sample.prompt, sample.target, decoder);
  r.loss.ce = mean_ce(c.positions, sample.target);
  c.d_ce_d_z = ce_gradient_wrt_z(c.positions, sample.target, c.z.rows(), decoder);
  r.loss.total = r.loss.ce + r.loss.effective_beta * r.loss.kl;
  c.effective_beta = r.loss.effective_beta;
  c.params_fingerprint = fingerprint(params);
  c.ready = true;
  return r;
}

VibProjectorParams backward_all(const LossIntermediates& c, const VibProjectorParams& params,
                                double ce_scale, double kl_scale) {
  if (!c.ready) {
    throw StateError("backward_all: no forward intermediates");
  }
  if (c.params_fingerprint != fingerprint(params)) {
    throw StateError("backward_all: intermediates are stale (parameters changed since forward)");
  }
  Matrix d_z = c.d_ce_d_z;
  for (double& x : d_z.values()) {
    x *= ce_scale;
  }

  if (uses_bottleneck(c.mode)) {
    VibGradients g = projector_backward(c.vib, params, d_z, kl_scale * c.effective_beta,
                                        c.mode == TrainMode::AdaVIB_NoRepar);
    return std::move(g.params);
  }

  if (c.mode == TrainMode::FT_DropOut) {
    for (std::size_t i = 0; i < d_z.size(); ++i) {
      d_z.values()[i] *= c.noise.output_mask.values()[i];
    }
  }
  VibProjectorParams grads = VibProjectorParams::zeros_like(params);
  grads.mu_head = mlp_backward(c.mlp_cache, params.mu_head, d_z).grads;
  return grads;
}

GradCheckReport grad_check(const DataSample& sample, const VibProjectorParams& params,
                           const PriorSpec& prior, const FrozenDecoderParams& decoder,
                           double base_beta, const NoiseDraws& noise, const LossOptions& options,
                           double step, const GradientTamper& tamper) {
  if (!(step >= 1e-8 && step <= 1e-4)) {
    throw InvalidArgument("grad_check: step must lie in [1e-8, 1e-4]");
  }
  BetaState live_beta{base_beta, 0.0, {}};
  const LossResult live = total_loss(sample, params, prior, decoder, live_beta, noise, options);
  VibProjectorParams analytic = backward_all(live.cache, params);
  if (tamper) {
    tamper(analytic);
  }

  // Beta is detached in the analytic pass, so the numeric pass holds it at
  // the value the live forward produced.
  LossOptions frozen = options;
  frozen.frozen_beta = live.loss.effective_beta;
  auto loss_at = [&](const VibProjectorParams& p) {
    BetaState b{base_beta, 0.0, {}};
    return total_loss(sample, p, prior, decoder, b, noise, frozen).loss.total;
  };

  GradCheckReport report;
  VibProjectorParams probe = params;
  auto probe_views = param_views(probe);
  const auto grad_views = param_views(std::as_const(analytic));
  for (std::size_t v = 0; v < probe_views.size(); ++v) {
    auto& pv = probe_views[v];
    for (std::size_t i = 0; i < pv.values.size(); ++i) {
      const double saved = pv.values[i];
      pv.values[i] = saved + step;
      const double plus = loss_at(probe);
      pv.values[i] = saved - step;
      const double minus = loss_at(probe);
      pv.values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      const double a = grad_views[v].values[i];
      const double rel = std::abs(a - numeric) / std::max(std::abs(numeric), 1e-8);
      ++report.checked;
      if (rel > report.max_rel_err || report.worst_param.empty()) {
        report.max_rel_err = rel;
        report.analytic_at_worst = a;
        report.numeric_at_worst = numeric;
        report.worst_param = pv.name + "[" + std::to_string(i / pv.cols) + "," +
                             std::to_string(i % pv.cols) + "]";
      }
    }
  }
  return report;
}

}  // namespace adavib

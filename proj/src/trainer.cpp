#include "adavib/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "adavib/errors.hpp"

namespace adavib {

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (!(base_beta >= 0.0)) fail("base_beta must be >= 0");
  if (!(lr >= 0.0)) fail("lr must be >= 0");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (micro_batch == 0) fail("micro_batch must be >= 1");
  if (grad_accum == 0) fail("grad_accum must be >= 1");
  if (epochs == 0) fail("epochs must be >= 1");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) fail("warmup_fraction must be in (0,1)");
  if (!(poly_decay_power >= 0.0)) fail("poly_decay_power must be >= 0");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must be in [0,1)");
  if (!(sigma_floor > 0.0)) fail("sigma_floor must be > 0");
}

VibConfig TrainConfig::vib_config() const {
  return {kl_direction, pooled_posterior, sigma_floor};
}

LossOptions TrainConfig::loss_options() const {
  LossOptions o;
  o.mode = mode;
  o.vib = vib_config();
  o.dropout_rate = dropout_rate;
  return o;
}

std::vector<StepRecord> TrainingLog::smoothed(double factor) const {
  std::vector<StepRecord> out;
  out.reserve(steps.size());
  StepRecord acc{};
  double weight = 0.0;
  for (const StepRecord& s : steps) {
    weight = factor * weight + (1.0 - factor);
    acc.ce = factor * acc.ce + (1.0 - factor) * s.ce;
    acc.kl = factor * acc.kl + (1.0 - factor) * s.kl;
    acc.entropy = factor * acc.entropy + (1.0 - factor) * s.entropy;
    acc.effective_beta = factor * acc.effective_beta + (1.0 - factor) * s.effective_beta;
    acc.grad_norm = factor * acc.grad_norm + (1.0 - factor) * s.grad_norm;
    StepRecord r = s;
    r.ce = acc.ce / weight;
    r.kl = acc.kl / weight;
    r.entropy = acc.entropy / weight;
    r.effective_beta = acc.effective_beta / weight;
    r.grad_norm = acc.grad_norm / weight;
    out.push_back(r);
  }
  return out;
}

std::size_t warmup_steps(std::size_t total_steps, const TrainConfig& cfg) {
  const auto w = static_cast<std::size_t>(
      std::ceil(cfg.warmup_fraction * static_cast<double>(total_steps)));
  return std::clamp<std::size_t>(w, total_steps == 0 ? 0 : 1, total_steps);
}

double lr_at_step(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (step > total_steps) {
    throw InvalidArgument("lr_at_step: step " + std::to_string(step) + " exceeds total " +
                          std::to_string(total_steps));
  }
  if (total_steps == 0) {
    return 0.0;
  }
  const std::size_t warm = warmup_steps(total_steps, cfg);
  if (step < warm) {
    return cfg.lr * static_cast<double>(step) / static_cast<double>(warm);
  }
  if (warm == total_steps) {
    return step == total_steps ? 0.0 : cfg.lr;
  }
  const double progress =
      static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  return cfg.lr * std::pow(1.0 - progress, cfg.poly_decay_power);
}

void optimizer_step(std::span<const ParamView> params, std::span<const ConstParamView> grads,
                    AdamState& state, double lr, double weight_decay, const AdamHyper& hyper) {
  if (params.size() != grads.size()) {
    throw DimensionError("optimizer_step: parameter/gradient count mismatch");
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.values.size(), 0.0);
      state.v.emplace_back(p.values.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw DimensionError("optimizer_step: optimizer state does not match parameters");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].values.size() != grads[k].values.size() ||
        state.m[k].size() != params[k].values.size()) {
      throw DimensionError("optimizer_step: shape mismatch for " + params[k].name);
    }
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k].values;
    const auto g = grads[k].values;
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] *= 1.0 - lr * weight_decay;
      m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
      v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] -= lr * m_hat / (std::sqrt(v_hat) + hyper.eps);
    }
  }
}

VibProjectorParams Checkpoint::vib_params() const {
  if (!sigma_head) {
    throw ConfigError("checkpoint (mode " + std::string(to_string(config.mode)) +
                      ") has no scale head");
  }
  return {mu_head, *sigma_head};
}

std::size_t steps_per_epoch(std::size_t n_samples, const TrainConfig& cfg) {
  const std::size_t batch = cfg.micro_batch * cfg.grad_accum;
  return (n_samples + batch - 1) / batch;
}

namespace {

constexpr std::uint64_t kShuffleStream = 1;
constexpr std::uint64_t kNoiseStream = 2;
constexpr std::uint64_t kSigmaInitStream = 3;

std::vector<std::size_t> shuffled_order(std::size_t n, SeededRng rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    std::swap(order[i - 1], order[rng.uniform_index(i)]);
  }
  return order;
}

// Deterministic modes train and store only the mean head.
std::size_t trainable_views(TrainMode mode) { return uses_bottleneck(mode) ? 8 : 4; }

}  // namespace

TrainResult train(const TrainConfig& cfg, std::span<const DataSample> train_set,
                  const MlpProjectorParams& pretrained, const FrozenDecoderParams& decoder,
                  const ForwardObserver& observe) {
  cfg.validate();
  if (train_set.empty()) {
    throw InvalidArgument("train: empty training set");
  }
  pretrained.validate();
  if (pretrained.output_dim() != decoder.d_z()) {
    throw ConfigError("train: projector output dim does not match embedding dim");
  }

  const SeededRng root(cfg.seed);
  SeededRng sigma_rng = root.split(kSigmaInitStream);
  VibProjectorParams params =
      init_vib_from(pretrained, sigma_rng, cfg.sigma_init_gain, cfg.sigma_init_bias);
  const PriorSpec prior = PriorSpec::standard(decoder.d_z());
  const LossOptions options = cfg.loss_options();
  const bool bottleneck = uses_bottleneck(cfg.mode);

  const std::size_t per_epoch = steps_per_epoch(train_set.size(), cfg);
  const std::size_t total_steps = per_epoch * cfg.epochs;
  const std::size_t batch = cfg.micro_batch * cfg.grad_accum;

  TrainResult result;
  AdamState adam;
  std::size_t global_step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled_order(train_set.size(), root.split(kShuffleStream).split(epoch));
    const SeededRng epoch_noise = root.split(kNoiseStream).split(epoch);
    for (std::size_t s = 0; s < per_epoch; ++s, ++global_step) {
      const std::size_t begin = s * batch;
      const std::size_t end = std::min(begin + batch, train_set.size());
      VibProjectorParams grad_sum = VibProjectorParams::zeros_like(params);
      auto sum_views = param_views(grad_sum);
      StepRecord rec;
      rec.step = global_step;
      rec.lr = lr_at_step(global_step, total_steps, cfg);

      // Micro-batches only subdivide the loop; the reduction order is the
      // sample order either way.
      for (std::size_t i = begin; i < end; ++i) {
        const DataSample& sample = train_set[order[i]];
        SeededRng noise_rng = epoch_noise.split(sample.id);
        BetaState beta{cfg.base_beta, 0.0, {}};
        const LossResult r =
            total_loss(sample, params, prior, decoder, beta, noise_rng, options);
        if (!std::isfinite(r.loss.total)) {
          std::ostringstream msg;
          msg << "non-finite loss at step " << global_step << " sample " << sample.id
              << " (ce=" << r.loss.ce << " kl=" << r.loss.kl
              << " beta=" << r.loss.effective_beta << ")";
          throw DivergenceError(msg.str());
        }
        if (observe) {
          observe(sample, r);
        }
        if (bottleneck) {
          ++result.gaussian_stats_built;
        }
        const VibProjectorParams g = backward_all(r.cache, params);
        const auto gv = param_views(g);
        for (std::size_t k = 0; k < sum_views.size(); ++k) {
          for (std::size_t j = 0; j < sum_views[k].values.size(); ++j) {
            sum_views[k].values[j] += gv[k].values[j];
          }
        }
        rec.ce += r.loss.ce;
        rec.kl += r.loss.kl;
        rec.entropy += r.similarity.entropy;
        rec.effective_beta += r.loss.effective_beta;
      }

      const double count = static_cast<double>(end - begin);
      double sq = 0.0;
      for (auto& view : sum_views) {
        for (double& x : view.values) {
          x /= count;
          sq += x * x;
        }
      }
      rec.ce /= count;
      rec.kl /= count;
      rec.entropy /= count;
      rec.effective_beta /= count;
      rec.grad_norm = std::sqrt(sq);

      const std::size_t n_views = trainable_views(cfg.mode);
      auto pv = param_views(params);
      const auto gv = param_views(std::as_const(grad_sum));
      optimizer_step(std::span(pv).first(n_views), std::span(gv).first(n_views), adam, rec.lr,
                     cfg.weight_decay);
      result.log.steps.push_back(rec);
    }
  }
  result.optimizer_steps = global_step;
  result.checkpoint.config = cfg;
  result.checkpoint.vocab_size = decoder.vocab_size();
  result.checkpoint.mu_head = std::move(params.mu_head);
  if (bottleneck) {
    result.checkpoint.sigma_head = std::move(params.sigma_head);
  }
  return result;
}

double EvalReport::hallucinated_share(std::size_t b) const {
  if (hallucinated == 0) {
    return 0.0;
  }
  return static_cast<double>(bucket_hallucinated.at(b)) / static_cast<double>(hallucinated);
}

Matrix expected_tokens(const Checkpoint& checkpoint, const Matrix& v) {
  VibConfig vib = checkpoint.config.vib_config();
  vib.pooled_posterior = vib.pooled_posterior && uses_bottleneck(checkpoint.config.mode);
  const VibProjectorParams as_vib{checkpoint.mu_head, checkpoint.mu_head};
  return vib_forward_eval(v, as_vib, vib);
}

EvalReport evaluate(const Checkpoint& checkpoint, std::span<const DataSample> eval_set,
                    const FrozenDecoderParams& decoder, const EvalOptions& options) {
  if (eval_set.empty()) {
    throw InvalidArgument("evaluate: empty evaluation set");
  }
  if (checkpoint.vocab_size != decoder.vocab_size()) {
    throw ConfigError("evaluate: checkpoint vocabulary " + std::to_string(checkpoint.vocab_size) +
                      " does not match decoder vocabulary " +
                      std::to_string(decoder.vocab_size()));
  }
  if (checkpoint.mu_head.output_dim() != decoder.d_z()) {
    throw ConfigError("evaluate: projector output dim does not match decoder embeddings");
  }
  options.layout.validate();
  if (options.layout.vocab_size != decoder.vocab_size()) {
    throw ConfigError("evaluate: token layout vocabulary does not match decoder");
  }

  EvalReport report;
  double entropy_sum = 0.0;
  for (const DataSample& sample : eval_set) {
    const Matrix z = expected_tokens(checkpoint, sample.v);
    const SimilarityStats sim = similarity_distribution(pool_tokens(z), decoder.token_embeddings);
    SampleEval se;
    se.id = sample.id;
    se.decoded = greedy_decode(z, sample.prompt, decoder, options.max_decode_len);
    se.entropy = sim.entropy;
    se.normalized_entropy = sim.normalized_entropy;
    se.max_similarity = *std::max_element(sim.probs.begin(), sim.probs.end());
    se.bucket = max_similarity_bucket(sim.probs);
    for (TokenId t : se.decoded) {
      if (!options.layout.is_object(t)) {
        continue;
      }
      const ObjectId o = options.layout.object_of(t);
      const bool gold = std::find(sample.gold_objects.begin(), sample.gold_objects.end(), o) !=
                        sample.gold_objects.end();
      const bool seen = std::find(se.hallucinated_objects.begin(), se.hallucinated_objects.end(),
                                  o) != se.hallucinated_objects.end();
      if (!gold && !seen) {
        se.hallucinated_objects.push_back(o);
      }
    }
    entropy_sum += se.entropy;
    report.bucket_all[se.bucket] += 1;
    if (!se.hallucinated_objects.empty()) {
      report.hallucinated += 1;
      report.bucket_hallucinated[se.bucket] += 1;
    }
    report.samples.push_back(std::move(se));
  }
  const double n = static_cast<double>(eval_set.size());
  report.mean_entropy = entropy_sum / n;
  report.proxy_rate = static_cast<double>(report.hallucinated) / n;
  return report;
}

}  // namespace adavib

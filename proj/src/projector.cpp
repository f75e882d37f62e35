#include "adavib/projector.hpp"

#include <cmath>

#include "adavib/errors.hpp"

namespace adavib {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) {
    throw DimensionError(msg);
  }
}

Matrix mean_row(const Matrix& v) {
  if (v.rows() == 0) {
    throw InvalidArgument("cannot pool zero tokens");
  }
  Matrix out(1, v.cols());
  for (std::size_t r = 0; r < v.rows(); ++r) {
    for (std::size_t c = 0; c < v.cols(); ++c) {
      out(0, c) += v(r, c);
    }
  }
  for (double& x : out.values()) {
    x /= static_cast<double>(v.rows());
  }
  return out;
}

Matrix broadcast_rows(const Matrix& one_row, std::size_t rows) {
  Matrix out(rows, one_row.cols());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < one_row.cols(); ++c) {
      out(r, c) = one_row(0, c);
    }
  }
  return out;
}

Matrix sum_rows(const Matrix& m) {
  Matrix out(1, m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      out(0, c) += m(r, c);
    }
  }
  return out;
}

}  // namespace

void MlpProjectorParams::validate() const {
  require(b_z.size() == w_z.rows(), "mlp: b_z length does not match w_z rows");
  require(w_h.cols() == w_z.rows(), "mlp: w_h cols do not match hidden size");
  require(b_h.size() == w_h.rows(), "mlp: b_h length does not match w_h rows");
  require_finite(w_z.values(), "mlp w_z");
  require_finite(b_z, "mlp b_z");
  require_finite(w_h.values(), "mlp w_h");
  require_finite(b_h, "mlp b_h");
}

MlpProjectorParams MlpProjectorParams::zeros(std::size_t input, std::size_t hidden,
                                             std::size_t output) {
  return {Matrix(hidden, input), Vector(hidden, 0.0), Matrix(output, hidden),
          Vector(output, 0.0)};
}

MlpProjectorParams init_mlp(std::size_t input, std::size_t hidden, std::size_t output,
                            SeededRng& rng, double gain, double bias) {
  auto p = MlpProjectorParams::zeros(input, hidden, output);
  const double s1 = gain / std::sqrt(static_cast<double>(input));
  const double s2 = gain / std::sqrt(static_cast<double>(hidden));
  for (double& w : p.w_z.values()) {
    w = s1 * rng.normal();
  }
  for (double& w : p.w_h.values()) {
    w = s2 * rng.normal();
  }
  std::fill(p.b_h.begin(), p.b_h.end(), bias);
  return p;
}

void VibProjectorParams::validate() const {
  mu_head.validate();
  sigma_head.validate();
  require(mu_head.input_dim() == sigma_head.input_dim(), "vib: heads disagree on input dim");
  require(mu_head.output_dim() == sigma_head.output_dim(), "vib: heads disagree on d_z");
}

VibProjectorParams VibProjectorParams::zeros_like(const VibProjectorParams& shape) {
  return {MlpProjectorParams::zeros(shape.mu_head.input_dim(), shape.mu_head.hidden_dim(),
                                    shape.mu_head.output_dim()),
          MlpProjectorParams::zeros(shape.sigma_head.input_dim(), shape.sigma_head.hidden_dim(),
                                    shape.sigma_head.output_dim())};
}

VibProjectorParams init_vib_from(const MlpProjectorParams& pretrained, SeededRng& rng,
                                 double sigma_gain, double sigma_bias) {
  pretrained.validate();
  return {pretrained, init_mlp(pretrained.input_dim(), pretrained.hidden_dim(),
                               pretrained.output_dim(), rng, sigma_gain, sigma_bias)};
}

namespace {

template <typename Params, typename View>
std::vector<View> views_impl(Params& params) {
  std::vector<View> out;
  auto add_head = [&out](const std::string& prefix, auto& head) {
    out.push_back({prefix + ".w_z", head.w_z.rows(), head.w_z.cols(), head.w_z.values()});
    out.push_back({prefix + ".b_z", 1, head.b_z.size(), head.b_z});
    out.push_back({prefix + ".w_h", head.w_h.rows(), head.w_h.cols(), head.w_h.values()});
    out.push_back({prefix + ".b_h", 1, head.b_h.size(), head.b_h});
  };
  add_head("mu_head", params.mu_head);
  add_head("sigma_head", params.sigma_head);
  return out;
}

}  // namespace

std::vector<ParamView> param_views(VibProjectorParams& params) {
  return views_impl<VibProjectorParams, ParamView>(params);
}

std::vector<ConstParamView> param_views(const VibProjectorParams& params) {
  return views_impl<const VibProjectorParams, ConstParamView>(params);
}

std::size_t param_count(const VibProjectorParams& params) {
  std::size_t n = 0;
  for (const auto& v : param_views(params)) {
    n += v.values.size();
  }
  return n;
}

const char* to_string(KlDirection d) {
  return d == KlDirection::AsPrinted ? "as_printed" : "posterior_to_prior";
}

KlDirection kl_direction_from_string(const std::string& s) {
  if (s == "as_printed") {
    return KlDirection::AsPrinted;
  }
  if (s == "posterior_to_prior") {
    return KlDirection::PosteriorToPrior;
  }
  throw ConfigError("unknown kl direction '" + s + "' (expected as_printed|posterior_to_prior)");
}

PriorSpec PriorSpec::standard(std::size_t d_z) {
  return {Vector(d_z, 0.0), Vector(d_z, 1.0)};
}

Matrix mlp_forward(const Matrix& v, const MlpProjectorParams& params) {
  MlpCache cache;
  return mlp_forward(v, params, cache);
}

Matrix mlp_forward(const Matrix& v, const MlpProjectorParams& params, MlpCache& cache) {
  if (v.cols() != params.input_dim()) {
    throw DimensionError("mlp_forward: input has " + std::to_string(v.cols()) +
                         " features, projector expects " + std::to_string(params.input_dim()));
  }
  params.validate();
  cache.input = v;
  cache.pre = matmul_transposed(v, params.w_z);
  cache.act = Matrix(cache.pre.rows(), cache.pre.cols());
  for (std::size_t r = 0; r < cache.pre.rows(); ++r) {
    for (std::size_t c = 0; c < cache.pre.cols(); ++c) {
      cache.pre(r, c) += params.b_z[c];
      cache.act(r, c) = gelu(cache.pre(r, c));
    }
  }
  Matrix out = matmul_transposed(cache.act, params.w_h);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t c = 0; c < out.cols(); ++c) {
      out(r, c) += params.b_h[c];
    }
  }
  return out;
}

MlpBackward mlp_backward(const MlpCache& cache, const MlpProjectorParams& params,
                         const Matrix& d_out) {
  if (d_out.rows() != cache.act.rows() || d_out.cols() != params.output_dim()) {
    throw DimensionError("mlp_backward: upstream gradient shape mismatch");
  }
  MlpBackward out{MlpProjectorParams::zeros(params.input_dim(), params.hidden_dim(),
                                            params.output_dim()),
                  Matrix()};
  out.grads.w_h = transposed_matmul(d_out, cache.act);
  for (std::size_t r = 0; r < d_out.rows(); ++r) {
    for (std::size_t c = 0; c < d_out.cols(); ++c) {
      out.grads.b_h[c] += d_out(r, c);
    }
  }
  Matrix d_pre = matmul(d_out, params.w_h);
  for (std::size_t r = 0; r < d_pre.rows(); ++r) {
    for (std::size_t c = 0; c < d_pre.cols(); ++c) {
      d_pre(r, c) *= gelu_grad(cache.pre(r, c));
      out.grads.b_z[c] += d_pre(r, c);
    }
  }
  out.grads.w_z = transposed_matmul(d_pre, cache.input);
  out.d_input = matmul(d_pre, params.w_z);
  return out;
}

namespace {

void check_vib_inputs(const Matrix& v, const VibProjectorParams& params) {
  params.validate();
  if (v.rows() == 0) {
    throw InvalidArgument("vib forward: no visual tokens");
  }
  if (v.cols() != params.input_dim()) {
    throw DimensionError("vib forward: input has " + std::to_string(v.cols()) +
                         " features, projector expects " + std::to_string(params.input_dim()));
  }
  require_finite(v.values(), "visual features");
}

}  // namespace

VibForward vib_forward_train(const Matrix& v, const VibProjectorParams& params,
                             const PriorSpec& prior, const VibConfig& config, SeededRng& rng) {
  check_vib_inputs(v, params);
  return vib_forward_train(v, params, prior, config,
                           sample_standard_normal(rng, v.rows(), params.latent_dim()));
}

VibForward vib_forward_train(const Matrix& v, const VibProjectorParams& params,
                             const PriorSpec& prior, const VibConfig& config, const Matrix& eps) {
  check_vib_inputs(v, params);
  const std::size_t tokens = v.rows();
  const std::size_t d_z = params.latent_dim();
  if (eps.rows() != tokens || eps.cols() != d_z) {
    throw DimensionError("vib forward: eps must be tokens x d_z");
  }
  if (prior.dim() != d_z || prior.sigma_r.size() != d_z) {
    throw DimensionError("vib forward: prior dimension does not match d_z");
  }

  VibForward f;
  f.prior = prior;
  f.config = config;
  const Matrix head_input = config.pooled_posterior ? mean_row(v) : v;
  Matrix mu = mlp_forward(head_input, params.mu_head, f.mu_cache);
  f.sigma_raw = mlp_forward(head_input, params.sigma_head, f.sigma_cache);
  Matrix sigma(f.sigma_raw.rows(), f.sigma_raw.cols());
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    sigma.values()[i] = std::max(softplus(f.sigma_raw.values()[i]), config.sigma_floor);
  }
  if (config.pooled_posterior) {
    mu = broadcast_rows(mu, tokens);
    sigma = broadcast_rows(sigma, tokens);
  }

  Matrix z(tokens, d_z);
  for (std::size_t i = 0; i < z.size(); ++i) {
    z.values()[i] = mu.values()[i] + sigma.values()[i] * eps.values()[i];
  }
  f.sample = ReparamSample{std::move(z), eps, GaussianStats{std::move(mu), std::move(sigma)}};
  f.kl = kl_diag_gaussian(f.sample.stats, prior, config.kl_direction);
  f.ready = true;
  return f;
}

Matrix vib_forward_eval(const Matrix& v, const VibProjectorParams& params,
                        const VibConfig& config) {
  check_vib_inputs(v, params);
  if (config.pooled_posterior) {
    return broadcast_rows(mlp_forward(mean_row(v), params.mu_head), v.rows());
  }
  return mlp_forward(v, params.mu_head);
}

namespace {

void check_kl_inputs(const GaussianStats& stats, const PriorSpec& prior) {
  if (!stats.mu.same_shape(stats.sigma)) {
    throw DimensionError("kl: mu and sigma shapes differ");
  }
  if (stats.tokens() == 0) {
    throw InvalidArgument("kl: no token rows");
  }
  if (prior.mu_r.size() != stats.d_z() || prior.sigma_r.size() != stats.d_z()) {
    throw DimensionError("kl: prior dimension does not match d_z");
  }
  for (double s : stats.sigma.values()) {
    if (!(s > 0.0)) {
      throw DomainError("kl: posterior sigma must be strictly positive");
    }
  }
  for (double s : prior.sigma_r) {
    if (!(s > 0.0)) {
      throw DomainError("kl: prior sigma must be strictly positive");
    }
  }
}

}  // namespace

double kl_diag_gaussian(const GaussianStats& stats, const PriorSpec& prior,
                        KlDirection direction) {
  check_kl_inputs(stats, prior);
  double total = 0.0;
  for (std::size_t t = 0; t < stats.tokens(); ++t) {
    double row = 0.0;
    for (std::size_t i = 0; i < stats.d_z(); ++i) {
      const double m = stats.mu(t, i);
      const double s = stats.sigma(t, i);
      const double mr = prior.mu_r[i];
      const double sr = prior.sigma_r[i];
      const double dm2 = (m - mr) * (m - mr);
      if (direction == KlDirection::AsPrinted) {
        // log det Σθ/Σr − d + tr(Σθ⁻¹Σr) + (μθ−μr)ᵀΣθ⁻¹(μθ−μr)
        row += 2.0 * (std::log(s) - std::log(sr)) - 1.0 + (sr * sr) / (s * s) + dm2 / (s * s);
      } else {
        row += 2.0 * (std::log(sr) - std::log(s)) - 1.0 + (s * s) / (sr * sr) + dm2 / (sr * sr);
      }
    }
    total += 0.5 * row;
  }
  return total / static_cast<double>(stats.tokens());
}

GaussianStats kl_diag_gaussian_grad(const GaussianStats& stats, const PriorSpec& prior,
                                    KlDirection direction) {
  check_kl_inputs(stats, prior);
  GaussianStats g{Matrix(stats.tokens(), stats.d_z()), Matrix(stats.tokens(), stats.d_z())};
  const double scale = 1.0 / static_cast<double>(stats.tokens());
  for (std::size_t t = 0; t < stats.tokens(); ++t) {
    for (std::size_t i = 0; i < stats.d_z(); ++i) {
      const double m = stats.mu(t, i);
      const double s = stats.sigma(t, i);
      const double mr = prior.mu_r[i];
      const double sr = prior.sigma_r[i];
      if (direction == KlDirection::AsPrinted) {
        g.mu(t, i) = scale * (m - mr) / (s * s);
        g.sigma(t, i) = scale * (1.0 / s - (sr * sr + (m - mr) * (m - mr)) / (s * s * s));
      } else {
        g.mu(t, i) = scale * (m - mr) / (sr * sr);
        g.sigma(t, i) = scale * (s / (sr * sr) - 1.0 / s);
      }
    }
  }
  return g;
}

VibGradients projector_backward(const VibForward& forward, const VibProjectorParams& params,
                                const Matrix& d_z, double d_kl, bool z_is_mean) {
  if (!forward.ready) {
    throw StateError("projector_backward: forward intermediates missing");
  }
  const auto& stats = forward.sample.stats;
  if (!d_z.same_shape(stats.mu)) {
    throw DimensionError("projector_backward: d_z must be tokens x d_z");
  }
  Matrix d_mu = d_z;
  Matrix d_sigma(stats.tokens(), stats.d_z());
  if (!z_is_mean) {
    for (std::size_t i = 0; i < d_sigma.size(); ++i) {
      d_sigma.values()[i] = d_z.values()[i] * forward.sample.eps.values()[i];
    }
  }
  if (d_kl != 0.0) {
    const GaussianStats kg = kl_diag_gaussian_grad(stats, forward.prior,
                                                   forward.config.kl_direction);
    for (std::size_t i = 0; i < d_mu.size(); ++i) {
      d_mu.values()[i] += d_kl * kg.mu.values()[i];
      d_sigma.values()[i] += d_kl * kg.sigma.values()[i];
    }
  }

  const bool pooled = forward.config.pooled_posterior;
  if (pooled) {
    d_mu = sum_rows(d_mu);
    d_sigma = sum_rows(d_sigma);
  }
  // Through the floored softplus: the floor has zero slope.
  Matrix d_raw(d_sigma.rows(), d_sigma.cols());
  for (std::size_t i = 0; i < d_raw.size(); ++i) {
    const double raw = forward.sigma_raw.values()[i];
    if (softplus(raw) > forward.config.sigma_floor) {
      d_raw.values()[i] = d_sigma.values()[i] * sigmoid(raw);
    }
  }

  MlpBackward mu_back = mlp_backward(forward.mu_cache, params.mu_head, d_mu);
  MlpBackward sigma_back = mlp_backward(forward.sigma_cache, params.sigma_head, d_raw);

  VibGradients out{{std::move(mu_back.grads), std::move(sigma_back.grads)}, Matrix()};
  Matrix d_head_input = mu_back.d_input;
  for (std::size_t i = 0; i < d_head_input.size(); ++i) {
    d_head_input.values()[i] += sigma_back.d_input.values()[i];
  }
  if (pooled) {
    const std::size_t tokens = stats.tokens();
    for (double& x : d_head_input.values()) {
      x /= static_cast<double>(tokens);
    }
    out.d_input = broadcast_rows(d_head_input, tokens);
  } else {
    out.d_input = std::move(d_head_input);
  }
  return out;
}

}  // namespace adavib

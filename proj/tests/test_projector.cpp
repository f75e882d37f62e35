#include <doctest.h>

#include <cmath>

#include "adavib/errors.hpp"
#include "adavib/projector.hpp"

using namespace adavib;

namespace {

VibProjectorParams random_vib(SeededRng& rng, std::size_t in, std::size_t hidden, std::size_t dz) {
  VibProjectorParams p;
  p.mu_head = init_mlp(in, hidden, dz, rng, 1.0, 0.1);
  p.sigma_head = init_mlp(in, hidden, dz, rng, 0.5, -0.5);
  return p;
}

GaussianStats stats_of(Vector mu, Vector sigma) {
  const std::size_t d = mu.size();
  return {Matrix(1, d, std::move(mu)), Matrix(1, d, std::move(sigma))};
}

}  // namespace

TEST_CASE("zero projector maps everything to zero") {
  const auto p = MlpProjectorParams::zeros(3, 4, 2);
  SeededRng rng(1);
  const Matrix z = mlp_forward(sample_standard_normal(rng, 5, 3), p);
  CHECK(z == Matrix(5, 2));
}

TEST_CASE("1x1 identity projector reproduces gelu(1)") {
  MlpProjectorParams p = MlpProjectorParams::zeros(1, 1, 1);
  p.w_z(0, 0) = 1.0;
  p.w_h(0, 0) = 1.0;
  const Matrix z = mlp_forward(Matrix::from_rows({{1.0}}), p);
  CHECK(z(0, 0) == doctest::Approx(0.8411919906082767).epsilon(1e-14));
}

TEST_CASE("token rows are projected independently") {
  SeededRng rng(2);
  const auto p = init_mlp(4, 6, 3, rng);
  const Matrix v = sample_standard_normal(rng, 3, 4);
  const Matrix batch = mlp_forward(v, p);
  for (std::size_t r = 0; r < 3; ++r) {
    Matrix one(1, 4);
    std::copy(v.row(r).begin(), v.row(r).end(), one.row(0).begin());
    const Matrix single = mlp_forward(one, p);
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(single(0, c) == batch(r, c));
    }
  }
}

TEST_CASE("mlp_forward rejects mismatched input width") {
  SeededRng rng(3);
  const auto p = init_mlp(4, 6, 3, rng);
  CHECK_THROWS_AS(mlp_forward(Matrix(2, 5), p), DimensionError);
}

TEST_CASE("zero noise gives z = mu exactly") {
  SeededRng rng(4);
  const auto p = random_vib(rng, 3, 5, 2);
  const Matrix v = sample_standard_normal(rng, 2, 3);
  const auto fwd = vib_forward_train(v, p, PriorSpec::standard(2), {}, Matrix(2, 2));
  CHECK(fwd.sample.z == fwd.sample.stats.mu);
}

TEST_CASE("collapsed scale head leaves z at mu up to the floor") {
  SeededRng rng(5);
  auto p = random_vib(rng, 3, 5, 2);
  p.sigma_head.w_h = Matrix(2, 5);
  p.sigma_head.b_h = Vector(2, -1e4);
  const Matrix v = sample_standard_normal(rng, 1, 3);
  SeededRng noise(6);
  const auto fwd = vib_forward_train(v, p, PriorSpec::standard(2), {}, noise);
  for (std::size_t c = 0; c < 2; ++c) {
    CHECK(fwd.sample.stats.sigma(0, c) == 1e-8);
    CHECK(std::abs(fwd.sample.z(0, c) - fwd.sample.stats.mu(0, c)) < 1e-7);
  }
}

TEST_CASE("reparameterized sample is reconstructible bit-exactly") {
  SeededRng init(7);
  const auto p = random_vib(init, 3, 4, 2);
  const Matrix v = Matrix::from_rows({{0.5, -1.0, 2.0}});
  SeededRng rng(7);
  const auto fwd = vib_forward_train(v, p, PriorSpec::standard(2), {}, rng);
  const auto& s = fwd.sample;
  for (std::size_t c = 0; c < 2; ++c) {
    CHECK(s.z(0, c) - (s.stats.mu(0, c) + s.stats.sigma(0, c) * s.eps(0, c)) == 0.0);
  }
}

TEST_CASE("reparameterization holds for many random draws") {
  SeededRng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = random_vib(rng, 4, 5, 3);
    const Matrix v = sample_standard_normal(rng, 1 + rng.uniform_index(3), 4);
    VibConfig cfg;
    cfg.pooled_posterior = trial % 2 == 1;
    const auto fwd = vib_forward_train(v, p, PriorSpec::standard(3), cfg, rng);
    const auto& s = fwd.sample;
    for (std::size_t i = 0; i < s.z.size(); ++i) {
      REQUIRE(s.z.values()[i] -
                  (s.stats.mu.values()[i] + s.stats.sigma.values()[i] * s.eps.values()[i]) ==
              0.0);
    }
  }
}

TEST_CASE("sample mean approaches mu") {
  SeededRng init(9);
  auto p = random_vib(init, 2, 3, 2);
  const Matrix v = Matrix::from_rows({{0.3, -0.4}});
  SeededRng rng(10);
  Vector acc(2, 0.0);
  const int n = 100000;
  Matrix mu;
  for (int i = 0; i < n; ++i) {
    const auto fwd = vib_forward_train(v, p, PriorSpec::standard(2), {}, rng);
    acc[0] += fwd.sample.z(0, 0);
    acc[1] += fwd.sample.z(0, 1);
    mu = fwd.sample.stats.mu;
    REQUIRE(fwd.sample.stats.sigma(0, 0) <= 1.0);
  }
  CHECK(std::abs(acc[0] / n - mu(0, 0)) < 0.02);
  CHECK(std::abs(acc[1] / n - mu(0, 1)) < 0.02);
}

TEST_CASE("eval forward is the mean head") {
  SeededRng rng(11);
  const auto p = random_vib(rng, 3, 4, 2);
  const Matrix v = sample_standard_normal(rng, 3, 3);
  const Matrix e1 = vib_forward_eval(v, p);
  CHECK(e1 == vib_forward_eval(v, p));
  const auto fwd = vib_forward_train(v, p, PriorSpec::standard(2), {}, rng);
  CHECK(e1 == fwd.sample.stats.mu);

  VibProjectorParams zero = VibProjectorParams::zeros_like(p);
  CHECK(vib_forward_eval(v, zero) == Matrix(3, 2));
}

TEST_CASE("kl_diag_gaussian hand-evaluated values") {
  const PriorSpec prior = PriorSpec::standard(2);
  CHECK(kl_diag_gaussian(stats_of({0, 0}, {1, 1}), prior, KlDirection::AsPrinted) == 0.0);
  CHECK(std::abs(kl_diag_gaussian(stats_of({1, 0}, {1, 1}), prior, KlDirection::AsPrinted) -
                 0.5) < 1e-9);
  const double r2 = std::sqrt(2.0);
  CHECK(std::abs(kl_diag_gaussian(stats_of({0, 0}, {r2, r2}), prior, KlDirection::AsPrinted) -
                 0.19314718055994531) < 1e-9);
}

TEST_CASE("kl is zero at equal parameters and never negative") {
  SeededRng rng(12);
  for (int i = 0; i < 10000; ++i) {
    const std::size_t d = 1 + rng.uniform_index(4);
    Vector mu(d), sig(d), mr(d), sr(d);
    for (std::size_t j = 0; j < d; ++j) {
      mu[j] = 3 * rng.normal();
      mr[j] = 3 * rng.normal();
      sig[j] = std::exp(2 * rng.normal());
      sr[j] = std::exp(2 * rng.normal());
    }
    const GaussianStats s = stats_of(mu, sig);
    const PriorSpec prior{mr, sr};
    const PriorSpec self{mu, sig};
    for (KlDirection dir : {KlDirection::AsPrinted, KlDirection::PosteriorToPrior}) {
      REQUIRE(kl_diag_gaussian(s, prior, dir) >= -1e-12);
      REQUIRE(kl_diag_gaussian(s, self, dir) == 0.0);
    }
  }
}

TEST_CASE("kl directions are mirror images") {
  const GaussianStats s = stats_of({0.4, -1.0}, {0.5, 2.0});
  const PriorSpec prior{{1.0, 0.0}, {1.5, 0.7}};
  const GaussianStats as_stats = stats_of(prior.mu_r, prior.sigma_r);
  const PriorSpec as_prior{{0.4, -1.0}, {0.5, 2.0}};
  CHECK(kl_diag_gaussian(s, prior, KlDirection::PosteriorToPrior) ==
        doctest::Approx(kl_diag_gaussian(as_stats, as_prior, KlDirection::AsPrinted))
            .epsilon(1e-14));
}

TEST_CASE("kl rejects non-positive sigma") {
  CHECK_THROWS_AS(
      kl_diag_gaussian(stats_of({0, 0}, {1, 0}), PriorSpec::standard(2), KlDirection::AsPrinted),
      DomainError);
}

TEST_CASE("kl gradient vanishes at the prior and matches differences elsewhere") {
  const PriorSpec prior = PriorSpec::standard(2);
  const auto g0 = kl_diag_gaussian_grad(stats_of({0, 0}, {1, 1}), prior, KlDirection::AsPrinted);
  CHECK(g0.mu(0, 0) == 0.0);
  CHECK(g0.mu(0, 1) == 0.0);

  for (KlDirection dir : {KlDirection::AsPrinted, KlDirection::PosteriorToPrior}) {
    const GaussianStats s = stats_of({0.3, -0.8}, {0.6, 1.7});
    const auto g = kl_diag_gaussian_grad(s, prior, dir);
    const double h = 1e-6;
    for (std::size_t j = 0; j < 2; ++j) {
      GaussianStats up = s, dn = s;
      up.mu(0, j) += h;
      dn.mu(0, j) -= h;
      const double fd_mu =
          (kl_diag_gaussian(up, prior, dir) - kl_diag_gaussian(dn, prior, dir)) / (2 * h);
      CHECK(g.mu(0, j) == doctest::Approx(fd_mu).epsilon(1e-7));
      up = s;
      dn = s;
      up.sigma(0, j) += h;
      dn.sigma(0, j) -= h;
      const double fd_sig =
          (kl_diag_gaussian(up, prior, dir) - kl_diag_gaussian(dn, prior, dir)) / (2 * h);
      CHECK(g.sigma(0, j) == doctest::Approx(fd_sig).epsilon(1e-7));
    }
  }
}

TEST_CASE("backward with zero upstream is zero") {
  SeededRng rng(13);
  const auto p = random_vib(rng, 3, 4, 2);
  const Matrix v = sample_standard_normal(rng, 2, 3);
  const auto fwd = vib_forward_train(v, p, PriorSpec::standard(2), {}, rng);
  const auto g = projector_backward(fwd, p, Matrix(2, 2), 0.0);
  for (const auto& view : param_views(g.params)) {
    for (double x : view.values) {
      CHECK(x == 0.0);
    }
  }
  CHECK(g.d_input == Matrix(2, 3));
}

TEST_CASE("backward requires a completed forward") {
  SeededRng rng(14);
  const auto p = random_vib(rng, 3, 4, 2);
  CHECK_THROWS_AS(projector_backward(VibForward{}, p, Matrix(1, 2), 1.0), StateError);
}

TEST_CASE("projector_backward matches finite differences of a linear readout") {
  // L = sum(W ⊙ z) + c·KL with eps held fixed.
  for (bool pooled : {false, true}) {
    for (KlDirection dir : {KlDirection::AsPrinted, KlDirection::PosteriorToPrior}) {
      SeededRng rng(15);
      auto p = random_vib(rng, 3, 4, 2);
      const Matrix v = sample_standard_normal(rng, 2, 3);
      const Matrix w = sample_standard_normal(rng, 2, 2);
      const Matrix eps = sample_standard_normal(rng, 2, 2);
      const double c = 0.7;
      VibConfig cfg;
      cfg.kl_direction = dir;
      cfg.pooled_posterior = pooled;
      const PriorSpec prior = PriorSpec::standard(2);
      auto loss = [&](const VibProjectorParams& q) {
        const auto f = vib_forward_train(v, q, prior, cfg, eps);
        double s = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
          s += w.values()[i] * f.sample.z.values()[i];
        }
        return s + c * f.kl;
      };
      const auto fwd = vib_forward_train(v, p, prior, cfg, eps);
      const auto g = projector_backward(fwd, p, w, c);
      const auto gviews = param_views(static_cast<const VibProjectorParams&>(g.params));
      auto views = param_views(p);
      double worst = 0.0;
      for (std::size_t k = 0; k < views.size(); ++k) {
        for (std::size_t i = 0; i < views[k].values.size(); ++i) {
          const double orig = views[k].values[i];
          const double h = 1e-5;
          views[k].values[i] = orig + h;
          const double up = loss(p);
          views[k].values[i] = orig - h;
          const double dn = loss(p);
          views[k].values[i] = orig;
          const double fd = (up - dn) / (2 * h);
          worst = std::max(worst, std::abs(gviews[k].values[i] - fd) / std::max(std::abs(fd), 1e-8));
        }
      }
      CHECK_MESSAGE(worst < 1e-5, "pooled=" << pooled << " dir=" << to_string(dir));
    }
  }
}

TEST_CASE("init_vib_from copies the mean head") {
  SeededRng rng(16);
  const auto base = init_mlp(3, 4, 2, rng);
  SeededRng r1(17), r2(17);
  const auto a = init_vib_from(base, r1, 0.1, -2.0);
  const auto b = init_vib_from(base, r2, 0.1, -2.0);
  CHECK(a.mu_head == base);
  CHECK(a == b);
  CHECK(a.sigma_head.b_h == Vector(2, -2.0));
  CHECK(param_count(a) == 2 * (12 + 4 + 8 + 2));
}

TEST_CASE("kl direction names round-trip") {
  for (KlDirection d : {KlDirection::AsPrinted, KlDirection::PosteriorToPrior}) {
    CHECK(kl_direction_from_string(to_string(d)) == d);
  }
  CHECK_THROWS(kl_direction_from_string("forward"));
}

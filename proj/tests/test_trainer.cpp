#include <doctest.h>

#include <cmath>

#include "adavib/data_io.hpp"
#include "adavib/errors.hpp"
#include "adavib/trainer.hpp"

using namespace adavib;

namespace {

struct SmallWorld {
  SynthConfig synth;
  SynthDataset data;
  FrozenDecoderParams decoder;
  MlpProjectorParams init;
};

SmallWorld small_world(std::size_t train_size = 64) {
  SmallWorld w;
  w.synth.n_objects = 4;
  w.synth.input_dim = 6;
  w.synth.tokens = 2;
  w.synth.vocab_size = 10;
  w.synth.train_size = train_size;
  w.synth.eval_size = 16;
  w.synth.cooccur_pairs = {{0, 1, 0.9}};
  w.synth.prompt_length = 2;
  w.synth.seed = 3;
  w.data = generate(w.synth);
  SeededRng rng(11);
  w.decoder = make_frozen_decoder(10, 4, 8, rng, {1.0, 3.0, 1.5});
  SeededRng init(12);
  w.init = init_mlp(6, 8, 4, init);
  return w;
}

TrainConfig quick(TrainMode mode) {
  TrainConfig cfg;
  cfg.mode = mode;
  cfg.lr = 1e-2;
  cfg.base_beta = 1e-3;
  cfg.sigma_init_bias = -1.0;
  return cfg;
}

}  // namespace

TEST_CASE("schedule anchor values") {
  TrainConfig cfg;
  CHECK(lr_at_step(0, 100, cfg) == 0.0);
  CHECK(warmup_steps(100, cfg) == 10);
  CHECK(lr_at_step(10, 100, cfg) == doctest::Approx(3e-5).epsilon(1e-15));
  CHECK(lr_at_step(55, 100, cfg) == doctest::Approx(1.5e-5).epsilon(1e-12));
  CHECK(lr_at_step(100, 100, cfg) == 0.0);
  CHECK_THROWS_AS(lr_at_step(101, 100, cfg), InvalidArgument);
}

TEST_CASE("schedule has no jumps") {
  for (std::size_t total : {7u, 10u, 100u, 257u}) {
    for (double power : {0.5, 1.0, 2.0}) {
      TrainConfig cfg;
      cfg.lr = 1.0;
      cfg.poly_decay_power = power;
      const std::size_t warm = warmup_steps(total, cfg);
      const double bound = cfg.lr / static_cast<double>(std::min(warm, total - warm)) + 1e-15;
      for (std::size_t s = 0; s < total; ++s) {
        const double jump = std::abs(lr_at_step(s, total, cfg) - lr_at_step(s + 1, total, cfg));
        // Sub-linear decay is steepest at its end; the bound applies to power >= 1.
        if (power >= 1.0) {
          CHECK_MESSAGE(jump <= bound, "total " << total << " step " << s);
        }
      }
    }
  }
}

TEST_CASE("optimizer step closed forms") {
  Vector p{1.0, -2.0};
  Vector g{0.0, 0.0};
  const std::vector<ParamView> pv{{"p", 1, 2, p}};
  const std::vector<ConstParamView> gv{{"p", 1, 2, g}};

  AdamState state;
  optimizer_step(pv, gv, state, 0.5, 0.0);
  CHECK(p == Vector{1.0, -2.0});

  optimizer_step(pv, gv, state, 1.0, 0.05);
  CHECK(p[0] == doctest::Approx(0.95).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(-1.9).epsilon(1e-15));

  Vector q{0.3};
  Vector one{1.0};
  const std::vector<ParamView> qv{{"q", 1, 1, q}};
  const std::vector<ConstParamView> ov{{"q", 1, 1, one}};
  AdamState fresh;
  optimizer_step(qv, ov, fresh, 0.1, 0.0);
  // m̂ = 1, v̂ = 1 → step = 0.1/(1 + 1e-8)
  CHECK(q[0] == doctest::Approx(0.3 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));

  Vector wrong{1.0, 2.0, 3.0};
  const std::vector<ConstParamView> bad{{"p", 1, 3, wrong}};
  CHECK_THROWS_AS(optimizer_step(pv, bad, state, 1.0, 0.0), DimensionError);
}

TEST_CASE("zero learning rate leaves the projector untouched") {
  const SmallWorld w = small_world();
  TrainConfig cfg = quick(TrainMode::AdaVIB);
  cfg.lr = 0.0;
  const auto r = train(cfg, w.data.train, w.init, w.decoder);
  CHECK(r.checkpoint.mu_head == w.init);
  CHECK(r.optimizer_steps == steps_per_epoch(64, cfg));
}

TEST_CASE("training is deterministic") {
  const SmallWorld w = small_world();
  for (TrainMode mode : kAllModes) {
    const auto a = train(quick(mode), w.data.train, w.init, w.decoder);
    const auto b = train(quick(mode), w.data.train, w.init, w.decoder);
    CHECK(a.log == b.log);
    CHECK(a.checkpoint == b.checkpoint);
  }
}

TEST_CASE("accumulated micro-batches equal one large batch") {
  const SmallWorld w = small_world(64);
  for (TrainMode mode : {TrainMode::FT, TrainMode::AdaVIB, TrainMode::FT_DropOut}) {
    TrainConfig split = quick(mode);
    split.micro_batch = 2;
    split.grad_accum = 8;
    TrainConfig whole = split;
    whole.micro_batch = 16;
    whole.grad_accum = 1;
    const auto a = train(split, w.data.train, w.init, w.decoder);
    const auto b = train(whole, w.data.train, w.init, w.decoder);
    REQUIRE(a.optimizer_steps == b.optimizer_steps);
    double diff = 0.0;
    const auto& pa = a.checkpoint.mu_head;
    const auto& pb = b.checkpoint.mu_head;
    for (std::size_t i = 0; i < pa.w_z.size(); ++i) {
      diff = std::max(diff, std::abs(pa.w_z.values()[i] - pb.w_z.values()[i]));
    }
    for (std::size_t i = 0; i < pa.w_h.size(); ++i) {
      diff = std::max(diff, std::abs(pa.w_h.values()[i] - pb.w_h.values()[i]));
    }
    CHECK_MESSAGE(diff <= 1e-10, to_string(mode));
  }
}

TEST_CASE("frozen decoder is unchanged by training") {
  const SmallWorld w = small_world();
  const std::string before = decoder_to_string(w.decoder);
  train(quick(TrainMode::AdaVIB), w.data.train, w.init, w.decoder);
  CHECK(decoder_to_string(w.decoder) == before);
}

TEST_CASE("deterministic modes never build Gaussian posteriors") {
  const SmallWorld w = small_world();
  for (TrainMode mode : {TrainMode::FT, TrainMode::FT_DropIn, TrainMode::FT_DropOut}) {
    const auto r = train(quick(mode), w.data.train, w.init, w.decoder);
    CHECK(r.gaussian_stats_built == 0);
    CHECK_FALSE(r.checkpoint.sigma_head.has_value());
  }
  const auto r = train(quick(TrainMode::AdaVIB), w.data.train, w.init, w.decoder);
  CHECK(r.gaussian_stats_built == 64);
  CHECK(r.checkpoint.sigma_head.has_value());
}

TEST_CASE("log has one record per step and recomposes") {
  const SmallWorld w = small_world(96);
  const auto r = train(quick(TrainMode::AdaVIB), w.data.train, w.init, w.decoder);
  REQUIRE(r.log.steps.size() == r.optimizer_steps);
  for (std::size_t i = 0; i < r.log.steps.size(); ++i) {
    CHECK(r.log.steps[i].step == i);
    CHECK(r.log.steps[i].effective_beta >= 0.0);
  }
  const auto sm = r.log.smoothed();
  REQUIRE(sm.size() == r.log.steps.size());
  // Bias correction makes the first smoothed value equal the raw one.
  CHECK(sm[0].ce == doctest::Approx(r.log.steps[0].ce).epsilon(1e-12));
  CHECK(sm[1].lr == r.log.steps[1].lr);
}

TEST_CASE("weight decay only touches trained heads") {
  const SmallWorld w = small_world();
  TrainConfig cfg = quick(TrainMode::AdaVIB);
  cfg.lr = 1e-3;
  cfg.weight_decay = 0.5;
  const auto r = train(cfg, w.data.train, w.init, w.decoder);
  CHECK_FALSE(r.checkpoint.mu_head == w.init);
}

TEST_CASE("train and evaluate validate their inputs") {
  const SmallWorld w = small_world();
  CHECK_THROWS_AS(train(quick(TrainMode::FT), {}, w.init, w.decoder), InvalidArgument);

  TrainConfig bad = quick(TrainMode::FT);
  bad.warmup_fraction = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = quick(TrainMode::FT);
  bad.lr = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  const auto r = train(quick(TrainMode::FT), w.data.train, w.init, w.decoder);
  CHECK_THROWS(evaluate(r.checkpoint, {}, w.decoder));
  Checkpoint other = r.checkpoint;
  other.vocab_size = 12;
  CHECK_THROWS_AS(evaluate(other, w.data.eval, w.decoder), ConfigError);
}

TEST_CASE("uniform decoder decodes nothing and so hallucinates nothing") {
  SmallWorld w = small_world();
  w.decoder.token_embeddings = FrozenEmbeddings(Matrix(10, 4));
  Checkpoint ckpt;
  ckpt.config.mode = TrainMode::FT;
  ckpt.vocab_size = 10;
  ckpt.mu_head = MlpProjectorParams::zeros(6, 8, 4);
  EvalOptions eo;
  eo.layout = w.synth.layout();
  const auto rep = evaluate(ckpt, w.data.eval, w.decoder, eo);
  for (const auto& s : rep.samples) {
    CHECK(s.decoded.empty());
  }
  CHECK(rep.proxy_rate == 0.0);
  CHECK(rep.hallucinated_share(9) == 0.0);
}

TEST_CASE("evaluation counts hallucinated objects and buckets") {
  const SmallWorld w = small_world();
  const auto r = train(quick(TrainMode::FT), w.data.train, w.init, w.decoder);
  EvalOptions eo;
  eo.layout = w.synth.layout();
  const auto rep = evaluate(r.checkpoint, w.data.flip, w.decoder, eo);
  REQUIRE(rep.samples.size() == w.data.flip.size());
  std::size_t hall = 0, total_bucket = 0;
  for (std::size_t i = 0; i < rep.samples.size(); ++i) {
    const auto& s = rep.samples[i];
    for (ObjectId o : s.hallucinated_objects) {
      const auto& gold = w.data.flip[i].gold_objects;
      CHECK(std::find(gold.begin(), gold.end(), o) == gold.end());
    }
    hall += !s.hallucinated_objects.empty();
  }
  for (std::size_t b = 0; b < kSimilarityBuckets; ++b) {
    total_bucket += rep.bucket_all[b];
  }
  CHECK(hall == rep.hallucinated);
  CHECK(total_bucket == rep.samples.size());
  CHECK(rep.proxy_rate == static_cast<double>(hall) / rep.samples.size());
}

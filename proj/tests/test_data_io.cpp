#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>
#include <sstream>

#include <json.hpp>

#include "adavib/data_io.hpp"
#include "adavib/errors.hpp"

using namespace adavib;
namespace fs = std::filesystem;

namespace {

SynthConfig small_config() {
  SynthConfig c;
  c.train_size = 200;
  c.eval_size = 50;
  c.seed = 5;
  return c;
}

bool has(const std::vector<ObjectId>& v, ObjectId o) {
  return std::find(v.begin(), v.end(), o) != v.end();
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("adavib_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("noise-free single-object scenes carry the signature exactly") {
  SynthConfig c = small_config();
  c.noise_std = 0.0;
  c.min_objects = 1;
  c.max_objects = 1;
  c.cooccur_pairs.clear();
  const auto ds = generate(c);
  for (const auto& s : ds.train) {
    REQUIRE(s.gold_objects.size() == 1);
    const auto sig = ds.signatures.row(s.gold_objects[0]);
    for (std::size_t t = 0; t < c.tokens; ++t) {
      CHECK(std::equal(sig.begin(), sig.end(), s.v.row(t).begin()));
    }
  }
}

TEST_CASE("certain co-occurrence always adds the partner") {
  SynthConfig c = small_config();
  c.cooccur_pairs = {{0, 1, 1.0}};
  const auto ds = generate(c);
  std::size_t with_a = 0;
  for (const auto& s : ds.train) {
    if (has(s.gold_objects, 0)) {
      ++with_a;
      CHECK(has(s.gold_objects, 1));
    }
  }
  CHECK(with_a > 0);
}

TEST_CASE("empirical co-occurrence rate is near the configured probability") {
  SynthConfig c;
  c.seed = 17;
  c.eval_size = 10;
  c.cooccur_pairs = {{0, 1, 0.9}};
  const auto ds = generate(c);
  std::size_t with_a = 0, with_both = 0;
  for (const auto& s : ds.train) {
    if (has(s.gold_objects, 0)) {
      ++with_a;
      with_both += has(s.gold_objects, 1);
    }
  }
  REQUIRE(with_a > 300);
  CHECK(std::abs(static_cast<double>(with_both) / with_a - 0.9) < 0.03);
}

TEST_CASE("flip split never pairs a trigger with its partner") {
  const SynthConfig c = small_config();
  const auto ds = generate(c);
  REQUIRE(ds.flip.size() == c.eval_size);
  std::set<std::size_t> train_ids;
  for (const auto& s : ds.train) {
    train_ids.insert(s.id);
  }
  for (const auto& s : ds.flip) {
    bool some_trigger = false;
    for (const auto& p : c.cooccur_pairs) {
      if (has(s.gold_objects, p.a)) {
        some_trigger = true;
        CHECK_FALSE(has(s.gold_objects, p.b));
      }
    }
    CHECK(some_trigger);
    CHECK(train_ids.count(s.id) == 0);
  }
}

TEST_CASE("scene layout") {
  const SynthConfig c = small_config();
  const auto ds = generate(c);
  for (const auto& s : ds.eval) {
    CHECK(s.gold_objects.size() >= 1);
    CHECK(s.gold_objects.size() <= 3);
    CHECK(s.prompt == fixed_prompt(c));
    REQUIRE(s.target.size() == s.gold_objects.size() + 1);
    CHECK(s.target.back() == TokenLayout::kEos);
    CHECK(std::is_sorted(s.target.begin(), s.target.end() - 1));
    CHECK(s.v.rows() == c.tokens);
    CHECK(s.v.cols() == c.input_dim);
  }
}

TEST_CASE("signatures are pairwise independent") {
  const auto ds = generate(small_config());
  for (std::size_t i = 0; i < ds.signatures.rows(); ++i) {
    for (std::size_t j = i + 1; j < ds.signatures.rows(); ++j) {
      const auto a = ds.signatures.row(i);
      const auto b = ds.signatures.row(j);
      const double cos = dot(a, b) / std::sqrt(dot(a, a) * dot(b, b));
      CHECK(std::abs(cos) < 1.0 - 1e-9);
    }
  }
}

TEST_CASE("generation is a pure function of the config") {
  const SynthConfig c = small_config();
  const auto a = generate(c);
  const auto b = generate(c);
  std::ostringstream sa, sb;
  write_split(sa, c, "train", a.train);
  write_split(sb, c, "train", b.train);
  CHECK(sa.str() == sb.str());
  SynthConfig other = c;
  other.seed = 6;
  std::ostringstream so;
  write_split(so, other, "train", generate(other).train);
  CHECK(so.str() != sa.str());
}

TEST_CASE("invalid configs are rejected") {
  SynthConfig c = small_config();
  c.n_objects = 70;
  CHECK_THROWS_AS(generate(c), ConfigError);
  c = small_config();
  c.cooccur_pairs = {{0, 1, 1.5}};
  CHECK_THROWS_AS(generate(c), ConfigError);
  c = small_config();
  c.min_objects = 4;
  c.max_objects = 2;
  CHECK_THROWS_AS(generate(c), ConfigError);
}

TEST_CASE("co-occurrence text form round-trips") {
  const std::vector<CooccurPair> pairs{{0, 1, 0.9}, {4, 2, 0.25}};
  CHECK(parse_cooccur(format_cooccur(pairs)) == pairs);
  CHECK(parse_cooccur("").empty());
  CHECK_THROWS(parse_cooccur("0:1"));
}

TEST_CASE("config header round-trips") {
  SynthConfig c = small_config();
  c.noise_std = 0.1 + 0.2;
  CHECK(SynthConfig::from_header(c.to_header()) == c);
}

TEST_CASE("dataset save and load round-trip bit-exactly") {
  const fs::path dir = scratch_dir("dataset");
  const auto ds = generate(small_config());
  save_dataset(dir.string(), ds);
  const auto back = load_dataset(dir.string());
  CHECK(back.config == ds.config);
  CHECK(back.signatures == ds.signatures);
  CHECK(back.train == ds.train);
  CHECK(back.eval == ds.eval);
  CHECK(back.flip == ds.flip);
  fs::remove_all(dir);
}

TEST_CASE("truncated split reports line and offset") {
  const SynthConfig c = small_config();
  const auto ds = generate(c);
  std::ostringstream out;
  write_split(out, c, "eval", ds.eval);
  const std::string text = out.str();
  const std::string cut = text.substr(0, text.size() / 2);
  std::istringstream in(cut);
  CHECK_THROWS_WITH_AS(read_split(in, "eval.tsv"), doctest::Contains("byte offset"), ParseError);

  std::istringstream no_magic("hello\n");
  CHECK_THROWS_AS(read_split(no_magic, "x.tsv"), ParseError);
}

TEST_CASE("dataset and decoder must agree") {
  const SynthConfig c = small_config();
  SeededRng rng(11);
  const auto ok = make_frozen_decoder(c.vocab_size, 8, 8, rng);
  require_compatible(c, ok);
  const auto wrong = make_frozen_decoder(32, 8, 8, rng);
  CHECK_THROWS_AS(require_compatible(c, wrong), ConfigError);
}

TEST_CASE("checkpoint save, load, save is byte-identical") {
  SeededRng rng(3);
  Checkpoint ck;
  ck.config.mode = TrainMode::AdaVIB;
  ck.config.base_beta = 1e-7;
  ck.vocab_size = 64;
  ck.mu_head = init_mlp(16, 8, 4, rng);
  ck.sigma_head = init_mlp(16, 8, 4, rng, 0.1, -2.0);
  const fs::path dir = scratch_dir("checkpoint");
  const std::string path = (dir / "ck.json").string();
  save_checkpoint(path, ck);
  const auto back = load_checkpoint(path);
  CHECK(back == ck);
  CHECK(checkpoint_to_string(back) == read_file(path));
  fs::remove_all(dir);
}

TEST_CASE("checkpoint loader rejects bad documents") {
  SeededRng rng(4);
  Checkpoint ck;
  ck.config.mode = TrainMode::FT;
  ck.vocab_size = 64;
  ck.mu_head = init_mlp(4, 3, 2, rng);
  auto doc = nlohmann::json::parse(checkpoint_to_string(ck));

  auto newer = doc;
  newer["version"] = Checkpoint::kVersion + 1;
  CHECK_THROWS_WITH_AS(checkpoint_from_string(newer.dump(), "ck.json"),
                       doctest::Contains("version"), ConfigError);

  auto bad_shape = doc;
  bad_shape["params"][0]["shape"] = {3, 5};
  CHECK_THROWS_AS(checkpoint_from_string(bad_shape.dump(), "ck.json"), ParseError);

  auto vib_without_scale = doc;
  vib_without_scale["config"]["mode"] = "AdaVIB";
  CHECK_THROWS_AS(checkpoint_from_string(vib_without_scale.dump(), "ck.json"), ParseError);

  CHECK_THROWS_AS(checkpoint_from_string("{not json", "ck.json"), ParseError);
}

TEST_CASE("a deterministic checkpoint seeds the mean head of a bottleneck run") {
  SeededRng rng(5);
  Checkpoint ft;
  ft.config.mode = TrainMode::FT;
  ft.vocab_size = 64;
  ft.mu_head = init_mlp(6, 5, 3, rng);
  SeededRng r1(9), r2(9), r3(10);
  const auto a = vib_from_checkpoint(ft, r1, 0.1, -1.0);
  const auto b = vib_from_checkpoint(ft, r2, 0.1, -1.0);
  const auto c = vib_from_checkpoint(ft, r3, 0.1, -1.0);
  CHECK(a.mu_head == ft.mu_head);
  CHECK(a.sigma_head == b.sigma_head);
  CHECK_FALSE(a.sigma_head == c.sigma_head);
  CHECK(a.sigma_head.input_dim() == 6);
  CHECK(a.sigma_head.output_dim() == 3);
}

TEST_CASE("decoder and train config round-trip") {
  SeededRng rng(6);
  const auto d = make_frozen_decoder(16, 4, 6, rng, {0.5, 2.0, 1.5});
  CHECK(decoder_from_string(decoder_to_string(d), "d.json") == d);

  TrainConfig cfg;
  cfg.mode = TrainMode::FT_DropOut;
  cfg.lr = 0.1 + 0.2;
  cfg.kl_direction = KlDirection::PosteriorToPrior;
  cfg.seed = 123456789012345ULL;
  CHECK(train_config_from_json(train_config_to_json(cfg)) == cfg);
}

TEST_CASE("format_double is shortest round-trip") {
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(1e-7) == "1e-07");
  for (double x : {0.1 + 0.2, 1.0 / 3.0, -2.5e-300, 6.02214076e23}) {
    CHECK(std::stod(format_double(x)) == x);
  }
}

TEST_CASE("pretraining scenes share signatures but not ids") {
  const SynthConfig c = small_config();
  const auto ds = generate(c);
  const auto pre = generate_pretraining_scenes(c, 30);
  REQUIRE(pre.size() == 30);
  CHECK(pre.front().id > ds.flip.back().id);
  const auto again = generate_pretraining_scenes(c, 30);
  CHECK(pre == again);
}

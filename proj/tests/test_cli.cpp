#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "adavib/cli.hpp"
#include "adavib/data_io.hpp"

using namespace adavib;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("adavib_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string fixture(const char* name) { return std::string(ADAVIB_FIXTURE_DIR) + "/" + name; }

// Small enough to train in well under a second.
std::vector<std::string> small_synth(const fs::path& out) {
  return {"synth",           "--seed",          "1",      "--train-size", "64",
          "--eval-size",     "16",              "--d-z",  "8",            "--hidden",
          "8",               "--d-model",       "8",      "--pretrain-samples", "32",
          "--pretrain-epochs", "1",             "--decoder-fit-samples", "100",
          "--decoder-fit-epochs", "2",          "--out",  out.string()};
}

void expect_same_tree(const fs::path& a, const fs::path& b, const std::vector<std::string>& skip = {}) {
  for (const auto& entry : fs::directory_iterator(a)) {
    const std::string name = entry.path().filename().string();
    if (std::find(skip.begin(), skip.end(), name) != skip.end()) {
      continue;
    }
    CHECK_MESSAGE(read_file(entry.path().string()) == read_file((b / name).string()), name);
  }
}

}  // namespace

TEST_CASE("synth is reproducible") {
  const fs::path a = fresh("synth_a"), b = fresh("synth_b");
  REQUIRE(invoke(small_synth(a)).code == 0);
  REQUIRE(invoke(small_synth(b)).code == 0);
  for (const char* f : {"train.tsv", "eval.tsv", "flip.tsv", "decoder.json", "pretrained.json"}) {
    CHECK(fs::exists(a / f));
  }
  expect_same_tree(a, b, {"manifest.json"});
}

TEST_CASE("usage errors exit with 1") {
  const Run unknown = invoke({"synth", "--no-such-flag"});
  CHECK(unknown.code == cli::kExitValidation);
  CHECK(invoke({}).code == cli::kExitValidation);
  CHECK(invoke({"frobnicate"}).code == cli::kExitValidation);
  CHECK(invoke({"grad-check", "--mode", "VIB"}).code == cli::kExitValidation);
  const Run bad = invoke({"synth", "--n-objects", "100", "--out", fresh("bad").string()});
  CHECK(bad.code == cli::kExitValidation);
  CHECK(bad.err.find("error") != std::string::npos);
}

TEST_CASE("help exits cleanly") {
  const Run r = invoke({"train", "--help"});
  CHECK(r.code == 0);
  CHECK(r.out.find("--base-beta") != std::string::npos);
}

TEST_CASE("missing inputs are validation errors") {
  const Run r = invoke({"train", "--data", "/nonexistent/dir", "--out", fresh("missing").string()});
  CHECK(r.code == cli::kExitValidation);
  CHECK(r.err.find("/nonexistent/dir") != std::string::npos);
}

TEST_CASE("grad-check reports and passes") {
  const fs::path out = fresh("grad");
  const Run r = invoke({"grad-check", "--seed", "3", "--out", out.string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("max_rel_err") != std::string::npos);
  const json rep = json::parse(read_file((out / "grad_check.json").string()));
  CHECK(rep["max_rel_err"].get<double>() < 1e-5);
  CHECK(rep["pass"].get<bool>());
}

TEST_CASE("train, eval and analysis pipeline with manifests") {
  const fs::path root = fresh("pipeline");
  const fs::path data = root / "data";
  REQUIRE(invoke(small_synth(data)).code == 0);
  const std::string train_before = read_file((data / "train.tsv").string());

  const fs::path run = root / "run";
  const Run t = invoke({"train", "--data", data.string(), "--mode", "AdaVIB", "--lr", "0.01",
                     "--out", run.string()});
  REQUIRE_MESSAGE(t.code == 0, t.err);
  CHECK(read_file((data / "train.tsv").string()) == train_before);

  const json m = json::parse(read_file((run / "manifest.json").string()));
  CHECK(m["command"] == "train");
  CHECK(m["options"]["lr"] == "0.01");
  CHECK(m["options"]["mode"] == "AdaVIB");
  CHECK(m["inputs"].size() == 3);
  for (const auto& a : m["artifacts"]) {
    const std::string bytes = read_file((run / a["file"].get<std::string>()).string());
    CHECK(a["sha256"] == cli::sha256_hex(bytes));
  }

  const fs::path ev = root / "eval";
  const Run e = invoke({"eval", "--checkpoint", (run / "checkpoint.json").string(), "--data",
                     data.string(), "--vocab", fixture("vocab.tsv"), "--out", ev.string()});
  REQUIRE_MESSAGE(e.code == 0, e.err);
  for (const char* f : {"eval.csv", "summary.json", "captions.tsv", "pope_random.tsv",
                        "pope_popular.tsv", "pope_adversarial.tsv"}) {
    CHECK(fs::exists(ev / f));
  }

  const Run c = invoke({"chair", "--vocab", fixture("vocab.tsv"), "--captions",
                     (ev / "captions.tsv").string(), "--out", (root / "chair").string()});
  CHECK(c.code == 0);
  const Run p = invoke({"pope", "--answers", (ev / "pope_adversarial.tsv").string(), "--out",
                     (root / "pope").string()});
  CHECK(p.code == 0);
  const json pj = json::parse(read_file((root / "pope" / "pope.json").string()));
  CHECK(pj["total"] == 32);
  CHECK(pj["unparsable"] == 0);

  const fs::path sim = root / "sim";
  const Run s = invoke({"analyze-similarity", "--checkpoint", (run / "checkpoint.json").string(),
                     "--data", data.string(), "--top-k", "5", "--out", sim.string()});
  CHECK(s.code == 0);
  std::istringstream csv(read_file((sim / "similarity.csv").string()));
  std::string header;
  std::getline(csv, header);
  CHECK(header.rfind("sample_id,token_1,prob_1", 0) == 0);
  CHECK(std::count(header.begin(), header.end(), ',') == 1 + 2 * 5 + 2);
}

TEST_CASE("replaying a manifest reproduces every artifact") {
  const fs::path root = fresh("replay");
  const fs::path data = root / "data";
  REQUIRE(invoke(small_synth(data)).code == 0);
  const fs::path first = root / "first";
  REQUIRE(invoke({"train", "--data", data.string(), "--mode", "FT_DropIn", "--out", first.string()})
              .code == 0);
  const fs::path second = root / "second";
  const Run r = invoke({"--replay", (first / "manifest.json").string(), "--out", second.string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  expect_same_tree(first, second, {"manifest.json"});

  CHECK(invoke({"--replay", fixture("vocab.tsv")}).code == cli::kExitValidation);
}

TEST_CASE("config files set options and flags win") {
  const fs::path root = fresh("config");
  const fs::path data = root / "data";
  REQUIRE(invoke(small_synth(data)).code == 0);
  fs::create_directories(root);
  const std::string cfg = (root / "train.ini").string();
  write_file_atomic(cfg, "[train]\nlr=0.02\nweight-decay=0.3\n");
  const fs::path run = root / "run";
  REQUIRE(invoke({"train", "--config", cfg, "--data", data.string(), "--lr", "0.005", "--mode",
               "FT", "--out", run.string()})
              .code == 0);
  const json m = json::parse(read_file((run / "manifest.json").string()));
  CHECK(m["options"]["lr"] == "0.005");
  CHECK(m["options"]["weight-decay"] == "0.3");

  const std::string flat = (root / "flat.ini").string();
  write_file_atomic(flat, "lr=0.02\n");
  CHECK(invoke({"train", "--config", flat, "--data", data.string(), "--out", run.string()}).code ==
        cli::kExitValidation);
}

TEST_CASE("output directory falls back to the environment") {
  const fs::path out = fresh("env");
  ::setenv(cli::kOutDirEnv, out.string().c_str(), 1);
  const Run r = invoke({"chair", "--vocab", fixture("vocab.tsv"), "--captions",
                     fixture("captions50.tsv")});
  ::unsetenv(cli::kOutDirEnv);
  CHECK(r.code == 0);
  const json j = json::parse(read_file((out / "chair.json").string()));
  CHECK(j["chair_s"] == 0.46);
}

TEST_CASE("sha256 of known strings") {
  CHECK(cli::sha256_hex("") ==
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(cli::sha256_hex("abc") ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

#include "adavib/cli.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <utility>

#include <CLI11.hpp>
#include <json.hpp>

#include "adavib/data_io.hpp"
#include "adavib/errors.hpp"
#include "adavib/experiments.hpp"
#include "adavib/halluc_metrics.hpp"
#include "adavib/trainer.hpp"

namespace adavib::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 digest failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  }
  return hex.str();
}

namespace {

using Resolved = std::vector<std::pair<std::string, std::string>>;

// Every option of `sub` with its effective value (flag, config file or
// default), in declaration order.
Resolved resolved_options(const CLI::App& sub) {
  Resolved out;
  for (const CLI::Option* o : sub.get_options()) {
    const std::string name = o->get_single_name();
    if (name == "help" || name == "config") {
      continue;
    }
    std::string value;
    if (o->count() > 0) {
      const auto& r = o->results();
      for (std::size_t i = 0; i < r.size(); ++i) {
        value += (i ? "," : "") + r[i];
      }
    } else {
      value = o->get_default_str();
    }
    out.emplace_back(name, value);
  }
  return out;
}

class RunRecorder {
 public:
  RunRecorder(std::string command, fs::path out_dir)
      : command_(std::move(command)), out_dir_(std::move(out_dir)) {}

  const fs::path& dir() const { return out_dir_; }

  void input(const std::string& path) {
    inputs_.push_back({{"path", path}, {"sha256", sha256_hex(read_file(path))}});
  }

  void artifact(const std::string& name, const std::string& contents) {
    write_file_atomic((out_dir_ / name).string(), contents);
    artifacts_.push_back(
        {{"file", name}, {"sha256", sha256_hex(contents)}, {"bytes", contents.size()}});
  }

  void finish(const Resolved& options, std::uint64_t seed) {
    json args = json::array({command_});
    json opts = json::object();
    for (const auto& [k, v] : options) {
      args.push_back("--" + k);
      args.push_back(v);
      opts[k] = v;
    }
    const json manifest{{"format", "adavib-manifest"},
                        {"version", 1},
                        {"command", command_},
                        {"arguments", std::move(args)},
                        {"options", std::move(opts)},
                        {"seed", seed},
                        {"inputs", inputs_},
                        {"artifacts", artifacts_}};
    write_file_atomic((out_dir_ / "manifest.json").string(), manifest.dump(2) + "\n");
  }

 private:
  std::string command_;
  fs::path out_dir_;
  json inputs_ = json::array();
  json artifacts_ = json::array();
};

template <typename T>
CLI::Option* add(CLI::App* app, const std::string& name, T& var, const std::string& desc) {
  CLI::Option* o = app->add_option(name, var, desc);
  if constexpr (std::is_same_v<T, bool>) {
    o->default_str(var ? "true" : "false");
  } else if constexpr (std::is_floating_point_v<T>) {
    o->default_str(format_double(var));
  } else {
    o->capture_default_str();
  }
  return o;
}

std::vector<std::string> mode_names() {
  std::vector<std::string> names;
  for (TrainMode m : kAllModes) {
    names.emplace_back(to_string(m));
  }
  return names;
}

struct TrainFlags {
  TrainConfig cfg;
  std::string mode;
  std::string kl_direction;

  TrainConfig resolve() const {
    TrainConfig c = cfg;
    c.mode = train_mode_from_string(mode);
    c.kl_direction = kl_direction_from_string(kl_direction);
    c.validate();
    return c;
  }
};

void add_train_flags(CLI::App* sub, TrainFlags& f, TrainMode default_mode) {
  f.cfg = toy_train_config(default_mode, 0);
  f.mode = to_string(default_mode);
  f.kl_direction = to_string(f.cfg.kl_direction);
  add(sub, "--mode", f.mode, "training mode")->check(CLI::IsMember(mode_names()));
  add(sub, "--base-beta", f.cfg.base_beta, "base beta of the compression term");
  add(sub, "--lr", f.cfg.lr, "peak learning rate");
  add(sub, "--weight-decay", f.cfg.weight_decay, "decoupled weight decay");
  add(sub, "--micro-batch", f.cfg.micro_batch, "samples per micro-batch");
  add(sub, "--grad-accum", f.cfg.grad_accum, "micro-batches per optimizer step");
  add(sub, "--epochs", f.cfg.epochs, "passes over the training split");
  add(sub, "--warmup-fraction", f.cfg.warmup_fraction, "share of steps spent in linear warmup");
  add(sub, "--poly-decay-power", f.cfg.poly_decay_power, "power of the polynomial decay");
  add(sub, "--dropout-rate", f.cfg.dropout_rate, "dropout rate of the FT_Drop* modes");
  add(sub, "--seed", f.cfg.seed, "training seed (shuffle, noise, scale-head init)");
  add(sub, "--kl-direction", f.kl_direction, "as_printed or posterior_to_prior")
      ->check(CLI::IsMember({"as_printed", "posterior_to_prior"}));
  add(sub, "--pooled-posterior", f.cfg.pooled_posterior, "one Gaussian per sample");
  add(sub, "--sigma-floor", f.cfg.sigma_floor, "lower bound on sigma");
  add(sub, "--sigma-init-gain", f.cfg.sigma_init_gain, "scale-head weight init gain");
  add(sub, "--sigma-init-bias", f.cfg.sigma_init_bias, "scale-head output bias at init");
}

fs::path resolve_out(const std::string& flag, const std::string& command) {
  if (!flag.empty()) {
    return flag;
  }
  if (const char* env = std::getenv(kOutDirEnv); env != nullptr && *env != '\0') {
    return env;
  }
  return fs::path("adavib_out") / command;
}

std::string data_file(const std::string& explicit_path, const std::string& data_dir,
                      const char* name) {
  return explicit_path.empty() ? (fs::path(data_dir) / name).string() : explicit_path;
}

const std::vector<DataSample>& pick_split(const SynthDataset& ds, const std::string& split) {
  if (split == "train") return ds.train;
  if (split == "eval") return ds.eval;
  if (split == "flip") return ds.flip;
  throw ConfigError("unknown split '" + split + "' (train, eval or flip)");
}

std::string join_tokens(const std::vector<std::size_t>& ids, char sep = ' ') {
  std::string s;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) {
      s += sep;
    }
    s += std::to_string(ids[i]);
  }
  return s;
}

std::string log_csv(const std::vector<StepRecord>& steps) {
  std::ostringstream s;
  s << "step,lr,ce,kl,entropy,effective_beta,grad_norm\n";
  for (const StepRecord& r : steps) {
    s << r.step << ',' << format_double(r.lr) << ',' << format_double(r.ce) << ','
      << format_double(r.kl) << ',' << format_double(r.entropy) << ','
      << format_double(r.effective_beta) << ',' << format_double(r.grad_norm) << '\n';
  }
  return s.str();
}

std::string object_label(const ObjectVocabulary* vocab, ObjectId o) {
  if (vocab != nullptr && o < vocab->size()) {
    return vocab->name(o);
  }
  return "object " + std::to_string(o);
}

// --- subcommands ---------------------------------------------------------

struct SynthCmd {
  SynthConfig synth;
  ToyWorldConfig world;
  std::string cooccur = format_cooccur(SynthConfig{}.cooccur_pairs);
  std::string out;

  void attach(CLI::App* sub) {
    add(sub, "--seed", synth.seed, "dataset seed");
    add(sub, "--n-objects", synth.n_objects, "number of object categories");
    add(sub, "--input-dim", synth.input_dim, "visual feature width");
    add(sub, "--tokens", synth.tokens, "visual tokens per scene");
    add(sub, "--vocab-size", synth.vocab_size, "vocabulary size");
    add(sub, "--train-size", synth.train_size, "training scenes");
    add(sub, "--eval-size", synth.eval_size, "scenes in the eval and flip splits");
    add(sub, "--cooccur", cooccur, "co-occurrence pairs a:b:p;a:b:p");
    add(sub, "--noise-std", synth.noise_std, "feature noise std");
    add(sub, "--min-objects", synth.min_objects, "fewest objects drawn per scene");
    add(sub, "--max-objects", synth.max_objects, "most objects drawn per scene");
    add(sub, "--prompt-length", synth.prompt_length, "prompt tokens");
    add(sub, "--signature-scale", synth.signature_scale, "std of object signature entries");
    add(sub, "--d-z", world.d_z, "soft token / embedding width");
    add(sub, "--d-model", world.d_model, "decoder hidden width");
    add(sub, "--hidden", world.hidden, "projector hidden width");
    add(sub, "--embedding-scale", world.decoder_init.embedding_scale, "embedding entry std");
    add(sub, "--readout-gain", world.decoder_init.readout_gain,
        "random readout gain (used when the readout is not fitted)");
    add(sub, "--mixing-gain", world.decoder_init.mixing_gain, "decoder mixing gain");
    add(sub, "--decoder-seed", world.decoder_seed, "seed of the frozen decoder");
    add(sub, "--decoder-fit-samples", world.decoder_fit_samples,
        "unbiased scenes for fitting the readout (0 keeps it random)");
    add(sub, "--decoder-fit-epochs", world.decoder_fit_epochs, "readout fitting epochs");
    add(sub, "--decoder-fit-lr", world.decoder_fit_lr, "readout fitting learning rate");
    add(sub, "--pretrain-samples", world.pretrain_samples, "unbiased pretraining scenes");
    add(sub, "--pretrain-epochs", world.pretrain_epochs, "pretraining epochs");
    add(sub, "--pretrain-lr", world.pretrain_lr, "pretraining learning rate");
    add(sub, "--projector-init-gain", world.projector_init_gain, "projector init gain");
    add(sub, "--out", out, "output directory");
  }

  int run(const CLI::App& sub, std::ostream& os) {
    synth.cooccur_pairs = parse_cooccur(cooccur);
    synth.validate();
    world.validate();
    const SynthDataset ds = generate(synth);
    const FrozenDecoderParams decoder = make_toy_decoder(synth, world);
    const Checkpoint pretrained = pretrain_projector(synth, world, decoder);

    RunRecorder rec("synth", resolve_out(out, "synth"));
    const std::pair<const char*, const std::vector<DataSample>*> splits[] = {
        {"train", &ds.train}, {"eval", &ds.eval}, {"flip", &ds.flip}};
    for (const auto& [name, samples] : splits) {
      std::ostringstream s;
      write_split(s, synth, name, *samples);
      rec.artifact(std::string(name) + ".tsv", s.str());
    }
    rec.artifact("decoder.json", decoder_to_string(decoder));
    rec.artifact("pretrained.json", checkpoint_to_string(pretrained));
    Resolved opts = resolved_options(sub);
    for (auto& [k, v] : opts) {
      if (k == "out") v = rec.dir().string();
    }
    rec.finish(opts, synth.seed);
    os << "wrote " << ds.train.size() << " train, " << ds.eval.size() << " eval, "
       << ds.flip.size() << " flip scenes to " << rec.dir().string() << "\n";
    return kExitOk;
  }
};

struct TrainCmd {
  TrainFlags flags;
  std::string data;
  std::string decoder_path;
  std::string init_path;
  std::string out;

  void attach(CLI::App* sub) {
    add_train_flags(sub, flags, TrainMode::AdaVIB);
    add(sub, "--data", data, "dataset directory from synth")->required();
    add(sub, "--decoder", decoder_path, "frozen decoder (default <data>/decoder.json)");
    add(sub, "--init", init_path, "initial projector (default <data>/pretrained.json)");
    add(sub, "--out", out, "output directory");
  }

  int run(const CLI::App& sub, std::ostream& os) {
    const TrainConfig cfg = flags.resolve();
    const std::string train_file = (fs::path(data) / "train.tsv").string();
    const std::string dec_file = data_file(decoder_path, data, "decoder.json");
    const std::string init_file = data_file(init_path, data, "pretrained.json");
    const LoadedSplit split = load_split(train_file);
    const FrozenDecoderParams decoder = load_decoder(dec_file);
    require_compatible(split.config, decoder);
    const Checkpoint init = load_checkpoint(init_file);

    const TrainResult result = train(cfg, split.samples, init.mu_head, decoder);

    RunRecorder rec("train", resolve_out(out, "train"));
    for (const auto& f : {train_file, dec_file, init_file}) {
      rec.input(f);
    }
    rec.artifact("checkpoint.json", checkpoint_to_string(result.checkpoint));
    rec.artifact("log.csv", log_csv(result.log.steps));
    rec.artifact("log_ema.csv", log_csv(result.log.smoothed()));
    Resolved opts = resolved_options(sub);
    for (auto& [k, v] : opts) {
      if (k == "out") v = rec.dir().string();
    }
    rec.finish(opts, cfg.seed);
    const StepRecord& last = result.log.steps.back();
    os << to_string(cfg.mode) << ": " << result.optimizer_steps << " steps, final ce "
       << format_double(last.ce) << ", kl " << format_double(last.kl) << ", entropy "
       << format_double(last.entropy) << "\n";
    return kExitOk;
  }
};

struct EvalCmd {
  std::string checkpoint_path;
  std::string data;
  std::string decoder_path;
  std::string split = "flip";
  std::size_t max_len = EvalOptions{}.max_decode_len;
  std::string vocab_path;
  std::uint64_t pope_seed = 0;
  std::string out;

  void attach(CLI::App* sub) {
    add(sub, "--checkpoint", checkpoint_path, "trained checkpoint")->required();
    add(sub, "--data", data, "dataset directory from synth")->required();
    add(sub, "--decoder", decoder_path, "frozen decoder (default <data>/decoder.json)");
    add(sub, "--split", split, "train, eval or flip")
        ->check(CLI::IsMember({"train", "eval", "flip"}));
    add(sub, "--max-len", max_len, "greedy decoding length limit");
    add(sub, "--vocab", vocab_path, "object vocabulary; enables caption and POPE files");
    add(sub, "--pope-seed", pope_seed, "seed for POPE probe selection");
    add(sub, "--out", out, "output directory");
  }

  int run(const CLI::App& sub, std::ostream& os) {
    const Checkpoint ckpt = load_checkpoint(checkpoint_path);
    const SynthDataset ds = load_dataset(data);
    const std::string dec_file = data_file(decoder_path, data, "decoder.json");
    const FrozenDecoderParams decoder = load_decoder(dec_file);
    require_compatible(ds.config, decoder);
    const auto& samples = pick_split(ds, split);
    EvalOptions eo;
    eo.max_decode_len = max_len;
    eo.layout = ds.config.layout();
    const EvalReport report = evaluate(ckpt, samples, decoder, eo);

    RunRecorder rec("eval", resolve_out(out, "eval"));
    rec.input(checkpoint_path);
    for (const char* f : {"train.tsv", "eval.tsv", "flip.tsv"}) {
      rec.input((fs::path(data) / f).string());
    }
    rec.input(dec_file);

    std::ostringstream csv;
    csv << "sample_id,decoded,hallucinated,entropy,normalized_entropy,max_similarity,bucket\n";
    for (const SampleEval& s : report.samples) {
      csv << s.id << ',' << join_tokens(s.decoded) << ',' << join_tokens(s.hallucinated_objects)
          << ',' << format_double(s.entropy) << ',' << format_double(s.normalized_entropy) << ','
          << format_double(s.max_similarity) << ',' << s.bucket << '\n';
    }
    rec.artifact("eval.csv", csv.str());
    json summary{{"split", split},
                 {"samples", report.samples.size()},
                 {"hallucinated", report.hallucinated},
                 {"proxy_rate", report.proxy_rate},
                 {"mean_entropy", report.mean_entropy},
                 {"bucket_all", report.bucket_all},
                 {"bucket_hallucinated", report.bucket_hallucinated}};
    rec.artifact("summary.json", summary.dump(2) + "\n");

    if (!vocab_path.empty()) {
      const ObjectVocabulary vocab = load_object_vocabulary(vocab_path);
      rec.input(vocab_path);
      std::ostringstream caps;
      caps << "# caption_id\tcaption\tgold object ids\n";
      for (const CaptionRecord& c : eval_captions(report, samples, vocab)) {
        caps << c.id << '\t' << c.caption << '\t' << join_tokens(c.gold, ',') << '\n';
      }
      rec.artifact("captions.tsv", caps.str());
      for (PopeSplit ps : {PopeSplit::Random, PopeSplit::Popular, PopeSplit::Adversarial}) {
        const auto probes = pope_probes(ds, samples, ps, pope_seed);
        const auto answers = answer_probes(report, samples, probes, eo.layout);
        std::ostringstream pope;
        pope << "# id\tquestion\tgold\tresponse\n";
        for (std::size_t i = 0; i < probes.size(); ++i) {
          const std::string name = object_label(&vocab, probes[i].object);
          const bool yes = answers[i] == Answer::Yes;
          pope << probes[i].sample_id << '\t' << "Is there a " << name << " in the image?\t"
               << (probes[i].gold_yes ? "yes" : "no") << '\t'
               << (yes ? "Yes, there is a " + name + "." : "No, there is no " + name + ".")
               << '\n';
        }
        rec.artifact(std::string("pope_") + to_string(ps) + ".tsv", pope.str());
      }
    }
    Resolved opts = resolved_options(sub);
    for (auto& [k, v] : opts) {
      if (k == "out") v = rec.dir().string();
    }
    rec.finish(opts, ckpt.config.seed);
    os << split << ": proxy rate " << format_double(report.proxy_rate) << " ("
       << report.hallucinated << "/" << report.samples.size() << "), mean entropy "
       << format_double(report.mean_entropy) << "\n";
    return kExitOk;
  }
};

struct GradCheckCmd {
  std::uint64_t seed = 0;
  std::string mode = to_string(TrainMode::AdaVIB);
  std::string kl_direction = to_string(KlDirection::AsPrinted);
  double step = 1e-5;
  std::string out;

  static constexpr double kTolerance = 1e-5;

  void attach(CLI::App* sub) {
    add(sub, "--seed", seed, "instance seed");
    add(sub, "--mode", mode, "training mode of the loss")->check(CLI::IsMember(mode_names()));
    add(sub, "--kl-direction", kl_direction, "as_printed or posterior_to_prior")
        ->check(CLI::IsMember({"as_printed", "posterior_to_prior"}));
    add(sub, "--step", step, "central-difference step in [1e-8, 1e-4]");
    add(sub, "--out", out, "output directory");
  }

  int run(const CLI::App& sub, std::ostream& os) {
    const GradCheckInstance inst = make_grad_check_instance(
        seed, train_mode_from_string(mode), kl_direction_from_string(kl_direction));
    const GradCheckReport r = run_grad_check(inst, step);
    const bool pass = r.max_rel_err < kTolerance;
    RunRecorder rec("grad-check", resolve_out(out, "grad-check"));
    const json report{{"max_rel_err", r.max_rel_err},
                      {"worst_param", r.worst_param},
                      {"analytic_at_worst", r.analytic_at_worst},
                      {"numeric_at_worst", r.numeric_at_worst},
                      {"checked", r.checked},
                      {"tolerance", kTolerance},
                      {"pass", pass}};
    rec.artifact("grad_check.json", report.dump(2) + "\n");
    Resolved opts = resolved_options(sub);
    for (auto& [k, v] : opts) {
      if (k == "out") v = rec.dir().string();
    }
    rec.finish(opts, seed);
    os << "max_rel_err " << format_double(r.max_rel_err) << " at " << r.worst_param << " ("
       << r.checked << " entries) " << (pass ? "PASS" : "FAIL") << "\n";
    return pass ? kExitOk : kExitRuntime;
  }
};

struct ChairCmd {
  std::string vocab_path;
  std::string captions_path;
  std::string out;

  void attach(CLI::App* sub) {
    add(sub, "--vocab", vocab_path, "object vocabulary file")->required();
    add(sub, "--captions", captions_path, "caption file")->required();
    add(sub, "--out", out, "output directory");
  }

  int run(const CLI::App& sub, std::ostream& os) {
    const ObjectVocabulary vocab = load_object_vocabulary(vocab_path);
    std::istringstream in(read_file(captions_path));
    const auto captions = parse_captions(in, captions_path);
    const ChairReport r = chair_scores(captions, vocab);
    RunRecorder rec("chair", resolve_out(out, "chair"));
    rec.input(vocab_path);
    rec.input(captions_path);
    const json summary{{"chair_s", r.chair_s},
                       {"chair_i", r.chair_i},
                       {"captions", r.captions},
                       {"hallucinated_captions", r.hallucinated_captions},
                       {"mentions", r.mentions},
                       {"hallucinated_mentions", r.hallucinated_mentions}};
    rec.artifact("chair.json", summary.dump(2) + "\n");
    std::ostringstream detail;
    detail << "caption_id\tmentioned\thallucinated\n";
    for (const CaptionDetail& d : r.details) {
      detail << d.id << '\t' << join_tokens(d.mentioned, ',') << '\t'
             << join_tokens(d.hallucinated, ',') << '\n';
    }
    rec.artifact("chair_detail.tsv", detail.str());
    Resolved opts = resolved_options(sub);
    for (auto& [k, v] : opts) {
      if (k == "out") v = rec.dir().string();
    }
    rec.finish(opts, 0);
    os << "CHAIR_S " << format_double(r.chair_s) << " CHAIR_I " << format_double(r.chair_i)
       << " (" << r.captions << " captions, " << r.mentions << " mentions)\n";
    return kExitOk;
  }
};

struct PopeCmd {
  std::string answers_path;
  std::string out;

  void attach(CLI::App* sub) {
    add(sub, "--answers", answers_path, "POPE answer file")->required();
    add(sub, "--out", out, "output directory");
  }

  int run(const CLI::App& sub, std::ostream& os) {
    std::istringstream in(read_file(answers_path));
    const auto records = parse_pope(in, answers_path);
    std::vector<Answer> pred;
    std::vector<bool> gold;
    for (const PopeRecord& r : records) {
      pred.push_back(parse_answer(r.response));
      gold.push_back(r.gold_yes);
    }
    // std::vector<bool> has no contiguous storage.
    const std::unique_ptr<bool[]> gold_buf(new bool[gold.size()]);
    std::copy(gold.begin(), gold.end(), gold_buf.get());
    const PopeReport r = pope_scores(pred, std::span<const bool>(gold_buf.get(), gold.size()));
    RunRecorder rec("pope", resolve_out(out, "pope"));
    rec.input(answers_path);
    const json summary{{"accuracy", r.accuracy}, {"precision", r.precision},
                       {"recall", r.recall},     {"f1", r.f1},
                       {"tp", r.tp},             {"fp", r.fp},
                       {"tn", r.tn},             {"fn", r.fn},
                       {"unparsable", r.unparsable}, {"total", r.total}};
    rec.artifact("pope.json", summary.dump(2) + "\n");
    Resolved opts = resolved_options(sub);
    for (auto& [k, v] : opts) {
      if (k == "out") v = rec.dir().string();
    }
    rec.finish(opts, 0);
    os << "accuracy " << format_double(r.accuracy) << " precision " << format_double(r.precision)
       << " recall " << format_double(r.recall) << " f1 " << format_double(r.f1) << "\n";
    return kExitOk;
  }
};

struct SimilarityCmd {
  std::string checkpoint_path;
  std::string data;
  std::string decoder_path;
  std::string split = "flip";
  std::size_t top_k = 20;
  std::string out;

  void attach(CLI::App* sub) {
    add(sub, "--checkpoint", checkpoint_path, "trained checkpoint")->required();
    add(sub, "--data", data, "dataset directory from synth")->required();
    add(sub, "--decoder", decoder_path, "frozen decoder (default <data>/decoder.json)");
    add(sub, "--split", split, "train, eval or flip")
        ->check(CLI::IsMember({"train", "eval", "flip"}));
    add(sub, "--top-k", top_k, "tokens listed per sample")->check(CLI::PositiveNumber);
    add(sub, "--out", out, "output directory");
  }

  int run(const CLI::App& sub, std::ostream& os) {
    const Checkpoint ckpt = load_checkpoint(checkpoint_path);
    const std::string split_file = (fs::path(data) / (split + ".tsv")).string();
    const LoadedSplit ls = load_split(split_file);
    const std::string dec_file = data_file(decoder_path, data, "decoder.json");
    const FrozenDecoderParams decoder = load_decoder(dec_file);
    require_compatible(ls.config, decoder);
    const std::size_t k = std::min(top_k, decoder.vocab_size());

    std::ostringstream csv;
    csv << "sample_id";
    for (std::size_t i = 1; i <= k; ++i) {
      csv << ",token_" << i << ",prob_" << i;
    }
    csv << ",entropy,normalized_entropy,max_similarity_bucket\n";
    for (const DataSample& s : ls.samples) {
      const SimilarityStats sim = similarity_distribution(
          pool_tokens(expected_tokens(ckpt, s.v)), decoder.token_embeddings);
      std::vector<std::size_t> order(sim.probs.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return sim.probs[a] > sim.probs[b]; });
      csv << s.id;
      for (std::size_t i = 0; i < k; ++i) {
        csv << ',' << order[i] << ',' << format_double(sim.probs[order[i]]);
      }
      csv << ',' << format_double(sim.entropy) << ',' << format_double(sim.normalized_entropy)
          << ',' << max_similarity_bucket(sim.probs) << '\n';
    }
    RunRecorder rec("analyze-similarity", resolve_out(out, "analyze-similarity"));
    rec.input(checkpoint_path);
    rec.input(split_file);
    rec.input(dec_file);
    rec.artifact("similarity.csv", csv.str());
    Resolved opts = resolved_options(sub);
    for (auto& [key, v] : opts) {
      if (key == "out") v = rec.dir().string();
    }
    rec.finish(opts, ckpt.config.seed);
    os << "wrote similarity rows for " << ls.samples.size() << " samples\n";
    return kExitOk;
  }
};

struct BetaSweepCmd {
  TrainFlags flags;
  std::string data;
  std::string decoder_path;
  std::string init_path;
  std::vector<double> betas{1e-1, 1e-3, 1e-5, 1e-7, 1e-9};
  std::string out;

  void attach(CLI::App* sub) {
    add_train_flags(sub, flags, TrainMode::AdaVIB);
    add(sub, "--data", data, "dataset directory from synth")->required();
    add(sub, "--decoder", decoder_path, "frozen decoder (default <data>/decoder.json)");
    add(sub, "--init", init_path, "initial projector (default <data>/pretrained.json)");
    std::string betas_default;
    for (std::size_t i = 0; i < betas.size(); ++i) {
      betas_default += (i ? "," : "") + format_double(betas[i]);
    }
    sub->add_option("--betas", betas, "comma-separated base beta values")
        ->delimiter(',')
        ->default_str(betas_default);
    add(sub, "--out", out, "output directory");
  }

  int run(const CLI::App& sub, std::ostream& os) {
    const TrainConfig cfg = flags.resolve();
    if (betas.empty()) {
      throw ConfigError("beta-sweep: --betas is empty");
    }
    ToyWorld world;
    world.data = load_dataset(data);
    const std::string dec_file = data_file(decoder_path, data, "decoder.json");
    const std::string init_file = data_file(init_path, data, "pretrained.json");
    world.decoder = load_decoder(dec_file);
    require_compatible(world.data.config, world.decoder);
    world.pretrained = load_checkpoint(init_file).mu_head;

    const auto points = beta_sweep(world, cfg, betas);

    RunRecorder rec("beta-sweep", resolve_out(out, "beta-sweep"));
    for (const char* f : {"train.tsv", "eval.tsv", "flip.tsv"}) {
      rec.input((fs::path(data) / f).string());
    }
    rec.input(dec_file);
    rec.input(init_file);
    std::ostringstream csv;
    csv << "base_beta,proxy_rate\n";
    std::size_t best = 0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      csv << format_double(points[i].base_beta) << ',' << format_double(points[i].proxy_rate)
          << '\n';
      if (points[i].proxy_rate < points[best].proxy_rate) {
        best = i;
      }
    }
    rec.artifact("sweep.csv", csv.str());
    Resolved opts = resolved_options(sub);
    for (auto& [k, v] : opts) {
      if (k == "out") v = rec.dir().string();
    }
    rec.finish(opts, cfg.seed);
    os << "base_beta  proxy_rate\n";
    for (std::size_t i = 0; i < points.size(); ++i) {
      os << std::setw(9) << format_double(points[i].base_beta) << "  "
         << format_double(points[i].proxy_rate) << (i == best ? "  <- min" : "") << "\n";
    }
    return kExitOk;
  }
};

int dispatch(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"adavib: adaptive variational bottleneck projector toolkit"};
  app.name("adavib");
  app.require_subcommand(1);
  // INI file with one [subcommand] section of key=value lines; flags given
  // on the command line take precedence.
  app.set_config("--config", "", "INI file with per-subcommand sections");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.fallthrough();

  SynthCmd synth;
  TrainCmd train_cmd;
  EvalCmd eval_cmd;
  GradCheckCmd grad;
  ChairCmd chair;
  PopeCmd pope;
  SimilarityCmd sim;
  BetaSweepCmd sweep;

  CLI::App* s_synth = app.add_subcommand("synth", "generate a dataset, decoder and pretrained projector");
  CLI::App* s_train = app.add_subcommand("train", "fine-tune a projector");
  CLI::App* s_eval = app.add_subcommand("eval", "greedy-decode a split and score hallucinations");
  CLI::App* s_grad = app.add_subcommand("grad-check", "finite-difference gradient check");
  CLI::App* s_chair = app.add_subcommand("chair", "CHAIR scores of a caption file");
  CLI::App* s_pope = app.add_subcommand("pope", "POPE scores of an answer file");
  CLI::App* s_sim = app.add_subcommand("analyze-similarity", "per-sample similarity dump");
  CLI::App* s_sweep = app.add_subcommand("beta-sweep", "proxy rate across base beta values");
  synth.attach(s_synth);
  train_cmd.attach(s_train);
  eval_cmd.attach(s_eval);
  grad.attach(s_grad);
  chair.attach(s_chair);
  pope.attach(s_pope);
  sim.attach(s_sim);
  sweep.attach(s_sweep);

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (s_synth->parsed()) return synth.run(*s_synth, out);
    if (s_train->parsed()) return train_cmd.run(*s_train, out);
    if (s_eval->parsed()) return eval_cmd.run(*s_eval, out);
    if (s_grad->parsed()) return grad.run(*s_grad, out);
    if (s_chair->parsed()) return chair.run(*s_chair, out);
    if (s_pope->parsed()) return pope.run(*s_pope, out);
    if (s_sim->parsed()) return sim.run(*s_sim, out);
    if (s_sweep->parsed()) return sweep.run(*s_sweep, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "failed: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitValidation;
}

int replay(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  if (args.size() != 2 && !(args.size() == 4 && args[2] == "--out")) {
    err << "usage: adavib --replay MANIFEST [--out DIR]\n";
    return kExitValidation;
  }
  json manifest;
  try {
    manifest = json::parse(read_file(args[1]));
  } catch (const std::exception& e) {
    err << "error: cannot read manifest " << args[1] << ": " << e.what() << "\n";
    return kExitValidation;
  }
  if (!manifest.is_object() || manifest.value("format", "") != "adavib-manifest" ||
      !manifest.contains("arguments")) {
    err << "error: " << args[1] << " is not an adavib manifest\n";
    return kExitValidation;
  }
  auto replayed = manifest.at("arguments").get<std::vector<std::string>>();
  if (args.size() == 4) {
    for (std::size_t i = 0; i + 1 < replayed.size(); ++i) {
      if (replayed[i] == "--out") {
        replayed[i + 1] = args[3];
      }
    }
  }
  return dispatch(std::move(replayed), out, err);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  if (!args.empty() && args[0] == "--replay") {
    return replay(args, out, err);
  }
  return dispatch(args, out, err);
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace adavib::cli

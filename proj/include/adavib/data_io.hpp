#pragma once

// Synthetic scenes with controllable object co-occurrence bias, and the
// on-disk formats for datasets, checkpoints and the frozen decoder.
//
// Dataset split file (tab-separated text):
//   # adavib-dataset v1
//   # config key=value ...
//   # split <name>
//   id  present_spurious(0|1)  gold_ids  prompt_ids  target_ids  f_0 ... f_{tokens*input_dim-1}
// Id lists are comma-separated; features are row-major (token-major) and
// written in shortest round-trip form.
//
// Checkpoints and decoders are JSON documents holding named parameters
// ({name, shape, values}) plus a version tag and config block.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "adavib/toy_model.hpp"
#include "adavib/trainer.hpp"

namespace adavib {

struct CooccurPair {
  ObjectId a = 0;
  ObjectId b = 1;
  double probability = 0.9;

  bool operator==(const CooccurPair&) const = default;
};

// "a:b:p;a:b:p" (empty string for no pairs).
std::string format_cooccur(const std::vector<CooccurPair>& pairs);
std::vector<CooccurPair> parse_cooccur(const std::string& text);

struct SynthConfig {
  std::size_t n_objects = 8;
  std::size_t input_dim = 16;
  std::size_t tokens = 4;
  std::size_t vocab_size = 64;
  std::size_t train_size = 2000;
  std::size_t eval_size = 500;
  std::vector<CooccurPair> cooccur_pairs{{0, 1, 0.9}, {2, 3, 0.9}};
  double noise_std = 0.3;
  std::uint64_t seed = 0;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  std::size_t prompt_length = 3;
  double signature_scale = 1.0;

  void validate() const;
  TokenLayout layout() const { return {vocab_size, n_objects}; }
  // Single-line key=value form used in dataset headers.
  std::string to_header() const;
  static SynthConfig from_header(const std::string& line);

  bool operator==(const SynthConfig&) const = default;
};

struct SynthDataset {
  SynthConfig config;
  Matrix signatures;  // n_objects × input_dim
  std::vector<DataSample> train;
  // Unbiased held-out scenes.
  std::vector<DataSample> eval;
  // Every sample contains some pair's trigger object A without its partner B.
  std::vector<DataSample> flip;
};

// Pure function of cfg. Within the train split, whenever A is present B is
// present with exactly the configured probability.
SynthDataset generate(const SynthConfig& cfg);

// Unbiased scenes over the same object signatures, from a stream of their
// own; ids continue after the flip split.
std::vector<DataSample> generate_pretraining_scenes(const SynthConfig& cfg, std::size_t count);

std::vector<TokenId> fixed_prompt(const SynthConfig& cfg);

// Throws ConfigError when dataset and decoder disagree on vocabulary or
// feature/embedding sizes.
void require_compatible(const SynthConfig& cfg, const FrozenDecoderParams& decoder);

void write_split(std::ostream& out, const SynthConfig& cfg, const std::string& split,
                 const std::vector<DataSample>& samples);
struct LoadedSplit {
  SynthConfig config;
  std::string split;
  std::vector<DataSample> samples;
};
LoadedSplit read_split(std::istream& in, const std::string& source);

// <dir>/{train,eval,flip}.tsv
void save_dataset(const std::string& dir, const SynthDataset& ds);
SynthDataset load_dataset(const std::string& dir);
LoadedSplit load_split(const std::string& path);

std::string checkpoint_to_string(const Checkpoint& ckpt);
Checkpoint checkpoint_from_string(const std::string& text, const std::string& source);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// A deterministic-mode checkpoint supplies the mean head for a bottleneck
// run; the scale head is drawn fresh from `rng`.
VibProjectorParams vib_from_checkpoint(const Checkpoint& ckpt, SeededRng& rng,
                                       double sigma_gain, double sigma_bias);

std::string decoder_to_string(const FrozenDecoderParams& decoder);
FrozenDecoderParams decoder_from_string(const std::string& text, const std::string& source);
void save_decoder(const std::string& path, const FrozenDecoderParams& decoder);
FrozenDecoderParams load_decoder(const std::string& path);

// Serialized config shared by checkpoints and run manifests.
std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);

// Writes `contents` to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::string& path, const std::string& contents);
std::string read_file(const std::string& path);

// Shortest decimal form that parses back to the same double.
std::string format_double(double x);

}  // namespace adavib

#pragma once

// Similarity between pooled soft visual tokens and the frozen word-embedding
// table, its entropy, and the entropy-driven compression weight.

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "adavib/numerics.hpp"

namespace adavib {

// Word-embedding table of the language model; never trained.
class FrozenEmbeddings {
 public:
  FrozenEmbeddings() = default;
  // Requires at least two rows and finite entries.
  explicit FrozenEmbeddings(Matrix table);

  const Matrix& table() const { return table_; }
  std::size_t vocab_size() const { return table_.rows(); }
  std::size_t dim() const { return table_.cols(); }
  std::span<const double> row(std::size_t token) const { return table_.row(token); }

  bool operator==(const FrozenEmbeddings&) const = default;

 private:
  Matrix table_;
};

inline constexpr double kMinNormalizedEntropy = 1e-6;

struct SimilarityStats {
  Vector probs;
  double entropy = 0.0;             // nats
  double normalized_entropy = 1.0;  // entropy / ln|V|, clamped below at 1e-6
};

// Arithmetic mean of the token rows.
Vector pool_tokens(const Matrix& z);

// Shannon entropy in nats with 0·log 0 = 0.
double entropy_nats(std::span<const double> probs);

// softmax(z̄ · Eᵀ) over the vocabulary and its (normalized) entropy.
SimilarityStats similarity_distribution(std::span<const double> z_bar,
                                        const FrozenEmbeddings& emb);

struct BetaRecord {
  std::size_t step = 0;
  double entropy = 0.0;
  double effective_beta = 0.0;
};

struct BetaState {
  double base_beta = 1e-7;
  double effective_beta = 0.0;
  std::vector<BetaRecord> history;
};

// −base·ln(normalized_entropy). A plain number: nothing downstream
// differentiates through it.
double effective_beta_for(double base_beta, double normalized_entropy);

// Recomputes effective_beta from base_beta (it does not compound) and
// appends (step, H, beta) to the history.
BetaState adapt_beta(BetaState state, const SimilarityStats& stats, std::size_t step = 0);

inline constexpr std::size_t kSimilarityBuckets = 10;
using BucketHistogram = std::array<std::size_t, kSimilarityBuckets>;

// Index of max(probs) on the grid [0,0.1), …, [0.9,1.0]; 1.0 lands in the top bucket.
std::size_t max_similarity_bucket(std::span<const double> probs);

}  // namespace adavib

#include "adavib/adaptive_beta.hpp"

#include <algorithm>
#include <cmath>

#include "adavib/errors.hpp"

namespace adavib {

FrozenEmbeddings::FrozenEmbeddings(Matrix table) : table_(std::move(table)) {
  if (table_.rows() < 2) {
    throw InvalidArgument("embedding table needs at least two tokens");
  }
  if (table_.cols() == 0) {
    throw InvalidArgument("embedding table has zero width");
  }
  require_finite(table_.values(), "embedding table");
}

Vector pool_tokens(const Matrix& z) {
  if (z.rows() == 0) {
    throw InvalidArgument("pool_tokens: no tokens");
  }
  Vector out(z.cols(), 0.0);
  for (std::size_t r = 0; r < z.rows(); ++r) {
    for (std::size_t c = 0; c < z.cols(); ++c) {
      out[c] += z(r, c);
    }
  }
  for (double& x : out) {
    x /= static_cast<double>(z.rows());
  }
  return out;
}

double entropy_nats(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) {
      h -= p * std::log(p);
    }
  }
  return h;
}

SimilarityStats similarity_distribution(std::span<const double> z_bar,
                                        const FrozenEmbeddings& emb) {
  if (z_bar.size() != emb.dim()) {
    throw DimensionError("similarity_distribution: z_bar has " + std::to_string(z_bar.size()) +
                         " dims, embeddings have " + std::to_string(emb.dim()));
  }
  SimilarityStats s;
  s.probs = softmax(matvec(emb.table(), z_bar));
  s.entropy = entropy_nats(s.probs);
  const double max_entropy = std::log(static_cast<double>(emb.vocab_size()));
  s.normalized_entropy = std::clamp(s.entropy / max_entropy, kMinNormalizedEntropy, 1.0);
  return s;
}

double effective_beta_for(double base_beta, double normalized_entropy) {
  const double h = std::clamp(normalized_entropy, kMinNormalizedEntropy, 1.0);
  // −0.0 at h = 1 would print as "-0"; keep it a clean zero.
  return h == 1.0 ? 0.0 : -base_beta * std::log(h);
}

BetaState adapt_beta(BetaState state, const SimilarityStats& stats, std::size_t step) {
  if (!(state.base_beta >= 0.0)) {
    throw InvalidArgument("adapt_beta: base_beta must be non-negative");
  }
  state.effective_beta = effective_beta_for(state.base_beta, stats.normalized_entropy);
  state.history.push_back({step, stats.entropy, state.effective_beta});
  return state;
}

std::size_t max_similarity_bucket(std::span<const double> probs) {
  if (probs.empty()) {
    throw InvalidArgument("max_similarity_bucket: empty distribution");
  }
  const double mx = *std::max_element(probs.begin(), probs.end());
  const auto idx = static_cast<std::size_t>(std::floor(mx * kSimilarityBuckets));
  return std::min(idx, kSimilarityBuckets - 1);
}

}  // namespace adavib

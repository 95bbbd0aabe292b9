#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

#include "kangaroo/errors.hpp"
#include "kangaroo/rng.hpp"
#include "kangaroo/trainer.hpp"

namespace kangaroo {

// Seeded order-2 Markov source over the vocabulary. Each context (a, b)
// owns a handful of preferred successors picked by hashing the context, so
// the chain has learnable structure without storing a V^3 table.
class MarkovSource {
 public:
  static constexpr std::size_t kSuccessors = 4;
  static constexpr std::array<double, kSuccessors> kWeights = {0.55, 0.25, 0.12, 0.05};
  static constexpr double kNoise = 0.03;  // mass spread uniformly over the vocabulary

  MarkovSource(std::size_t vocab, std::uint64_t seed) : vocab_(vocab), seed_(seed) {
    if (vocab < 2) throw ConfigError("vocabulary must hold at least two tokens");
  }

  TokenId successor(TokenId a, TokenId b, std::size_t rank) const {
    const std::uint64_t ctx = static_cast<std::uint64_t>(a) * vocab_ + static_cast<std::uint64_t>(b);
    return static_cast<TokenId>(mix_seed(mix_seed(seed_, ctx), rank) % vocab_);
  }

  TokenId next(TokenId a, TokenId b, Rng& rng) const {
    double u = rng.uniform();
    for (std::size_t i = 0; i < kSuccessors; ++i) {
      if (u < kWeights[i]) return successor(a, b, i);
      u -= kWeights[i];
    }
    return static_cast<TokenId>(rng.below(vocab_));
  }

  Sequence sample(std::size_t length, Rng& rng) const {
    Sequence s;
    s.reserve(length);
    for (std::size_t i = 0; i < length; ++i) {
      if (i < 2) {
        s.push_back(static_cast<TokenId>(rng.below(vocab_)));
      } else {
        s.push_back(next(s[i - 2], s[i - 1], rng));
      }
    }
    return s;
  }

 private:
  std::size_t vocab_;
  std::uint64_t seed_;
};

inline Corpus gen_corpus(std::size_t vocab, std::size_t n_seqs, std::size_t min_len, std::size_t max_len, std::uint64_t seed) {
  if (min_len == 0 || min_len > max_len) throw ConfigError("length range must satisfy 1 <= min <= max");
  const Rng root(seed);
  const MarkovSource source(vocab, mix_seed(seed, label_hash("markov")));
  Rng lengths = root.fork("lengths");
  Corpus corpus;
  corpus.reserve(n_seqs);
  for (std::size_t i = 0; i < n_seqs; ++i) {
    const std::size_t len = min_len + static_cast<std::size_t>(lengths.below(max_len - min_len + 1));
    Rng rng = root.fork("sequence").fork(i);
    corpus.push_back(source.sample(len, rng));
  }
  return corpus;
}

}  // namespace kangaroo

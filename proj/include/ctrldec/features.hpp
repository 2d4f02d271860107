#pragma once

#include <span>
#include <string>
#include <vector>

#include "ctrldec/seqmodel.hpp"

namespace ctrldec {

// Dense n-gram featurization of a response (prefix): unigram counts, bigram
// counts, length, and optionally a constant bias. The scorer and the learned
// Bradley-Terry reward share it.
class NgramFeaturizer {
 public:
  NgramFeaturizer() = default;
  NgramFeaturizer(std::size_t vocab_size, bool with_bias) : vocab_size_(vocab_size), bias_(with_bias) {}

  std::size_t vocab_size() const noexcept { return vocab_size_; }
  bool has_bias() const noexcept { return bias_; }
  std::size_t dim() const noexcept { return vocab_size_ + vocab_size_ * vocab_size_ + 1 + (bias_ ? 1 : 0); }
  std::size_t length_index() const noexcept { return vocab_size_ + vocab_size_ * vocab_size_; }
  std::size_t bias_index() const noexcept { return length_index() + 1; }

  std::vector<double> operator()(std::span<const Token> seq) const {
    std::vector<double> f(dim(), 0.0);
    for (std::size_t i = 0; i < seq.size(); ++i) {
      f[static_cast<std::size_t>(seq[i])] += 1.0;
      if (i > 0) f[vocab_size_ + static_cast<std::size_t>(seq[i - 1]) * vocab_size_ + static_cast<std::size_t>(seq[i])] += 1.0;
    }
    f[length_index()] = static_cast<double>(seq.size());
    if (bias_) f[bias_index()] = 1.0;
    return f;
  }

  std::string name(std::size_t i, const Vocab& vocab) const {
    if (i < vocab_size_) return "uni:" + vocab.symbol(static_cast<Token>(i));
    if (i < length_index()) {
      std::size_t j = i - vocab_size_;
      return "bi:" + vocab.symbol(static_cast<Token>(j / vocab_size_)) + "," + vocab.symbol(static_cast<Token>(j % vocab_size_));
    }
    if (i == length_index()) return "len";
    return "bias";
  }

 private:
  std::size_t vocab_size_ = 0;
  bool bias_ = false;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace ctrldec

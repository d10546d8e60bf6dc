#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "arwkv/model.hpp"
#include "arwkv/tensor.hpp"

namespace arwkv::test {

/// Sets the run precision for the lifetime of the guard.
class PrecisionScope {
 public:
  explicit PrecisionScope(Precision p) : previous_(run_precision()) { set_run_precision(p); }
  ~PrecisionScope() { set_run_precision(previous_); }
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Precision previous_;
};

inline Tensor uniform(Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0,
                      bool requires_grad = true) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = d(rng);
  return Tensor::from_values(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<std::int32_t> random_tokens(std::size_t n, std::size_t vocab,
                                               std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> d(0, static_cast<std::int32_t>(vocab) - 1);
  std::vector<std::int32_t> t(n);
  for (auto& x : t) x = d(rng);
  return t;
}

inline ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 32;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.head_dim = 4;
  c.d_ffn = 24;
  c.max_seq_len = 32;
  c.seed = 7;
  return c;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool bit_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

}  // namespace arwkv::test

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "arwkv/tensor.hpp"

namespace arwkv {

/// Rows of an activation matrix are `batch` sequences of `seq` tokens each,
/// row index = b * seq + t.
struct SeqLayout {
  std::size_t batch = 1;
  std::size_t seq = 1;
  std::size_t rows() const { return batch * seq; }
};

struct NormParams {
  Tensor gamma;
  double eps = 1e-6;
};

/// SwiGLU feed-forward, bias-free.
struct MlpParams {
  Tensor w_gate;  // d_model x d_ffn
  Tensor w_up;    // d_model x d_ffn
  Tensor w_down;  // d_ffn x d_model
};

/// Grouped-query attention with biases on Q/K/V only.
struct GqaParams {
  Tensor wq, wk, wv;  // d_model x (heads * head_dim)
  Tensor bq, bk, bv;
  Tensor wo;  // (n_heads * head_dim) x d_model
  std::size_t n_heads = 1;
  std::size_t n_kv_heads = 1;
  std::size_t head_dim = 1;

  std::size_t group_size() const { return n_heads / n_kv_heads; }
};

struct HeadLayout {
  std::size_t n_heads = 1;
  std::size_t n_kv_heads = 1;
  std::size_t head_dim = 1;
};

struct AttentionOutput {
  Tensor y;  // after the output projection
  Tensor h;  // concatenated head outputs before the output projection
};

Tensor rmsnorm(const Tensor& x, const NormParams& p);

Tensor swiglu_mlp(const Tensor& x, const MlpParams& p);

/// x W + b, with b repeated over rows.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {});

/// Rotates adjacent pairs (2i, 2i+1) of every head by pos * theta^(-2i/head_dim).
/// `positions` has one entry per row of `x`.
Tensor rope_apply(const Tensor& x, std::span<const std::size_t> positions,
                  std::size_t head_dim, double theta);

/// Position of every row under `layout` (0..seq-1 per sequence).
std::vector<std::size_t> sequence_positions(SeqLayout layout);

/// Causal scaled dot-product attention; query head i reads kv head i / group.
/// When `weights` is given it receives the [batch, heads, seq, seq]
/// probabilities (zeros above the diagonal).
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, SeqLayout layout,
                        HeadLayout heads, std::vector<double>* weights = nullptr);

AttentionOutput gqa_attention(const Tensor& x, const GqaParams& p, SeqLayout layout,
                              double theta);

}  // namespace arwkv

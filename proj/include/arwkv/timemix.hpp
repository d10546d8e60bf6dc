#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "arwkv/layers.hpp"
#include "arwkv/tensor.hpp"

namespace arwkv {

enum class MixerKind { rwkv7, rwkv6 };
/// Codomain of the in-context learning rate: unit -> (0,1), extended -> (0,2).
enum class ARange { unit, extended };
enum class GateMode { gated, gate_free };
enum class NormMode { none, group_norm };

/// RWKV time mixing. Every projection is d_model x (n_heads * head_dim).
/// Optional members are left undefined when the configuration has no use for
/// them (no gate in gate_free mode, no removal key for rwkv6, ...), so they
/// never show up as parameters.
struct TimeMixParams {
  MixerKind kind = MixerKind::rwkv7;
  ARange a_range = ARange::unit;
  GateMode gate_mode = GateMode::gated;
  NormMode norm_mode = NormMode::none;
  std::size_t n_heads = 1;
  std::size_t head_dim = 1;
  double kappa_eps = 1e-8;
  double group_norm_eps = 1e-5;

  Tensor w_r, w_k, w_v, w_o;
  Tensor w_w, decay_bias;     // w = exp(-exp(x W_w + decay_bias))
  Tensor w_kappa;             // rwkv7 only
  Tensor w_a, icl_bias;       // rwkv7 only
  Tensor w_g, gate_bias;      // gated only
  Tensor shift_logit;         // token-shift mix = sigmoid(shift_logit)
  Tensor gn_gamma, gn_beta;   // group_norm only

  std::size_t width() const { return n_heads * head_dim; }
};

struct TimeMixInit {
  MixerKind kind = MixerKind::rwkv7;
  ARange a_range = ARange::unit;
  GateMode gate_mode = GateMode::gated;
  NormMode norm_mode = NormMode::none;
  double gate_bias = 16.0;
};

/// Fresh parameters. The gate projection starts at zero and its bias at
/// `init.gate_bias`, so the gate reads 1 for any input.
TimeMixParams init_timemix(std::size_t d_model, std::size_t n_heads, std::size_t head_dim,
                           const TimeMixInit& init, std::mt19937_64& rng);

/// Per-layer matrix state, shape [batch, heads, head_dim (value), head_dim (key)].
struct TimeMixState {
  Tensor s;

  static TimeMixState zeros(std::size_t batch, std::size_t heads, std::size_t head_dim);
};

/// Per-token signals, each [rows x (heads * head_dim)]. kappa and a are
/// undefined for rwkv6; g is undefined when gate-free.
struct TokenSignals {
  Tensor r, k, v, kappa, w, a, g;
};

/// Row b*T+t holds x[b, t-1]; t = 0 reads x_prev[b] (zeros when undefined).
Tensor token_shift(const Tensor& x, SeqLayout layout, const Tensor& x_prev = {});

TokenSignals timemix_project(const Tensor& x, const TimeMixParams& p, SeqLayout layout,
                             const Tensor& x_prev = {});

/// Signals of one head at one token.
struct HeadSignals {
  std::vector<double> w, kappa, a, v, k;
};

/// S' = S (diag(w) - kappa^T (a * kappa)) + v^T k for a value x key state.
/// Throws NonFiniteError naming `step_index` when S' is not finite.
Tensor rwkv7_step(const Tensor& state, const HeadSignals& sig, std::size_t step_index = 0);

/// S' = diag(w) S + k^T v for a key x value state.
Tensor rwkv6_step(const Tensor& state, std::span<const double> w, std::span<const double> k,
                  std::span<const double> v, std::size_t step_index = 0);

/// diag(w) - kappa^T (a * kappa).
Tensor transition_matrix(std::span<const double> w, std::span<const double> kappa,
                         std::span<const double> a);

struct ScanResult {
  Tensor out;  // [rows x heads*head_dim], o_t = S_t r_t per head
  TimeMixState final_state;
};

/// Sequential rwkv7 scan with the readout folded in. With kappa/a undefined
/// the removal term is dropped, which is the rwkv6 recurrence expressed in the
/// transposed (value x key) orientation. Differentiable in every signal.
ScanResult rwkv7_scan(const TokenSignals& sig, SeqLayout layout, std::size_t n_heads,
                      std::size_t head_dim, const TimeMixState* initial = nullptr);

/// Per-head standardization over `group` consecutive columns.
Tensor group_standardize(const Tensor& x, std::size_t group, double eps);

struct TimeMixOutput {
  Tensor y;  // after W_o
  Tensor h;  // gated readout before W_o
  TimeMixState state;
};

TimeMixOutput timemix_forward(const Tensor& x, const TimeMixParams& p, SeqLayout layout,
                              const TimeMixState* initial = nullptr, const Tensor& x_prev = {});

}  // namespace arwkv

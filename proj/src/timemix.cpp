#include "arwkv/timemix.hpp"

#include <cmath>
#include <string>

namespace arwkv {

namespace {

void check_head_signal(std::span<const double> s, std::size_t n, const char* name) {
  if (s.size() != n) {
    throw ShapeError(std::string("head signal ") + name + " has " + std::to_string(s.size()) +
                     " entries, expected " + std::to_string(n));
  }
}

void require_finite(std::span<const double> s, std::size_t step_index) {
  for (double v : s) {
    if (!std::isfinite(v)) {
      throw NonFiniteError("time-mix state became non-finite at step " +
                           std::to_string(step_index));
    }
  }
}

}  // namespace

TimeMixParams init_timemix(std::size_t d_model, std::size_t n_heads, std::size_t head_dim,
                           const TimeMixInit& init, std::mt19937_64& rng) {
  TimeMixParams p;
  p.kind = init.kind;
  p.a_range = init.a_range;
  p.gate_mode = init.gate_mode;
  p.norm_mode = init.norm_mode;
  p.n_heads = n_heads;
  p.head_dim = head_dim;
  const std::size_t w = n_heads * head_dim;
  const double in_std = 1.0 / std::sqrt(static_cast<double>(d_model));

  p.w_r = randn({d_model, w}, in_std, rng);
  p.w_k = randn({d_model, w}, in_std, rng);
  p.w_v = randn({d_model, w}, in_std, rng);
  p.w_w = randn({d_model, w}, 0.02, rng);
  // Decay spans slow to fast channels inside every head.
  std::vector<double> decay(w);
  for (std::size_t c = 0; c < w; ++c) {
    const double ratio = head_dim > 1 ? static_cast<double>(c % head_dim) /
                                            static_cast<double>(head_dim - 1)
                                      : 0.0;
    decay[c] = -5.0 + 5.5 * ratio;
  }
  p.decay_bias = Tensor::from_values({w}, std::move(decay), true);
  if (init.kind == MixerKind::rwkv7) {
    p.w_kappa = randn({d_model, w}, in_std, rng);
    p.w_a = randn({d_model, w}, 0.02, rng);
    p.icl_bias = Tensor::zeros({w}, true);
  }
  if (init.gate_mode == GateMode::gated) {
    p.w_g = Tensor::zeros({d_model, w}, true);
    p.gate_bias = Tensor::full({w}, init.gate_bias, true);
  }
  p.shift_logit = Tensor::zeros({d_model}, true);
  if (init.norm_mode == NormMode::group_norm) {
    p.gn_gamma = Tensor::full({w}, 1.0, true);
    p.gn_beta = Tensor::zeros({w}, true);
  }
  p.w_o = randn({w, d_model}, 0.02, rng);
  return p;
}

TimeMixState TimeMixState::zeros(std::size_t batch, std::size_t heads, std::size_t head_dim) {
  return {Tensor::zeros({batch, heads, head_dim, head_dim})};
}

Tensor token_shift(const Tensor& x, SeqLayout layout, const Tensor& x_prev) {
  const std::size_t d = x.cols(), T = layout.seq;
  if (x.rows() != layout.rows()) throw ShapeError("token_shift: rows do not match layout");
  if (x_prev.defined() && x_prev.numel() != layout.batch * d) {
    throw ShapeError("token_shift: x_prev must be [batch x d_model]");
  }
  const auto xv = x.values();
  std::vector<double> out(xv.size(), 0.0);
  for (std::size_t b = 0; b < layout.batch; ++b) {
    if (x_prev.defined()) {
      std::copy_n(x_prev.values().begin() + b * d, d, out.begin() + b * T * d);
    }
    for (std::size_t t = 1; t < T; ++t) {
      std::copy_n(xv.begin() + (b * T + t - 1) * d, d, out.begin() + (b * T + t) * d);
    }
  }
  return make_op("token_shift", x.shape(), std::move(out), {x},
                 [x, layout, d](std::span<const double> g, std::span<const double>) {
                   auto gx = grad_sink(x);
                   const std::size_t T = layout.seq;
                   for (std::size_t b = 0; b < layout.batch; ++b) {
                     for (std::size_t t = 1; t < T; ++t) {
                       for (std::size_t j = 0; j < d; ++j) {
                         gx[(b * T + t - 1) * d + j] += g[(b * T + t) * d + j];
                       }
                     }
                   }
                 });
}

TokenSignals timemix_project(const Tensor& x, const TimeMixParams& p, SeqLayout layout,
                             const Tensor& x_prev) {
  const std::size_t rows = x.rows();
  Tensor shifted = token_shift(x, layout, x_prev);
  Tensor mix = expand_rows(sigmoid(p.shift_logit), rows);
  Tensor xt = add(shifted, mul(sub(x, shifted), mix));

  TokenSignals s;
  s.r = matmul(xt, p.w_r);
  s.k = matmul(xt, p.w_k);
  s.v = matmul(xt, p.w_v);
  s.w = exp(scale(exp(linear(xt, p.w_w, p.decay_bias)), -1.0));
  if (p.kind == MixerKind::rwkv7) {
    Tensor kappa = reshape(matmul(xt, p.w_kappa), {rows * p.n_heads, p.head_dim});
    s.kappa = reshape(rows_l2_normalize(kappa, p.kappa_eps), {rows, p.width()});
    s.a = sigmoid(linear(xt, p.w_a, p.icl_bias));
    if (p.a_range == ARange::extended) s.a = scale(s.a, 2.0);
  }
  if (p.gate_mode == GateMode::gated) s.g = sigmoid(linear(xt, p.w_g, p.gate_bias));
  return s;
}

Tensor rwkv7_step(const Tensor& state, const HeadSignals& sig, std::size_t step_index) {
  const std::size_t n = sig.w.size();
  if (state.shape() != Shape{n, n}) {
    throw ShapeError("rwkv7_step: state " + shape_str(state.shape()) + " for head_dim " +
                     std::to_string(n));
  }
  check_head_signal(sig.kappa, n, "kappa");
  check_head_signal(sig.a, n, "a");
  check_head_signal(sig.v, n, "v");
  check_head_signal(sig.k, n, "k");
  const Tensor trans = transition_matrix(sig.w, sig.kappa, sig.a);
  const auto S = state.values();
  const auto A = trans.values();
  std::vector<double> out(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t m = 0; m < n; ++m) {
      const double s = S[i * n + m];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += s * A[m * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += sig.v[i] * sig.k[j];
  }
  require_finite(out, step_index);
  return Tensor::from_values({n, n}, std::move(out));
}

Tensor rwkv6_step(const Tensor& state, std::span<const double> w, std::span<const double> k,
                  std::span<const double> v, std::size_t step_index) {
  const std::size_t n = w.size();
  if (state.shape() != Shape{n, n}) {
    throw ShapeError("rwkv6_step: state " + shape_str(state.shape()) + " for head_dim " +
                     std::to_string(n));
  }
  check_head_signal(k, n, "k");
  check_head_signal(v, n, "v");
  const auto S = state.values();
  std::vector<double> out(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = w[i] * S[i * n + j] + k[i] * v[j];
  }
  require_finite(out, step_index);
  return Tensor::from_values({n, n}, std::move(out));
}

Tensor transition_matrix(std::span<const double> w, std::span<const double> kappa,
                         std::span<const double> a) {
  const std::size_t n = w.size();
  check_head_signal(kappa, n, "kappa");
  check_head_signal(a, n, "a");
  std::vector<double> out(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = (i == j ? w[i] : 0.0) - kappa[i] * a[j] * kappa[j];
    }
  }
  return Tensor::from_values({n, n}, std::move(out));
}

ScanResult rwkv7_scan(const TokenSignals& sig, SeqLayout layout, std::size_t n_heads,
                      std::size_t head_dim, const TimeMixState* initial) {
  const std::size_t B = layout.batch, T = layout.seq, H = n_heads, n = head_dim;
  const std::size_t W = H * n, nn = n * n;
  const bool removal = sig.kappa.defined();
  for (const Tensor* t : {&sig.r, &sig.k, &sig.v, &sig.w}) {
    if (t->shape() != Shape{B * T, W}) {
      throw ShapeError("rwkv7_scan: signal " + shape_str(t->shape()) + ", expected " +
                       shape_str({B * T, W}));
    }
  }
  if (removal && (sig.kappa.shape() != sig.r.shape() || sig.a.shape() != sig.r.shape())) {
    throw ShapeError("rwkv7_scan: kappa/a shape mismatch");
  }
  if (initial && initial->s.shape() != Shape{B, H, n, n}) {
    throw ShapeError("rwkv7_scan: initial state " + shape_str(initial->s.shape()));
  }

  const auto r = sig.r.values(), k = sig.k.values(), v = sig.v.values(), w = sig.w.values();
  const std::span<const double> kap = removal ? sig.kappa.values() : std::span<const double>{};
  const std::span<const double> a = removal ? sig.a.values() : std::span<const double>{};

  // states[(b*H + h)*(T+1) + t] is S before token t; index T is the final state.
  std::vector<double> states(B * H * (T + 1) * nn, 0.0);
  std::vector<double> out(B * T * W, 0.0);
  std::vector<double> final_state(B * H * nn);
  std::vector<double> sk(n);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      double* hist = states.data() + (b * H + h) * (T + 1) * nn;
      if (initial) std::copy_n(initial->s.values().begin() + (b * H + h) * nn, nn, hist);
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t off = (b * T + t) * W + h * n;
        const double* S = hist + t * nn;
        double* Sn = hist + (t + 1) * nn;
        if (removal) {
          for (std::size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            for (std::size_t m = 0; m < n; ++m) acc += S[i * n + m] * kap[off + m];
            sk[i] = acc;
          }
        }
        double* o = out.data() + off;
        bool finite = true;
        for (std::size_t i = 0; i < n; ++i) {
          double oi = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            double s = S[i * n + j] * w[off + j] + v[off + i] * k[off + j];
            if (removal) s -= sk[i] * a[off + j] * kap[off + j];
            Sn[i * n + j] = s;
            oi += s * r[off + j];
          }
          o[i] = oi;
          finite = finite && std::isfinite(oi);
        }
        if (!finite) require_finite({Sn, nn}, t);
      }
      require_finite({hist + T * nn, nn}, T);
      std::copy_n(hist + T * nn, nn, final_state.begin() + (b * H + h) * nn);
    }
  }

  ScanResult result;
  result.final_state.s = Tensor::from_values({B, H, n, n}, std::move(final_state));
  std::vector<Tensor> inputs{sig.r, sig.k, sig.v, sig.w};
  if (removal) {
    inputs.push_back(sig.kappa);
    inputs.push_back(sig.a);
  }
  result.out = make_op(
      "rwkv7_scan", {B * T, W}, std::move(out), inputs,
      [sig, removal, B, T, H, n, W, nn, states = std::move(states)](std::span<const double> g,
                                                                   std::span<const double>) {
        const auto r = sig.r.values(), k = sig.k.values(), v = sig.v.values(),
                   w = sig.w.values();
        const std::span<const double> kap =
            removal ? sig.kappa.values() : std::span<const double>{};
        const std::span<const double> a = removal ? sig.a.values() : std::span<const double>{};
        auto gr = grad_sink(sig.r), gk = grad_sink(sig.k), gv = grad_sink(sig.v),
             gw = grad_sink(sig.w);
        std::span<double> gkap, ga;
        if (removal) {
          gkap = grad_sink(sig.kappa);
          ga = grad_sink(sig.a);
        }
        std::vector<double> dS(nn), dS_prev(nn), sk(n), dsk(n), db(n);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            const double* hist = states.data() + (b * H + h) * (T + 1) * nn;
            std::fill(dS.begin(), dS.end(), 0.0);
            for (std::size_t t = T; t-- > 0;) {
              const std::size_t off = (b * T + t) * W + h * n;
              const double* Sold = hist + t * nn;
              const double* Snew = hist + (t + 1) * nn;
              const double* go = g.data() + off;
              for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) dS[i * n + j] += go[i] * r[off + j];
              }
              if (!gr.empty()) {
                for (std::size_t j = 0; j < n; ++j) {
                  double acc = 0.0;
                  for (std::size_t i = 0; i < n; ++i) acc += Snew[i * n + j] * go[i];
                  gr[off + j] += acc;
                }
              }
              for (std::size_t i = 0; i < n; ++i) {
                double acc_v = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc_v += dS[i * n + j] * k[off + j];
                if (!gv.empty()) gv[off + i] += acc_v;
              }
              for (std::size_t j = 0; j < n; ++j) {
                double acc_k = 0.0, acc_w = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                  acc_k += dS[i * n + j] * v[off + i];
                  acc_w += dS[i * n + j] * Sold[i * n + j];
                }
                if (!gk.empty()) gk[off + j] += acc_k;
                if (!gw.empty()) gw[off + j] += acc_w;
              }
              if (removal) {
                for (std::size_t i = 0; i < n; ++i) {
                  double acc = 0.0;
                  for (std::size_t m = 0; m < n; ++m) acc += Sold[i * n + m] * kap[off + m];
                  sk[i] = acc;
                }
                std::fill(db.begin(), db.end(), 0.0);
                for (std::size_t i = 0; i < n; ++i) {
                  double acc = 0.0;
                  for (std::size_t j = 0; j < n; ++j) {
                    acc -= dS[i * n + j] * a[off + j] * kap[off + j];
                    db[j] -= dS[i * n + j] * sk[i];
                  }
                  dsk[i] = acc;
                }
                for (std::size_t j = 0; j < n; ++j) {
                  if (!ga.empty()) ga[off + j] += db[j] * kap[off + j];
                  if (!gkap.empty()) {
                    double acc = db[j] * a[off + j];
                    for (std::size_t i = 0; i < n; ++i) acc += dsk[i] * Sold[i * n + j];
                    gkap[off + j] += acc;
                  }
                }
              }
              for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t m = 0; m < n; ++m) {
                  double d = dS[i * n + m] * w[off + m];
                  if (removal) d += dsk[i] * kap[off + m];
                  dS_prev[i * n + m] = d;
                }
              }
              std::swap(dS, dS_prev);
            }
          }
        }
      });
  return result;
}

Tensor group_standardize(const Tensor& x, std::size_t group, double eps) {
  const std::size_t rows = x.rows(), width = x.cols();
  if (group == 0 || width % group != 0) {
    throw ShapeError("group_standardize: width " + std::to_string(width) +
                     " is not a multiple of " + std::to_string(group));
  }
  const std::size_t ng = rows * (width / group);
  const auto xv = x.values();
  std::vector<double> out(xv.size()), inv_std(ng);
  for (std::size_t gi = 0; gi < ng; ++gi) {
    const double* xs = xv.data() + gi * group;
    double mu = 0.0;
    for (std::size_t j = 0; j < group; ++j) mu += xs[j];
    mu /= static_cast<double>(group);
    double var = 0.0;
    for (std::size_t j = 0; j < group; ++j) var += (xs[j] - mu) * (xs[j] - mu);
    var /= static_cast<double>(group);
    inv_std[gi] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < group; ++j) out[gi * group + j] = (xs[j] - mu) * inv_std[gi];
  }
  return make_op("group_standardize", x.shape(), std::move(out), {x},
                 [x, group, ng, inv_std = std::move(inv_std)](std::span<const double> g,
                                                              std::span<const double> y) {
                   auto gx = grad_sink(x);
                   const double inv_n = 1.0 / static_cast<double>(group);
                   for (std::size_t gi = 0; gi < ng; ++gi) {
                     const std::size_t o = gi * group;
                     double mg = 0.0, mgy = 0.0;
                     for (std::size_t j = 0; j < group; ++j) {
                       mg += g[o + j];
                       mgy += g[o + j] * y[o + j];
                     }
                     mg *= inv_n;
                     mgy *= inv_n;
                     for (std::size_t j = 0; j < group; ++j) {
                       gx[o + j] += inv_std[gi] * (g[o + j] - mg - y[o + j] * mgy);
                     }
                   }
                 });
}

TimeMixOutput timemix_forward(const Tensor& x, const TimeMixParams& p, SeqLayout layout,
                              const TimeMixState* initial, const Tensor& x_prev) {
  const TokenSignals sig = timemix_project(x, p, layout, x_prev);
  ScanResult scan = rwkv7_scan(sig, layout, p.n_heads, p.head_dim, initial);
  Tensor h = scan.out;
  if (p.norm_mode == NormMode::group_norm) {
    const std::size_t rows = h.rows();
    h = add(mul(group_standardize(h, p.head_dim, p.group_norm_eps),
                expand_rows(p.gn_gamma, rows)),
            expand_rows(p.gn_beta, rows));
  }
  if (p.gate_mode == GateMode::gated) h = mul(sig.g, h);
  return {matmul(h, p.w_o), h, std::move(scan.final_state)};
}

}  // namespace arwkv

#include "arwkv/layers.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace arwkv {

Tensor rmsnorm(const Tensor& x, const NormParams& p) {
  const auto rows = x.rows(), d = x.cols();
  if (p.gamma.numel() != d) {
    throw ShapeError("rmsnorm: gamma has " + std::to_string(p.gamma.numel()) +
                     " entries for width " + std::to_string(d));
  }
  const auto xv = x.values();
  const auto gv = p.gamma.values();
  std::vector<double> out(rows * d);
  std::vector<double> inv_rms(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += xv[i * d + j] * xv[i * d + j];
    inv_rms[i] = 1.0 / std::sqrt(ss / static_cast<double>(d) + p.eps);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] * inv_rms[i] * gv[j];
  }
  Tensor gamma = p.gamma;
  return make_op("rmsnorm", x.shape(), std::move(out), {x, gamma},
                 [x, gamma, rows, d, inv_rms = std::move(inv_rms)](std::span<const double> g,
                                                                    std::span<const double>) {
                   const auto xv = x.values();
                   const auto gv = gamma.values();
                   auto gx = grad_sink(x);
                   auto gg = grad_sink(gamma);
                   for (std::size_t i = 0; i < rows; ++i) {
                     const double r = inv_rms[i];
                     const double* xi = xv.data() + i * d;
                     const double* gi = g.data() + i * d;
                     if (!gg.empty()) {
                       for (std::size_t j = 0; j < d; ++j) gg[j] += gi[j] * xi[j] * r;
                     }
                     if (gx.empty()) continue;
                     double dot = 0.0;
                     for (std::size_t j = 0; j < d; ++j) dot += gi[j] * gv[j] * xi[j];
                     const double c = r * r * r * dot / static_cast<double>(d);
                     for (std::size_t j = 0; j < d; ++j) {
                       gx[i * d + j] += r * gv[j] * gi[j] - xi[j] * c;
                     }
                   }
                 });
}

Tensor swiglu_mlp(const Tensor& x, const MlpParams& p) {
  return matmul(mul(silu(matmul(x, p.w_gate)), matmul(x, p.w_up)), p.w_down);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  if (!b.defined()) return y;
  return add(y, expand_rows(b, y.rows()));
}

Tensor rope_apply(const Tensor& x, std::span<const std::size_t> positions,
                  std::size_t head_dim, double theta) {
  if (head_dim % 2 != 0) {
    throw std::invalid_argument("rope_apply: head_dim must be even, got " +
                                std::to_string(head_dim));
  }
  const auto rows = x.rows(), width = x.cols();
  if (width % head_dim != 0 || positions.size() != rows) {
    throw ShapeError("rope_apply: " + shape_str(x.shape()) + " with head_dim " +
                     std::to_string(head_dim) + " and " + std::to_string(positions.size()) +
                     " positions");
  }
  const std::size_t half = head_dim / 2;
  std::vector<double> cs(rows * half), sn(rows * half);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq =
          std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double angle = static_cast<double>(positions[r]) * freq;
      cs[r * half + i] = std::cos(angle);
      sn[r * half + i] = std::sin(angle);
    }
  }
  const auto xv = x.values();
  std::vector<double> out(rows * width);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < width; c += 2) {
      const std::size_t i = (c % head_dim) / 2;
      const double a = xv[r * width + c], b = xv[r * width + c + 1];
      const double co = cs[r * half + i], si = sn[r * half + i];
      out[r * width + c] = a * co - b * si;
      out[r * width + c + 1] = a * si + b * co;
    }
  }
  return make_op("rope", x.shape(), std::move(out), {x},
                 [x, rows, width, half, head_dim, cs = std::move(cs), sn = std::move(sn)](
                     std::span<const double> g, std::span<const double>) {
                   auto gx = grad_sink(x);
                   for (std::size_t r = 0; r < rows; ++r) {
                     for (std::size_t c = 0; c < width; c += 2) {
                       const std::size_t i = (c % head_dim) / 2;
                       const double co = cs[r * half + i], si = sn[r * half + i];
                       const double ga = g[r * width + c], gb = g[r * width + c + 1];
                       gx[r * width + c] += ga * co + gb * si;
                       gx[r * width + c + 1] += -ga * si + gb * co;
                     }
                   }
                 });
}

std::vector<std::size_t> sequence_positions(SeqLayout layout) {
  std::vector<std::size_t> pos(layout.rows());
  for (std::size_t r = 0; r < pos.size(); ++r) pos[r] = r % layout.seq;
  return pos;
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, SeqLayout layout,
                        HeadLayout heads, std::vector<double>* weights) {
  const std::size_t H = heads.n_heads, KV = heads.n_kv_heads, hd = heads.head_dim;
  const std::size_t B = layout.batch, T = layout.seq;
  if (KV == 0 || H % KV != 0) {
    throw std::invalid_argument("causal_attention: n_heads must be a multiple of n_kv_heads");
  }
  if (q.rows() != layout.rows() || q.cols() != H * hd || k.rows() != layout.rows() ||
      k.cols() != KV * hd || v.shape() != k.shape()) {
    throw ShapeError("causal_attention: q " + shape_str(q.shape()) + ", k " +
                     shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  }
  const std::size_t group = H / KV;
  const std::size_t qw = H * hd, kw = KV * hd;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto qv = q.values(), kv = k.values(), vv = v.values();
  std::vector<double> probs(B * H * T * T, 0.0);
  std::vector<double> out(B * T * qw, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t kh = h / group;
      double* P = probs.data() + (b * H + h) * T * T;
      for (std::size_t t = 0; t < T; ++t) {
        const double* qt = qv.data() + (b * T + t) * qw + h * hd;
        double mx = -INFINITY;
        for (std::size_t s = 0; s <= t; ++s) {
          const double* ks = kv.data() + (b * T + s) * kw + kh * hd;
          double dot = 0.0;
          for (std::size_t j = 0; j < hd; ++j) dot += qt[j] * ks[j];
          P[t * T + s] = dot * inv_sqrt;
          mx = std::max(mx, P[t * T + s]);
        }
        double z = 0.0;
        for (std::size_t s = 0; s <= t; ++s) z += (P[t * T + s] = std::exp(P[t * T + s] - mx));
        double* ot = out.data() + (b * T + t) * qw + h * hd;
        for (std::size_t s = 0; s <= t; ++s) {
          P[t * T + s] /= z;
          const double* vs = vv.data() + (b * T + s) * kw + kh * hd;
          for (std::size_t j = 0; j < hd; ++j) ot[j] += P[t * T + s] * vs[j];
        }
      }
    }
  }
  if (weights) *weights = probs;
  return make_op(
      "causal_attention", {B * T, qw}, std::move(out), {q, k, v},
      [=, probs = std::move(probs)](std::span<const double> g, std::span<const double>) {
        auto gq = grad_sink(q);
        auto gk = grad_sink(k);
        auto gv = grad_sink(v);
        const auto qv = q.values(), kv = k.values(), vv = v.values();
        std::vector<double> dp(T);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            const std::size_t kh = h / group;
            const double* P = probs.data() + (b * H + h) * T * T;
            for (std::size_t t = 0; t < T; ++t) {
              const double* go = g.data() + (b * T + t) * qw + h * hd;
              double dot = 0.0;
              for (std::size_t s = 0; s <= t; ++s) {
                const double* vs = vv.data() + (b * T + s) * kw + kh * hd;
                double d = 0.0;
                for (std::size_t j = 0; j < hd; ++j) d += go[j] * vs[j];
                dp[s] = d;
                dot += d * P[t * T + s];
                if (!gv.empty()) {
                  double* gvs = gv.data() + (b * T + s) * kw + kh * hd;
                  for (std::size_t j = 0; j < hd; ++j) gvs[j] += P[t * T + s] * go[j];
                }
              }
              const double* qt = qv.data() + (b * T + t) * qw + h * hd;
              for (std::size_t s = 0; s <= t; ++s) {
                const double ds = P[t * T + s] * (dp[s] - dot) * inv_sqrt;
                const double* ks = kv.data() + (b * T + s) * kw + kh * hd;
                if (!gq.empty()) {
                  double* gqt = gq.data() + (b * T + t) * qw + h * hd;
                  for (std::size_t j = 0; j < hd; ++j) gqt[j] += ds * ks[j];
                }
                if (!gk.empty()) {
                  double* gks = gk.data() + (b * T + s) * kw + kh * hd;
                  for (std::size_t j = 0; j < hd; ++j) gks[j] += ds * qt[j];
                }
              }
            }
          }
        }
      });
}

AttentionOutput gqa_attention(const Tensor& x, const GqaParams& p, SeqLayout layout,
                              double theta) {
  const auto pos = sequence_positions(layout);
  Tensor q = rope_apply(linear(x, p.wq, p.bq), pos, p.head_dim, theta);
  Tensor k = rope_apply(linear(x, p.wk, p.bk), pos, p.head_dim, theta);
  Tensor v = linear(x, p.wv, p.bv);
  Tensor h = causal_attention(q, k, v, layout, {p.n_heads, p.n_kv_heads, p.head_dim});
  return {matmul(h, p.wo), h};
}

}  // namespace arwkv

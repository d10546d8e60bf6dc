#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>

#include "arwkv/timemix.hpp"
#include "doctest.h"
#include "rwkv_oracle.hpp"
#include "support.hpp"

using namespace arwkv;
using arwkv::test::PrecisionScope;

namespace {

TimeMixParams make_tm(std::size_t d, std::size_t H, std::size_t hd, TimeMixInit init,
                      std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return init_timemix(d, H, hd, init, rng);
}

/// Moves every parameter away from its structured initial value so gradient
/// checks see generic inputs.
void perturb(TimeMixParams& p, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (Tensor* t : {&p.w_r, &p.w_k, &p.w_v, &p.w_o, &p.w_w, &p.decay_bias, &p.w_kappa, &p.w_a,
                    &p.icl_bias, &p.w_g, &p.gate_bias, &p.shift_logit, &p.gn_gamma, &p.gn_beta}) {
    if (!t->defined()) continue;
    for (auto& v : t->mutable_values()) v += n(rng);
  }
}

std::vector<Tensor> leaves(const TimeMixParams& p) {
  std::vector<Tensor> out;
  for (const Tensor* t : {&p.w_r, &p.w_k, &p.w_v, &p.w_o, &p.w_w, &p.decay_bias, &p.w_kappa,
                          &p.w_a, &p.icl_bias, &p.w_g, &p.gate_bias, &p.shift_logit, &p.gn_gamma,
                          &p.gn_beta}) {
    if (t->defined()) out.push_back(*t);
  }
  return out;
}

Eigen::VectorXcd eigenvalues(const Tensor& t) {
  const auto n = static_cast<Eigen::Index>(t.rows());
  Eigen::MatrixXd m(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      m(i, j) = t.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
    }
  }
  return Eigen::EigenSolver<Eigen::MatrixXd>(m).eigenvalues();
}

std::vector<double> unit_vector(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  double s = 0.0;
  for (auto& x : v) {
    x = d(rng);
    s += x * x;
  }
  for (auto& x : v) x /= std::sqrt(s);
  return v;
}

}  // namespace

TEST_SUITE("timemix") {

TEST_CASE("projection codomains and special values") {
  PrecisionScope p(Precision::f64);
  TimeMixParams tm = make_tm(8, 2, 4, {}, 1);
  std::mt19937_64 rng(2);
  Tensor x = test::uniform({2 * 5, 8}, rng);
  TokenSignals s = timemix_project(x, tm, {2, 5});
  for (double g : s.g.values()) CHECK(std::abs(g - 1.0) < 1e-6);
  for (double w : s.w.values()) CHECK((w > 0.0 && w < 1.0));
  for (double a : s.a.values()) CHECK((a > 0.0 && a < 1.0));
  for (std::size_t r = 0; r < 10; ++r) {
    for (std::size_t h = 0; h < 2; ++h) {
      double n = 0.0;
      for (std::size_t i = 0; i < 4; ++i) n += std::pow(s.kappa.at(r, h * 4 + i), 2);
      CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-5);
    }
  }

  for (auto& v : tm.w_w.mutable_values()) v = 0.0;
  for (auto& v : tm.decay_bias.mutable_values()) v = 0.0;
  for (auto& v : tm.w_a.mutable_values()) v = 0.0;
  TokenSignals z = timemix_project(x, tm, {2, 5});
  for (double w : z.w.values()) CHECK(w == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
  for (double a : z.a.values()) CHECK(a == 0.5);

  TimeMixParams ext = make_tm(8, 2, 4, {.a_range = ARange::extended}, 1);
  TokenSignals e = timemix_project(x, ext, {2, 5});
  for (double a : e.a.values()) CHECK((a > 0.0 && a < 2.0));
}

TEST_CASE("token shift reads the previous row within each sequence") {
  Tensor x = Tensor::from_values({4, 1}, {1, 2, 3, 4});
  Tensor s = token_shift(x, {2, 2});
  CHECK(std::vector<double>(s.values().begin(), s.values().end()) ==
        std::vector<double>{0, 1, 0, 3});
  Tensor prev = Tensor::from_values({2, 1}, {9, 8});
  Tensor sp = token_shift(x, {2, 2}, prev);
  CHECK(std::vector<double>(sp.values().begin(), sp.values().end()) ==
        std::vector<double>{9, 1, 8, 3});
}

TEST_CASE("rwkv7_step worked examples") {
  PrecisionScope p(Precision::f64);
  HeadSignals sig{{0.5, 0.5}, {1.0, 0.0}, {0.8, 0.8}, {0.0, 0.0}, {0.3, -0.2}};
  Tensor eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  Tensor s = rwkv7_step(eye, sig);
  CHECK(s.at(0, 0) == doctest::Approx(-0.3));
  CHECK(s.at(0, 1) == 0.0);
  CHECK(s.at(1, 0) == 0.0);
  CHECK(s.at(1, 1) == doctest::Approx(0.5));

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor S = test::uniform({3, 3}, rng, -1, 1, false);
    HeadSignals h{{0.2, 0.7, 0.9}, unit_vector(rng, 3), {0, 0, 0}, {0.5, -1, 2}, {1, 0.25, -0.5}};
    Tensor out = rwkv7_step(S, h);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        CHECK(out.at(i, j) == doctest::Approx(S.at(i, j) * h.w[j] + h.v[i] * h.k[j]));
      }
    }
    h.a = {0.3, 0.6, 0.9};
    Tensor from_zero = rwkv7_step(Tensor::zeros({3, 3}), h);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) CHECK(from_zero.at(i, j) == h.v[i] * h.k[j]);
    }
  }
}

TEST_CASE("rwkv7_step reports the step of a non-finite state") {
  HeadSignals sig{{0.5}, {1.0}, {0.5}, {INFINITY}, {1.0}};
  try {
    rwkv7_step(Tensor::zeros({1, 1}), sig, 42);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(std::string(e.what()).find("42") != std::string::npos);
  }
}

TEST_CASE("rwkv6_step examples and unrolled closed form") {
  PrecisionScope p(Precision::f64);
  std::mt19937_64 rng(5);
  Tensor S = test::uniform({3, 3}, rng, -1, 1, false);
  const std::vector<double> k = {1, 2, 3}, v = {-1, 0.5, 2};
  Tensor no_decay = rwkv6_step(S, std::vector<double>{1, 1, 1}, k, v);
  Tensor reset = rwkv6_step(S, std::vector<double>{0, 0, 0}, k, v);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(no_decay.at(i, j) == doctest::Approx(S.at(i, j) + k[i] * v[j]));
      CHECK(reset.at(i, j) == k[i] * v[j]);
    }
  }

  const std::vector<double> w = {0.9, 0.5, 0.1};
  std::vector<std::vector<double>> ks, vs;
  Tensor state = Tensor::zeros({3, 3});
  for (int t = 0; t < 3; ++t) {
    ks.push_back(std::vector<double>(3));
    vs.push_back(std::vector<double>(3));
    std::uniform_real_distribution<double> d(-1, 1);
    for (auto& x : ks.back()) x = d(rng);
    for (auto& x : vs.back()) x = d(rng);
    state = rwkv6_step(state, w, ks.back(), vs.back());
  }
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double closed = 0.0;
      for (int t = 0; t < 3; ++t) closed += std::pow(w[i], 2 - t) * ks[t][i] * vs[t][j];
      CHECK(state.at(i, j) == doctest::Approx(closed).epsilon(1e-12));
    }
  }
}

TEST_CASE("rwkv7 without removal equals transposed rwkv6") {
  PrecisionScope p(Precision::f64);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> d(-1, 1), u(0.01, 0.99);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 4;
    Tensor S = test::uniform({n, n}, rng, -1, 1, false);
    HeadSignals h;
    for (std::size_t i = 0; i < n; ++i) {
      h.w.push_back(u(rng));
      h.a.push_back(0.0);
      h.v.push_back(d(rng));
      h.k.push_back(d(rng));
    }
    h.kappa = unit_vector(rng, n);
    std::vector<double> st(n * n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) st[j * n + i] = S.at(i, j);
    }
    Tensor a7 = rwkv7_step(S, h);
    Tensor a6 = rwkv6_step(Tensor::from_values({n, n}, st), h.w, h.k, h.v);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) CHECK(a7.at(i, j) == doctest::Approx(a6.at(j, i)));
    }
  }
}

TEST_CASE("transition spectrum") {
  PrecisionScope p(Precision::f64);
  std::mt19937_64 rng(7);
  const std::size_t n = 6;
  SUBCASE("uniform case gives {w, w - a}") {
    for (auto [w, a] : {std::pair{0.9, 0.5}, std::pair{0.99, 1.9}, std::pair{0.3, 0.05}}) {
      const auto kap = unit_vector(rng, n);
      auto ev = eigenvalues(transition_matrix(std::vector<double>(n, w), kap,
                                              std::vector<double>(n, a)));
      std::vector<double> re;
      for (auto z : ev) {
        CHECK(std::abs(z.imag()) < 1e-6);
        re.push_back(z.real());
      }
      std::sort(re.begin(), re.end());
      CHECK(std::abs(re.front() - (w - a)) < 1e-6);
      for (std::size_t i = 1; i < n; ++i) CHECK(std::abs(re[i] - w) < 1e-6);
    }
  }
  SUBCASE("a = 0 leaves diag(w)") {
    const std::vector<double> w = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
    Tensor t = transition_matrix(w, unit_vector(rng, n), std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) CHECK(t.at(i, j) == (i == j ? w[i] : 0.0));
    }
  }
  SUBCASE("unit range stays inside the unit disc") {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int draw = 0; draw < 1000; ++draw) {
      std::vector<double> w(n), a(n);
      for (auto& x : w) x = std::exp(-std::exp(4.0 * u(rng) - 3.0));
      for (auto& x : a) x = u(rng);
      for (auto z : eigenvalues(transition_matrix(w, unit_vector(rng, n), a))) {
        CHECK(std::abs(z) <= 1.0 + 1e-6);
      }
    }
  }
}

TEST_CASE("single-step readout") {
  PrecisionScope p(Precision::f64);
  TimeMixParams tm = make_tm(8, 2, 4, {.gate_mode = GateMode::gate_free}, 3);
  std::mt19937_64 rng(4);
  Tensor x = test::uniform({1, 8}, rng);
  TokenSignals s = timemix_project(x, tm, {1, 1});
  TimeMixOutput out = timemix_forward(x, tm, {1, 1});
  for (std::size_t h = 0; h < 2; ++h) {
    double kr = 0.0;
    for (std::size_t j = 0; j < 4; ++j) kr += s.k.at(0, h * 4 + j) * s.r.at(0, h * 4 + j);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(out.h.at(0, h * 4 + i) == doctest::Approx(s.v.at(0, h * 4 + i) * kr));
    }
  }
}

TEST_CASE("gate-free equals a gate fixed at one") {
  TimeMixParams gated = make_tm(8, 2, 4, {.gate_bias = 1000.0}, 3);
  TimeMixParams free = gated;
  free.gate_mode = GateMode::gate_free;
  free.w_g = {};
  free.gate_bias = {};
  std::mt19937_64 rng(4);
  Tensor x = test::uniform({12, 8}, rng);
  CHECK(test::bit_equal(timemix_forward(x, gated, {2, 6}).y.values(),
                        timemix_forward(x, free, {2, 6}).y.values()));
}

TEST_CASE("forward matches the scalar oracle") {
  for (auto init : {TimeMixInit{}, TimeMixInit{.a_range = ARange::extended},
                    TimeMixInit{.kind = MixerKind::rwkv6},
                    TimeMixInit{.norm_mode = NormMode::group_norm}}) {
    for (auto [prec, tol] : {std::pair{Precision::f64, 1e-10}, std::pair{Precision::f32, 1e-5}}) {
      PrecisionScope p(prec);
      TimeMixParams tm = make_tm(8, 2, 4, init, 11);
      perturb(tm, 12);
      std::mt19937_64 rng(13);
      Tensor x = test::uniform({16, 8}, rng, -1, 1);
      const TimeMixOutput out = timemix_forward(x, tm, {1, 16});
      const auto ref = test::timemix_oracle({x.values().begin(), x.values().end()}, 16, 8, tm);
      CHECK(test::max_abs_diff(out.y.values(), ref.y) < tol);
      CHECK(test::max_abs_diff(out.h.values(), ref.h) < tol);
      CHECK(test::max_abs_diff(out.state.s.values(), ref.state) < tol);
    }
  }
}

TEST_CASE("state carry splits a sequence without changing it") {
  PrecisionScope p(Precision::f64);
  TimeMixParams tm = make_tm(8, 2, 4, {}, 21);
  perturb(tm, 22);
  std::mt19937_64 rng(23);
  Tensor x = test::uniform({10, 8}, rng);
  const TimeMixOutput full = timemix_forward(x, tm, {1, 10});
  const std::size_t first_rows[] = {0, 1, 2, 3, 4, 5};
  const std::size_t rest_rows[] = {6, 7, 8, 9};
  const std::size_t last_row[] = {5};
  Tensor a = gather_rows(x, first_rows), b = gather_rows(x, rest_rows);
  const TimeMixOutput pa = timemix_forward(a, tm, {1, 6});
  const TimeMixOutput pb = timemix_forward(b, tm, {1, 4}, &pa.state, gather_rows(x, last_row));
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t c = 0; c < 8; ++c) {
      CHECK(pb.y.at(t, c) == doctest::Approx(full.y.at(6 + t, c)).epsilon(1e-12));
    }
  }
  CHECK(test::max_abs_diff(pb.state.s.values(), full.state.s.values()) < 1e-12);
}

TEST_CASE("future tokens never change past outputs") {
  TimeMixParams tm = make_tm(8, 2, 4, {}, 31);
  perturb(tm, 32);
  std::mt19937_64 rng(33);
  Tensor x = test::uniform({8, 8}, rng);
  const Tensor base = timemix_forward(x, tm, {1, 8}).y;
  for (std::size_t tp = 1; tp < 8; ++tp) {
    Tensor xp = x.clone();
    for (std::size_t j = 0; j < 8; ++j) xp.mutable_values()[tp * 8 + j] -= 0.7;
    const Tensor y = timemix_forward(xp, tm, {1, 8}).y;
    for (std::size_t t = 0; t < tp; ++t) {
      for (std::size_t j = 0; j < 8; ++j) CHECK(y.at(t, j) == base.at(t, j));
    }
  }
}

TEST_CASE("bounded state over 10000 steps") {
  NoGradGuard no_grad;
  std::mt19937_64 rng(41);
  const std::size_t T = 10000, hd = 4;
  std::uniform_real_distribution<double> u(-1, 1), pos(0.0, 1.0);
  TokenSignals s;
  std::vector<double> r(T * hd), k(T * hd), v(T * hd), w(T * hd), a(T * hd), kap;
  for (std::size_t i = 0; i < T * hd; ++i) {
    r[i] = u(rng);
    k[i] = u(rng);
    v[i] = u(rng);
    w[i] = std::exp(-std::exp(u(rng)));
    a[i] = pos(rng);
  }
  for (std::size_t t = 0; t < T; ++t) {
    auto kv = unit_vector(rng, hd);
    kap.insert(kap.end(), kv.begin(), kv.end());
  }
  s.r = Tensor::from_values({T, hd}, r);
  s.k = Tensor::from_values({T, hd}, k);
  s.v = Tensor::from_values({T, hd}, v);
  s.w = Tensor::from_values({T, hd}, w);
  s.a = Tensor::from_values({T, hd}, a);
  s.kappa = Tensor::from_values({T, hd}, kap);
  const ScanResult out = rwkv7_scan(s, {1, T}, 1, hd);
  double peak = 0.0;
  for (double x : out.final_state.s.values()) {
    CHECK(std::isfinite(x));
    peak = std::max(peak, std::abs(x));
  }
  for (double x : out.out.values()) CHECK(std::isfinite(x));
  CHECK(peak < 1e3);
}

TEST_CASE("gradients through the recurrence match finite differences") {
  PrecisionScope p(Precision::f64);
  const TimeMixInit inits[] = {
      {.gate_bias = 0.5}, {.a_range = ARange::extended, .gate_bias = 0.5},
      {.kind = MixerKind::rwkv6, .gate_mode = GateMode::gate_free},
      {.norm_mode = NormMode::group_norm, .gate_bias = -0.3}};
  for (std::size_t which = 0; which < 4; ++which) {
    const TimeMixInit& init = inits[which];
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      CAPTURE(which);
      CAPTURE(seed);
      TimeMixParams tm = make_tm(6, 2, 4, init, seed);
      perturb(tm, seed + 100);
      std::mt19937_64 rng(seed + 200);
      Tensor x = test::uniform({2 * 8, 6}, rng, -1, 1);
      Tensor wsum = test::uniform({16, 6}, rng, -1, 1, false);
      auto ls = leaves(tm);
      ls.push_back(x);
      const double err = grad_check_leaves(
          [&] { return sum(mul(timemix_forward(x, tm, {2, 8}).y, wsum)); }, ls, 1e-5);
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("carried state and previous token are constants of the graph") {
  PrecisionScope p(Precision::f64);
  TimeMixParams tm = make_tm(6, 2, 4, {}, 1);
  perturb(tm, 2);
  std::mt19937_64 rng(3);
  Tensor x = test::uniform({5, 6}, rng, -1, 1);
  TimeMixState s0{test::uniform({1, 2, 4, 4}, rng, -1, 1)};
  Tensor prev = test::uniform({1, 6}, rng, -1, 1);
  s0.s.zero_grad();
  prev.zero_grad();
  backward(sum(timemix_forward(x, tm, {1, 5}, &s0, prev).y));
  for (double g : s0.s.grad()) CHECK(g == 0.0);
  for (double g : prev.grad()) CHECK(g == 0.0);
  double gx = 0.0;
  for (double g : x.grad()) gx += std::abs(g);
  CHECK(gx > 0.0);
}

}  // TEST_SUITE

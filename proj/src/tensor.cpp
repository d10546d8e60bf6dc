#include "arwkv/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <unordered_set>

#include "dense.hpp"

namespace arwkv {

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool has_history = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};
}  // namespace detail

namespace {

Precision g_precision = Precision::f32;
bool g_check_finite = false;
thread_local bool t_grad_enabled = true;
std::atomic<std::uint64_t> g_seq{0};

std::shared_ptr<detail::Node> new_leaf(Shape shape, std::vector<double> values,
                                       bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor: " + std::to_string(values.size()) +
                     " values do not fill shape " + shape_str(shape));
  }
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  quantize(n->value);
  n->requires_grad = requires_grad;
  n->seq = g_seq.fetch_add(1);
  return n;
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

Precision run_precision() { return g_precision; }
void set_run_precision(Precision p) { g_precision = p; }

void init_precision_from_env() {
  const char* v = std::getenv("ARWKV_PRECISION");
  if (!v) return;
  const std::string s(v);
  if (s == "f32") {
    g_precision = Precision::f32;
  } else if (s == "f64") {
    g_precision = Precision::f64;
  } else {
    throw std::invalid_argument("ARWKV_PRECISION must be f32 or f64, got '" + s + "'");
  }
}

double quantize(double v) {
  return g_precision == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

void quantize(std::span<double> values) {
  if (g_precision != Precision::f32) return;
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

void set_check_finite(bool enabled) { g_check_finite = enabled; }
bool check_finite() { return g_check_finite; }

bool grad_enabled() { return t_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(new_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(new_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(new_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value) { return from_values({}, {value}); }

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->value.size(); }

std::size_t Tensor::rows() const {
  if (rank() != 2) throw ShapeError("rows(): not a matrix " + shape_str(shape()));
  return shape()[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw ShapeError("cols(): not a matrix " + shape_str(shape()));
  return shape()[1];
}

std::span<const double> Tensor::values() const { return node_->value; }

std::span<double> Tensor::mutable_values() {
  if (node_->has_history) throw std::logic_error("cannot write a tensor with recorded history");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item(): tensor is not a scalar " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (node_->has_history) throw std::logic_error("requires_grad can only be set on leaves");
  node_->requires_grad = flag;
  if (!flag) node_->grad.clear();
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() { return grad_sink(*this); }

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return Tensor(new_leaf(shape(), node_->value, false)); }

Tensor Tensor::clone() const {
  return Tensor(new_leaf(shape(), node_->value, node_->requires_grad && !node_->has_history));
}

Tensor randn(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from_values(std::move(shape), std::move(v), requires_grad);
}

std::uint64_t Tensor::sequence() const { return node_->seq; }
const char* Tensor::op_name() const { return node_->op; }

// ---- graph ----------------------------------------------------------------

Tensor make_op(const char* name, Shape shape, std::vector<double> values,
               const std::vector<Tensor>& inputs, BackwardFn backward) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError(std::string(name) + ": produced " + std::to_string(values.size()) +
                     " values for shape " + shape_str(shape));
  }
  quantize(values);
  if (g_check_finite) {
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!std::isfinite(values[i])) {
        throw NonFiniteError(std::string("non-finite value produced by ") + name +
                             " at flat index " + std::to_string(i));
      }
    }
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->seq = g_seq.fetch_add(1);
  node->op = name;
  const bool track =
      t_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                                    [](const Tensor& t) { return t.requires_grad(); });
  if (track) {
    node->requires_grad = true;
    node->has_history = true;
    node->backward = std::move(backward);
    for (const auto& t : inputs) {
      if (t.requires_grad()) node->inputs.push_back(t.node_);
    }
  }
  return Tensor(std::move(node));
}

std::span<double> grad_sink(const Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return {};
  auto* n = t.node();
  if (n->grad.empty()) n->grad.assign(n->value.size(), 0.0);
  return n->grad;
}

Graph Graph::collect(const Tensor& root) {
  Graph g;
  if (!root.requires_grad()) return g;
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::shared_ptr<detail::Node>> stack{root.node_};
  while (!stack.empty()) {
    auto n = std::move(stack.back());
    stack.pop_back();
    if (!n->has_history || !seen.insert(n.get()).second) continue;
    for (const auto& in : n->inputs) stack.push_back(in);
    g.nodes_.push_back(std::move(n));
  }
  std::sort(g.nodes_.begin(), g.nodes_.end(),
            [](const auto& a, const auto& b) { return a->seq < b->seq; });
  return g;
}

std::vector<std::string> Graph::op_names() const {
  std::vector<std::string> out;
  out.reserve(nodes_.size());
  for (const auto& n : nodes_) out.emplace_back(n->op);
  return out;
}

void Graph::backward(const Tensor& root) const {
  if (root.numel() != 1) {
    throw ShapeError("backward: loss is not a scalar " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) return;
  std::unordered_set<detail::Node*> leaves;
  grad_sink(root)[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    auto& n = **it;
    for (const auto& in : n.inputs) {
      if (!in->has_history) leaves.insert(in.get());
    }
    if (n.grad.empty()) continue;
    quantize(n.grad);
    n.backward(n.grad, n.value);
    // Intermediate gradients are consumed; a second backward starts clean.
    n.grad.clear();
  }
  for (auto* leaf : leaves) quantize(leaf->grad);
}

void backward(const Tensor& loss) { Graph::collect(loss).backward(loss); }

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  dense::view(out.data(), m, n).noalias() =
      dense::view(a.values().data(), m, k) * dense::view(b.values().data(), k, n);
  return make_op("matmul", {m, n}, std::move(out), {a, b},
                 [a, b, m, k, n](std::span<const double> g, std::span<const double>) {
                   const auto gm = dense::view(g.data(), m, n);
                   if (auto ga = grad_sink(a); !ga.empty()) {
                     dense::view(ga.data(), m, k).noalias() +=
                         gm * dense::view(b.values().data(), k, n).transpose();
                   }
                   if (auto gb = grad_sink(b); !gb.empty()) {
                     dense::view(gb.data(), k, n).noalias() +=
                         dense::view(a.values().data(), m, k).transpose() * gm;
                   }
                 });
}

Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b, double factor) {
  const auto av = a.values();
  const std::size_t n = av.size();
  std::vector<double> out(n);
  switch (kind) {
    case Elementwise::add:
    case Elementwise::sub:
    case Elementwise::mul: {
      if (!b.defined()) throw ShapeError("elementwise: binary op needs two operands");
      require_same(a, b, "elementwise");
      const auto bv = b.values();
      for (std::size_t i = 0; i < n; ++i) {
        out[i] = kind == Elementwise::add   ? av[i] + bv[i]
                 : kind == Elementwise::sub ? av[i] - bv[i]
                                            : av[i] * bv[i];
      }
      const char* name = kind == Elementwise::add   ? "add"
                         : kind == Elementwise::sub ? "sub"
                                                    : "mul";
      return make_op(name, a.shape(), std::move(out), {a, b},
                     [a, b, kind](std::span<const double> g, std::span<const double>) {
                       auto ga = grad_sink(a);
                       auto gb = grad_sink(b);
                       if (kind == Elementwise::mul) {
                         const auto av = a.values();
                         const auto bv = b.values();
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           if (!ga.empty()) ga[i] += g[i] * bv[i];
                           if (!gb.empty()) gb[i] += g[i] * av[i];
                         }
                         return;
                       }
                       const double sign = kind == Elementwise::sub ? -1.0 : 1.0;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         if (!ga.empty()) ga[i] += g[i];
                         if (!gb.empty()) gb[i] += sign * g[i];
                       }
                     });
    }
    case Elementwise::exp:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(av[i]);
      return make_op("exp", a.shape(), std::move(out), {a},
                     [a](std::span<const double> g, std::span<const double> y) {
                       auto ga = grad_sink(a);
                       for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
                     });
    case Elementwise::sigmoid:
      for (std::size_t i = 0; i < n; ++i) out[i] = sigmoid_scalar(av[i]);
      return make_op("sigmoid", a.shape(), std::move(out), {a},
                     [a](std::span<const double> g, std::span<const double> y) {
                       auto ga = grad_sink(a);
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         ga[i] += g[i] * y[i] * (1.0 - y[i]);
                       }
                     });
    case Elementwise::silu:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * sigmoid_scalar(av[i]);
      return make_op("silu", a.shape(), std::move(out), {a},
                     [a](std::span<const double> g, std::span<const double>) {
                       auto ga = grad_sink(a);
                       const auto x = a.values();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const double s = sigmoid_scalar(x[i]);
                         ga[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
                       }
                     });
    case Elementwise::scale:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * factor;
      return make_op("scale", a.shape(), std::move(out), {a},
                     [a, factor](std::span<const double> g, std::span<const double>) {
                       auto ga = grad_sink(a);
                       for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
                     });
  }
  throw std::logic_error("elementwise: unknown kind");
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(Elementwise::mul, a, b); }
Tensor exp(const Tensor& a) { return elementwise(Elementwise::exp, a); }
Tensor sigmoid(const Tensor& a) { return elementwise(Elementwise::sigmoid, a); }
Tensor silu(const Tensor& a) { return elementwise(Elementwise::silu, a); }
Tensor scale(const Tensor& a, double factor) {
  return elementwise(Elementwise::scale, a, {}, factor);
}

Tensor softmax_rows(const Tensor& a) {
  require_rank2(a, "softmax_rows");
  const auto m = a.rows(), n = a.cols();
  const auto av = a.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = av.data() + i * n;
    double* y = out.data() + i * n;
    const double mx = *std::max_element(x, x + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  return make_op("softmax_rows", a.shape(), std::move(out), {a},
                 [a, m, n](std::span<const double> g, std::span<const double> y) {
                   auto ga = grad_sink(a);
                   for (std::size_t i = 0; i < m; ++i) {
                     double dot = 0.0;
                     for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                     for (std::size_t j = 0; j < n; ++j) {
                       ga[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                     }
                   }
                 });
}

Tensor rows_l2_normalize(const Tensor& a, double eps) {
  require_rank2(a, "rows_l2_normalize");
  if (!(eps > 0)) throw std::invalid_argument("rows_l2_normalize: eps must be positive");
  const auto m = a.rows(), n = a.cols();
  const auto av = a.values();
  std::vector<double> out(m * n);
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += av[i * n + j] * av[i * n + j];
    norms[i] = std::sqrt(s);
    const double denom = std::max(norms[i], eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] / denom;
  }
  return make_op("rows_l2_normalize", a.shape(), std::move(out), {a},
                 [a, m, n, eps, norms = std::move(norms)](std::span<const double> g,
                                                          std::span<const double>) {
                   auto ga = grad_sink(a);
                   const auto x = a.values();
                   for (std::size_t i = 0; i < m; ++i) {
                     if (norms[i] < eps) {
                       for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i * n + j] / eps;
                       continue;
                     }
                     // Recompute the unit row in full precision for the projection.
                     double dot = 0.0;
                     for (std::size_t j = 0; j < n; ++j) {
                       dot += g[i * n + j] * x[i * n + j] / norms[i];
                     }
                     for (std::size_t j = 0; j < n; ++j) {
                       const double y = x[i * n + j] / norms[i];
                       ga[i * n + j] += (g[i * n + j] - y * dot) / norms[i];
                     }
                   }
                 });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_op("reshape", std::move(shape), std::move(out), {a},
                 [a](std::span<const double> g, std::span<const double>) {
                   auto ga = grad_sink(a);
                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                 });
}

Tensor expand_rows(const Tensor& v, std::size_t rows) {
  const bool ok = v.rank() == 1 || (v.rank() == 2 && v.shape()[0] == 1);
  if (!ok) throw ShapeError("expand_rows: expected a vector, got " + shape_str(v.shape()));
  const std::size_t n = v.numel();
  std::vector<double> out(rows * n);
  const auto vv = v.values();
  for (std::size_t i = 0; i < rows; ++i) std::copy(vv.begin(), vv.end(), out.begin() + i * n);
  return make_op("expand_rows", {rows, n}, std::move(out), {v},
                 [v, rows, n](std::span<const double> g, std::span<const double>) {
                   auto gv = grad_sink(v);
                   for (std::size_t i = 0; i < rows; ++i) {
                     for (std::size_t j = 0; j < n; ++j) gv[j] += g[i * n + j];
                   }
                 });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  require_rank2(a, "gather_rows");
  const auto m = a.rows(), n = a.cols();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * n);
  const auto av = a.values();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= m) throw ShapeError("gather_rows: row index out of range");
    std::copy_n(av.begin() + idx[i] * n, n, out.begin() + i * n);
  }
  const auto k = idx.size();
  return make_op("gather_rows", {k, n}, std::move(out), {a},
                 [a, n, idx = std::move(idx)](std::span<const double> g,
                                              std::span<const double>) {
                   auto ga = grad_sink(a);
                   for (std::size_t i = 0; i < idx.size(); ++i) {
                     for (std::size_t j = 0; j < n; ++j) ga[idx[i] * n + j] += g[i * n + j];
                   }
                 });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return make_op("sum", {}, {s}, {a}, [a](std::span<const double> g, std::span<const double>) {
    auto ga = grad_sink(a);
    for (double& x : ga) x += g[0];
  });
}

Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.numel());
  double s = 0.0;
  for (double v : a.values()) s += v;
  return make_op("mean", {}, {s * inv}, {a},
                 [a, inv](std::span<const double> g, std::span<const double>) {
                   auto ga = grad_sink(a);
                   for (double& x : ga) x += g[0] * inv;
                 });
}

// ---- gradient checking ----------------------------------------------------

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps) {
  Tensor leaf = x.detach();
  leaf.set_requires_grad(true);
  return grad_check_leaves([&] { return f(leaf); }, {leaf}, eps);
}

double grad_check_leaves(const std::function<Tensor()>& f, const std::vector<Tensor>& leaves,
                         double eps) {
  if (!(eps > 0)) throw std::invalid_argument("grad_check: step must be positive");
  if (g_precision != Precision::f64) {
    throw std::logic_error("grad_check: requires f64 precision mode");
  }
  std::vector<Tensor> params = leaves;
  for (auto& p : params) {
    if (!p.requires_grad()) throw std::invalid_argument("grad_check: leaf is not tracked");
    p.zero_grad();
  }
  backward(f());
  double worst = 0.0;
  NoGradGuard no_grad;
  for (auto& p : params) {
    const auto analytic = p.grad();
    auto vals = p.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + eps;
      const double fp = f().item();
      vals[i] = orig - eps;
      const double fm = f().item();
      vals[i] = orig;
      const double cd = (fp - fm) / (2.0 * eps);
      const double denom = std::max({std::abs(analytic[i]), std::abs(cd), 1e-8});
      worst = std::max(worst, std::abs(analytic[i] - cd) / denom);
    }
  }
  return worst;
}

}  // namespace arwkv

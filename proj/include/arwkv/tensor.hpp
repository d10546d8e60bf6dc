#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace arwkv {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Global numeric mode. Values are stored as doubles; in f32 mode every
/// produced value (forward, gradient, optimizer update) is rounded to the
/// nearest binary32, so the run behaves as a 32-bit run.
enum class Precision { f32, f64 };

Precision run_precision();
void set_run_precision(Precision p);
/// Applies ARWKV_PRECISION (f32 | f64) when set; throws on anything else.
void init_precision_from_env();

double quantize(double v);
void quantize(std::span<double> values);

/// When enabled every op output is scanned and a NonFiniteError is thrown.
void set_check_finite(bool enabled);
bool check_finite();

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {
struct Node;
}

/// Receives the output gradient and the output values.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<const double> out)>;

/// Handle to a dense row-major array with an optional gradient slot.
/// Copies share storage; use clone() for an independent leaf.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  /// Only leaves (tensors without recorded history) may be written.
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  /// Gradient accumulated so far; zeros when nothing has been accumulated.
  std::vector<double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  Tensor detach() const;
  Tensor clone() const;

  std::uint64_t sequence() const;
  const char* op_name() const;
  detail::Node* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_op(const char*, Shape, std::vector<double>,
                        const std::vector<Tensor>&, BackwardFn);
  friend class Graph;
};

/// Records an operation. `backward` receives the output gradient and must
/// accumulate into the inputs through grad_sink(). History is only kept when
/// grad mode is on and some input requires a gradient.
Tensor make_op(const char* name, Shape shape, std::vector<double> values,
               const std::vector<Tensor>& inputs, BackwardFn backward);

/// Mutable gradient of `t`, or an empty span when `t` is not tracked.
std::span<double> grad_sink(const Tensor& t);

/// Recorded operations reachable from a root, in execution order.
class Graph {
 public:
  static Graph collect(const Tensor& root);
  std::size_t size() const { return nodes_.size(); }
  std::vector<std::string> op_names() const;
  /// Seeds d(root)/d(root) = 1 and visits every node once in reverse order.
  void backward(const Tensor& root) const;

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

/// Accumulates gradients of a scalar loss into every tracked tensor. Calling
/// twice without zero_grad() accumulates twice.
void backward(const Tensor& loss);

/// Normal(0, stddev) leaf drawn from `rng`.
Tensor randn(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad = true);

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);

enum class Elementwise { add, sub, mul, exp, sigmoid, silu, scale };

/// Binary kinds require `b` with the same shape; `scale` multiplies by
/// `factor`; unary kinds ignore `b`.
Tensor elementwise(Elementwise kind, const Tensor& a, const Tensor& b = {},
                   double factor = 1.0);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor exp(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor scale(const Tensor& a, double factor);

Tensor softmax_rows(const Tensor& a);
/// y = x / max(|x|, eps) per row.
Tensor rows_l2_normalize(const Tensor& a, double eps);

Tensor reshape(const Tensor& a, Shape shape);
/// [n] or [1 x n] repeated to [rows x n].
Tensor expand_rows(const Tensor& v, std::size_t rows);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Maximum over coordinates of |analytic - central difference| /
/// max(|analytic|, |cd|, 1e-8). Requires f64 mode and eps > 0.
double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double eps);

/// Same check, perturbing the given leaves in place (restored afterwards).
double grad_check_leaves(const std::function<Tensor()>& f,
                         const std::vector<Tensor>& leaves, double eps);

}  // namespace arwkv

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "comet/error.hpp"
#include "comet/random.hpp"

namespace comet {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

Index shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Multiply-add with a single rounding when the target has FMA, plain
/// multiply then add otherwise. Every accumulation in the kernels goes
/// through this so that result bits only depend on the summation order.
template <typename Scalar>
inline Scalar fused_madd(Scalar a, Scalar b, Scalar c) {
#ifdef __FMA__
  return std::fma(a, b, c);
#else
  return a * b + c;
#endif
}

enum class OpKind {
  leaf,
  embed_lookup,
  reshape,
  conv_full_height,
  conv2d,
  affine,
  relu,
  tanh,
  sigmoid,
  mul,
  add,
  concat,
  dot,
  dropout,
  mask_rows,
  bce_loss,
  sum_squares,
  scale,
};

const char* op_name(OpKind op);

/// Storage plus the record needed to push gradients back to the inputs.
/// Leaves (parameters, constants) have no inputs and no backward function.
template <typename Scalar>
struct TapeNode {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Vector values;
  Vector grad;  // empty until a gradient reaches this node
  bool tracked = false;
  OpKind op = OpKind::leaf;
  std::vector<std::shared_ptr<TapeNode>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads. Forward
  // context (masks, index lists, shapes) lives in the closure.
  std::function<void(TapeNode&)> backward;

  Vector& ensure_grad() {
    if (grad.size() != values.size()) grad = Vector::Zero(values.size());
    return grad;
  }
};

/// Dense row-major array taking part in reverse-mode differentiation.
///
/// A Tensor is a handle: copies alias the same storage and graph node, which
/// is what lets parameters collect gradients from every expression that reads
/// them. Use clone() for an independent copy.
template <typename Scalar>
class Tensor {
 public:
  using Node = TapeNode<Scalar>;
  using Vector = typename Node::Vector;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool tracked = false);
  static Tensor full(Shape shape, Scalar value, bool tracked = false);
  static Tensor from_values(Shape shape, std::vector<Scalar> values, bool tracked = false);
  static Tensor scalar(Scalar value, bool tracked = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index axis) const { return node_->shape.at(static_cast<std::size_t>(axis)); }
  Index size() const { return node_->values.size(); }

  Vector& values() { return node_->values; }
  const Vector& values() const { return node_->values; }
  Scalar* data() { return node_->values.data(); }
  const Scalar* data() const { return node_->values.data(); }
  Scalar item() const;

  /// View as rows x cols where cols is the last dimension.
  MatrixMap matrix();
  ConstMatrixMap matrix() const;

  bool tracked() const { return node_->tracked; }
  void set_tracked(bool tracked) { node_->tracked = tracked; }
  bool is_leaf() const { return node_->op == OpKind::leaf; }
  OpKind op() const { return node_->op; }

  bool has_grad() const { return node_->grad.size() == node_->values.size(); }
  Vector& grad() { return node_->ensure_grad(); }
  const Vector& grad() const { return node_->ensure_grad(); }
  void zero_grad();

  Tensor clone() const;
  Tensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// ---------------------------------------------------------------------------
// Operations. Each returns a fresh tensor; when any input is tracked, the
// result is tracked and records how to propagate gradients.

/// Rows of `table` [R x K] selected by `ids`, giving [B x K]. Backward
/// scatter-adds into the referenced rows only.
template <typename Scalar>
Tensor<Scalar> embed_lookup(const Tensor<Scalar>& table, std::span<const std::int32_t> ids);

/// Same values, new shape of equal size.
template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape);

/// Convolution whose kernels span every row of the map and slide across the
/// columns with stride 1 and no padding.
///
/// map is [H x K] or a batch [B x H x K]; kernels are [C x H x w]; bias is
/// [C]. Output is [C x (K-w+1)] (or [B x C x (K-w+1)]) with
///
///   out[c][t] = (sum over r < H, s < w of kernels[c][r][s] * map[r][t+s]) + bias[c]
///
/// accumulated in row-major kernel order (r outer, s inner) from zero, each
/// term applied with fused_madd, bias added last. No activation is applied.
template <typename Scalar>
Tensor<Scalar> conv_full_height(const Tensor<Scalar>& map, const Tensor<Scalar>& kernels,
                                const Tensor<Scalar>& bias);

/// Valid 2-D convolution with equal stride in both directions.
/// x [B x Cin x H x W], kernels [Cout x Cin x kh x kw], bias [Cout].
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& kernels,
                      const Tensor<Scalar>& bias, Index stride);

/// x [B x D_in] (or [D_in]), weight [D_out x D_in], bias [D_out].
/// Each output is the sum over inputs in increasing index order, bias last.
template <typename Scalar>
Tensor<Scalar> affine(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias);

/// max(x, 0); the subgradient at exactly 0 is 0.
template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> tanh(const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x);

template <typename Scalar>
Tensor<Scalar> elementwise_mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar factor);

/// Join along `axis`; all other dimensions must agree.
template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, Index axis);

/// h [K] against x [K] gives a scalar; against x [B x K] gives [B].
template <typename Scalar>
Tensor<Scalar> dot(const Tensor<Scalar>& h, const Tensor<Scalar>& x);

/// Inverted dropout: in training mode every entry is zeroed with
/// probability `rate` and survivors are scaled by 1/(1-rate). Identity
/// otherwise.
template <typename Scalar>
Tensor<Scalar> dropout(const Tensor<Scalar>& x, double rate, bool training, Rng& rng);

/// Zero the rows (leading index) whose keep flag is 0.
template <typename Scalar>
Tensor<Scalar> mask_rows(const Tensor<Scalar>& x, std::span<const std::uint8_t> keep);

/// Sum over samples of -[y log p + (1-y) log(1-p)], with p clamped to
/// [1e-7, 1-1e-7]. Returns a scalar.
template <typename Scalar>
Tensor<Scalar> bce_loss(const Tensor<Scalar>& probabilities, const Tensor<Scalar>& labels);

/// Sum of squared entries over all given tensors (scalar).
template <typename Scalar>
Tensor<Scalar> sum_squares(const std::vector<Tensor<Scalar>>& tensors);

/// Propagate d loss / d x into every tracked tensor the scalar `loss`
/// depends on. Leaf gradients accumulate across calls; intermediate
/// gradients are recomputed each call.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss);

inline constexpr double kBceClamp = 1e-7;

}  // namespace comet

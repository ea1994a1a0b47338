#include "comet/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "kernels.hpp"

namespace comet {

Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? " x " : "") << shape[i];
  os << ']';
  return os.str();
}

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::leaf: return "leaf";
    case OpKind::embed_lookup: return "embed_lookup";
    case OpKind::reshape: return "reshape";
    case OpKind::conv_full_height: return "conv_full_height";
    case OpKind::conv2d: return "conv2d";
    case OpKind::affine: return "affine";
    case OpKind::relu: return "relu";
    case OpKind::tanh: return "tanh";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::mul: return "elementwise_mul";
    case OpKind::add: return "add";
    case OpKind::concat: return "concat";
    case OpKind::dot: return "dot";
    case OpKind::dropout: return "dropout";
    case OpKind::mask_rows: return "mask_rows";
    case OpKind::bce_loss: return "bce_loss";
    case OpKind::sum_squares: return "sum_squares";
    case OpKind::scale: return "scale";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Tensor members

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(Shape shape, bool tracked) {
  return full(std::move(shape), Scalar(0), tracked);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::full(Shape shape, Scalar value, bool tracked) {
  for (Index d : shape)
    if (d < 1) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
  auto node = std::make_shared<Node>();
  node->values = Vector::Constant(shape_size(shape), value);
  node->shape = std::move(shape);
  node->tracked = tracked;
  return Tensor(std::move(node));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from_values(Shape shape, std::vector<Scalar> values, bool tracked) {
  if (static_cast<Index>(values.size()) != shape_size(shape))
    throw ShapeError("from_values: " + std::to_string(values.size()) + " values for shape " +
                     shape_string(shape));
  Tensor t = zeros(std::move(shape), tracked);
  std::copy(values.begin(), values.end(), t.data());
  return t;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar value, bool tracked) {
  return full({}, value, tracked);
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return node_->values[0];
}

template <typename Scalar>
typename Tensor<Scalar>::MatrixMap Tensor<Scalar>::matrix() {
  const Index cols = rank() == 0 ? 1 : shape().back();
  return MatrixMap(data(), size() / cols, cols);
}

template <typename Scalar>
typename Tensor<Scalar>::ConstMatrixMap Tensor<Scalar>::matrix() const {
  const Index cols = rank() == 0 ? 1 : shape().back();
  return ConstMatrixMap(data(), size() / cols, cols);
}

template <typename Scalar>
void Tensor<Scalar>::zero_grad() {
  node_->grad = Vector::Zero(node_->values.size());
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::clone() const {
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->values = node_->values;
  node->tracked = node_->tracked;
  return Tensor(std::move(node));
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  Tensor t = clone();
  t.set_tracked(false);
  return t;
}

template class Tensor<float>;
template class Tensor<double>;

// ---------------------------------------------------------------------------
// Helpers

namespace {

template <typename Scalar>
using NodePtr = std::shared_ptr<TapeNode<Scalar>>;

/// Fresh zero-filled result; records inputs only when one of them is tracked.
template <typename Scalar>
Tensor<Scalar> make_result(Shape shape, OpKind op, std::vector<NodePtr<Scalar>> inputs) {
  auto node = std::make_shared<TapeNode<Scalar>>();
  node->values = TapeNode<Scalar>::Vector::Zero(shape_size(shape));
  node->shape = std::move(shape);
  node->op = op;
  node->tracked = std::any_of(inputs.begin(), inputs.end(),
                              [](const NodePtr<Scalar>& n) { return n->tracked; });
  if (node->tracked) node->inputs = std::move(inputs);
  return Tensor<Scalar>(std::move(node));
}

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
}

template <typename Scalar>
void require_rank(const Tensor<Scalar>& t, Index rank, const char* op, const char* what) {
  if (t.rank() != rank)
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + shape_string(t.shape()));
}

/// Input i of a recorded node, or nullptr when it does not need a gradient.
template <typename Scalar>
TapeNode<Scalar>* grad_target(TapeNode<Scalar>& self, std::size_t i) {
  TapeNode<Scalar>* in = self.inputs[i].get();
  if (!in->tracked) return nullptr;
  in->ensure_grad();
  return in;
}

}  // namespace

// ---------------------------------------------------------------------------
// embed_lookup

template <typename Scalar>
Tensor<Scalar> embed_lookup(const Tensor<Scalar>& table, std::span<const std::int32_t> ids) {
  require_rank(table, 2, "embed_lookup", "table");
  const Index rows = table.dim(0);
  const Index width = table.dim(1);
  for (std::int32_t id : ids)
    if (id < 0 || id >= rows)
      throw IndexError("embed_lookup: id " + std::to_string(id) + " outside [0, " +
                       std::to_string(rows) + ")");
  const Index count = static_cast<Index>(ids.size());
  if (count == 0) throw ShapeError("embed_lookup: empty id list");

  auto out = make_result<Scalar>({count, width}, OpKind::embed_lookup, {table.node()});
  const Scalar* src = table.data();
  Scalar* dst = out.data();
  for (Index b = 0; b < count; ++b)
    std::copy_n(src + ids[static_cast<std::size_t>(b)] * width, width, dst + b * width);

  if (out.tracked()) {
    std::vector<std::int32_t> saved(ids.begin(), ids.end());
    out.node()->backward = [saved = std::move(saved), width](TapeNode<Scalar>& self) {
      auto* t = grad_target(self, 0);
      if (!t) return;
      const Scalar* g = self.grad.data();
      Scalar* tg = t->grad.data();
      for (std::size_t b = 0; b < saved.size(); ++b) {
        Scalar* row = tg + saved[b] * width;
        const Scalar* grow = g + static_cast<Index>(b) * width;
        for (Index k = 0; k < width; ++k) row[k] += grow[k];
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// reshape

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  if (shape_size(shape) != x.size())
    throw ShapeError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                     shape_string(shape));
  auto out = make_result<Scalar>(std::move(shape), OpKind::reshape, {x.node()});
  out.values() = x.values();
  if (out.tracked()) {
    out.node()->backward = [](TapeNode<Scalar>& self) {
      if (auto* t = grad_target(self, 0)) t->grad += self.grad;
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv_full_height

template <typename Scalar>
Tensor<Scalar> conv_full_height(const Tensor<Scalar>& map, const Tensor<Scalar>& kernels,
                                const Tensor<Scalar>& bias) {
  if (map.rank() != 2 && map.rank() != 3)
    throw ShapeError("conv_full_height: map must be [H x K] or [B x H x K], got " +
                     shape_string(map.shape()));
  require_rank(kernels, 3, "conv_full_height", "kernels");
  require_rank(bias, 1, "conv_full_height", "bias");
  const bool batched = map.rank() == 3;
  const Index batch = batched ? map.dim(0) : 1;
  const Index height = map.dim(batched ? 1 : 0);
  const Index dims = map.dim(batched ? 2 : 1);
  const Index channels = kernels.dim(0);
  const Index width = kernels.dim(2);
  if (kernels.dim(1) != height)
    throw ShapeError("conv_full_height: kernel height " + std::to_string(kernels.dim(1)) +
                     " != map height " + std::to_string(height));
  if (width < 1 || width > dims)
    throw ShapeError("conv_full_height: kernel width " + std::to_string(width) +
                     " outside [1, " + std::to_string(dims) + "]");
  if (bias.dim(0) != channels)
    throw ShapeError("conv_full_height: bias length " + std::to_string(bias.dim(0)) +
                     " != channels " + std::to_string(channels));
  const Index positions = dims - width + 1;
  const Index map_stride = height * dims;
  const Index out_stride = channels * positions;
  const Index taps = height * width;

  Shape out_shape = batched ? Shape{batch, channels, positions} : Shape{channels, positions};
  auto out = make_result<Scalar>(std::move(out_shape), OpKind::conv_full_height,
                                 {map.node(), kernels.node(), bias.node()});

  // Two layouts with identical per-element arithmetic (zero start, taps in
  // row-major kernel order, bias last). Wide outputs are computed one sample
  // at a time straight from the map; narrow outputs (wide kernels) use the
  // batch as the vector dimension over a transposed copy of the maps.
  const bool per_sample = positions >= 16;
  const Scalar* bias_values = bias.data();
  std::vector<Index> tap_offsets(static_cast<std::size_t>(taps));
  for (Index r = 0; r < height; ++r)
    for (Index s = 0; s < width; ++s) tap_offsets[static_cast<std::size_t>(r * width + s)] = r * dims + s;

  if (per_sample) {
    const std::vector<Index> kernel_offsets = kernels::strided_offsets(taps, 1);
    for (Index b = 0; b < batch; ++b) {
      kernels::Gemm<Scalar> g;
      g.m = channels;
      g.n = positions;
      g.k = taps;
      g.a = kernels.data();
      g.a_row_stride = taps;
      g.a_offsets = kernel_offsets.data();
      g.b = map.data() + b * map_stride;
      g.b_offsets = tap_offsets.data();
      g.c = out.data() + b * out_stride;
      g.c_row_stride = positions;
      kernels::gemm(g);
    }
  } else {
    std::vector<Scalar> maps_t(static_cast<std::size_t>(map_stride * batch));
    kernels::transpose(batch, map_stride, map.data(), maps_t.data());
    std::vector<Index> map_offsets(tap_offsets);
    for (Index& o : map_offsets) o *= batch;
    const std::vector<Index> kernel_offsets = kernels::strided_offsets(taps, 1);
    std::vector<Scalar> sums(static_cast<std::size_t>(channels * batch));
    for (Index t = 0; t < positions; ++t) {
      std::fill(sums.begin(), sums.end(), Scalar(0));
      kernels::Gemm<Scalar> g;
      g.m = channels;
      g.n = batch;
      g.k = taps;
      g.a = kernels.data();
      g.a_row_stride = taps;
      g.a_offsets = kernel_offsets.data();
      g.b = maps_t.data() + t * batch;
      g.b_offsets = map_offsets.data();
      g.c = sums.data();
      g.c_row_stride = batch;
      kernels::gemm(g);
      for (Index c = 0; c < channels; ++c)
        for (Index b = 0; b < batch; ++b)
          out.data()[b * out_stride + c * positions + t] = sums[static_cast<std::size_t>(c * batch + b)];
    }
  }
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < channels; ++c) {
      Scalar* row = out.data() + b * out_stride + c * positions;
      for (Index t = 0; t < positions; ++t) row[t] += bias_values[c];
    }

  if (out.tracked()) {
    out.node()->backward = [=](TapeNode<Scalar>& self) {
      const Scalar* dout = self.grad.data();
      const Scalar* map_values = self.inputs[0]->values.data();
      const Scalar* kernel_values = self.inputs[1]->values.data();

      if (auto* db = grad_target(self, 2)) {
        for (Index c = 0; c < channels; ++c) {
          Scalar acc = db->grad[c];
          for (Index b = 0; b < batch; ++b)
            for (Index t = 0; t < positions; ++t) acc += dout[b * out_stride + c * positions + t];
          db->grad[c] = acc;
        }
      }
      auto* dk = grad_target(self, 1);
      auto* dm = grad_target(self, 0);

      if (per_sample) {
        // dK[c][r][s] = sum over (b, t) of dout[b][c][t] * map[b][r][t + s]:
        // per sample and shift, a [C x T] by [T x H'] product against the map
        // transposed to [K x H'] (H' = H padded to whole vector registers).
        const Index lanes = kernels::kLanes<Scalar>;
        const Index padded = (height + lanes - 1) / lanes * lanes;
        std::vector<Scalar> map_t(static_cast<std::size_t>(dims * padded), Scalar(0));
        std::vector<Scalar> dk_sums;
        if (dk) dk_sums.assign(static_cast<std::size_t>(width * channels * padded), Scalar(0));
        const std::vector<Index> t_offsets = kernels::strided_offsets(positions, 1);
        const std::vector<Index> t_rows = kernels::strided_offsets(positions, padded);

        // dmap[b][r][j] = sum over (c, s) of K[c][r][s] * dout[b][c][j - s],
        // read from a per-sample copy of dout with w-1 leading zeros and
        // zeros past T.
        const Index lead = width - 1;
        const Index len = lead + dims;
        std::vector<Scalar> dout_pad(static_cast<std::size_t>(channels * len), Scalar(0));
        std::vector<Index> cs_a_offsets(static_cast<std::size_t>(channels * width));
        std::vector<Index> cs_b_offsets(static_cast<std::size_t>(channels * width));
        for (Index c = 0; c < channels; ++c)
          for (Index s = 0; s < width; ++s) {
            cs_a_offsets[static_cast<std::size_t>(c * width + s)] = c * taps + s;
            cs_b_offsets[static_cast<std::size_t>(c * width + s)] = c * len + lead - s;
          }

        for (Index b = 0; b < batch; ++b) {
          const Scalar* db_out = dout + b * out_stride;
          if (dk) {
            const Scalar* mb = map_values + b * map_stride;
            for (Index r = 0; r < height; ++r)
              for (Index j = 0; j < dims; ++j)
                map_t[static_cast<std::size_t>(j * padded + r)] = mb[r * dims + j];
            for (Index s = 0; s < width; ++s) {
              kernels::Gemm<Scalar> g;
              g.m = channels;
              g.n = padded;
              g.k = positions;
              g.a = db_out;
              g.a_row_stride = positions;
              g.a_offsets = t_offsets.data();
              g.b = map_t.data() + s * padded;
              g.b_offsets = t_rows.data();
              g.c = dk_sums.data() + s * channels * padded;
              g.c_row_stride = padded;
              kernels::gemm(g);
            }
          }
          if (dm) {
            for (Index c = 0; c < channels; ++c)
              std::copy_n(db_out + c * positions, positions, dout_pad.data() + c * len + lead);
            kernels::Gemm<Scalar> g;
            g.m = height;
            g.n = dims;
            g.k = channels * width;
            g.a = kernel_values;
            g.a_row_stride = width;
            g.a_offsets = cs_a_offsets.data();
            g.b = dout_pad.data();
            g.b_offsets = cs_b_offsets.data();
            g.c = dm->grad.data() + b * map_stride;
            g.c_row_stride = dims;
            kernels::gemm(g);
          }
        }
        if (dk)
          for (Index s = 0; s < width; ++s)
            for (Index c = 0; c < channels; ++c)
              for (Index r = 0; r < height; ++r)
                dk->grad[(c * height + r) * width + s] +=
                    dk_sums[static_cast<std::size_t>((s * channels + c) * padded + r)];
        return;
      }

      // Narrow outputs: the batch is the vector dimension.
      if (dk) {
        // dK[c][r][:] += sum over b of dout[b][c][t] * map[b][r][t : t + w]
        const std::vector<Index> a_offsets = kernels::strided_offsets(batch, out_stride);
        const std::vector<Index> b_offsets = kernels::strided_offsets(batch, map_stride);
        for (Index t = 0; t < positions; ++t)
          for (Index r = 0; r < height; ++r) {
            kernels::Gemm<Scalar> g;
            g.m = channels;
            g.n = width;
            g.k = batch;
            g.a = dout + t;
            g.a_row_stride = positions;
            g.a_offsets = a_offsets.data();
            g.b = map_values + r * dims + t;
            g.b_offsets = b_offsets.data();
            g.c = dk->grad.data() + r * width;
            g.c_row_stride = taps;
            kernels::gemm(g);
          }
      }
      if (dm) {
        // dmapT[r][t + s][b] += sum over c of K[c][r][s] * doutT[t][c][b]
        std::vector<Scalar> dout_t(static_cast<std::size_t>(positions * channels * batch));
        for (Index b = 0; b < batch; ++b)
          for (Index c = 0; c < channels; ++c)
            for (Index t = 0; t < positions; ++t)
              dout_t[static_cast<std::size_t>((t * channels + c) * batch + b)] =
                  dout[b * out_stride + c * positions + t];
        std::vector<Scalar> dmap_t(static_cast<std::size_t>(map_stride * batch), Scalar(0));
        const std::vector<Index> a_offsets = kernels::strided_offsets(channels, taps);
        const std::vector<Index> b_offsets = kernels::strided_offsets(channels, batch);
        for (Index t = 0; t < positions; ++t)
          for (Index r = 0; r < height; ++r) {
            kernels::Gemm<Scalar> g;
            g.m = width;
            g.n = batch;
            g.k = channels;
            g.a = kernel_values + r * width;
            g.a_row_stride = 1;
            g.a_offsets = a_offsets.data();
            g.b = dout_t.data() + t * channels * batch;
            g.b_offsets = b_offsets.data();
            g.c = dmap_t.data() + (r * dims + t) * batch;
            g.c_row_stride = batch;
            kernels::gemm(g);
          }
        kernels::transpose<Scalar, true>(map_stride, batch, dmap_t.data(), dm->grad.data());
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& kernels,
                      const Tensor<Scalar>& bias, Index stride) {
  require_rank(x, 4, "conv2d", "input");
  require_rank(kernels, 4, "conv2d", "kernels");
  require_rank(bias, 1, "conv2d", "bias");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  const Index batch = x.dim(0), cin = x.dim(1), height = x.dim(2), width = x.dim(3);
  const Index cout = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kernels.dim(1) != cin)
    throw ShapeError("conv2d: kernel input channels " + std::to_string(kernels.dim(1)) +
                     " != " + std::to_string(cin));
  if (bias.dim(0) != cout) throw ShapeError("conv2d: bias length mismatch");
  if (kh > height || kw > width)
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " larger than input " + std::to_string(height) + "x" + std::to_string(width));
  const Index oh = (height - kh) / stride + 1;
  const Index ow = (width - kw) / stride + 1;

  auto out = make_result<Scalar>({batch, cout, oh, ow}, OpKind::conv2d,
                                 {x.node(), kernels.node(), bias.node()});
  auto in_at = [=](Index b, Index c, Index i, Index j) {
    return ((b * cin + c) * height + i) * width + j;
  };
  auto k_at = [=](Index o, Index c, Index i, Index j) { return ((o * cin + c) * kh + i) * kw + j; };
  auto out_at = [=](Index b, Index o, Index i, Index j) { return ((b * cout + o) * oh + i) * ow + j; };

  const Scalar* xv = x.data();
  const Scalar* kv = kernels.data();
  Scalar* ov = out.data();
  for (Index b = 0; b < batch; ++b)
    for (Index o = 0; o < cout; ++o)
      for (Index y = 0; y < oh; ++y)
        for (Index z = 0; z < ow; ++z) {
          Scalar acc = 0;
          for (Index c = 0; c < cin; ++c)
            for (Index i = 0; i < kh; ++i)
              for (Index j = 0; j < kw; ++j)
                acc = fused_madd(kv[k_at(o, c, i, j)], xv[in_at(b, c, y * stride + i, z * stride + j)], acc);
          ov[out_at(b, o, y, z)] = acc + bias.data()[o];
        }

  if (out.tracked()) {
    out.node()->backward = [=](TapeNode<Scalar>& self) {
      const Scalar* g = self.grad.data();
      const Scalar* xval = self.inputs[0]->values.data();
      const Scalar* kval = self.inputs[1]->values.data();
      auto* dx = grad_target(self, 0);
      auto* dk = grad_target(self, 1);
      auto* db = grad_target(self, 2);
      for (Index b = 0; b < batch; ++b)
        for (Index o = 0; o < cout; ++o)
          for (Index y = 0; y < oh; ++y)
            for (Index z = 0; z < ow; ++z) {
              const Scalar go = g[out_at(b, o, y, z)];
              if (db) db->grad[o] += go;
              for (Index c = 0; c < cin; ++c)
                for (Index i = 0; i < kh; ++i)
                  for (Index j = 0; j < kw; ++j) {
                    const Index xi = in_at(b, c, y * stride + i, z * stride + j);
                    const Index ki = k_at(o, c, i, j);
                    if (dk) dk->grad[ki] = fused_madd(go, xval[xi], dk->grad[ki]);
                    if (dx) dx->grad[xi] = fused_madd(go, kval[ki], dx->grad[xi]);
                  }
            }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// affine

template <typename Scalar>
Tensor<Scalar> affine(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias) {
  if (x.rank() != 1 && x.rank() != 2)
    throw ShapeError("affine: input must be [D] or [B x D], got " + shape_string(x.shape()));
  require_rank(weight, 2, "affine", "weight");
  require_rank(bias, 1, "affine", "bias");
  const Index batch = x.rank() == 2 ? x.dim(0) : 1;
  const Index in = x.shape().back();
  const Index out_dim = weight.dim(0);
  if (weight.dim(1) != in)
    throw ShapeError("affine: weight " + shape_string(weight.shape()) + " does not accept input " +
                     shape_string(x.shape()));
  if (bias.dim(0) != out_dim)
    throw ShapeError("affine: bias " + shape_string(bias.shape()) + " does not match weight " +
                     shape_string(weight.shape()));

  Shape out_shape = x.rank() == 2 ? Shape{batch, out_dim} : Shape{out_dim};
  auto out = make_result<Scalar>(std::move(out_shape), OpKind::affine,
                                 {x.node(), weight.node(), bias.node()});

  using RowMatrix = typename Tensor<Scalar>::RowMatrix;
  const RowMatrix transposed = weight.matrix().transpose();
  std::vector<Index> in_offsets = kernels::strided_offsets(in, 1);
  std::vector<Index> row_offsets = kernels::strided_offsets(in, out_dim);
  kernels::Gemm<Scalar> g;
  g.m = batch;
  g.n = out_dim;
  g.k = in;
  g.a = x.data();
  g.a_row_stride = in;
  g.a_offsets = in_offsets.data();
  g.b = transposed.data();
  g.b_offsets = row_offsets.data();
  g.c = out.data();
  g.c_row_stride = out_dim;
  kernels::gemm(g);
  for (Index b = 0; b < batch; ++b)
    for (Index o = 0; o < out_dim; ++o) out.data()[b * out_dim + o] += bias.data()[o];

  if (out.tracked()) {
    out.node()->backward = [=](TapeNode<Scalar>& self) {
      const Scalar* dout = self.grad.data();
      if (auto* dx = grad_target(self, 0)) {
        std::vector<Index> a_off = kernels::strided_offsets(out_dim, 1);
        std::vector<Index> b_off = kernels::strided_offsets(out_dim, in);
        kernels::Gemm<Scalar> gx;
        gx.m = batch;
        gx.n = in;
        gx.k = out_dim;
        gx.a = dout;
        gx.a_row_stride = out_dim;
        gx.a_offsets = a_off.data();
        gx.b = self.inputs[1]->values.data();
        gx.b_offsets = b_off.data();
        gx.c = dx->grad.data();
        gx.c_row_stride = in;
        kernels::gemm(gx);
      }
      if (auto* dw = grad_target(self, 1)) {
        std::vector<Index> a_off = kernels::strided_offsets(batch, out_dim);
        std::vector<Index> b_off = kernels::strided_offsets(batch, in);
        kernels::Gemm<Scalar> gw;
        gw.m = out_dim;
        gw.n = in;
        gw.k = batch;
        gw.a = dout;
        gw.a_row_stride = 1;
        gw.a_offsets = a_off.data();
        gw.b = self.inputs[0]->values.data();
        gw.b_offsets = b_off.data();
        gw.c = dw->grad.data();
        gw.c_row_stride = in;
        kernels::gemm(gw);
      }
      if (auto* db = grad_target(self, 2)) {
        for (Index o = 0; o < out_dim; ++o) {
          Scalar acc = db->grad[o];
          for (Index b = 0; b < batch; ++b) acc += dout[b * out_dim + o];
          db->grad[o] = acc;
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  auto out = make_result<Scalar>(x.shape(), OpKind::relu, {x.node()});
  out.values() = x.values().cwiseMax(Scalar(0));
  if (out.tracked()) {
    out.node()->backward = [](TapeNode<Scalar>& self) {
      auto* t = grad_target(self, 0);
      if (!t) return;
      const auto& in = self.inputs[0]->values;
      for (Index i = 0; i < in.size(); ++i)
        if (in[i] > Scalar(0)) t->grad[i] += self.grad[i];
    };
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> tanh(const Tensor<Scalar>& x) {
  auto out = make_result<Scalar>(x.shape(), OpKind::tanh, {x.node()});
  for (Index i = 0; i < x.size(); ++i) out.values()[i] = std::tanh(x.values()[i]);
  if (out.tracked()) {
    out.node()->backward = [](TapeNode<Scalar>& self) {
      auto* t = grad_target(self, 0);
      if (!t) return;
      for (Index i = 0; i < self.values.size(); ++i) {
        const Scalar y = self.values[i];
        t->grad[i] += self.grad[i] * (Scalar(1) - y * y);
      }
    };
  }
  return out;
}

namespace {
template <typename Scalar>
Scalar logistic(Scalar z) {
  if (z >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-z));
  const Scalar e = std::exp(z);
  return e / (Scalar(1) + e);
}
}  // namespace

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  auto out = make_result<Scalar>(x.shape(), OpKind::sigmoid, {x.node()});
  for (Index i = 0; i < x.size(); ++i) out.values()[i] = logistic(x.values()[i]);
  if (out.tracked()) {
    out.node()->backward = [](TapeNode<Scalar>& self) {
      auto* t = grad_target(self, 0);
      if (!t) return;
      for (Index i = 0; i < self.values.size(); ++i) {
        const Scalar y = self.values[i];
        t->grad[i] += self.grad[i] * y * (Scalar(1) - y);
      }
    };
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> elementwise_mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a, b, "elementwise_mul");
  auto out = make_result<Scalar>(a.shape(), OpKind::mul, {a.node(), b.node()});
  out.values() = a.values().cwiseProduct(b.values());
  if (out.tracked()) {
    out.node()->backward = [](TapeNode<Scalar>& self) {
      if (auto* ta = grad_target(self, 0))
        ta->grad += self.grad.cwiseProduct(self.inputs[1]->values);
      if (auto* tb = grad_target(self, 1))
        tb->grad += self.grad.cwiseProduct(self.inputs[0]->values);
    };
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a, b, "add");
  auto out = make_result<Scalar>(a.shape(), OpKind::add, {a.node(), b.node()});
  out.values() = a.values() + b.values();
  if (out.tracked()) {
    out.node()->backward = [](TapeNode<Scalar>& self) {
      if (auto* ta = grad_target(self, 0)) ta->grad += self.grad;
      if (auto* tb = grad_target(self, 1)) tb->grad += self.grad;
    };
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar factor) {
  auto out = make_result<Scalar>(x.shape(), OpKind::scale, {x.node()});
  out.values() = x.values() * factor;
  if (out.tracked()) {
    out.node()->backward = [factor](TapeNode<Scalar>& self) {
      if (auto* t = grad_target(self, 0)) t->grad += self.grad * factor;
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// concat

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, Index axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  const Index rank = static_cast<Index>(first.size());
  if (axis < 0 || axis >= rank)
    throw ShapeError("concat: axis " + std::to_string(axis) + " invalid for rank " +
                     std::to_string(rank));
  Index joined = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool compatible = static_cast<Index>(s.size()) == rank;
    for (Index d = 0; compatible && d < rank; ++d)
      if (d != axis && s[static_cast<std::size_t>(d)] != first[static_cast<std::size_t>(d)])
        compatible = false;
    if (!compatible)
      throw ShapeError("concat: " + shape_string(s) + " incompatible with " + shape_string(first) +
                       " along axis " + std::to_string(axis));
    joined += s[static_cast<std::size_t>(axis)];
  }
  Index outer = 1, inner = 1;
  for (Index d = 0; d < axis; ++d) outer *= first[static_cast<std::size_t>(d)];
  for (Index d = axis + 1; d < rank; ++d) inner *= first[static_cast<std::size_t>(d)];

  Shape shape = first;
  shape[static_cast<std::size_t>(axis)] = joined;
  std::vector<NodePtr<Scalar>> inputs;
  std::vector<Index> chunk;  // contiguous run per part per outer index
  for (const auto& p : parts) {
    inputs.push_back(p.node());
    chunk.push_back(p.dim(axis) * inner);
  }
  auto out = make_result<Scalar>(std::move(shape), OpKind::concat, std::move(inputs));
  const Index out_row = joined * inner;
  Index offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    for (Index o = 0; o < outer; ++o)
      std::copy_n(parts[i].data() + o * chunk[i], chunk[i], out.data() + o * out_row + offset);
    offset += chunk[i];
  }
  if (out.tracked()) {
    out.node()->backward = [chunk, outer, out_row](TapeNode<Scalar>& self) {
      Index off = 0;
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        if (auto* t = grad_target(self, i)) {
          for (Index o = 0; o < outer; ++o) {
            const Scalar* g = self.grad.data() + o * out_row + off;
            Scalar* dst = t->grad.data() + o * chunk[i];
            for (Index j = 0; j < chunk[i]; ++j) dst[j] += g[j];
          }
        }
        off += chunk[i];
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// dot

template <typename Scalar>
Tensor<Scalar> dot(const Tensor<Scalar>& h, const Tensor<Scalar>& x) {
  require_rank(h, 1, "dot", "weight vector");
  const Index k = h.dim(0);
  if (x.rank() < 1 || x.rank() > 2 || x.shape().back() != k)
    throw ShapeError("dot: " + shape_string(h.shape()) + " against " + shape_string(x.shape()));
  const Index rows = x.rank() == 2 ? x.dim(0) : 1;
  Shape shape = x.rank() == 2 ? Shape{rows} : Shape{};
  auto out = make_result<Scalar>(std::move(shape), OpKind::dot, {h.node(), x.node()});
  for (Index b = 0; b < rows; ++b) {
    Scalar acc = 0;
    for (Index j = 0; j < k; ++j) acc = fused_madd(h.data()[j], x.data()[b * k + j], acc);
    out.data()[b] = acc;
  }
  if (out.tracked()) {
    out.node()->backward = [rows, k](TapeNode<Scalar>& self) {
      const Scalar* hv = self.inputs[0]->values.data();
      const Scalar* xv = self.inputs[1]->values.data();
      if (auto* th = grad_target(self, 0))
        for (Index b = 0; b < rows; ++b)
          kernels::axpy(k, self.grad[b], xv + b * k, th->grad.data());
      if (auto* tx = grad_target(self, 1))
        for (Index b = 0; b < rows; ++b)
          kernels::axpy(k, self.grad[b], hv, tx->grad.data() + b * k);
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// dropout, mask_rows

template <typename Scalar>
Tensor<Scalar> dropout(const Tensor<Scalar>& x, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw ContractError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  auto out = make_result<Scalar>(x.shape(), OpKind::dropout, {x.node()});
  const Scalar keep_scale = static_cast<Scalar>(1.0 / (1.0 - rate));
  typename Tensor<Scalar>::Vector mask(x.size());
  for (Index i = 0; i < x.size(); ++i) mask[i] = uniform01(rng) < rate ? Scalar(0) : keep_scale;
  out.values() = x.values().cwiseProduct(mask);
  if (out.tracked()) {
    out.node()->backward = [mask = std::move(mask)](TapeNode<Scalar>& self) {
      if (auto* t = grad_target(self, 0)) t->grad += self.grad.cwiseProduct(mask);
    };
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> mask_rows(const Tensor<Scalar>& x, std::span<const std::uint8_t> keep) {
  if (x.rank() < 1 || x.dim(0) != static_cast<Index>(keep.size()))
    throw ShapeError("mask_rows: " + std::to_string(keep.size()) + " flags for " +
                     shape_string(x.shape()));
  auto out = make_result<Scalar>(x.shape(), OpKind::mask_rows, {x.node()});
  const Index row = x.size() / x.dim(0);
  std::vector<std::uint8_t> flags(keep.begin(), keep.end());
  for (std::size_t b = 0; b < flags.size(); ++b)
    if (flags[b]) std::copy_n(x.data() + static_cast<Index>(b) * row, row, out.data() + static_cast<Index>(b) * row);
  if (out.tracked()) {
    out.node()->backward = [flags = std::move(flags), row](TapeNode<Scalar>& self) {
      auto* t = grad_target(self, 0);
      if (!t) return;
      for (std::size_t b = 0; b < flags.size(); ++b)
        if (flags[b]) t->grad.segment(static_cast<Index>(b) * row, row) += self.grad.segment(static_cast<Index>(b) * row, row);
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// bce_loss, sum_squares

template <typename Scalar>
Tensor<Scalar> bce_loss(const Tensor<Scalar>& probabilities, const Tensor<Scalar>& labels) {
  if (probabilities.size() != labels.size())
    throw ShapeError("bce_loss: " + shape_string(probabilities.shape()) + " predictions for " +
                     shape_string(labels.shape()) + " labels");
  auto out = make_result<Scalar>({}, OpKind::bce_loss, {probabilities.node(), labels.node()});
  const Scalar lo = static_cast<Scalar>(kBceClamp);
  const Scalar hi = static_cast<Scalar>(1.0 - kBceClamp);
  Scalar total = 0;
  for (Index i = 0; i < probabilities.size(); ++i) {
    const Scalar p = std::clamp(probabilities.values()[i], lo, hi);
    const Scalar y = labels.values()[i];
    total -= y * std::log(p) + (Scalar(1) - y) * std::log(Scalar(1) - p);
  }
  out.values()[0] = total;
  if (out.tracked()) {
    out.node()->backward = [lo, hi](TapeNode<Scalar>& self) {
      auto* t = grad_target(self, 0);
      if (!t) return;
      const Scalar g = self.grad[0];
      const auto& pv = self.inputs[0]->values;
      const auto& yv = self.inputs[1]->values;
      for (Index i = 0; i < pv.size(); ++i) {
        const Scalar p = std::clamp(pv[i], lo, hi);
        const Scalar y = yv[i];
        t->grad[i] += g * (-y / p + (Scalar(1) - y) / (Scalar(1) - p));
      }
    };
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> sum_squares(const std::vector<Tensor<Scalar>>& tensors) {
  std::vector<NodePtr<Scalar>> inputs;
  for (const auto& t : tensors) inputs.push_back(t.node());
  auto out = make_result<Scalar>({}, OpKind::sum_squares, std::move(inputs));
  Scalar total = 0;
  for (const auto& t : tensors)
    for (Index i = 0; i < t.size(); ++i) total = fused_madd(t.data()[i], t.data()[i], total);
  out.values()[0] = total;
  if (out.tracked()) {
    out.node()->backward = [](TapeNode<Scalar>& self) {
      const Scalar g2 = Scalar(2) * self.grad[0];
      for (std::size_t i = 0; i < self.inputs.size(); ++i)
        if (auto* t = grad_target(self, i)) t->grad += g2 * t->values;
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// backward

template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  if (!loss.tracked()) throw ContractError("backward: loss does not depend on any tracked tensor");

  using Node = TapeNode<Scalar>;
  // Post-order DFS gives inputs before consumers.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->tracked && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* node : order)
    if (node->op != OpKind::leaf) node->grad = Node::Vector::Zero(node->values.size());
  loss.node()->ensure_grad()[0] += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->op != OpKind::leaf && node->backward) node->backward(*node);
  }
}

// ---------------------------------------------------------------------------
// Instantiations

#define COMET_INSTANTIATE_OPS(S)                                                               \
  template Tensor<S> embed_lookup(const Tensor<S>&, std::span<const std::int32_t>);            \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                         \
  template Tensor<S> conv_full_height(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);   \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Index);      \
  template Tensor<S> affine(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);             \
  template Tensor<S> relu(const Tensor<S>&);                                                   \
  template Tensor<S> tanh(const Tensor<S>&);                                                   \
  template Tensor<S> sigmoid(const Tensor<S>&);                                                \
  template Tensor<S> elementwise_mul(const Tensor<S>&, const Tensor<S>&);                      \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> scale(const Tensor<S>&, S);                                               \
  template Tensor<S> concat(const std::vector<Tensor<S>>&, Index);                             \
  template Tensor<S> dot(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> dropout(const Tensor<S>&, double, bool, Rng&);                            \
  template Tensor<S> mask_rows(const Tensor<S>&, std::span<const std::uint8_t>);               \
  template Tensor<S> bce_loss(const Tensor<S>&, const Tensor<S>&);                             \
  template Tensor<S> sum_squares(const std::vector<Tensor<S>>&);                               \
  template void backward(const Tensor<S>&);

COMET_INSTANTIATE_OPS(float)
COMET_INSTANTIATE_OPS(double)

#undef COMET_INSTANTIATE_OPS

}  // namespace comet

#ifndef RAINSCALE_TENSOR_HPP_
#define RAINSCALE_TENSOR_HPP_

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rainscale/error.hpp"

namespace rainscale {

struct Shape4 {
  int n = 1, c = 1, h = 1, w = 1;

  std::size_t count() const {
    return static_cast<std::size_t>(n) * c * static_cast<std::size_t>(h) * w;
  }
  bool operator==(const Shape4& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

/// A named trainable parameter array. Lives outside any tape; gradients
/// accumulate here during backward and are consumed by the optimizer.
struct Param {
  std::string name;
  Shape4 shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool trainable = true;

  Param() = default;
  Param(std::string name_, Shape4 shape_)
      : name(std::move(name_)), shape(shape_), value(shape_.count(), 0.0),
        grad(shape_.count(), 0.0) {}

  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

class Tape;

/// Lightweight handle into a tape node. Valid while the tape lives.
class Tensor {
 public:
  Tensor() = default;

  Shape4 shape() const;
  std::span<const double> values() const;
  std::span<const double> grad() const;
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

using RowMajorMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMajorMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMajorMatrix>;

/// Records a forward pass; replays it in reverse for gradients. One tape per
/// forward/backward cycle; parameters are re-registered on every pass.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  struct Node {
    Shape4 shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
    std::function<void(Tape&)> backprop;
    Param* bound = nullptr;
  };

  Tensor input(const Shape4& shape, std::span<const double> data) {
    require(data.size() == shape.count(), errc::shape_mismatch,
            "input data size ", data.size(), " for shape ", shape.str());
    Node node;
    node.shape = shape;
    node.values.assign(data.begin(), data.end());
    return push(std::move(node), "input");
  }

  Tensor zeros(const Shape4& shape) {
    Node node;
    node.shape = shape;
    node.values.assign(shape.count(), 0.0);
    return push(std::move(node), "zeros");
  }

  /// Mutable view for filling an input node in place.
  std::span<double> mutable_values(const Tensor& t) {
    Node& n = node(t);
    return {n.values.data(), n.values.size()};
  }

  /// Registers a parameter leaf. Repeated registration of the same Param
  /// returns the same node, so shared weights accumulate one gradient.
  Tensor param(Param& v) {
    auto it = param_nodes_.find(&v);
    if (it != param_nodes_.end()) return Tensor(this, it->second);
    Node node;
    node.shape = v.shape;
    node.values = v.value;
    node.requires_grad = true;
    node.bound = &v;
    const int id = static_cast<int>(nodes_.size());
    node.backprop = [id](Tape& t) {
      Node& self = t.nodes_[static_cast<std::size_t>(id)];
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        self.bound->grad[i] += self.grad[i];
    };
    Tensor out = push(std::move(node), "param");
    param_nodes_[&v] = out.id_;
    return out;
  }

  void backward(const Tensor& loss) {
    require(loss.tape_ == this, errc::invalid_config, "loss from another tape");
    require(!backward_done_, errc::double_backward,
            "backward already ran on this tape");
    require(node(loss).shape.count() == 1, errc::non_scalar_loss,
            "loss must be scalar, got shape ", node(loss).shape.str());
    backward_done_ = true;
    for (Node& n : nodes_)
      if (n.requires_grad) n.grad.assign(n.values.size(), 0.0);
    if (!node(loss).requires_grad) return;  // constant graph: nothing to do
    node(loss).grad[0] = 1.0;
    for (int id = loss.id_; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.requires_grad && n.backprop) n.backprop(*this);
    }
  }

  Node& node(const Tensor& t) { return nodes_.at(static_cast<std::size_t>(t.id_)); }
  const Node& node(const Tensor& t) const {
    return nodes_.at(static_cast<std::size_t>(t.id_));
  }
  Node& node_by_id(int id) { return nodes_.at(static_cast<std::size_t>(id)); }

  std::size_t size() const { return nodes_.size(); }

 private:
  friend Tensor make_op_output(Tape&, Tape::Node&&, const char*);

  Tensor push(Node&& node, const char* opname) {
    for (double v : node.values)
      if (!std::isfinite(v))
        fail(errc::non_finite_value, "non-finite value produced by ", opname);
    nodes_.push_back(std::move(node));
    return Tensor(this, static_cast<int>(nodes_.size() - 1));
  }

  std::vector<Node> nodes_;
  std::map<Param*, int> param_nodes_;
  bool backward_done_ = false;
};

inline Shape4 Tensor::shape() const { return tape_->node(*this).shape; }
inline std::span<const double> Tensor::values() const {
  const auto& n = tape_->node(*this);
  return {n.values.data(), n.values.size()};
}
inline std::span<const double> Tensor::grad() const {
  const auto& n = tape_->node(*this);
  return {n.grad.data(), n.grad.size()};
}
inline bool Tensor::requires_grad() const { return tape_->node(*this).requires_grad; }

inline Tensor make_op_output(Tape& tape, Tape::Node&& node, const char* opname) {
  return tape.push(std::move(node), opname);
}

namespace detail {

inline Tape& common_tape(const Tensor& a, const Tensor& b) {
  require(a.tape() != nullptr && a.tape() == b.tape(), errc::invalid_config,
          "operands must share a tape");
  return *a.tape();
}

struct ConvGeom {
  int n, ic, h, w, oc, k, stride, pad, oh, ow;
};

/// Gathers k*k patches of one sample into a [ic*k*k, oh*ow] matrix.
inline void im2col(const double* x, const ConvGeom& g, double* cols) {
  const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
  const std::size_t out_plane = static_cast<std::size_t>(g.oh) * g.ow;
  for (int ci = 0; ci < g.ic; ++ci) {
    const double* xp = x + static_cast<std::size_t>(ci) * plane;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        double* row = cols +
            (static_cast<std::size_t>(ci) * g.k * g.k + static_cast<std::size_t>(ky) * g.k + kx) *
                out_plane;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride + ky - g.pad;
          double* dst = row + static_cast<std::size_t>(oy) * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* src_row = xp + static_cast<std::size_t>(iy) * g.w;
          for (int ox = 0; ox < g.ow; ++ox) {
            const int ix = ox * g.stride + kx - g.pad;
            dst[ox] = (ix >= 0 && ix < g.w) ? src_row[ix] : 0.0;
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-adds a [ic*k*k, oh*ow] matrix back onto the
/// sample grid.
inline void col2im_add(const double* cols, const ConvGeom& g, double* x) {
  const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
  const std::size_t out_plane = static_cast<std::size_t>(g.oh) * g.ow;
  for (int ci = 0; ci < g.ic; ++ci) {
    double* xp = x + static_cast<std::size_t>(ci) * plane;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const double* row = cols +
            (static_cast<std::size_t>(ci) * g.k * g.k + static_cast<std::size_t>(ky) * g.k + kx) *
                out_plane;
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          const double* src = row + static_cast<std::size_t>(oy) * g.ow;
          double* dst_row = xp + static_cast<std::size_t>(iy) * g.w;
          for (int ox = 0; ox < g.ow; ++ox) {
            const int ix = ox * g.stride + kx - g.pad;
            if (ix >= 0 && ix < g.w) dst_row[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// 2-D cross-correlation with `weight` of shape [out_c, in_c, k, k] and bias
/// of shape [1, out_c, 1, 1]. Odd kernels only; padding k/2 preserves the
/// spatial size at stride 1.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                     int stride = 1, int padding = 0) {
  Tape& tape = detail::common_tape(x, weight);
  const Shape4 xs = x.shape();
  const Shape4 ws = weight.shape();
  const Shape4 bs = bias.shape();
  require(ws.h == ws.w && ws.h % 2 == 1, errc::shape_mismatch,
          "conv kernel must be square and odd, got ", ws.str());
  require(ws.c == xs.c, errc::shape_mismatch, "conv weight expects ", ws.c,
          " input channels, got ", xs.c);
  require(bs == Shape4{1, ws.n, 1, 1}, errc::shape_mismatch,
          "conv bias must be (1,", ws.n, ",1,1), got ", bs.str());
  require(stride >= 1 && padding >= 0, errc::shape_mismatch, "bad stride/padding");
  require(xs.h + 2 * padding >= ws.h && xs.w + 2 * padding >= ws.w,
          errc::shape_mismatch, "kernel larger than padded input");

  detail::ConvGeom g;
  g.n = xs.n; g.ic = xs.c; g.h = xs.h; g.w = xs.w;
  g.oc = ws.n; g.k = ws.h; g.stride = stride; g.pad = padding;
  g.oh = (xs.h + 2 * padding - ws.h) / stride + 1;
  g.ow = (xs.w + 2 * padding - ws.w) / stride + 1;

  const std::size_t ickk = static_cast<std::size_t>(g.ic) * g.k * g.k;
  const std::size_t out_plane = static_cast<std::size_t>(g.oh) * g.ow;
  const std::size_t in_count = static_cast<std::size_t>(g.ic) * g.h * g.w;
  const std::size_t out_count = static_cast<std::size_t>(g.oc) * out_plane;

  Tape::Node node;
  node.shape = {g.n, g.oc, g.oh, g.ow};
  node.values.resize(node.shape.count());
  node.requires_grad = x.requires_grad() || weight.requires_grad() || bias.requires_grad();

  {
    std::vector<double> cols(ickk * out_plane);
    ConstMatrixMap wm(weight.values().data(), g.oc, static_cast<Eigen::Index>(ickk));
    const double* bv = bias.values().data();
    for (int s = 0; s < g.n; ++s) {
      detail::im2col(x.values().data() + s * in_count, g, cols.data());
      ConstMatrixMap cm(cols.data(), static_cast<Eigen::Index>(ickk),
                        static_cast<Eigen::Index>(out_plane));
      MatrixMap om(node.values.data() + s * out_count, g.oc,
                   static_cast<Eigen::Index>(out_plane));
      om.noalias() = wm * cm;
      for (int co = 0; co < g.oc; ++co)
        om.row(co).array() += bv[co];
    }
  }

  const int x_id = x.id();
  const int w_id = weight.id();
  const int b_id = bias.id();
  Tensor out = make_op_output(tape, std::move(node), "conv2d");
  if (out.requires_grad()) {
    const int out_id = out.id();
    tape.node(out).backprop = [x_id, w_id, b_id, out_id, g, ickk, out_plane,
                               in_count, out_count](Tape& t) {
      Tape::Node& xo = t.node_by_id(x_id);
      Tape::Node& wo = t.node_by_id(w_id);
      Tape::Node& bo = t.node_by_id(b_id);
      Tape::Node& oo = t.node_by_id(out_id);
      std::vector<double> cols(ickk * out_plane);
      std::vector<double> dcols;
      if (xo.requires_grad) dcols.resize(ickk * out_plane);
      ConstMatrixMap wm(wo.values.data(), g.oc, static_cast<Eigen::Index>(ickk));
      for (int s = 0; s < g.n; ++s) {
        ConstMatrixMap dout(oo.grad.data() + s * out_count, g.oc,
                            static_cast<Eigen::Index>(out_plane));
        if (wo.requires_grad) {
          detail::im2col(xo.values.data() + s * in_count, g, cols.data());
          ConstMatrixMap cm(cols.data(), static_cast<Eigen::Index>(ickk),
                            static_cast<Eigen::Index>(out_plane));
          MatrixMap dwm(wo.grad.data(), g.oc, static_cast<Eigen::Index>(ickk));
          dwm.noalias() += dout * cm.transpose();
        }
        if (bo.requires_grad) {
          for (int co = 0; co < g.oc; ++co)
            bo.grad[static_cast<std::size_t>(co)] += dout.row(co).sum();
        }
        if (xo.requires_grad) {
          MatrixMap dcm(dcols.data(), static_cast<Eigen::Index>(ickk),
                        static_cast<Eigen::Index>(out_plane));
          dcm.noalias() = wm.transpose() * dout;
          detail::col2im_add(dcols.data(), g, xo.grad.data() + s * in_count);
        }
      }
    };
  }
  return out;
}

/// Fractionally-strided convolution with `weight` of shape
/// [in_c, out_c, k, k]; output is ((h-1)*stride + k) x ((w-1)*stride + k).
/// With a conv2d weight [oc, ic, k, k] reinterpreted as [in_c=oc, out_c=ic],
/// this is the exact adjoint of the zero-padding conv2d of equal stride.
inline Tensor transposed_conv2d(const Tensor& x, const Tensor& weight,
                                const Tensor& bias, int stride) {
  Tape& tape = detail::common_tape(x, weight);
  const Shape4 xs = x.shape();
  const Shape4 ws = weight.shape();
  const Shape4 bs = bias.shape();
  require(ws.h == ws.w, errc::shape_mismatch, "kernel must be square");
  require(ws.n == xs.c, errc::shape_mismatch, "tconv weight expects ", ws.n,
          " input channels, got ", xs.c);
  require(bs == Shape4{1, ws.c, 1, 1}, errc::shape_mismatch,
          "tconv bias must be (1,", ws.c, ",1,1), got ", bs.str());
  require(stride >= 1, errc::shape_mismatch, "bad stride");

  // Reuse the conv geometry with roles swapped: the tconv OUTPUT plays the
  // conv input, so im2col/col2im of the output grid drive both directions.
  detail::ConvGeom g;
  g.n = xs.n;
  g.ic = ws.c;                       // tconv output channels
  g.oc = xs.c;                       // tconv input channels
  g.k = ws.h;
  g.stride = stride;
  g.pad = 0;
  g.h = (xs.h - 1) * stride + ws.h;  // tconv output height
  g.w = (xs.w - 1) * stride + ws.w;
  g.oh = xs.h;
  g.ow = xs.w;

  const std::size_t ickk = static_cast<std::size_t>(g.ic) * g.k * g.k;
  const std::size_t in_plane = static_cast<std::size_t>(g.oh) * g.ow;   // x plane
  const std::size_t x_count = static_cast<std::size_t>(g.oc) * in_plane;
  const std::size_t out_count = static_cast<std::size_t>(g.ic) * g.h * g.w;

  Tape::Node node;
  node.shape = {g.n, g.ic, g.h, g.w};
  node.values.assign(node.shape.count(), 0.0);
  node.requires_grad = x.requires_grad() || weight.requires_grad() || bias.requires_grad();

  {
    // weight as [oc_conv-role rows]: [xs.c, ic*k*k] row-major view
    ConstMatrixMap wm(weight.values().data(), g.oc, static_cast<Eigen::Index>(ickk));
    std::vector<double> cols(ickk * in_plane);
    const double* bv = bias.values().data();
    for (int s = 0; s < g.n; ++s) {
      ConstMatrixMap xm(x.values().data() + s * x_count, g.oc,
                        static_cast<Eigen::Index>(in_plane));
      MatrixMap cm(cols.data(), static_cast<Eigen::Index>(ickk),
                   static_cast<Eigen::Index>(in_plane));
      cm.noalias() = wm.transpose() * xm;
      detail::col2im_add(cols.data(), g, node.values.data() + s * out_count);
      double* op = node.values.data() + s * out_count;
      const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
      for (int co = 0; co < g.ic; ++co) {
        double* pp = op + static_cast<std::size_t>(co) * plane;
        for (std::size_t i = 0; i < plane; ++i) pp[i] += bv[co];
      }
    }
  }

  const int x_id = x.id();
  const int w_id = weight.id();
  const int b_id = bias.id();
  Tensor out = make_op_output(tape, std::move(node), "transposed_conv2d");
  if (out.requires_grad()) {
    const int out_id = out.id();
    tape.node(out).backprop = [x_id, w_id, b_id, out_id, g, ickk, in_plane,
                               x_count, out_count](Tape& t) {
      Tape::Node& xo = t.node_by_id(x_id);
      Tape::Node& wo = t.node_by_id(w_id);
      Tape::Node& bo = t.node_by_id(b_id);
      Tape::Node& oo = t.node_by_id(out_id);
      std::vector<double> dcols(ickk * in_plane);
      ConstMatrixMap wm(wo.values.data(), g.oc, static_cast<Eigen::Index>(ickk));
      const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
      for (int s = 0; s < g.n; ++s) {
        const double* dout = oo.grad.data() + s * out_count;
        // dcols = im2col(dout): gather the scattered contributions back.
        detail::im2col(dout, g, dcols.data());
        ConstMatrixMap dcm(dcols.data(), static_cast<Eigen::Index>(ickk),
                           static_cast<Eigen::Index>(in_plane));
        if (xo.requires_grad) {
          MatrixMap dxm(xo.grad.data() + s * x_count, g.oc,
                        static_cast<Eigen::Index>(in_plane));
          dxm.noalias() += wm * dcm;
        }
        if (wo.requires_grad) {
          ConstMatrixMap xm(xo.values.data() + s * x_count, g.oc,
                            static_cast<Eigen::Index>(in_plane));
          MatrixMap dwm(wo.grad.data(), g.oc, static_cast<Eigen::Index>(ickk));
          dwm.noalias() += xm * dcm.transpose();
        }
        if (bo.requires_grad) {
          for (int co = 0; co < g.ic; ++co) {
            const double* pp = dout + static_cast<std::size_t>(co) * plane;
            double acc = 0.0;
            for (std::size_t i = 0; i < plane; ++i) acc += pp[i];
            bo.grad[static_cast<std::size_t>(co)] += acc;
          }
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise activations
// ---------------------------------------------------------------------------

enum class Activation { relu, leaky_relu, sigmoid };

inline Tensor activation(const Tensor& x, Activation kind, double alpha = 0.2) {
  Tape& tape = *x.tape();
  Tape::Node node;
  node.shape = x.shape();
  node.values.resize(node.shape.count());
  node.requires_grad = x.requires_grad();
  const std::span<const double> xv = x.values();
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < xv.size(); ++i)
        node.values[i] = xv[i] > 0.0 ? xv[i] : 0.0;
      break;
    case Activation::leaky_relu:
      for (std::size_t i = 0; i < xv.size(); ++i)
        node.values[i] = xv[i] > 0.0 ? xv[i] : alpha * xv[i];
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < xv.size(); ++i)
        node.values[i] = 1.0 / (1.0 + std::exp(-xv[i]));
      break;
  }
  const int x_id = x.id();
  Tensor out = make_op_output(tape, std::move(node), "activation");
  if (out.requires_grad()) {
    const int out_id = out.id();
    tape.node(out).backprop = [x_id, out_id, kind, alpha](Tape& t) {
      Tape::Node& xo = t.node_by_id(x_id);
      Tape::Node& oo = t.node_by_id(out_id);
      if (!xo.requires_grad) return;
      switch (kind) {
        case Activation::relu:
          for (std::size_t i = 0; i < oo.grad.size(); ++i)
            if (xo.values[i] > 0.0) xo.grad[i] += oo.grad[i];
          break;
        case Activation::leaky_relu:
          for (std::size_t i = 0; i < oo.grad.size(); ++i)
            xo.grad[i] += (xo.values[i] > 0.0 ? 1.0 : alpha) * oo.grad[i];
          break;
        case Activation::sigmoid:
          for (std::size_t i = 0; i < oo.grad.size(); ++i) {
            const double s = oo.values[i];
            xo.grad[i] += s * (1.0 - s) * oo.grad[i];
          }
          break;
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling reductions used by the attention gates
// ---------------------------------------------------------------------------

enum class PoolKind { channel_max_map, channel_mean_map, global_avg, global_max };

/// channel_*_map reduce over the channel axis to (n,1,h,w); global_* reduce
/// over space to (n,c,1,1). Max reductions give the subgradient to the first
/// maximizer in scan order.
inline Tensor pool_stats(const Tensor& x, PoolKind kind) {
  Tape& tape = *x.tape();
  const Shape4 xs = x.shape();
  const std::size_t plane = static_cast<std::size_t>(xs.h) * xs.w;
  const std::size_t sample = static_cast<std::size_t>(xs.c) * plane;

  Tape::Node node;
  node.requires_grad = x.requires_grad();
  const std::span<const double> xv = x.values();
  std::vector<int> argmax;  // flat winner index per output element

  switch (kind) {
    case PoolKind::channel_max_map: {
      node.shape = {xs.n, 1, xs.h, xs.w};
      node.values.resize(node.shape.count());
      argmax.resize(node.values.size());
      for (int s = 0; s < xs.n; ++s) {
        for (std::size_t p = 0; p < plane; ++p) {
          std::size_t best = s * sample + p;
          double bv = xv[best];
          for (int c = 1; c < xs.c; ++c) {
            const std::size_t idx = s * sample + static_cast<std::size_t>(c) * plane + p;
            if (xv[idx] > bv) {
              bv = xv[idx];
              best = idx;
            }
          }
          node.values[s * plane + p] = bv;
          argmax[s * plane + p] = static_cast<int>(best);
        }
      }
      break;
    }
    case PoolKind::channel_mean_map: {
      node.shape = {xs.n, 1, xs.h, xs.w};
      node.values.assign(node.shape.count(), 0.0);
      for (int s = 0; s < xs.n; ++s)
        for (int c = 0; c < xs.c; ++c)
          for (std::size_t p = 0; p < plane; ++p)
            node.values[s * plane + p] +=
                xv[s * sample + static_cast<std::size_t>(c) * plane + p];
      for (double& v : node.values) v /= xs.c;
      break;
    }
    case PoolKind::global_avg: {
      node.shape = {xs.n, xs.c, 1, 1};
      node.values.assign(node.shape.count(), 0.0);
      for (int s = 0; s < xs.n; ++s)
        for (int c = 0; c < xs.c; ++c) {
          const double* pp = xv.data() + s * sample + static_cast<std::size_t>(c) * plane;
          double acc = 0.0;
          for (std::size_t p = 0; p < plane; ++p) acc += pp[p];
          node.values[static_cast<std::size_t>(s) * xs.c + c] =
              acc / static_cast<double>(plane);
        }
      break;
    }
    case PoolKind::global_max: {
      node.shape = {xs.n, xs.c, 1, 1};
      node.values.resize(node.shape.count());
      argmax.resize(node.values.size());
      for (int s = 0; s < xs.n; ++s)
        for (int c = 0; c < xs.c; ++c) {
          const std::size_t base = s * sample + static_cast<std::size_t>(c) * plane;
          std::size_t best = base;
          double bv = xv[base];
          for (std::size_t p = 1; p < plane; ++p)
            if (xv[base + p] > bv) {
              bv = xv[base + p];
              best = base + p;
            }
          node.values[static_cast<std::size_t>(s) * xs.c + c] = bv;
          argmax[static_cast<std::size_t>(s) * xs.c + c] = static_cast<int>(best);
        }
      break;
    }
  }

  const int x_id = x.id();
  Tensor out = make_op_output(tape, std::move(node), "pool_stats");
  if (out.requires_grad()) {
    const int out_id = out.id();
    tape.node(out).backprop = [x_id, out_id, kind, xs, plane, sample,
                               argmax = std::move(argmax)](Tape& t) {
      Tape::Node& xo = t.node_by_id(x_id);
      Tape::Node& oo = t.node_by_id(out_id);
      if (!xo.requires_grad) return;
      switch (kind) {
        case PoolKind::channel_max_map:
        case PoolKind::global_max:
          for (std::size_t i = 0; i < oo.grad.size(); ++i)
            xo.grad[static_cast<std::size_t>(argmax[i])] += oo.grad[i];
          break;
        case PoolKind::channel_mean_map: {
          const double inv = 1.0 / xs.c;
          for (int s = 0; s < xs.n; ++s)
            for (int c = 0; c < xs.c; ++c)
              for (std::size_t p = 0; p < plane; ++p)
                xo.grad[s * sample + static_cast<std::size_t>(c) * plane + p] +=
                    inv * oo.grad[s * plane + p];
          break;
        }
        case PoolKind::global_avg: {
          const double inv = 1.0 / static_cast<double>(plane);
          for (int s = 0; s < xs.n; ++s)
            for (int c = 0; c < xs.c; ++c) {
              const double go =
                  inv * oo.grad[static_cast<std::size_t>(s) * xs.c + c];
              double* gp = xo.grad.data() + s * sample +
                           static_cast<std::size_t>(c) * plane;
              for (std::size_t p = 0; p < plane; ++p) gp[p] += go;
            }
          break;
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Concatenation / broadcasting / elementwise
// ---------------------------------------------------------------------------

inline Tensor concat_channels(const std::vector<Tensor>& inputs) {
  require(!inputs.empty(), errc::shape_mismatch, "concat of zero tensors");
  Tape& tape = *inputs.front().tape();
  const Shape4 first = inputs.front().shape();
  int total_c = 0;
  bool any_grad = false;
  for (const Tensor& t : inputs) {
    const Shape4 s = t.shape();
    require(s.n == first.n && s.h == first.h && s.w == first.w,
            errc::shape_mismatch, "concat operands disagree: ", first.str(),
            " vs ", s.str());
    total_c += s.c;
    any_grad = any_grad || t.requires_grad();
  }

  Tape::Node node;
  node.shape = {first.n, total_c, first.h, first.w};
  node.values.resize(node.shape.count());
  node.requires_grad = any_grad;
  const std::size_t plane = static_cast<std::size_t>(first.h) * first.w;
  const std::size_t out_sample = static_cast<std::size_t>(total_c) * plane;
  {
    std::size_t c_off = 0;
    for (const Tensor& t : inputs) {
      const Shape4 s = t.shape();
      const std::size_t in_sample = static_cast<std::size_t>(s.c) * plane;
      for (int b = 0; b < first.n; ++b)
        std::copy(t.values().data() + b * in_sample,
                  t.values().data() + (b + 1) * in_sample,
                  node.values.data() + b * out_sample + c_off * plane);
      c_off += static_cast<std::size_t>(s.c);
    }
  }

  std::vector<int> ids;
  std::vector<int> channels;
  for (const Tensor& t : inputs) {
    ids.push_back(t.id());
    channels.push_back(t.shape().c);
  }
  Tensor out = make_op_output(tape, std::move(node), "concat_channels");
  if (out.requires_grad()) {
    const int out_id = out.id();
    const int n = first.n;
    tape.node(out).backprop = [ids, channels, out_id, n, plane,
                               out_sample](Tape& t) {
      Tape::Node& oo = t.node_by_id(out_id);
      std::size_t c_off = 0;
      for (std::size_t k = 0; k < ids.size(); ++k) {
        Tape::Node& xo = t.node_by_id(ids[k]);
        const std::size_t in_sample = static_cast<std::size_t>(channels[k]) * plane;
        if (xo.requires_grad) {
          for (int b = 0; b < n; ++b) {
            const double* src = oo.grad.data() + b * out_sample + c_off * plane;
            double* dst = xo.grad.data() + b * in_sample;
            for (std::size_t i = 0; i < in_sample; ++i) dst[i] += src[i];
          }
        }
        c_off += static_cast<std::size_t>(channels[k]);
      }
    };
  }
  return out;
}

/// Tiles a single-sample tensor along the batch axis; backward sums.
inline Tensor broadcast_batch(const Tensor& x, int n) {
  Tape& tape = *x.tape();
  const Shape4 xs = x.shape();
  require(xs.n == 1, errc::shape_mismatch, "broadcast_batch expects n=1, got ",
          xs.str());
  require(n >= 1, errc::shape_mismatch, "bad batch size");
  Tape::Node node;
  node.shape = {n, xs.c, xs.h, xs.w};
  node.values.resize(node.shape.count());
  node.requires_grad = x.requires_grad();
  const std::size_t sample = xs.count();
  for (int s = 0; s < n; ++s)
    std::copy(x.values().begin(), x.values().end(),
              node.values.begin() + static_cast<long>(s * sample));
  const int x_id = x.id();
  Tensor out = make_op_output(tape, std::move(node), "broadcast_batch");
  if (out.requires_grad()) {
    const int out_id = out.id();
    tape.node(out).backprop = [x_id, out_id, n, sample](Tape& t) {
      Tape::Node& xo = t.node_by_id(x_id);
      Tape::Node& oo = t.node_by_id(out_id);
      if (!xo.requires_grad) return;
      for (int s = 0; s < n; ++s)
        for (std::size_t i = 0; i < sample; ++i)
          xo.grad[i] += oo.grad[s * sample + i];
    };
  }
  return out;
}

enum class EwKind { add, mul };

/// Elementwise add/mul. Shapes must match, or one operand may broadcast with
/// singleton channel or spatial axes, e.g. (n,c,1,1) or (n,1,h,w) gates
/// against (n,c,h,w) features.
inline Tensor elementwise(const Tensor& a, const Tensor& b, EwKind kind) {
  Tape& tape = detail::common_tape(a, b);
  const Shape4 as = a.shape();
  const Shape4 bs = b.shape();
  auto combine = [](int x, int y, const char* axis) {
    require(x == y || x == 1 || y == 1, errc::shape_mismatch,
            "cannot broadcast axis ", axis, ": ", x, " vs ", y);
    return std::max(x, y);
  };
  Shape4 os{combine(as.n, bs.n, "n"), combine(as.c, bs.c, "c"),
            combine(as.h, bs.h, "h"), combine(as.w, bs.w, "w")};

  struct Strides {
    std::size_t n, c, h, w;
  };
  auto strides_of = [](const Shape4& s) {
    Strides st;
    st.w = s.w == 1 ? 0 : 1;
    st.h = s.h == 1 ? 0 : static_cast<std::size_t>(s.w);
    st.c = s.c == 1 ? 0 : static_cast<std::size_t>(s.h) * s.w;
    st.n = s.n == 1 ? 0 : static_cast<std::size_t>(s.c) * s.h * s.w;
    return st;
  };
  const Strides sa = strides_of(as);
  const Strides sb = strides_of(bs);

  Tape::Node node;
  node.shape = os;
  node.values.resize(os.count());
  node.requires_grad = a.requires_grad() || b.requires_grad();
  {
    const double* av = a.values().data();
    const double* bv = b.values().data();
    std::size_t idx = 0;
    for (int n = 0; n < os.n; ++n)
      for (int c = 0; c < os.c; ++c)
        for (int h = 0; h < os.h; ++h) {
          const std::size_t abase = n * sa.n + c * sa.c + h * sa.h;
          const std::size_t bbase = n * sb.n + c * sb.c + h * sb.h;
          for (int w = 0; w < os.w; ++w, ++idx) {
            const double x = av[abase + w * sa.w];
            const double y = bv[bbase + w * sb.w];
            node.values[idx] = kind == EwKind::add ? x + y : x * y;
          }
        }
  }

  const int a_id = a.id();
  const int b_id = b.id();
  Tensor out = make_op_output(tape, std::move(node), "elementwise");
  if (out.requires_grad()) {
    const int out_id = out.id();
    tape.node(out).backprop = [a_id, b_id, out_id, os, sa, sb, kind](Tape& t) {
      Tape::Node& ao = t.node_by_id(a_id);
      Tape::Node& bo = t.node_by_id(b_id);
      Tape::Node& oo = t.node_by_id(out_id);
      std::size_t idx = 0;
      for (int n = 0; n < os.n; ++n)
        for (int c = 0; c < os.c; ++c)
          for (int h = 0; h < os.h; ++h) {
            const std::size_t abase = n * sa.n + c * sa.c + h * sa.h;
            const std::size_t bbase = n * sb.n + c * sb.c + h * sb.h;
            for (int w = 0; w < os.w; ++w, ++idx) {
              const double go = oo.grad[idx];
              if (kind == EwKind::add) {
                if (ao.requires_grad) ao.grad[abase + w * sa.w] += go;
                if (bo.requires_grad) bo.grad[bbase + w * sb.w] += go;
              } else {
                if (ao.requires_grad)
                  ao.grad[abase + w * sa.w] += go * bo.values[bbase + w * sb.w];
                if (bo.requires_grad)
                  bo.grad[bbase + w * sb.w] += go * ao.values[abase + w * sa.w];
              }
            }
          }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

enum class LossKind { l1, l2 };

/// Mean absolute or mean squared error over all elements; scalar output.
inline Tensor reduce_loss(const Tensor& pred, const Tensor& target, LossKind kind) {
  Tape& tape = detail::common_tape(pred, target);
  require(pred.shape() == target.shape(), errc::shape_mismatch,
          "loss operands disagree: ", pred.shape().str(), " vs ",
          target.shape().str());
  const std::size_t count = pred.shape().count();
  const double inv = 1.0 / static_cast<double>(count);
  double acc = 0.0;
  const double* pv = pred.values().data();
  const double* tv = target.values().data();
  for (std::size_t i = 0; i < count; ++i) {
    const double d = pv[i] - tv[i];
    acc += kind == LossKind::l1 ? std::abs(d) : d * d;
  }
  Tape::Node node;
  node.shape = {1, 1, 1, 1};
  node.values = {acc * inv};
  node.requires_grad = pred.requires_grad() || target.requires_grad();
  const int p_id = pred.id();
  const int t_id = target.id();
  Tensor out = make_op_output(tape, std::move(node), "reduce_loss");
  if (out.requires_grad()) {
    const int out_id = out.id();
    tape.node(out).backprop = [p_id, t_id, out_id, kind, count, inv](Tape& t) {
      Tape::Node& po = t.node_by_id(p_id);
      Tape::Node& to = t.node_by_id(t_id);
      Tape::Node& oo = t.node_by_id(out_id);
      const double go = oo.grad[0];
      for (std::size_t i = 0; i < count; ++i) {
        const double d = po.values[i] - to.values[i];
        double dd;
        if (kind == LossKind::l1)
          dd = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        else
          dd = 2.0 * d;
        const double g = go * inv * dd;
        if (po.requires_grad) po.grad[i] += g;
        if (to.requires_grad) to.grad[i] -= g;
      }
    };
  }
  return out;
}

/// Mean over all elements; scalar output.
inline Tensor reduce_mean(const Tensor& x) {
  Tape& tape = *x.tape();
  const std::size_t count = x.shape().count();
  const double inv = 1.0 / static_cast<double>(count);
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Tape::Node node;
  node.shape = {1, 1, 1, 1};
  node.values = {acc * inv};
  node.requires_grad = x.requires_grad();
  const int x_id = x.id();
  Tensor out = make_op_output(tape, std::move(node), "reduce_mean");
  if (out.requires_grad()) {
    const int out_id = out.id();
    tape.node(out).backprop = [x_id, out_id, count, inv](Tape& t) {
      Tape::Node& xo = t.node_by_id(x_id);
      Tape::Node& oo = t.node_by_id(out_id);
      const double g = oo.grad[0] * inv;
      for (std::size_t i = 0; i < count; ++i) xo.grad[i] += g;
    };
  }
  return out;
}

/// Multiplication by a compile-time constant (loss weighting).
inline Tensor scale(const Tensor& x, double k) {
  Tape& tape = *x.tape();
  Tape::Node node;
  node.shape = x.shape();
  node.values.resize(node.shape.count());
  node.requires_grad = x.requires_grad();
  const double* xv = x.values().data();
  for (std::size_t i = 0; i < node.values.size(); ++i) node.values[i] = k * xv[i];
  const int x_id = x.id();
  Tensor out = make_op_output(tape, std::move(node), "scale");
  if (out.requires_grad()) {
    const int out_id = out.id();
    tape.node(out).backprop = [x_id, out_id, k](Tape& t) {
      Tape::Node& xo = t.node_by_id(x_id);
      Tape::Node& oo = t.node_by_id(out_id);
      for (std::size_t i = 0; i < oo.grad.size(); ++i) xo.grad[i] += k * oo.grad[i];
    };
  }
  return out;
}

}  // namespace rainscale

#endif  // RAINSCALE_TENSOR_HPP_

#ifndef RAINSCALE_BLOCKS_HPP_
#define RAINSCALE_BLOCKS_HPP_

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "rainscale/error.hpp"
#include "rainscale/rng.hpp"
#include "rainscale/tensor.hpp"

namespace rainscale {

inline constexpr double kLeakySlope = 0.2;

namespace detail {

/// Kaiming-uniform fan-in initialization with the leaky-relu gain.
inline void init_conv_weight(Param& w, int fan_in, Rng& rng) {
  const double gain = std::sqrt(2.0 / (1.0 + kLeakySlope * kLeakySlope));
  const double limit = gain * std::sqrt(3.0 / fan_in);
  for (double& v : w.value) v = rng.uniform(-limit, limit);
}

}  // namespace detail

struct Conv2dLayer {
  Param weight, bias;
  int stride = 1, padding = 0;

  Conv2dLayer() = default;
  Conv2dLayer(const std::string& name, int in_c, int out_c, int k, int stride_,
              int padding_, Rng& rng)
      : weight(name + ".weight", Shape4{out_c, in_c, k, k}),
        bias(name + ".bias", Shape4{1, out_c, 1, 1}),
        stride(stride_), padding(padding_) {
    detail::init_conv_weight(weight, in_c * k * k, rng);
  }

  Tensor forward(Tape& t, const Tensor& x) {
    return conv2d(x, t.param(weight), t.param(bias), stride, padding);
  }

  void collect(std::vector<Param*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

struct TConv2dLayer {
  Param weight, bias;  // weight is [in_c, out_c, k, k]
  int stride = 2;

  TConv2dLayer() = default;
  TConv2dLayer(const std::string& name, int in_c, int out_c, int k, int stride_,
               Rng& rng)
      : weight(name + ".weight", Shape4{in_c, out_c, k, k}),
        bias(name + ".bias", Shape4{1, out_c, 1, 1}), stride(stride_) {
    detail::init_conv_weight(weight, in_c * k * k, rng);
  }

  Tensor forward(Tape& t, const Tensor& x) {
    return transposed_conv2d(x, t.param(weight), t.param(bias), stride);
  }

  void collect(std::vector<Param*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

/// Declarative description of one architectural block; widths default to the
/// desk-scale configuration.
struct BlockSpec {
  enum class Kind { inception, channel_attn, spatial_attn, encoder, upsample };
  Kind kind = Kind::inception;
  int in_channels = 0;
  int out_channels = 0;
  std::array<int, 3> branches{8, 8, 8};  // 1x1 / 3x3 / 5x5 widths
  int reduction = 4;
  int spatial_kernel = 7;

  void validate() const {
    require(in_channels > 0, errc::invalid_spec, "in_channels must be positive");
    switch (kind) {
      case Kind::inception:
        require(branches[0] > 0 && branches[1] > 0 && branches[2] > 0,
                errc::invalid_spec, "inception branch widths must be positive");
        require(branches[0] + branches[1] + branches[2] == out_channels,
                errc::invalid_spec, "inception branches must sum to out_channels");
        break;
      case Kind::channel_attn:
        require(reduction > 0 && in_channels % reduction == 0, errc::invalid_spec,
                "reduction must divide in_channels");
        break;
      case Kind::spatial_attn:
        require(spatial_kernel % 2 == 1, errc::invalid_spec,
                "spatial attention kernel must be odd");
        break;
      case Kind::encoder:
      case Kind::upsample:
        require(out_channels > 0, errc::invalid_spec, "out_channels must be positive");
        break;
    }
  }
};

/// Parallel 1x1 / 3x3 / 5x5 convolutions, channel-concatenated. Spatial size
/// is preserved by "same" padding.
struct InceptionBlock {
  Conv2dLayer b1, b3, b5;

  InceptionBlock() = default;
  InceptionBlock(const std::string& name, const BlockSpec& spec, Rng& rng) {
    spec.validate();
    require(spec.kind == BlockSpec::Kind::inception, errc::invalid_spec,
            "not an inception spec");
    b1 = Conv2dLayer(name + ".b1", spec.in_channels, spec.branches[0], 1, 1, 0, rng);
    b3 = Conv2dLayer(name + ".b3", spec.in_channels, spec.branches[1], 3, 1, 1, rng);
    b5 = Conv2dLayer(name + ".b5", spec.in_channels, spec.branches[2], 5, 1, 2, rng);
  }

  Tensor forward(Tape& t, const Tensor& x) {
    std::vector<Tensor> outs;
    outs.push_back(activation(b1.forward(t, x), Activation::leaky_relu, kLeakySlope));
    outs.push_back(activation(b3.forward(t, x), Activation::leaky_relu, kLeakySlope));
    outs.push_back(activation(b5.forward(t, x), Activation::leaky_relu, kLeakySlope));
    return concat_channels(outs);
  }

  void collect(std::vector<Param*>& out) {
    b1.collect(out);
    b3.collect(out);
    b5.collect(out);
  }
};

/// CBAM channel gate: global average and max descriptors pass through a
/// shared bottleneck, are summed, and squashed into per-channel weights.
struct ChannelAttention {
  Conv2dLayer fc1, fc2;  // 1x1 convs acting on (n,c,1,1)

  ChannelAttention() = default;
  ChannelAttention(const std::string& name, const BlockSpec& spec, Rng& rng) {
    spec.validate();
    require(spec.kind == BlockSpec::Kind::channel_attn, errc::invalid_spec,
            "not a channel attention spec");
    const int mid = spec.in_channels / spec.reduction;
    fc1 = Conv2dLayer(name + ".fc1", spec.in_channels, mid, 1, 1, 0, rng);
    fc2 = Conv2dLayer(name + ".fc2", mid, spec.in_channels, 1, 1, 0, rng);
  }

  Tensor forward(Tape& t, const Tensor& x) {
    Tensor avg = pool_stats(x, PoolKind::global_avg);
    Tensor mx = pool_stats(x, PoolKind::global_max);
    Tensor ha = fc2.forward(t, activation(fc1.forward(t, avg), Activation::relu));
    Tensor hm = fc2.forward(t, activation(fc1.forward(t, mx), Activation::relu));
    Tensor gate = activation(elementwise(ha, hm, EwKind::add), Activation::sigmoid);
    return elementwise(x, gate, EwKind::mul);
  }

  void collect(std::vector<Param*>& out) {
    fc1.collect(out);
    fc2.collect(out);
  }
};

/// CBAM spatial gate: channel mean and max maps, a kxk convolution, and a
/// sigmoid produce an (n,1,h,w) map multiplying the features.
struct SpatialAttention {
  Conv2dLayer conv;

  SpatialAttention() = default;
  SpatialAttention(const std::string& name, const BlockSpec& spec, Rng& rng) {
    spec.validate();
    require(spec.kind == BlockSpec::Kind::spatial_attn, errc::invalid_spec,
            "not a spatial attention spec");
    conv = Conv2dLayer(name + ".conv", 2, 1, spec.spatial_kernel, 1,
                       spec.spatial_kernel / 2, rng);
  }

  Tensor forward(Tape& t, const Tensor& x) {
    std::vector<Tensor> maps{pool_stats(x, PoolKind::channel_mean_map),
                             pool_stats(x, PoolKind::channel_max_map)};
    Tensor gate =
        activation(conv.forward(t, concat_channels(maps)), Activation::sigmoid);
    return elementwise(x, gate, EwKind::mul);
  }

  void collect(std::vector<Param*>& out) { conv.collect(out); }
};

/// Two 3x3 convolution layers preparing one variable's grid for stacking.
struct VariableEncoder {
  Conv2dLayer c1, c2;

  VariableEncoder() = default;
  VariableEncoder(const std::string& name, const BlockSpec& spec, Rng& rng) {
    spec.validate();
    require(spec.kind == BlockSpec::Kind::encoder, errc::invalid_spec,
            "not an encoder spec");
    c1 = Conv2dLayer(name + ".c1", spec.in_channels, spec.out_channels, 3, 1, 1, rng);
    c2 = Conv2dLayer(name + ".c2", spec.out_channels, spec.out_channels, 3, 1, 1, rng);
  }

  Tensor forward(Tape& t, const Tensor& x) {
    Tensor h = activation(c1.forward(t, x), Activation::leaky_relu, kLeakySlope);
    return activation(c2.forward(t, h), Activation::leaky_relu, kLeakySlope);
  }

  void collect(std::vector<Param*>& out) {
    c1.collect(out);
    c2.collect(out);
  }
};

/// Transposed-convolution stage doubling both spatial dimensions.
struct UpsampleStage {
  TConv2dLayer tconv;

  UpsampleStage() = default;
  UpsampleStage(const std::string& name, const BlockSpec& spec, Rng& rng) {
    spec.validate();
    require(spec.kind == BlockSpec::Kind::upsample, errc::invalid_spec,
            "not an upsample spec");
    tconv = TConv2dLayer(name + ".tconv", spec.in_channels, spec.out_channels, 2, 2, rng);
  }

  Tensor forward(Tape& t, const Tensor& x) {
    return activation(tconv.forward(t, x), Activation::leaky_relu, kLeakySlope);
  }

  void collect(std::vector<Param*>& out) { tconv.collect(out); }
};

inline Tensor inception_forward(Tape& t, InceptionBlock& block, const Tensor& x) {
  return block.forward(t, x);
}
inline Tensor channel_attention(Tape& t, ChannelAttention& block, const Tensor& x) {
  return block.forward(t, x);
}
inline Tensor spatial_attention(Tape& t, SpatialAttention& block, const Tensor& x) {
  return block.forward(t, x);
}
inline Tensor variable_encoder_forward(Tape& t, VariableEncoder& block,
                                       const Tensor& v) {
  return block.forward(t, v);
}
inline Tensor upsample_stage(Tape& t, UpsampleStage& block, const Tensor& x) {
  return block.forward(t, x);
}

}  // namespace rainscale

#endif  // RAINSCALE_BLOCKS_HPP_

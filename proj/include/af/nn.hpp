#pragma once

#include <string>
#include <vector>

#include "af/rng.hpp"
#include "af/tensor.hpp"

namespace af {

/// One checkpointable tensor. Non-trainable entries (batch-norm running
/// stats) are saved and restored but never touched by the optimizer.
struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};
using ParamList = std::vector<NamedTensor>;

struct Conv2dParams {
  Tensor weight;  // [out_ch, in_ch, kh, kw], kh == kw odd
  Tensor bias;    // [out_ch]
  std::size_t stride = 1;
  std::size_t padding = 0;
};

struct LinearParams {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

struct BatchNorm2dParams {
  Tensor scale;         // [C]
  Tensor shift;         // [C]
  Tensor running_mean;  // [C], plain buffer, never on tape
  Tensor running_var;   // [C]
  double eps = 1e-5;
  double momentum = 0.1;
};

struct ResidualBlockParams {
  Conv2dParams conv1, conv2;
  BatchNorm2dParams bn1, bn2;
  bool has_downsample = false;
  Conv2dParams down_conv;  // 1x1, used when stride != 1 or channels change
  BatchNorm2dParams down_bn;
};

struct EncoderLayerParams {
  LinearParams q, k, v, o;
  LinearParams ffn1, ffn2;
  Tensor ln1_scale, ln1_shift;  // [d_model]
  Tensor ln2_scale, ln2_shift;
  std::size_t n_heads = 1;
};

// Constructors draw from the Rng in a fixed order: He-uniform weights
// (bound sqrt(6/fan_in)), zero biases, ones/zeros for norm scale/shift.
Conv2dParams make_conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t k,
                         std::size_t stride, std::size_t padding, Rng& rng);
LinearParams make_linear(std::size_t in, std::size_t out, Rng& rng);
BatchNorm2dParams make_batchnorm2d(std::size_t channels);
ResidualBlockParams make_residual_block(std::size_t in_ch, std::size_t out_ch,
                                        std::size_t stride, Rng& rng);
EncoderLayerParams make_encoder_layer(std::size_t d_model, std::size_t d_ff,
                                      std::size_t n_heads, Rng& rng);

/// Cross-correlation (no kernel flip) with zero padding.
/// x: [B, C, H, W] -> [B, out_ch, H', W'], H' = (H + 2·pad − k)/stride + 1.
Tensor conv2d(const Tensor& x, const Conv2dParams& p);

/// x: [N, in] -> [N, out], or [B, T, in] -> [B, T, out].
Tensor linear(const Tensor& x, const LinearParams& p);

/// Train mode normalizes per channel over (B, H, W) with population variance
/// and updates running stats in place; eval mode applies the running stats.
Tensor batchnorm2d(const Tensor& x, BatchNorm2dParams& p, bool train);

/// Normalizes the last axis to mean 0 / variance 1, then applies scale+shift.
Tensor layernorm(const Tensor& x, const Tensor& scale, const Tensor& shift,
                 double eps = 1e-5);

/// relu( bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x) ).
Tensor residual_block(const Tensor& x, ResidualBlockParams& p, bool train);

/// Bidirectional self-attention, softmax(QKᵀ/√d_head)V per head. When
/// attn_out is given it receives the [B·h, T, T] attention weights.
Tensor multi_head_attention(const Tensor& tokens, const EncoderLayerParams& p,
                            Tensor* attn_out = nullptr);

/// Post-norm encoder: x = ln1(x + MHA(x)); x = ln2(x + FFN(x)),
/// FFN = linear -> relu -> linear.
Tensor encoder_layer(const Tensor& tokens, const EncoderLayerParams& p);

/// Nearest-neighbour 2x spatial upsampling, [B,C,H,W] -> [B,C,2H,2W].
Tensor upsample2x_nearest(const Tensor& x);

void collect(const Conv2dParams& p, const std::string& prefix, ParamList& out);
void collect(const LinearParams& p, const std::string& prefix, ParamList& out);
void collect(const BatchNorm2dParams& p, const std::string& prefix,
             ParamList& out);
void collect(const ResidualBlockParams& p, const std::string& prefix,
             ParamList& out);
void collect(const EncoderLayerParams& p, const std::string& prefix,
             ParamList& out);

}  // namespace af

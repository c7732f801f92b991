#pragma once

#include <cstdint>
#include <string>

#include "melodi/attention.hpp"
#include "melodi/params.hpp"
#include "melodi/tensor.hpp"

namespace melodi {

// Linear token mixer: combines the W+U rows of [x; u] into out_len rows,
// channel by channel. weights is [(W+U) x out_len].
struct MixerMatrix {
  Tensor weights;

  bool defined() const { return weights.defined(); }
  std::size_t in_len() const { return weights.dim(0); }
  std::size_t out_len() const { return weights.dim(1); }
  std::size_t parameter_count() const { return defined() ? weights.size() : 0; }
};

struct LayerNormParams {
  Tensor gain, bias;
};

struct FeedForwardParams {
  Tensor in, in_bias, out, out_bias;
};

struct ShortTermLayerParams {
  AttentionParams attention;
  LayerNormParams norm_attn, norm_ffn;
  FeedForwardParams ffn;
  MixerMatrix mix_up;     // towards the next layer; absent without branching
  MixerMatrix mix_right;  // towards the next window; absent without branching or memory
};

// Geometry and switches for building one layer's parameters.
struct LayerSpec {
  std::size_t dim = 0;
  std::size_t heads = 1;
  std::size_t ffn_hidden = 0;
  std::size_t window_len = 0;    // W
  std::size_t summary_len = 0;   // U
  std::size_t memory_len = 0;    // S
  int max_offset = 0;
  bool branching = true;
  bool memory_enabled = true;  // attends to and updates short-term memory
  bool gated = false;          // owns alpha logits for a cross-attention path
  std::size_t total_layers = 1;  // residual projection init scale
};

ShortTermLayerParams make_short_term_params(ParameterStore& store, const std::string& prefix,
                                            const LayerSpec& spec);

// Mixer init: small noise plus an identity copy of the first min(U, out)
// summary rows.
MixerMatrix make_mixer(ParameterStore& store, const std::string& name, std::size_t window_len,
                       std::size_t summary_len, std::size_t out_len);

// Per-call dropout: a rate plus the key all masks of the call derive from.
struct DropoutSpec {
  real rate = 0;
  std::uint64_t key = 0;

  DropoutSpec at(std::uint64_t site) const;
};

// Short-term memory as seen by one layer. `empty` marks the placeholder used
// before the first window; its rows are masked out.
struct MemoryTokens {
  Tensor tokens;  // [S x dim]
  bool empty = true;
};

// Everything a block attends to besides its own [x; u] tokens.
struct AttentionContext {
  MemoryTokens prefix_tokens;                  // short-term memory z
  Tensor prefix_keys, prefix_values;           // projected KV prefix (Transformer-XL cache)
  Tensor memory_keys, memory_values;           // gated cross-attention store
};

struct BlockOutput {
  Tensor x_out;   // [W x dim]
  Tensor u_hat;   // [U x dim]
  Tensor ctx_keys, ctx_values;  // projected K/V of the W context rows
};

// Pre-norm transformer block over queries [x; u] and keys [prefix; x; u].
// The prefix is read-only context. A non-empty memory adds a cross-attention
// path with the same projections and no mask or position bias, merged per
// head through the gate before the output projection.
BlockOutput transformer_block(const Tensor& x_in, const Tensor& u_in, const AttentionContext& ctx,
                              const ShortTermLayerParams& params, const DropoutSpec& dropout = {});

// mixerᵀ · [x_out; u_hat]
Tensor token_mix(const Tensor& x_out, const Tensor& u_hat, const MixerMatrix& mixer);

struct ShortTermOutput {
  Tensor z_next;
  Tensor x_out;
  Tensor u_out;
  Tensor u_hat;
};

// Splits a block's output into the next layer's summary and the next
// window's memory through the two mixers (summary branching).
ShortTermOutput summary_branching(const BlockOutput& block, bool has_memory,
                                  const ShortTermLayerParams& params, bool branching);

// One recurrent-compression layer step. Without branching, u_out and z_next
// are both u_hat.
ShortTermOutput short_term_step(const MemoryTokens& z_prev, const Tensor& x_in, const Tensor& u_in,
                                const ShortTermLayerParams& params, bool branching,
                                const DropoutSpec& dropout = {});

// The learned summary tokens fed to the first layer.
inline Tensor init_summary(const Tensor& embedding) { return embedding; }

}  // namespace melodi

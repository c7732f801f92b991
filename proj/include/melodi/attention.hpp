#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "melodi/tensor.hpp"

namespace melodi {

// Token axis of one attention call: a memory prefix (short-term tokens or a
// cached KV prefix), the context window, then the summary tokens.
struct TokenLayout {
  std::size_t prefix_len = 0;
  std::size_t ctx_len = 0;
  std::size_t summary_len = 0;

  std::size_t queries() const { return ctx_len + summary_len; }
  std::size_t keys() const { return prefix_len + ctx_len + summary_len; }
};

struct AttentionParams {
  std::size_t heads = 1;
  Tensor q_proj, k_proj, v_proj, out_proj;  // [dim x dim]
  Tensor rel_bias;                          // [heads x (2*max_offset + 1)]
  Tensor alpha_logits;                      // [heads]; defined only where a gate exists
  int max_offset = 0;

  std::size_t dim() const { return q_proj.dim(0); }
  std::size_t head_dim() const { return dim() / heads; }
};

// Queries are the context and summary tokens. The prefix is visible to every
// query unless `prefix_visible` is false (empty memory before the first
// window). Context query i sees context keys <= i; summary query j sees all
// context keys and summary keys <= j.
Mask build_mask(const TokenLayout& layout, bool prefix_visible = true);

// Position of key j minus position of query i, clipped to +-max_offset and
// shifted into [0, 2*max_offset]. The prefix occupies -P..-1, context 0..W-1,
// summary W..W+U-1.
std::vector<std::int32_t> relative_buckets(const TokenLayout& layout, int max_offset);

// [heads x queries x keys] bias gathered from the learned table.
Tensor relative_bias(const TokenLayout& layout, const AttentionParams& params);

// Scaled dot-product attention on already-projected q/k/v. Returns the head
// outputs concatenated as [queries x dim], before the output projection.
// `bias` may be undefined and `mask` may be null.
Tensor attention_heads(const Tensor& q, const Tensor& k, const Tensor& v, const Mask* mask,
                       const Tensor& bias, std::size_t heads);

// Full attention: projects queries with q_proj, keys with k_proj and values with
// v_proj, attends per head and applies out_proj.
Tensor attend(const Tensor& queries, const Tensor& keys, const Tensor& values, const Mask* mask,
              const Tensor& bias, const AttentionParams& params);

}  // namespace melodi

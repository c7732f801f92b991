#include "melodi/attention.hpp"

#include <algorithm>
#include <cmath>

namespace melodi {

Mask build_mask(const TokenLayout& layout, bool prefix_visible) {
  const std::size_t p = layout.prefix_len;
  Mask mask(layout.queries(), layout.keys());
  // Summary queries sit after every context key, so one causal rule over the
  // combined [x; u] axis covers both query kinds.
  for (std::size_t i = 0; i < layout.queries(); ++i) {
    for (std::size_t j = 0; j < p; ++j) mask.set(i, j, prefix_visible);
    for (std::size_t j = 0; j <= i; ++j) mask.set(i, p + j, true);
  }
  return mask;
}

std::vector<std::int32_t> relative_buckets(const TokenLayout& layout, int max_offset) {
  const auto p = static_cast<long>(layout.prefix_len);
  std::vector<std::int32_t> buckets(layout.queries() * layout.keys());
  for (std::size_t i = 0; i < layout.queries(); ++i) {
    const long pos_q = static_cast<long>(i);
    for (std::size_t j = 0; j < layout.keys(); ++j) {
      const long pos_k = static_cast<long>(j) - p;
      const long offset = std::clamp(pos_k - pos_q, -static_cast<long>(max_offset),
                                     static_cast<long>(max_offset));
      buckets[i * layout.keys() + j] = static_cast<std::int32_t>(offset + max_offset);
    }
  }
  return buckets;
}

Tensor relative_bias(const TokenLayout& layout, const AttentionParams& params) {
  const auto buckets = relative_buckets(layout, params.max_offset);
  return gather_buckets(params.rel_bias, buckets, layout.queries(), layout.keys());
}

Tensor attention_heads(const Tensor& q, const Tensor& k, const Tensor& v, const Mask* mask,
                       const Tensor& bias, std::size_t heads) {
  if (k.shape() != v.shape()) {
    throw ShapeError("attention: keys " + shape_str(k.shape()) + " vs values " + shape_str(v.shape()));
  }
  const std::size_t head_dim = q.dim(1) / heads;
  Tensor scores = scale(matmul(split_heads(q, heads), transpose(split_heads(k, heads))),
                        real(1) / std::sqrt(static_cast<real>(head_dim)));
  if (bias.defined()) scores = add(scores, bias);
  return merge_heads(matmul(softmax_rows(scores, mask), split_heads(v, heads)));
}

Tensor attend(const Tensor& queries, const Tensor& keys, const Tensor& values, const Mask* mask,
              const Tensor& bias, const AttentionParams& params) {
  const Tensor heads = attention_heads(matmul(queries, params.q_proj), matmul(keys, params.k_proj),
                                       matmul(values, params.v_proj), mask, bias, params.heads);
  return matmul(heads, params.out_proj);
}

}  // namespace melodi

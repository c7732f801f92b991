#include "melodi/short_term.hpp"

#include <cmath>

#include "melodi/rng.hpp"

namespace melodi {

namespace {

constexpr real kInitStd = real(0.02);

enum DropoutSite : std::uint64_t { kAttnOut = 1, kFfnOut = 2 };

Tensor feed_forward(const Tensor& x, const FeedForwardParams& ffn) {
  return add_bias(matmul(gelu(add_bias(matmul(x, ffn.in), ffn.in_bias)), ffn.out), ffn.out_bias);
}

}  // namespace

DropoutSpec DropoutSpec::at(std::uint64_t site) const { return {rate, stream_key({key, site})}; }

MixerMatrix make_mixer(ParameterStore& store, const std::string& name, std::size_t window_len,
                       std::size_t summary_len, std::size_t out_len) {
  Tensor w = store.normal(name, {window_len + summary_len, out_len}, kInitStd);
  auto values = w.mutable_data();
  for (std::size_t i = 0; i < std::min(summary_len, out_len); ++i) {
    values[(window_len + i) * out_len + i] += real(1);
  }
  return {w};
}

ShortTermLayerParams make_short_term_params(ParameterStore& store, const std::string& prefix,
                                            const LayerSpec& spec) {
  if (spec.heads == 0 || spec.dim % spec.heads != 0) {
    throw std::invalid_argument(prefix + ": dim " + std::to_string(spec.dim) +
                                " is not divisible by heads " + std::to_string(spec.heads));
  }
  const real resid_std =
      kInitStd / std::sqrt(real(2) * static_cast<real>(std::max<std::size_t>(spec.total_layers, 1)));
  const std::size_t d = spec.dim;
  ShortTermLayerParams p;
  p.attention.heads = spec.heads;
  p.attention.max_offset = spec.max_offset;
  p.attention.q_proj = store.normal(prefix + ".attn.q_proj", {d, d}, kInitStd);
  p.attention.k_proj = store.normal(prefix + ".attn.k_proj", {d, d}, kInitStd);
  p.attention.v_proj = store.normal(prefix + ".attn.v_proj", {d, d}, kInitStd);
  p.attention.out_proj = store.normal(prefix + ".attn.out_proj", {d, d}, resid_std);
  p.attention.rel_bias = store.constant(
      prefix + ".attn.rel_bias", {spec.heads, static_cast<std::size_t>(2 * spec.max_offset + 1)}, 0);
  if (spec.gated) p.attention.alpha_logits = store.constant(prefix + ".attn.alpha_logits", {spec.heads}, 0);
  p.norm_attn = {store.constant(prefix + ".norm_attn.gain", {d}, 1),
                 store.constant(prefix + ".norm_attn.bias", {d}, 0)};
  p.norm_ffn = {store.constant(prefix + ".norm_ffn.gain", {d}, 1),
                store.constant(prefix + ".norm_ffn.bias", {d}, 0)};
  p.ffn.in = store.normal(prefix + ".ffn.in", {d, spec.ffn_hidden}, kInitStd);
  p.ffn.in_bias = store.constant(prefix + ".ffn.in_bias", {spec.ffn_hidden}, 0);
  p.ffn.out = store.normal(prefix + ".ffn.out", {spec.ffn_hidden, d}, resid_std);
  p.ffn.out_bias = store.constant(prefix + ".ffn.out_bias", {d}, 0);
  if (spec.branching && spec.summary_len > 0) {
    p.mix_up = make_mixer(store, prefix + ".mix_up", spec.window_len, spec.summary_len, spec.summary_len);
    if (spec.memory_enabled) {
      p.mix_right = make_mixer(store, prefix + ".mix_right", spec.window_len, spec.summary_len,
                               spec.memory_len);
    }
  }
  return p;
}

BlockOutput transformer_block(const Tensor& x_in, const Tensor& u_in, const AttentionContext& ctx,
                              const ShortTermLayerParams& params, const DropoutSpec& dropout_spec) {
  const AttentionParams& attn = params.attention;
  const std::size_t w = x_in.rows();
  const std::size_t u = u_in.rows();

  const Tensor tokens = concat_rows({x_in, u_in});
  const Tensor normed = layer_norm(tokens, params.norm_attn.gain, params.norm_attn.bias);
  const Tensor q = matmul(normed, attn.q_proj);
  const Tensor k = matmul(normed, attn.k_proj);
  const Tensor v = matmul(normed, attn.v_proj);

  Tensor prefix_k, prefix_v;
  bool prefix_visible = true;
  if (ctx.prefix_tokens.tokens.defined() && ctx.prefix_tokens.tokens.rows() > 0) {
    const Tensor nz = layer_norm(ctx.prefix_tokens.tokens, params.norm_attn.gain, params.norm_attn.bias);
    prefix_k = matmul(nz, attn.k_proj);
    prefix_v = matmul(nz, attn.v_proj);
    prefix_visible = !ctx.prefix_tokens.empty;
  } else if (ctx.prefix_keys.defined()) {
    prefix_k = ctx.prefix_keys;
    prefix_v = ctx.prefix_values;
  }

  const TokenLayout layout{prefix_k.rows(), w, u};
  const Mask mask = build_mask(layout, prefix_visible);
  Tensor heads = attention_heads(q, concat_rows({prefix_k, k}), concat_rows({prefix_v, v}), &mask,
                                 relative_bias(layout, attn), attn.heads);
  if (ctx.memory_keys.defined() && ctx.memory_keys.rows() > 0) {
    const Tensor cross = attention_heads(q, ctx.memory_keys, ctx.memory_values, nullptr, Tensor{}, attn.heads);
    heads = gated_merge(heads, cross, attn.alpha_logits);
  }

  const Tensor attn_out = dropout(matmul(heads, attn.out_proj), dropout_spec.rate,
                                  dropout_spec.at(kAttnOut).key);
  const Tensor resid = add(tokens, attn_out);
  const Tensor ffn_out =
      dropout(feed_forward(layer_norm(resid, params.norm_ffn.gain, params.norm_ffn.bias), params.ffn),
              dropout_spec.rate, dropout_spec.at(kFfnOut).key);
  const Tensor out = add(resid, ffn_out);

  BlockOutput result;
  result.x_out = u == 0 ? out : slice_rows(out, 0, w);
  result.u_hat = slice_rows(out, w, u);
  result.ctx_keys = u == 0 ? k : slice_rows(k, 0, w);
  result.ctx_values = u == 0 ? v : slice_rows(v, 0, w);
  return result;
}

Tensor token_mix(const Tensor& x_out, const Tensor& u_hat, const MixerMatrix& mixer) {
  const std::size_t in = x_out.rows() + u_hat.rows();
  if (mixer.in_len() != in) {
    throw ShapeError("token_mix: mixer expects " + std::to_string(mixer.in_len()) +
                     " input tokens, got " + std::to_string(in));
  }
  return matmul(transpose(mixer.weights), concat_rows({x_out, u_hat}));
}

ShortTermOutput summary_branching(const BlockOutput& block, bool has_memory,
                                  const ShortTermLayerParams& params, bool branching) {
  ShortTermOutput out;
  out.x_out = block.x_out;
  out.u_hat = block.u_hat;
  if (!branching) {
    out.u_out = block.u_hat;
    if (has_memory) out.z_next = block.u_hat;
    return out;
  }
  out.u_out = params.mix_up.defined() ? token_mix(block.x_out, block.u_hat, params.mix_up) : block.u_hat;
  if (has_memory && params.mix_right.defined()) {
    out.z_next = token_mix(block.x_out, block.u_hat, params.mix_right);
  }
  return out;
}

ShortTermOutput short_term_step(const MemoryTokens& z_prev, const Tensor& x_in, const Tensor& u_in,
                                const ShortTermLayerParams& params, bool branching,
                                const DropoutSpec& dropout_spec) {
  AttentionContext ctx;
  ctx.prefix_tokens = z_prev;
  const BlockOutput block = transformer_block(x_in, u_in, ctx, params, dropout_spec);
  return summary_branching(block, z_prev.tokens.defined(), params, branching);
}

}  // namespace melodi

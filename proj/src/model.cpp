#include "melodi/model.hpp"

#include <algorithm>

#include "melodi/rng.hpp"

namespace melodi {

namespace {

constexpr real kEmbedStd = real(0.02);
constexpr std::uint64_t kLayerSiteBase = 16;

bool contains(const std::vector<int>& v, std::size_t i) {
  return std::find(v.begin(), v.end(), static_cast<int>(i)) != v.end();
}

}  // namespace

Model::Model(const ModelConfig& config) : config_(config), store_(config.seed) {
  validate_model_config(config_);
  const std::size_t d = config_.dim;
  const std::size_t u = summary_len();
  embedding_ = store_.normal("embedding", {config_.vocab_size, d}, kEmbedStd);
  if (u > 0) summary_ = store_.normal("summary_tokens", {u, d}, kEmbedStd);

  int long_slots = 0;
  layers_.resize(config_.n_layers);
  for (std::size_t i = 0; i < config_.n_layers; ++i) {
    ModelLayer& layer = layers_[i];
    const std::string prefix = "layers." + std::to_string(i);
    LayerSpec spec;
    spec.dim = d;
    spec.heads = config_.heads;
    spec.ffn_hidden = config_.ffn_hidden;
    spec.window_len = config_.window_len;
    spec.summary_len = u;
    spec.memory_len = u;
    spec.max_offset = config_.max_rel_offset;
    spec.branching = config_.branching;
    spec.total_layers = config_.n_layers;
    spec.memory_enabled = false;

    switch (config_.memory_policy) {
      case MemoryPolicy::melodi:
        spec.memory_enabled = contains(config_.short_term_enabled_layers, i) && u > 0;
        if (contains(config_.long_term_layer_positions, i)) {
          layer.kind = LayerKind::long_term;
          layer.long_slot = long_slots++;
          layer.params = make_long_term_params(store_, prefix, spec, config_.long_tokens,
                                               config_.copy_short_as_long);
          continue;
        }
        layer.kind = spec.memory_enabled ? LayerKind::short_term : LayerKind::plain;
        break;
      case MemoryPolicy::xl:
        layer.kind = LayerKind::xl;
        break;
      case MemoryPolicy::memorizing:
        layer.kind = contains(config_.long_term_layer_positions, i) ? LayerKind::memorizing : LayerKind::xl;
        spec.gated = layer.kind == LayerKind::memorizing;
        break;
      case MemoryPolicy::none:
        layer.kind = LayerKind::plain;
        break;
    }
    layer.params.base = make_short_term_params(store_, prefix, spec);
  }
  final_norm_ = {store_.constant("final_norm.gain", {d}, 1), store_.constant("final_norm.bias", {d}, 0)};
}

std::size_t Model::summary_len() const {
  return config_.memory_policy == MemoryPolicy::melodi ? config_.short_tokens : 0;
}

std::size_t Model::mixer_parameter_count() const {
  std::size_t total = 0;
  for (const ModelLayer& l : layers_) {
    total += l.params.base.mix_up.parameter_count() + l.params.base.mix_right.parameter_count() +
             l.params.mix_long.parameter_count();
  }
  return total;
}

ModelState Model::initial_state() const {
  ModelState state;
  const std::size_t n = layers_.size();
  const std::size_t d = config_.dim;
  state.short_term.z.resize(n);
  state.xl_keys.resize(n);
  state.xl_values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const ModelLayer& layer = layers_[i];
    const bool has_z = (layer.kind == LayerKind::short_term || layer.kind == LayerKind::long_term) &&
                       summary_len() > 0 && contains(config_.short_term_enabled_layers, i);
    if (has_z) state.short_term.z[i] = {Tensor::zeros({summary_len(), d}), true};
    if (layer.kind == LayerKind::long_term) {
      state.long_term.emplace_back(config_.q_max, config_.long_tokens, d);
    }
    if (layer.kind == LayerKind::memorizing) state.mt_memory = LongTermMemory(config_.q_max, config_.window_len, d);
  }
  return state;
}

void Model::detach_state(ModelState& state) const {
  for (MemoryTokens& z : state.short_term.z) {
    if (z.tokens.defined()) z.tokens = z.tokens.detach();
  }
  for (LongTermMemory& m : state.long_term) m = m.snapshot();
}

void Model::check_state(const ModelState& state) const {
  const std::size_t n = layers_.size();
  if (state.short_term.z.size() != n || state.xl_keys.size() != n || state.xl_values.size() != n) {
    throw ShapeError("model state has " + std::to_string(state.short_term.z.size()) +
                     " layer slots, model has " + std::to_string(n));
  }
  std::size_t longs = 0;
  for (const ModelLayer& l : layers_) longs += l.kind == LayerKind::long_term;
  if (state.long_term.size() != longs) {
    throw ShapeError("model state has " + std::to_string(state.long_term.size()) +
                     " long-term memories, model has " + std::to_string(longs));
  }
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor& z = state.short_term.z[i].tokens;
    if (z.defined() && z.shape() != Shape{summary_len(), config_.dim}) {
      throw ShapeError("layer " + std::to_string(i) + " memory is " + shape_str(z.shape()));
    }
  }
}

Tensor Model::forward_window(ModelState& state, std::span<const std::int32_t> tokens,
                             const DropoutSpec& dropout_spec) const {
  if (tokens.size() != config_.window_len) {
    throw ShapeError("forward_window: expected " + std::to_string(config_.window_len) + " tokens, got " +
                     std::to_string(tokens.size()));
  }
  check_state(state);
  Tensor x = gather_rows(embedding_, tokens);
  Tensor u = summary_.defined() ? init_summary(summary_) : Tensor{};
  const LongTermOptions long_options{config_.branching, config_.copy_short_as_long, config_.detach_long_kv};

  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const ModelLayer& layer = layers_[i];
    const DropoutSpec drop = dropout_spec.at(kLayerSiteBase + i);
    MemoryTokens& z = state.short_term.z[i];
    switch (layer.kind) {
      case LayerKind::plain: {
        const BlockOutput block = transformer_block(x, u, {}, layer.params.base, drop);
        x = block.x_out;
        u = block.u_hat;
        break;
      }
      case LayerKind::short_term:
      case LayerKind::long_term: {
        const ShortTermOutput out =
            layer.kind == LayerKind::short_term
                ? short_term_step(z, x, u, layer.params.base, config_.branching, drop)
                : long_term_step(state.long_term[layer.long_slot], z, x, u, layer.params, long_options,
                                 state.window_counter, drop);
        if (z.tokens.defined()) z = {out.z_next, false};
        x = out.x_out;
        u = out.u_out;
        break;
      }
      case LayerKind::xl:
      case LayerKind::memorizing: {
        AttentionContext ctx;
        ctx.prefix_keys = state.xl_keys[i];
        ctx.prefix_values = state.xl_values[i];
        const bool memorizing = layer.kind == LayerKind::memorizing;
        if (memorizing && !state.mt_memory.empty()) {
          std::tie(ctx.memory_keys, ctx.memory_values) = state.mt_memory.gather_kv();
        }
        const BlockOutput block = transformer_block(x, Tensor{}, ctx, layer.params.base, drop);
        state.xl_keys[i] = block.ctx_keys.detach();
        state.xl_values[i] = block.ctx_values.detach();
        if (memorizing) {
          state.mt_memory.append({state.xl_keys[i], state.xl_values[i], state.window_counter});
        }
        x = block.x_out;
        break;
      }
    }
  }
  ++state.window_counter;
  const Tensor h = layer_norm(x, final_norm_.gain, final_norm_.bias);
  return matmul(h, transpose(embedding_));
}

Tensor Model::forward_segment(ModelState& state, std::span<const std::int32_t> tokens, bool reset,
                              const DropoutSpec& dropout_spec) const {
  const std::size_t w = config_.window_len;
  if (tokens.empty() || tokens.size() % w != 0) {
    throw ShapeError("forward_segment: " + std::to_string(tokens.size()) +
                     " tokens is not a positive multiple of W=" + std::to_string(w));
  }
  if (reset) {
    state = initial_state();
  } else {
    detach_state(state);
  }
  std::vector<Tensor> logits;
  for (std::size_t k = 0; k * w < tokens.size(); ++k) {
    const DropoutSpec window_drop{dropout_spec.rate, stream_key({dropout_spec.key, k})};
    logits.push_back(forward_window(state, tokens.subspan(k * w, w), window_drop));
  }
  return logits.size() == 1 ? logits.front() : concat_rows(logits);
}

}  // namespace melodi

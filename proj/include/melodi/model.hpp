#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "melodi/config.hpp"
#include "melodi/long_term.hpp"
#include "melodi/params.hpp"
#include "melodi/short_term.hpp"

namespace melodi {

enum class LayerKind { plain, short_term, long_term, xl, memorizing };

struct ShortTermState {
  std::vector<MemoryTokens> z;  // one slot per layer; undefined where the layer keeps no memory
};

struct ModelState {
  ShortTermState short_term;
  std::vector<LongTermMemory> long_term;     // one per long-term layer, in layer order
  std::vector<Tensor> xl_keys, xl_values;    // per layer, previous window's context K/V
  LongTermMemory mt_memory;                  // uncompressed per-window KV of the memory layer
  std::int64_t window_counter = 0;
};

struct ModelLayer {
  LayerKind kind = LayerKind::plain;
  LongTermLayerParams params;  // params.base for every kind; mix_long only on long-term layers
  int long_slot = -1;          // index into ModelState::long_term
};

class Model {
 public:
  explicit Model(const ModelConfig& config);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }
  const std::vector<ModelLayer>& layers() const { return layers_; }
  const Tensor& embedding() const { return embedding_; }
  const Tensor& summary_embedding() const { return summary_; }

  std::size_t summary_len() const;
  std::size_t parameter_count() const { return store_.scalar_count(); }
  std::size_t mixer_parameter_count() const;

  ModelState initial_state() const;
  // Detaches carried tensors so a new graph starts from this state.
  void detach_state(ModelState& state) const;

  // tokens.size() == W; returns logits [W x vocab].
  Tensor forward_window(ModelState& state, std::span<const std::int32_t> tokens,
                        const DropoutSpec& dropout = {}) const;

  // tokens.size() is a multiple of W; returns logits [windows*W x vocab].
  // Gradients flow through carried short-term memory across all windows.
  Tensor forward_segment(ModelState& state, std::span<const std::int32_t> tokens, bool reset,
                         const DropoutSpec& dropout = {}) const;

 private:
  void check_state(const ModelState& state) const;

  ModelConfig config_;
  ParameterStore store_;
  Tensor embedding_;  // [vocab x dim], tied with the output head
  Tensor summary_;    // [U x dim]; undefined when U == 0
  std::vector<ModelLayer> layers_;
  LayerNormParams final_norm_;
};

}  // namespace melodi

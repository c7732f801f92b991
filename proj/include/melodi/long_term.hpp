#pragma once

#include <cstdint>
#include <deque>
#include <iosfwd>
#include <string>
#include <utility>

#include "melodi/short_term.hpp"

namespace melodi {

// Compressed key/value pairs produced by one window.
struct KVBlock {
  Tensor keys;    // [L x dim]
  Tensor values;  // [L x dim]
  std::int64_t window_index = 0;
};

// FIFO of per-window KV blocks with capacity q_max windows. Eviction drops
// whole blocks, oldest first.
class LongTermMemory {
 public:
  LongTermMemory() = default;
  LongTermMemory(std::size_t q_max, std::size_t tokens_per_block, std::size_t dim);

  // Throws std::invalid_argument on geometry mismatch or a non-increasing
  // window index.
  void append(KVBlock block);

  // Keys and values of all blocks concatenated oldest first; zero rows when
  // empty.
  std::pair<Tensor, Tensor> gather_kv() const;

  bool empty() const { return queue_.empty(); }
  std::size_t size() const { return queue_.size(); }
  std::size_t stored_pairs() const { return queue_.size() * tokens_per_block_; }
  std::size_t q_max() const { return q_max_; }
  std::size_t tokens_per_block() const { return tokens_per_block_; }
  std::size_t dim() const { return dim_; }
  const std::deque<KVBlock>& blocks() const { return queue_; }
  void clear() { queue_.clear(); }

  // Deep copy with every block detached from any graph.
  LongTermMemory snapshot() const;

  // Snapshot format, little-endian:
  //   char[8] "MLDIMEM1", u64 L, u64 q_max, u64 dim, u64 count,
  //   count x { i64 window_index, f32 keys[L*dim], f32 values[L*dim] }
  void save(std::ostream& out) const;
  static LongTermMemory load(std::istream& in);

 private:
  std::size_t q_max_ = 0;
  std::size_t tokens_per_block_ = 0;
  std::size_t dim_ = 0;
  std::deque<KVBlock> queue_;
};

struct LongTermLayerParams {
  ShortTermLayerParams base;  // attention carries the alpha logits
  MixerMatrix mix_long;       // [(W+U) x L]; absent under copy_short_as_long
};

LongTermLayerParams make_long_term_params(ParameterStore& store, const std::string& prefix,
                                          const LayerSpec& spec, std::size_t long_tokens,
                                          bool copy_short_as_long);

struct LongTermOptions {
  bool branching = true;
  bool copy_short_as_long = false;  // store z_next instead of mixing long tokens (needs L == S)
  bool detach = true;               // cut stored KV from the graph at append
};

// Pure token mix producing the L long-term tokens of this window.
Tensor compress_to_long_tokens(const Tensor& x_out, const Tensor& u_hat, const MixerMatrix& mix_long);

// Projects long tokens into the KV pair stored for later windows, using the
// layer's own normalization and key/value projections.
KVBlock make_kv_block(const Tensor& long_tokens, const ShortTermLayerParams& params,
                      std::int64_t window_index, bool detach);

// Short-term step plus gated cross-attention over `memory`; appends this
// window's compressed KV block to `memory` afterwards.
ShortTermOutput long_term_step(LongTermMemory& memory, const MemoryTokens& z_prev, const Tensor& x_in,
                               const Tensor& u_in, const LongTermLayerParams& params,
                               const LongTermOptions& options, std::int64_t window_index,
                               const DropoutSpec& dropout = {});

}  // namespace melodi

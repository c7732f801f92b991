#include "melodi/long_term.hpp"

#include <istream>
#include <ostream>
#include <stdexcept>

#include "binary_io.hpp"

namespace melodi {

namespace {

constexpr char kSnapshotMagic[9] = "MLDIMEM1";

void check_block(const KVBlock& b, std::size_t tokens, std::size_t dim) {
  const Shape expected{tokens, dim};
  if (!b.keys.defined() || !b.values.defined() || b.keys.shape() != expected ||
      b.values.shape() != expected) {
    throw std::invalid_argument(
        "long-term memory: block geometry " +
        (b.keys.defined() ? shape_str(b.keys.shape()) : std::string("<none>")) + "/" +
        (b.values.defined() ? shape_str(b.values.shape()) : std::string("<none>")) +
        " does not match " + shape_str(expected));
  }
}

}  // namespace

LongTermMemory::LongTermMemory(std::size_t q_max, std::size_t tokens_per_block, std::size_t dim)
    : q_max_(q_max), tokens_per_block_(tokens_per_block), dim_(dim) {
  if (q_max == 0) throw std::invalid_argument("long-term memory: q_max must be positive");
}

void LongTermMemory::append(KVBlock block) {
  check_block(block, tokens_per_block_, dim_);
  if (!queue_.empty() && block.window_index <= queue_.back().window_index) {
    throw std::invalid_argument("long-term memory: window index " + std::to_string(block.window_index) +
                                " after " + std::to_string(queue_.back().window_index));
  }
  queue_.push_back(std::move(block));
  while (queue_.size() > q_max_) queue_.pop_front();
}

std::pair<Tensor, Tensor> LongTermMemory::gather_kv() const {
  if (queue_.empty()) {
    return {Tensor::zeros({0, dim_}), Tensor::zeros({0, dim_})};
  }
  std::vector<Tensor> keys, values;
  keys.reserve(queue_.size());
  values.reserve(queue_.size());
  for (const KVBlock& b : queue_) {
    keys.push_back(b.keys);
    values.push_back(b.values);
  }
  return {concat_rows(keys), concat_rows(values)};
}

LongTermMemory LongTermMemory::snapshot() const {
  LongTermMemory copy(q_max_, tokens_per_block_, dim_);
  for (const KVBlock& b : queue_) copy.queue_.push_back({b.keys.clone(), b.values.clone(), b.window_index});
  return copy;
}

void LongTermMemory::save(std::ostream& out) const {
  io::put_magic(out, kSnapshotMagic);
  io::put<std::uint64_t>(out, tokens_per_block_);
  io::put<std::uint64_t>(out, q_max_);
  io::put<std::uint64_t>(out, dim_);
  io::put<std::uint64_t>(out, queue_.size());
  for (const KVBlock& b : queue_) {
    io::put<std::int64_t>(out, b.window_index);
    for (real v : b.keys.data()) io::put<float>(out, static_cast<float>(v));
    for (real v : b.values.data()) io::put<float>(out, static_cast<float>(v));
  }
}

LongTermMemory LongTermMemory::load(std::istream& in) {
  io::expect_magic(in, kSnapshotMagic);
  const auto tokens = io::get<std::uint64_t>(in);
  const auto q_max = io::get<std::uint64_t>(in);
  const auto dim = io::get<std::uint64_t>(in);
  const auto count = io::get<std::uint64_t>(in);
  if (count > q_max) throw std::runtime_error("memory snapshot holds more blocks than q_max");
  LongTermMemory memory(q_max, tokens, dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    KVBlock b;
    b.window_index = io::get<std::int64_t>(in);
    std::vector<real> k(tokens * dim), v(tokens * dim);
    for (real& x : k) x = static_cast<real>(io::get<float>(in));
    for (real& x : v) x = static_cast<real>(io::get<float>(in));
    b.keys = Tensor::from({tokens, dim}, std::move(k));
    b.values = Tensor::from({tokens, dim}, std::move(v));
    memory.append(std::move(b));
  }
  return memory;
}

LongTermLayerParams make_long_term_params(ParameterStore& store, const std::string& prefix,
                                          const LayerSpec& spec, std::size_t long_tokens,
                                          bool copy_short_as_long) {
  LayerSpec gated = spec;
  gated.gated = true;
  LongTermLayerParams p;
  p.base = make_short_term_params(store, prefix, gated);
  if (!copy_short_as_long) {
    p.mix_long = make_mixer(store, prefix + ".mix_long", spec.window_len, spec.summary_len, long_tokens);
  }
  return p;
}

Tensor compress_to_long_tokens(const Tensor& x_out, const Tensor& u_hat, const MixerMatrix& mix_long) {
  return token_mix(x_out, u_hat, mix_long);
}

KVBlock make_kv_block(const Tensor& long_tokens, const ShortTermLayerParams& params,
                      std::int64_t window_index, bool detach) {
  const Tensor normed = layer_norm(long_tokens, params.norm_attn.gain, params.norm_attn.bias);
  KVBlock block{matmul(normed, params.attention.k_proj), matmul(normed, params.attention.v_proj),
                window_index};
  if (detach) {
    block.keys = block.keys.detach();
    block.values = block.values.detach();
  }
  return block;
}

ShortTermOutput long_term_step(LongTermMemory& memory, const MemoryTokens& z_prev, const Tensor& x_in,
                               const Tensor& u_in, const LongTermLayerParams& params,
                               const LongTermOptions& options, std::int64_t window_index,
                               const DropoutSpec& dropout_spec) {
  AttentionContext ctx;
  ctx.prefix_tokens = z_prev;
  if (!memory.empty()) std::tie(ctx.memory_keys, ctx.memory_values) = memory.gather_kv();
  const BlockOutput block = transformer_block(x_in, u_in, ctx, params.base, dropout_spec);
  ShortTermOutput out = summary_branching(block, z_prev.tokens.defined(), params.base, options.branching);

  Tensor long_tokens;
  if (options.copy_short_as_long) {
    if (!out.z_next.defined() || out.z_next.rows() != memory.tokens_per_block()) {
      throw std::invalid_argument("copy_short_as_long needs short-term memory with L == S tokens");
    }
    long_tokens = out.z_next;
  } else {
    long_tokens = compress_to_long_tokens(block.x_out, block.u_hat, params.mix_long);
  }
  memory.append(make_kv_block(long_tokens, params.base, window_index, options.detach));
  return out;
}

}  // namespace melodi

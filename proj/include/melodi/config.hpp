#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace melodi {

enum class MemoryPolicy { melodi, xl, memorizing, none };

std::string to_string(MemoryPolicy policy);
MemoryPolicy parse_policy(const std::string& text);

struct ModelConfig {
  std::size_t n_layers = 13;
  std::vector<int> long_term_layer_positions{8};
  std::vector<int> short_term_enabled_layers{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
  std::size_t dim = 1024;
  std::size_t heads = 8;
  std::size_t ffn_hidden = 4096;
  std::size_t window_len = 512;   // W
  std::size_t short_tokens = 128;  // S, also the summary token count U
  std::size_t long_tokens = 64;    // L
  std::size_t q_max = 128;
  std::size_t vocab_size = 2048;
  MemoryPolicy memory_policy = MemoryPolicy::melodi;
  bool branching = true;
  bool copy_short_as_long = false;
  bool detach_long_kv = true;
  int max_rel_offset = 64;
  std::uint64_t seed = 0;

  bool operator==(const ModelConfig&) const = default;
};

enum class OptimizerKind { adam, sgd };

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t warmup_steps = 1000;
  double max_lr = 0.01;
  double min_lr = 0.001;
  double dropout = 0.05;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::adam;
  double grad_clip = 1.0;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  std::size_t log_every = 1;
  std::size_t eval_every = 0;        // 0 disables periodic eval
  std::size_t checkpoint_every = 0;  // 0 writes only the final checkpoint
  std::size_t segment_windows = 8;
  std::size_t min_doc_tokens = 0;
  std::size_t eval_max_segments = 0;  // 0 evaluates everything
  bool eval_carry_state = false;
  std::string train_corpus;
  std::string eval_corpus;
  std::string vocab_file;  // built from train_corpus when missing

  bool operator==(const TrainConfig&) const = default;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  bool operator==(const RunConfig&) const = default;
};

// Raised for malformed text and violated invariants. field() names the
// offending key or invariant.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

// Flat `key = value` text. Lists are comma separated and also accept the
// words `all` and `none`. `#` starts a comment. Unknown keys are errors.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);
std::string serialize_config(const RunConfig& config);
std::string serialize_model_config(const ModelConfig& config);

void validate_model_config(const ModelConfig& config);
void validate_train_config(const TrainConfig& config);

// Parses and validates.
RunConfig validate_config(const std::string& text);

// FNV-1a of serialize_model_config.
std::uint64_t config_hash(const ModelConfig& config);

}  // namespace melodi

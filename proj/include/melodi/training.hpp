#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "melodi/config.hpp"
#include "melodi/data.hpp"
#include "melodi/model.hpp"

namespace melodi {

// Linear warmup to max_lr, then cosine decay to min_lr at step == steps.
double lr_schedule(std::size_t step, const TrainConfig& cfg);

// Sum of token cross-entropy over positions with mask set and a target,
// divided by `normalizer`. Throws std::domain_error when nothing is scored.
Tensor sequence_loss(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::span<const std::uint8_t> mask, real normalizer);

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OptimizerState {
  std::uint64_t t = 0;  // completed updates
  std::vector<std::vector<real>> m, v;
};

struct StepResult {
  double loss = 0;       // mean token NLL over the batch
  double grad_norm = 0;  // before clipping
  double lr = 0;
  std::size_t tokens = 0;
};

class Trainer {
 public:
  Trainer(Model& model, const TrainConfig& cfg);

  // One optimizer update on `batch` at schedule position `step`. Each row is
  // an independent segment with state reset before it.
  StepResult train_step(const WindowBatch& batch, std::size_t step);

  const OptimizerState& optimizer() const { return opt_; }

  // Exact state for bit-identical resume: parameters and optimizer moments at
  // full precision plus the next step. Layout, little-endian:
  //   char[8] "MLDISTA1", u64 next_step, u64 t, u64 count,
  //   count x { u32 name_len, name, u64 n, f64 param[n], f64 m[n], f64 v[n] }
  void save_state(const std::string& path, std::size_t next_step) const;
  std::size_t load_state(const std::string& path);

 private:
  void apply_update(double lr, double clip_scale);

  Model& model_;
  TrainConfig cfg_;
  OptimizerState opt_;
};

struct TrainOptions {
  bool resume = false;          // continue from <run_dir>/trainer_state.bin when present
  std::size_t stop_after = 0;   // stop once this many steps are done; 0 runs to cfg.steps
  bool quiet = false;
  std::function<void(std::size_t step, const StepResult&)> on_step;
};

struct TrainSummary {
  std::size_t steps_done = 0;
  double final_loss = 0;
  double eval_ppl = 0;  // 0 when no eval corpus is configured
  std::vector<double> losses;  // losses of the steps run by this call
};

// Full loop: vocab, corpus, batches, metrics.csv, checkpoints, final eval.
// Writes the resolved config to <run_dir>/config.txt.
TrainSummary train(const RunConfig& cfg, const std::string& run_dir, const TrainOptions& options = {});

// Vocab from cfg.vocab_file when it exists; otherwise built from the train
// corpus and saved there (when set).
Vocab prepare_vocab(const RunConfig& cfg, const std::vector<Document>& train_docs);

}  // namespace melodi

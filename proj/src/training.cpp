#include "melodi/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "binary_io.hpp"
#include "json.hpp"
#include "melodi/checkpoint.hpp"
#include "melodi/evaluation.hpp"
#include "melodi/rng.hpp"

namespace melodi {

namespace {

constexpr char kStateMagic[9] = "MLDISTA1";
constexpr double kAdamEps = 1e-8;

}  // namespace

double lr_schedule(std::size_t step, const TrainConfig& cfg) {
  const double w = static_cast<double>(cfg.warmup_steps);
  if (step < cfg.warmup_steps) return cfg.max_lr * (static_cast<double>(step) + 1.0) / w;
  if (cfg.steps <= cfg.warmup_steps) return cfg.min_lr;
  const double progress = static_cast<double>(step - cfg.warmup_steps) /
                          static_cast<double>(cfg.steps - cfg.warmup_steps);
  return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

Tensor sequence_loss(const Tensor& logits, std::span<const std::int32_t> targets,
                     std::span<const std::uint8_t> mask, real normalizer) {
  std::vector<std::uint8_t> scored(targets.size());
  bool any = false;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    scored[i] = (i < mask.size() && mask[i] && targets[i] != kNoTarget) ? 1 : 0;
    any = any || scored[i];
  }
  if (!any) throw std::domain_error("loss: every position is masked");
  return cross_entropy(logits, targets, scored, normalizer);
}

Trainer::Trainer(Model& model, const TrainConfig& cfg) : model_(model), cfg_(cfg) {
  validate_train_config(cfg_);
  for (const Parameter& p : model_.store().all()) {
    opt_.m.emplace_back(cfg_.optimizer == OptimizerKind::adam ? p.tensor.size() : 0, real(0));
    opt_.v.emplace_back(cfg_.optimizer == OptimizerKind::adam ? p.tensor.size() : 0, real(0));
  }
}

StepResult Trainer::train_step(const WindowBatch& batch, std::size_t step) {
  model_.store().zero_grad();
  const std::size_t scored = batch.scored();
  if (scored == 0) throw std::domain_error("train_step: batch has no scored positions");
  StepResult result;
  result.lr = lr_schedule(step, cfg_);
  double total = 0;
  for (std::size_t r = 0; r < batch.rows; ++r) {
    Tape tape;
    TapeScope scope(tape);
    ModelState state;
    const DropoutSpec drop{static_cast<real>(cfg_.dropout), stream_key({cfg_.seed, step, r})};
    const Tensor logits = model_.forward_segment(state, batch.row_tokens(r), true, drop);
    const auto targets = batch.row_targets(r);
    bool any = false;
    for (std::int32_t t : targets) any = any || t != kNoTarget;
    if (!any) continue;
    const Tensor loss = sequence_loss(logits, targets, batch.row_mask(r), static_cast<real>(scored));
    total += static_cast<double>(loss.item());
    tape.backward(loss);
    for (std::uint8_t m : batch.row_mask(r)) result.tokens += m;
  }
  result.loss = total;
  if (!std::isfinite(total)) {
    throw NonFiniteLoss("non-finite loss " + std::to_string(total) + " at step " + std::to_string(step) +
                        " (lr " + std::to_string(result.lr) + ")");
  }

  double sq = 0;
  for (const Parameter& p : model_.store().all()) {
    if (!p.trainable || !p.tensor.has_grad()) continue;
    for (real g : p.tensor.node()->grad) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  result.grad_norm = std::sqrt(sq);
  if (!std::isfinite(result.grad_norm)) {
    throw NonFiniteLoss("non-finite gradient norm at step " + std::to_string(step));
  }
  const double clip_scale = result.grad_norm > cfg_.grad_clip ? cfg_.grad_clip / result.grad_norm : 1.0;
  apply_update(result.lr, clip_scale);
  return result;
}

void Trainer::apply_update(double lr, double clip_scale) {
  ++opt_.t;
  auto& params = model_.store().all();
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(opt_.t));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(opt_.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = params[k];
    if (!p.trainable) continue;
    auto values = p.tensor.mutable_data();
    const Storage& grad = p.tensor.node()->grad;
    const bool has_grad = !grad.empty();
    if (cfg_.optimizer == OptimizerKind::sgd) {
      if (!has_grad) continue;
      for (std::size_t i = 0; i < values.size(); ++i) {
        values[i] -= static_cast<real>(lr * clip_scale * grad[i]);
      }
      continue;
    }
    auto& m = opt_.m[k];
    auto& v = opt_.v[k];
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double g = has_grad ? clip_scale * static_cast<double>(grad[i]) : 0.0;
      m[i] = static_cast<real>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g);
      v[i] = static_cast<real>(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g);
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + kAdamEps) +
                            cfg_.weight_decay * static_cast<double>(values[i]);
      values[i] = static_cast<real>(values[i] - lr * update);
    }
  }
}

void Trainer::save_state(const std::string& path, std::size_t next_step) const {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write trainer state " + tmp);
    const auto& params = model_.store().all();
    io::put_magic(out, kStateMagic);
    io::put<std::uint64_t>(out, next_step);
    io::put<std::uint64_t>(out, opt_.t);
    io::put<std::uint64_t>(out, params.size());
    for (std::size_t k = 0; k < params.size(); ++k) {
      const Parameter& p = params[k];
      io::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
      out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      io::put<std::uint64_t>(out, p.tensor.size());
      for (real x : p.tensor.data()) io::put<double>(out, x);
      for (std::size_t i = 0; i < p.tensor.size(); ++i) io::put<double>(out, opt_.m[k].empty() ? 0.0 : opt_.m[k][i]);
      for (std::size_t i = 0; i < p.tensor.size(); ++i) io::put<double>(out, opt_.v[k].empty() ? 0.0 : opt_.v[k][i]);
    }
    if (!out) throw std::runtime_error("failed writing trainer state " + tmp);
  }
  std::rename(tmp.c_str(), path.c_str());
}

std::size_t Trainer::load_state(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open trainer state " + path);
  io::expect_magic(in, kStateMagic);
  const auto next_step = io::get<std::uint64_t>(in);
  opt_.t = io::get<std::uint64_t>(in);
  auto& params = model_.store().all();
  if (io::get<std::uint64_t>(in) != params.size()) throw std::runtime_error("trainer state parameter count differs");
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = params[k];
    std::string name(io::get<std::uint32_t>(in), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    if (name != p.name || io::get<std::uint64_t>(in) != p.tensor.size()) {
      throw std::runtime_error("trainer state record '" + name + "' does not match '" + p.name + "'");
    }
    for (real& x : p.tensor.mutable_data()) x = static_cast<real>(io::get<double>(in));
    for (std::size_t i = 0; i < p.tensor.size(); ++i) {
      const double x = io::get<double>(in);
      if (!opt_.m[k].empty()) opt_.m[k][i] = static_cast<real>(x);
    }
    for (std::size_t i = 0; i < p.tensor.size(); ++i) {
      const double x = io::get<double>(in);
      if (!opt_.v[k].empty()) opt_.v[k][i] = static_cast<real>(x);
    }
  }
  return next_step;
}

Vocab prepare_vocab(const RunConfig& cfg, const std::vector<Document>& train_docs) {
  const std::string& path = cfg.train.vocab_file;
  if (!path.empty() && std::filesystem::exists(path)) {
    Vocab v = Vocab::load(path);
    if (v.size() != cfg.model.vocab_size) {
      throw ConfigError("vocab_size", "vocab file " + path + " has " + std::to_string(v.size()) +
                                          " ids, config says " + std::to_string(cfg.model.vocab_size));
    }
    return v;
  }
  std::vector<std::string> texts;
  texts.reserve(train_docs.size());
  for (const Document& d : train_docs) texts.push_back(d.text);
  Vocab v = build_vocab(texts, cfg.model.vocab_size);
  if (!path.empty()) {
    if (const auto parent = std::filesystem::path(path).parent_path(); !parent.empty()) {
      std::filesystem::create_directories(parent);
    }
    v.save(path);
  }
  return v;
}

TrainSummary train(const RunConfig& cfg, const std::string& run_dir, const TrainOptions& options) {
  namespace fs = std::filesystem;
  validate_model_config(cfg.model);
  validate_train_config(cfg.train);
  const TrainConfig& tc = cfg.train;
  if (tc.train_corpus.empty()) throw ConfigError("train_corpus", "is required for training");
  fs::create_directories(run_dir);
  const fs::path dir(run_dir);
  std::ofstream(dir / "config.txt") << serialize_config(cfg);

  const auto train_docs = load_corpus(tc.train_corpus);
  const Vocab vocab = prepare_vocab(cfg, train_docs);
  vocab.save((dir / "vocab.txt").string());
  const std::size_t segment_len = tc.segment_windows * cfg.model.window_len;
  auto encoded = filter_min_length(encode_corpus(train_docs, vocab), tc.min_doc_tokens);
  BatchStream stream(segment_corpus(encoded, segment_len, cfg.model.window_len), tc.batch_size, tc.seed, true);

  std::vector<Segment> eval_segments;
  if (!tc.eval_corpus.empty()) {
    eval_segments = segment_corpus(
        filter_min_length(encode_corpus(load_corpus(tc.eval_corpus), vocab), tc.min_doc_tokens), segment_len,
        cfg.model.window_len);
  }

  nlohmann::json meta = {
      {"optimizer", tc.optimizer == OptimizerKind::adam ? "adam with decoupled weight decay (stands in for adafactor)"
                                                        : "sgd"},
      {"precision", sizeof(real) == 4 ? "float32" : "float64"},
      {"config_hash", config_hash(cfg.model)},
      {"train_segments", stream.segment_count()},
      {"batches_per_epoch", stream.batches_per_epoch()},
      {"eval_segments", eval_segments.size()},
  };
  std::ofstream(dir / "metadata.json") << meta.dump(2) << "\n";

  Model model(cfg.model);
  Trainer trainer(model, tc);
  std::size_t start = 0;
  const fs::path state_path = dir / "trainer_state.bin";
  if (options.resume && fs::exists(state_path)) start = trainer.load_state(state_path.string());

  // Metrics rows for steps beyond the resume point are dropped and rewritten.
  const fs::path metrics_path = dir / "metrics.csv";
  {
    std::vector<std::string> keep;
    if (start > 0 && fs::exists(metrics_path)) {
      std::ifstream in(metrics_path);
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        if (std::stoul(line.substr(0, line.find(','))) <= start) keep.push_back(line);
      }
    }
    std::ofstream out(metrics_path, std::ios::trunc);
    out << "step,loss,ppl,lr,tokens_per_sec\n";
    for (const auto& l : keep) out << l << "\n";
  }
  std::ofstream metrics(metrics_path, std::ios::app);
  std::ofstream eval_log(dir / "eval.csv", start > 0 ? std::ios::app : std::ios::trunc);
  if (start == 0) eval_log << "step,eval_loss,eval_ppl,tokens\n";

  TrainSummary summary;
  const std::size_t end = options.stop_after == 0 ? tc.steps : std::min(tc.steps, options.stop_after);
  auto window_start = std::chrono::steady_clock::now();
  std::size_t window_tokens = 0;
  auto write_checkpoint = [&](std::size_t next_step) {
    save_checkpoint((dir / "checkpoint.bin").string(), model);
    trainer.save_state(state_path.string(), next_step);
  };
  for (std::size_t step = start; step < end; ++step) {
    const StepResult res = trainer.train_step(stream.batch_for_step(step), step);
    summary.losses.push_back(res.loss);
    summary.final_loss = res.loss;
    window_tokens += res.tokens;
    if (options.on_step) options.on_step(step, res);
    if ((step + 1) % tc.log_every == 0) {
      const auto now = std::chrono::steady_clock::now();
      const double secs = std::chrono::duration<double>(now - window_start).count();
      char line[160];
      std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.3f\n", step + 1, res.loss, std::exp(res.loss),
                    res.lr, secs > 0 ? static_cast<double>(window_tokens) / secs : 0.0);
      metrics << line;
      metrics.flush();
      if (!options.quiet) {
        std::printf("step %zu loss %.4f lr %.3g gnorm %.3f\n", step + 1, res.loss, res.lr, res.grad_norm);
        std::fflush(stdout);
      }
      window_start = now;
      window_tokens = 0;
    }
    if (tc.eval_every > 0 && !eval_segments.empty() && (step + 1) % tc.eval_every == 0 && step + 1 < tc.steps) {
      const auto r = evaluate(model, eval_segments, tc.eval_carry_state, tc.eval_max_segments);
      eval_log << step + 1 << "," << r.mean_nll() << "," << r.perplexity() << "," << r.tokens << "\n";
      eval_log.flush();
    }
    if (tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0) write_checkpoint(step + 1);
  }
  summary.steps_done = end;
  write_checkpoint(end);

  if (end == tc.steps && !eval_segments.empty()) {
    const auto r = evaluate(model, eval_segments, tc.eval_carry_state, tc.eval_max_segments);
    summary.eval_ppl = r.perplexity();
    eval_log << end << "," << r.mean_nll() << "," << r.perplexity() << "," << r.tokens << "\n";
    nlohmann::json result = {{"steps", end},
                             {"final_loss", summary.final_loss},
                             {"eval_ppl", summary.eval_ppl},
                             {"eval_nll", r.mean_nll()},
                             {"eval_tokens", r.tokens}};
    std::ofstream(dir / "result.json") << result.dump(2) << "\n";
  }
  return summary;
}

}  // namespace melodi

#include "melodi/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "melodi/rng.hpp"
#include "melodi/training.hpp"

namespace melodi {

namespace {

constexpr std::int32_t kFillerBase = 0, kFillerCount = 64;
constexpr std::int32_t kKeyBase = 64, kKeyCount = 64;
constexpr std::int32_t kValueBase = 128, kValueCount = 64;
constexpr std::int32_t kSetMarker = 200, kQueryMarker = 201;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

MemoryReport memory_footprint(const ModelConfig& c) {
  MemoryReport r;
  r.policy = to_string(c.memory_policy);
  r.layers = c.n_layers;
  r.short_tokens = c.short_tokens;
  r.long_tokens = c.long_tokens;
  r.window_len = c.window_len;
  r.q_max = c.q_max;
  r.dim = c.dim;
  const std::uint64_t dim = c.dim, w = c.window_len, n = c.n_layers;
  switch (c.memory_policy) {
    case MemoryPolicy::melodi:
      r.short_floats = std::uint64_t{c.short_tokens} * dim * c.short_term_enabled_layers.size();
      r.long_floats = std::uint64_t{c.long_tokens} * 2 * dim * c.q_max * c.long_term_layer_positions.size();
      break;
    case MemoryPolicy::xl:
      r.short_floats = w * 2 * dim * n;
      break;
    case MemoryPolicy::memorizing:
      r.short_floats = w * 2 * dim * n;
      r.long_floats = w * 2 * dim * c.q_max;
      break;
    case MemoryPolicy::none:
      break;
  }
  r.total_floats = r.short_floats + r.long_floats;
  return r;
}

std::string memory_report_header() { return "policy,layers,S,L,W,Q_max,dim,All,Short,Long"; }

std::string memory_report_row(const MemoryReport& r) {
  std::ostringstream out;
  out << r.policy << "," << r.layers << "," << r.short_tokens << "," << r.long_tokens << "," << r.window_len
      << "," << r.q_max << "," << r.dim << "," << r.total_floats << "," << r.short_floats << ","
      << r.long_floats;
  return out.str();
}

double PerplexityResult::perplexity() const { return std::exp(mean_nll()); }

PerplexityResult evaluate(const Model& model, const std::vector<Segment>& segments, bool carry_state,
                          std::size_t max_segments) {
  PerplexityResult result;
  ModelState state = model.initial_state();
  const Segment* prev = nullptr;
  const std::size_t n = max_segments == 0 ? segments.size() : std::min(max_segments, segments.size());
  for (std::size_t i = 0; i < n; ++i) {
    const Segment& s = segments[i];
    const bool continues = carry_state && prev != nullptr && prev->doc == s.doc &&
                           prev->index_in_doc + 1 == s.index_in_doc;
    const Tensor logits = model.forward_segment(state, s.tokens, !continues);
    const std::size_t scored = s.scored();
    if (scored > 0) {
      result.nll_sum += static_cast<double>(sequence_loss(logits, s.targets, s.loss_mask, real(1)).item());
      result.tokens += scored;
    }
    ++result.segments;
    prev = &s;
  }
  if (result.tokens == 0) throw std::invalid_argument("evaluation corpus has no scored tokens");
  return result;
}

double perplexity(const Model& model, const std::vector<Segment>& segments, bool carry_state,
                  std::size_t max_segments) {
  return evaluate(model, segments, carry_state, max_segments).perplexity();
}

// ---- recall probe ---------------------------------------------------------

ProbeExample make_probe_example(std::size_t windows, std::size_t window_len, std::size_t distance,
                                std::size_t facts, std::uint64_t key, bool distractors) {
  if (distance >= windows) throw std::invalid_argument("probe distance must be below the window count");
  // Facts and queries share a window at distance 0.
  const std::size_t needed = distance == 0 ? 6 * facts : 3 * facts;
  const std::size_t fact_windows = distractors ? windows - 1 + (distance == 0 ? 1 : 0) : 1;
  if (facts == 0 || facts * fact_windows > static_cast<std::size_t>(kKeyCount) || window_len < needed) {
    throw std::invalid_argument("probe window of " + std::to_string(window_len) + " cannot hold " +
                                std::to_string(facts) + " facts and their queries");
  }
  std::mt19937_64 gen(key);
  auto pick = [&](std::int32_t base, std::int32_t count) {
    return base + static_cast<std::int32_t>(gen() % static_cast<std::uint64_t>(count));
  };
  ProbeExample ex;
  ex.tokens.resize(windows * window_len);
  for (auto& t : ex.tokens) t = pick(kFillerBase, kFillerCount);

  // Distinct keys across the whole segment; the first `facts` are queried.
  std::vector<std::int32_t> keys(kKeyCount);
  for (std::int32_t i = 0; i < kKeyCount; ++i) keys[i] = kKeyBase + i;
  for (std::size_t i = 0; i < facts * fact_windows; ++i) std::swap(keys[i], keys[i + gen() % (keys.size() - i)]);
  std::vector<std::int32_t> values(facts * fact_windows);
  for (auto& v : values) v = pick(kValueBase, kValueCount);

  const std::size_t fact_window = windows - 1 - distance;
  auto plant = [&](std::size_t window, std::size_t first, std::size_t room) {
    const std::size_t start = window * window_len + gen() % (window_len - room + 1);
    for (std::size_t i = 0; i < facts; ++i) {
      ex.tokens[start + 3 * i] = kSetMarker;
      ex.tokens[start + 3 * i + 1] = keys[first + i];
      ex.tokens[start + 3 * i + 2] = values[first + i];
    }
  };
  plant(fact_window, 0, needed);
  if (distractors) {
    std::size_t next = facts;
    for (std::size_t win = 0; win + 1 < windows; ++win) {
      if (win == fact_window) continue;
      plant(win, next, 3 * facts);
      next += facts;
    }
  }
  // Every fact is queried once, in shuffled order, at the end of the last window.
  std::vector<std::size_t> order(facts);
  for (std::size_t i = 0; i < facts; ++i) order[i] = i;
  for (std::size_t i = facts; i > 1; --i) std::swap(order[i - 1], order[gen() % i]);
  const std::size_t end = windows * window_len;
  ex.targets.assign(end, kNoTarget);
  for (std::size_t j = 0; j < facts; ++j) {
    const std::size_t at = end - 3 * (facts - j);
    ex.tokens[at] = kQueryMarker;
    ex.tokens[at + 1] = keys[order[j]];
    ex.tokens[at + 2] = values[order[j]];
    ex.targets[at + 1] = values[order[j]];
    ex.answers.push_back(values[order[j]]);
    ex.answer_pos.push_back(at + 1);
  }
  return ex;
}

RunConfig apply_overrides(const RunConfig& base, const std::string& overrides) {
  std::map<std::string, std::string> kv;
  for (const std::string& item : split(overrides, ';')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError(item, "override needs key=value");
    kv[trim(item.substr(0, eq))] = trim(item.substr(eq + 1));
  }
  std::istringstream in(serialize_config(base));
  std::ostringstream out;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos && kv.count(trim(line.substr(0, eq)))) continue;
    out << line << "\n";
  }
  for (const auto& [k, v] : kv) out << k << " = " << v << "\n";
  RunConfig cfg = parse_config(out.str());
  validate_model_config(cfg.model);
  validate_train_config(cfg.train);
  return cfg;
}

ProbeSpec parse_probe_spec(const std::string& text) {
  ProbeSpec spec;
  std::vector<std::pair<std::string, std::string>> arms;
  std::ostringstream rest;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::string body = line;
    if (auto h = body.find('#'); h != std::string::npos) body.resize(h);
    const auto eq = body.find('=');
    const std::string key = eq == std::string::npos ? "" : trim(body.substr(0, eq));
    const std::string value = eq == std::string::npos ? "" : trim(body.substr(eq + 1));
    if (key == "probe_distances") {
      spec.distances.clear();
      for (const auto& d : split(value, ',')) spec.distances.push_back(std::stoul(d));
    } else if (key == "probe_facts") {
      spec.facts = std::stoul(value);
    } else if (key == "probe_distractors") {
      if (value != "true" && value != "false") throw ConfigError(key, "expected true or false");
      spec.distractors = value == "true";
    } else if (key == "probe_eval_examples") {
      spec.eval_examples = std::stoul(value);
    } else if (key.rfind("arm.", 0) == 0) {
      arms.emplace_back(key.substr(4), value);
    } else {
      rest << line << "\n";
    }
  }
  if (!arms.empty()) spec.arms = arms;
  if (spec.distances.empty()) throw ConfigError("probe_distances", "needs at least one distance");
  spec.base = parse_config(rest.str());
  validate_model_config(spec.base.model);
  validate_train_config(spec.base.train);
  return spec;
}

double probe_accuracy(const Model& model, std::size_t distance, std::size_t facts, std::size_t examples,
                      std::uint64_t seed, bool distractors) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < examples; ++i) {
    const ProbeExample ex = make_probe_example(distance + 1, model.config().window_len, distance, facts,
                                               stream_key({seed, 0xe7a1, distance, i}), distractors);
    ModelState state;
    const Tensor logits = model.forward_segment(state, ex.tokens, true);
    const std::size_t v = model.config().vocab_size;
    for (std::size_t j = 0; j < ex.answers.size(); ++j) {
      const auto row = logits.data().subspan(ex.answer_pos[j] * v, v);
      correct += std::max_element(row.begin(), row.end()) - row.begin() == ex.answers[j];
    }
  }
  return examples == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(examples * facts);
}

std::vector<ProbeRow> run_recall_probe(const ProbeSpec& spec, const std::string& out_dir, bool quiet) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::vector<ProbeRow> rows;
  for (const auto& [arm, overrides] : spec.arms) {
    const RunConfig cfg = apply_overrides(spec.base, overrides);
    const fs::path arm_dir = fs::path(out_dir) / arm;
    fs::create_directories(arm_dir);
    std::ofstream(arm_dir / "config.txt") << serialize_config(cfg);

    Model model(cfg.model);
    Trainer trainer(model, cfg.train);
    std::ofstream metrics(arm_dir / "metrics.csv");
    metrics << "step,loss,ppl,lr,tokens_per_sec\n";
    const std::size_t w = cfg.model.window_len;
    const auto t0 = std::chrono::steady_clock::now();
    std::size_t tokens_seen = 0;
    for (std::size_t step = 0; step < cfg.train.steps; ++step) {
      // One distance per step; the segment is just long enough to hold it.
      const std::size_t d = spec.distances[mix64(stream_key({cfg.train.seed, step})) % spec.distances.size()];
      WindowBatch batch;
      batch.rows = cfg.train.batch_size;
      batch.segment_len = (d + 1) * w;
      for (std::size_t r = 0; r < batch.rows; ++r) {
        const ProbeExample ex = make_probe_example(d + 1, w, d, spec.facts, stream_key({cfg.train.seed, step, r}),
                                                   spec.distractors);
        batch.token_ids.insert(batch.token_ids.end(), ex.tokens.begin(), ex.tokens.end());
        batch.targets.insert(batch.targets.end(), ex.targets.begin(), ex.targets.end());
        batch.loss_mask.insert(batch.loss_mask.end(), ex.tokens.size(), 1);
        batch.doc_ids.push_back(r);
      }
      const StepResult res = trainer.train_step(batch, step);
      tokens_seen += batch.rows * batch.segment_len;
      if ((step + 1) % cfg.train.log_every == 0) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        metrics << step + 1 << "," << res.loss << "," << std::exp(res.loss) << "," << res.lr << ","
                << static_cast<double>(tokens_seen) / secs << "\n";
        metrics.flush();
        if (!quiet) std::printf("[probe %s] step %zu loss %.4f\n", arm.c_str(), step + 1, res.loss);
      }
    }
    const std::size_t first = rows.size();
    for (std::size_t d : spec.distances) {
      ProbeRow row{arm, d, probe_accuracy(model, d, spec.facts, spec.eval_examples, cfg.train.seed, spec.distractors),
                   spec.eval_examples};
      if (!quiet) std::printf("[probe %s] distance %zu accuracy %.4f\n", arm.c_str(), d, row.accuracy);
      rows.push_back(row);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    for (std::size_t i = first; i < rows.size(); ++i) rows[i].arm_seconds = secs;
  }
  std::ofstream csv(fs::path(out_dir) / "probe_results.csv");
  csv << "arm,distance,accuracy,examples,arm_seconds\n";
  for (const ProbeRow& r : rows)
    csv << r.arm << "," << r.distance << "," << r.accuracy << "," << r.examples << "," << r.arm_seconds << "\n";
  return rows;
}

}  // namespace melodi

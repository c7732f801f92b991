#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "melodi/config.hpp"
#include "melodi/data.hpp"
#include "melodi/model.hpp"

namespace melodi {

// Stored floats of the recurrent state; summary tokens are transient and not
// counted. Short-term memory stores tokens, long-term memory stores KV pairs.
struct MemoryReport {
  std::string policy;
  std::size_t layers = 0;
  std::size_t short_tokens = 0;
  std::size_t long_tokens = 0;
  std::size_t window_len = 0;
  std::size_t q_max = 0;
  std::size_t dim = 0;
  std::uint64_t short_floats = 0;
  std::uint64_t long_floats = 0;
  std::uint64_t total_floats = 0;
};

MemoryReport memory_footprint(const ModelConfig& config);
std::string memory_report_header();  // policy,layers,S,L,W,Q_max,dim,All,Short,Long
std::string memory_report_row(const MemoryReport& report);

struct PerplexityResult {
  double nll_sum = 0;
  std::size_t tokens = 0;
  std::size_t segments = 0;

  double mean_nll() const { return nll_sum / static_cast<double>(tokens); }
  double perplexity() const;
};

// Dropout off, no graph. With carry_state, memory flows from each segment into
// the next segment of the same document; otherwise every segment starts empty.
// max_segments == 0 evaluates all. Throws std::invalid_argument when nothing
// is scored.
PerplexityResult evaluate(const Model& model, const std::vector<Segment>& segments, bool carry_state,
                          std::size_t max_segments = 0);

double perplexity(const Model& model, const std::vector<Segment>& segments, bool carry_state,
                  std::size_t max_segments = 0);

// ---- recall probe ---------------------------------------------------------

// Synthetic key/value recall. Window (n-1-d) of an n-window segment holds
// `facts` triples [SET, key, value]; the last window ends with one
// [QUERY, key, value] per fact in shuffled order and only the values are
// scored. With distractors, every other window before the last also holds
// `facts` triples with keys of its own, so newer facts compete for memory.
// Training and evaluation both use n = d + 1.
struct ProbeSpec {
  RunConfig base;
  std::vector<std::size_t> distances{0, 1, 4, 16};
  std::size_t facts = 4;
  std::size_t eval_examples = 256;
  bool distractors = true;
  // (arm name, `key=value;key=value` overrides applied to base)
  std::vector<std::pair<std::string, std::string>> arms{
      {"st_lt", ""}, {"st_only", "long_term_layer_positions=none"}};
};

struct ProbeExample {
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> targets;
  std::vector<std::int32_t> answers;  // one per fact, in query order
  std::vector<std::size_t> answer_pos;  // positions whose targets are the answers
};

ProbeExample make_probe_example(std::size_t windows, std::size_t window_len, std::size_t distance,
                                std::size_t facts, std::uint64_t key, bool distractors = false);

struct ProbeRow {
  std::string arm;
  std::size_t distance = 0;
  double accuracy = 0;
  std::size_t examples = 0;
  double arm_seconds = 0;  // wall time to train and evaluate the arm
};

// Probe-only keys (probe_distances, probe_facts, probe_eval_examples, probe_distractors,
// arm.<name>) are read here; the rest goes through parse_config.
ProbeSpec parse_probe_spec(const std::string& text);

// Applies `key=value;key=value` overrides to a config.
RunConfig apply_overrides(const RunConfig& base, const std::string& overrides);

// Fraction of queried values ranked first, over `examples` segments of
// distance + 1 windows each.
double probe_accuracy(const Model& model, std::size_t distance, std::size_t facts, std::size_t examples,
                      std::uint64_t seed, bool distractors = false);

// Trains one model per arm on the probe task and measures accuracy per
// distance. Writes <out_dir>/probe_results.csv and per-arm metrics.
std::vector<ProbeRow> run_recall_probe(const ProbeSpec& spec, const std::string& out_dir, bool quiet = false);

}  // namespace melodi

#include "melodi/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "melodi/rng.hpp"

namespace melodi {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last || value.empty()) {
    throw ConfigError(key, "cannot parse '" + value + "' as a number");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  throw ConfigError(key, "expected true/false, got '" + value + "'");
}

std::vector<int> parse_list(const std::string& key, const std::string& value, std::size_t n_layers) {
  if (value == "none" || value.empty()) return {};
  if (value == "all") {
    std::vector<int> all(n_layers);
    for (std::size_t i = 0; i < n_layers; ++i) all[i] = static_cast<int>(i);
    return all;
  }
  std::vector<int> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(key, trim(item)));
  return out;
}

std::string list_str(const std::vector<int>& v) {
  if (v.empty()) return "none";
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

std::string real_str(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string bool_str(bool b) { return b ? "true" : "false"; }

void check_layer_list(const char* field, const std::vector<int>& layers, std::size_t n) {
  std::vector<int> sorted = layers;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i] < 0 || static_cast<std::size_t>(sorted[i]) >= n) {
      throw ConfigError(field, "layer " + std::to_string(sorted[i]) + " out of range [0, " +
                                   std::to_string(n) + ")");
    }
    if (i > 0 && sorted[i] == sorted[i - 1]) {
      throw ConfigError(field, "layer " + std::to_string(sorted[i]) + " listed twice");
    }
  }
}

}  // namespace

std::string to_string(MemoryPolicy policy) {
  switch (policy) {
    case MemoryPolicy::melodi: return "melodi";
    case MemoryPolicy::xl: return "xl";
    case MemoryPolicy::memorizing: return "memorizing";
    case MemoryPolicy::none: return "none";
  }
  return "?";
}

MemoryPolicy parse_policy(const std::string& text) {
  if (text == "melodi") return MemoryPolicy::melodi;
  if (text == "xl") return MemoryPolicy::xl;
  if (text == "memorizing") return MemoryPolicy::memorizing;
  if (text == "none") return MemoryPolicy::none;
  throw ConfigError("memory_policy", "unknown policy '" + text + "'");
}

RunConfig parse_config(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no), "expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    if (!kv.emplace(key, trim(line.substr(eq + 1))).second) throw ConfigError(key, "set twice");
  }

  RunConfig cfg;
  ModelConfig& m = cfg.model;
  TrainConfig& t = cfg.train;
  auto take = [&](const std::string& key) -> const std::string* {
    auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };
  // n_layers first so `all` can expand.
  if (auto v = take("n_layers")) m.n_layers = parse_number<std::size_t>("n_layers", *v);
  if (take("short_term_enabled_layers") == nullptr) {
    m.short_term_enabled_layers = parse_list("short_term_enabled_layers", "all", m.n_layers);
  }

  for (const auto& [key, value] : kv) {
    auto size = [&] { return parse_number<std::size_t>(key, value); };
    auto dbl = [&] { return parse_number<double>(key, value); };
    auto flag = [&] { return parse_bool(key, value); };
    if (key == "n_layers") continue;
    else if (key == "long_term_layer_positions") m.long_term_layer_positions = parse_list(key, value, m.n_layers);
    else if (key == "short_term_enabled_layers") m.short_term_enabled_layers = parse_list(key, value, m.n_layers);
    else if (key == "dim") m.dim = size();
    else if (key == "heads") m.heads = size();
    else if (key == "ffn_hidden") m.ffn_hidden = size();
    else if (key == "window_len") m.window_len = size();
    else if (key == "short_tokens") m.short_tokens = size();
    else if (key == "long_tokens") m.long_tokens = size();
    else if (key == "q_max") m.q_max = size();
    else if (key == "vocab_size") m.vocab_size = size();
    else if (key == "memory_policy") m.memory_policy = parse_policy(value);
    else if (key == "branching") m.branching = flag();
    else if (key == "copy_short_as_long") m.copy_short_as_long = flag();
    else if (key == "detach_long_kv") m.detach_long_kv = flag();
    else if (key == "max_rel_offset") m.max_rel_offset = parse_number<int>(key, value);
    else if (key == "seed") m.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "steps") t.steps = size();
    else if (key == "warmup_steps") t.warmup_steps = size();
    else if (key == "max_lr") t.max_lr = dbl();
    else if (key == "min_lr") t.min_lr = dbl();
    else if (key == "dropout") t.dropout = dbl();
    else if (key == "batch_size") t.batch_size = size();
    else if (key == "train_seed") t.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "optimizer") {
      if (value == "adam") t.optimizer = OptimizerKind::adam;
      else if (value == "sgd") t.optimizer = OptimizerKind::sgd;
      else throw ConfigError(key, "expected adam or sgd, got '" + value + "'");
    }
    else if (key == "grad_clip") t.grad_clip = dbl();
    else if (key == "weight_decay") t.weight_decay = dbl();
    else if (key == "beta1") t.beta1 = dbl();
    else if (key == "beta2") t.beta2 = dbl();
    else if (key == "log_every") t.log_every = size();
    else if (key == "eval_every") t.eval_every = size();
    else if (key == "checkpoint_every") t.checkpoint_every = size();
    else if (key == "segment_windows") t.segment_windows = size();
    else if (key == "min_doc_tokens") t.min_doc_tokens = size();
    else if (key == "eval_max_segments") t.eval_max_segments = size();
    else if (key == "eval_carry_state") t.eval_carry_state = flag();
    else if (key == "train_corpus") t.train_corpus = value;
    else if (key == "eval_corpus") t.eval_corpus = value;
    else if (key == "vocab_file") t.vocab_file = value;
    else throw ConfigError(key, "unknown key");
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_model_config(const ModelConfig& m) {
  std::ostringstream out;
  out << "n_layers = " << m.n_layers << "\n"
      << "long_term_layer_positions = " << list_str(m.long_term_layer_positions) << "\n"
      << "short_term_enabled_layers = " << list_str(m.short_term_enabled_layers) << "\n"
      << "dim = " << m.dim << "\n"
      << "heads = " << m.heads << "\n"
      << "ffn_hidden = " << m.ffn_hidden << "\n"
      << "window_len = " << m.window_len << "\n"
      << "short_tokens = " << m.short_tokens << "\n"
      << "long_tokens = " << m.long_tokens << "\n"
      << "q_max = " << m.q_max << "\n"
      << "vocab_size = " << m.vocab_size << "\n"
      << "memory_policy = " << to_string(m.memory_policy) << "\n"
      << "branching = " << bool_str(m.branching) << "\n"
      << "copy_short_as_long = " << bool_str(m.copy_short_as_long) << "\n"
      << "detach_long_kv = " << bool_str(m.detach_long_kv) << "\n"
      << "max_rel_offset = " << m.max_rel_offset << "\n"
      << "seed = " << m.seed << "\n";
  return out.str();
}

std::string serialize_config(const RunConfig& cfg) {
  const TrainConfig& t = cfg.train;
  std::ostringstream out;
  out << "# model\n" << serialize_model_config(cfg.model) << "\n# training\n"
      << "steps = " << t.steps << "\n"
      << "warmup_steps = " << t.warmup_steps << "\n"
      << "max_lr = " << real_str(t.max_lr) << "\n"
      << "min_lr = " << real_str(t.min_lr) << "\n"
      << "dropout = " << real_str(t.dropout) << "\n"
      << "batch_size = " << t.batch_size << "\n"
      << "train_seed = " << t.seed << "\n"
      << "optimizer = " << (t.optimizer == OptimizerKind::adam ? "adam" : "sgd") << "\n"
      << "grad_clip = " << real_str(t.grad_clip) << "\n"
      << "weight_decay = " << real_str(t.weight_decay) << "\n"
      << "beta1 = " << real_str(t.beta1) << "\n"
      << "beta2 = " << real_str(t.beta2) << "\n"
      << "log_every = " << t.log_every << "\n"
      << "eval_every = " << t.eval_every << "\n"
      << "checkpoint_every = " << t.checkpoint_every << "\n"
      << "segment_windows = " << t.segment_windows << "\n"
      << "min_doc_tokens = " << t.min_doc_tokens << "\n"
      << "eval_max_segments = " << t.eval_max_segments << "\n"
      << "eval_carry_state = " << bool_str(t.eval_carry_state) << "\n"
      << "train_corpus = " << t.train_corpus << "\n"
      << "eval_corpus = " << t.eval_corpus << "\n"
      << "vocab_file = " << t.vocab_file << "\n";
  return out.str();
}

void validate_model_config(const ModelConfig& m) {
  if (m.n_layers == 0) throw ConfigError("n_layers", "must be positive");
  if (m.dim == 0) throw ConfigError("dim", "must be positive");
  if (m.heads == 0 || m.dim % m.heads != 0) {
    throw ConfigError("heads", "dim " + std::to_string(m.dim) + " is not divisible by heads " +
                                   std::to_string(m.heads));
  }
  if (m.ffn_hidden == 0) throw ConfigError("ffn_hidden", "must be positive");
  if (m.window_len == 0) throw ConfigError("window_len", "must be positive");
  if (m.vocab_size < 259) throw ConfigError("vocab_size", "must be at least 259");
  if (m.max_rel_offset < 0) throw ConfigError("max_rel_offset", "must be non-negative");
  check_layer_list("long_term_layer_positions", m.long_term_layer_positions, m.n_layers);
  check_layer_list("short_term_enabled_layers", m.short_term_enabled_layers, m.n_layers);

  const auto& longs = m.long_term_layer_positions;
  if (m.memory_policy == MemoryPolicy::melodi && !longs.empty()) {
    if (m.q_max == 0) throw ConfigError("q_max", "must be positive with a long-term layer");
    if (m.long_tokens == 0) throw ConfigError("long_tokens", "must be positive with a long-term layer");
    if (m.copy_short_as_long) {
      if (m.long_tokens != m.short_tokens) {
        throw ConfigError("L == S", "copy_short_as_long needs long_tokens (" +
                                        std::to_string(m.long_tokens) + ") == short_tokens (" +
                                        std::to_string(m.short_tokens) + ")");
      }
      for (int p : longs) {
        const auto& en = m.short_term_enabled_layers;
        if (std::find(en.begin(), en.end(), p) == en.end()) {
          throw ConfigError("copy_short_as_long",
                            "long-term layer " + std::to_string(p) + " has no short-term memory to copy");
        }
      }
    } else if (m.long_tokens >= m.short_tokens) {
      throw ConfigError("L < S", "long_tokens (" + std::to_string(m.long_tokens) +
                                     ") must be less than short_tokens (" +
                                     std::to_string(m.short_tokens) + ")");
    }
  }
  if (m.memory_policy == MemoryPolicy::memorizing) {
    if (longs.size() != 1) {
      throw ConfigError("long_term_layer_positions", "memorizing policy needs exactly one memory layer");
    }
    if (m.q_max == 0) throw ConfigError("q_max", "must be positive");
  }
}

void validate_train_config(const TrainConfig& t) {
  if (t.steps == 0) throw ConfigError("steps", "must be positive");
  if (t.warmup_steps > t.steps) throw ConfigError("warmup_steps", "must not exceed steps");
  if (!(t.min_lr <= t.max_lr)) throw ConfigError("min_lr", "must not exceed max_lr");
  if (!(t.min_lr >= 0)) throw ConfigError("min_lr", "must be non-negative");
  if (!(t.grad_clip > 0)) throw ConfigError("grad_clip", "must be positive");
  if (!(t.dropout >= 0 && t.dropout < 1)) throw ConfigError("dropout", "must be in [0, 1)");
  if (t.batch_size == 0) throw ConfigError("batch_size", "must be positive");
  if (t.segment_windows == 0) throw ConfigError("segment_windows", "must be positive");
  if (t.log_every == 0) throw ConfigError("log_every", "must be positive");
  if (!(t.beta1 >= 0 && t.beta1 < 1)) throw ConfigError("beta1", "must be in [0, 1)");
  if (!(t.beta2 >= 0 && t.beta2 < 1)) throw ConfigError("beta2", "must be in [0, 1)");
}

RunConfig validate_config(const std::string& text) {
  RunConfig cfg = parse_config(text);
  validate_model_config(cfg.model);
  validate_train_config(cfg.train);
  return cfg;
}

std::uint64_t config_hash(const ModelConfig& config) { return fnv1a(serialize_model_config(config)); }

}  // namespace melodi

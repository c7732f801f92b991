// melodi: train, evaluate, and account memory for hierarchical-memory
// language models. Outputs go under $MELODI_OUTPUT_ROOT (default ./runs).

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "melodi/checkpoint.hpp"
#include "melodi/evaluation.hpp"
#include "melodi/training.hpp"

namespace fs = std::filesystem;
using namespace melodi;

namespace {

constexpr int kUsageError = 2;

fs::path output_root() {
  const char* env = std::getenv("MELODI_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

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
    if (!trim(item).empty()) out.push_back(trim(item));
  }
  return out;
}

// ---- sweeps ---------------------------------------------------------------

struct SweepRun {
  std::string tag, arm, overrides;
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> swept;
};

struct Sweep {
  RunConfig base;
  std::vector<SweepRun> runs;
  std::vector<std::string> swept_keys;
};

// Sweep file: a base config plus
//   arm.<name> = key=value;key=value    one arm per line (default: one arm "base")
//   sweep.<key> = a | b | c             cartesian product over all sweep keys
//   seeds = 0,1,2                       sets both seed and train_seed
Sweep parse_sweep(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> arms;
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
  std::vector<std::uint64_t> seeds;
  std::ostringstream rest;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::string body = line;
    if (auto h = body.find('#'); h != std::string::npos) body.resize(h);
    const auto eq = body.find('=');
    const std::string key = eq == std::string::npos ? "" : trim(body.substr(0, eq));
    const std::string value = eq == std::string::npos ? "" : trim(body.substr(eq + 1));
    if (key.rfind("arm.", 0) == 0) {
      arms.emplace_back(key.substr(4), value);
    } else if (key.rfind("sweep.", 0) == 0) {
      axes.emplace_back(key.substr(6), split(value, '|'));
      if (axes.back().second.empty()) throw ConfigError(key, "needs at least one value");
    } else if (key == "seeds") {
      for (const auto& s : split(value, ',')) seeds.push_back(std::stoull(s));
    } else {
      rest << line << "\n";
    }
  }
  Sweep sweep;
  sweep.base = parse_config(rest.str());
  if (arms.empty()) arms.emplace_back("base", "");
  if (seeds.empty()) seeds.push_back(sweep.base.train.seed);
  for (const auto& a : axes) sweep.swept_keys.push_back(a.first);

  std::vector<std::vector<std::pair<std::string, std::string>>> combos{{}};
  for (const auto& [key, values] : axes) {
    std::vector<std::vector<std::pair<std::string, std::string>>> next;
    for (const auto& c : combos) {
      for (const auto& v : values) {
        auto extended = c;
        extended.emplace_back(key, v);
        next.push_back(extended);
      }
    }
    combos = next;
  }
  for (const auto& [arm, arm_overrides] : arms) {
    for (const auto& combo : combos) {
      for (std::uint64_t seed : seeds) {
        SweepRun run;
        run.arm = arm;
        run.seed = seed;
        run.swept = combo;
        run.tag = arm;
        std::string overrides = arm_overrides;
        for (const auto& [k, v] : combo) {
          run.tag += "-" + k + "_" + v;
          overrides += ";" + k + "=" + v;
        }
        run.tag += "-seed" + std::to_string(seed);
        overrides += ";seed=" + std::to_string(seed) + ";train_seed=" + std::to_string(seed);
        run.overrides = overrides;
        apply_overrides(sweep.base, overrides);  // validate every run up front
        sweep.runs.push_back(run);
      }
    }
  }
  return sweep;
}

int cmd_train(const std::string& config_path, const std::string& name, bool resume, std::size_t stop_after) {
  const RunConfig cfg = validate_config(read_file(config_path));
  const fs::path dir = output_root() / (name.empty() ? fs::path(config_path).stem().string() : name);
  TrainOptions opts;
  opts.resume = resume;
  opts.stop_after = stop_after;
  const TrainSummary s = train(cfg, dir.string(), opts);
  std::printf("trained %zu steps, final loss %.4f", s.steps_done, s.final_loss);
  if (s.eval_ppl > 0) std::printf(", eval ppl %.4f", s.eval_ppl);
  std::printf("\nrun directory: %s\n", dir.string().c_str());
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& corpus, bool carry_state, std::string vocab_path,
             std::size_t segment_windows, std::size_t max_segments, const std::string& name) {
  const Model model = load_model(checkpoint);
  if (vocab_path.empty()) vocab_path = (fs::path(checkpoint).parent_path() / "vocab.txt").string();
  const Vocab vocab = Vocab::load(vocab_path);
  if (vocab.size() != model.config().vocab_size) {
    throw ConfigError("vocab_size", "vocab " + vocab_path + " does not match the checkpoint");
  }
  const std::size_t w = model.config().window_len;
  const auto segments = segment_corpus(encode_corpus(load_corpus(corpus), vocab), segment_windows * w, w);
  const PerplexityResult r = evaluate(model, segments, carry_state, max_segments);

  const fs::path dir = output_root() / (name.empty() ? "eval" : name);
  fs::create_directories(dir);
  const bool fresh = !fs::exists(dir / "eval.csv");
  std::ofstream csv(dir / "eval.csv", std::ios::app);
  if (fresh) csv << "checkpoint,corpus,carry_state,segments,tokens,nll,ppl\n";
  csv << checkpoint << "," << corpus << "," << (carry_state ? "true" : "false") << "," << r.segments << ","
      << r.tokens << "," << r.mean_nll() << "," << r.perplexity() << "\n";
  std::printf("segments %zu tokens %zu nll %.6f ppl %.6f\n", r.segments, r.tokens, r.mean_nll(), r.perplexity());
  return 0;
}

int cmd_memsize(const std::string& config_path, const std::string& name) {
  const RunConfig cfg = parse_config(read_file(config_path));
  validate_model_config(cfg.model);
  const MemoryReport r = memory_footprint(cfg.model);
  const fs::path dir = output_root() / (name.empty() ? "memsize" : name);
  fs::create_directories(dir);
  const std::string stem = fs::path(config_path).stem().string();
  std::ofstream csv(dir / (stem + ".csv"));
  csv << memory_report_header() << "\n" << memory_report_row(r) << "\n";
  std::printf("%s\n%s\n", memory_report_header().c_str(), memory_report_row(r).c_str());
  return 0;
}

int cmd_ablate(const std::string& sweep_path, const std::string& name, std::size_t jobs, const std::string& only) {
  const Sweep sweep = parse_sweep(read_file(sweep_path));
  const fs::path dir = output_root() / (name.empty() ? fs::path(sweep_path).stem().string() : name);
  fs::create_directories(dir);
  std::ofstream(dir / "sweep.txt") << read_file(sweep_path);

  std::vector<const SweepRun*> todo;
  for (const SweepRun& r : sweep.runs) {
    if (only.empty() || r.tag == only) todo.push_back(&r);
  }
  if (todo.empty()) throw ConfigError("--only", "no run tagged '" + only + "'");

  std::mutex io_mutex;
  std::atomic<std::size_t> next{0};
  std::atomic<int> failures{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < todo.size(); i = next++) {
      const SweepRun& run = *todo[i];
      const fs::path run_dir = dir / run.tag;
      if (fs::exists(run_dir / "result.json")) continue;
      try {
        {
          std::lock_guard lock(io_mutex);
          std::printf("[%s] start\n", run.tag.c_str());
          std::fflush(stdout);
        }
        TrainOptions opts;
        opts.resume = true;
        opts.quiet = true;
        const RunConfig cfg = apply_overrides(sweep.base, run.overrides);
        const TrainSummary s = train(cfg, run_dir.string(), opts);
        std::lock_guard lock(io_mutex);
        std::printf("[%s] done: loss %.4f eval ppl %.4f\n", run.tag.c_str(), s.final_loss, s.eval_ppl);
        std::fflush(stdout);
      } catch (const std::exception& e) {
        std::lock_guard lock(io_mutex);
        std::fprintf(stderr, "[%s] failed: %s\n", run.tag.c_str(), e.what());
        ++failures;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < std::max<std::size_t>(jobs, 1); ++j) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  std::ofstream csv(dir / "ablate_results.csv");
  csv << "tag,arm,seed";
  for (const auto& k : sweep.swept_keys) csv << "," << k;
  csv << ",steps,final_loss,eval_ppl\n";
  for (const SweepRun& run : sweep.runs) {
    const fs::path result = dir / run.tag / "result.json";
    if (!fs::exists(result)) continue;
    const auto j = nlohmann::json::parse(std::ifstream(result));
    csv << run.tag << "," << run.arm << "," << run.seed;
    for (const auto& kv : run.swept) csv << "," << kv.second;
    char tail[96];
    std::snprintf(tail, sizeof tail, ",%zu,%.9g,%.9g\n", j.at("steps").get<std::size_t>(),
                  j.at("final_loss").get<double>(), j.at("eval_ppl").get<double>());
    csv << tail;
  }
  std::printf("results: %s\n", (dir / "ablate_results.csv").string().c_str());
  return failures > 0 ? 1 : 0;
}

int cmd_probe(const std::string& probe_path, const std::string& name) {
  const ProbeSpec spec = parse_probe_spec(read_file(probe_path));
  const fs::path dir = output_root() / (name.empty() ? fs::path(probe_path).stem().string() : name);
  fs::create_directories(dir);
  std::ofstream(dir / "probe.txt") << read_file(probe_path);
  run_recall_probe(spec, dir.string());
  std::printf("results: %s\n", (dir / "probe_results.csv").string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical-memory transformer: training, evaluation and memory accounting"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string name;
  app.add_option("--name", name, "Run directory name under $MELODI_OUTPUT_ROOT");

  std::string config_path;
  bool resume = false;
  std::size_t stop_after = 0;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a config file");
  train_cmd->add_option("config", config_path, "Config file")->required();
  train_cmd->add_flag("--resume", resume, "Continue from the run directory's trainer state");
  train_cmd->add_option("--stop-after", stop_after, "Stop after this many steps (the schedule still spans all steps)");

  std::string checkpoint, corpus, vocab_path;
  bool carry_state = false;
  std::size_t segment_windows = 8, max_segments = 0;
  auto* eval_cmd = app.add_subcommand("eval", "Perplexity of a checkpoint on a corpus directory");
  eval_cmd->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("corpus", corpus, "Directory of .txt documents")->required();
  eval_cmd->add_flag("--carry-state", carry_state, "Carry memory across segments of a document");
  eval_cmd->add_option("--vocab", vocab_path, "Vocab file (default: vocab.txt beside the checkpoint)");
  eval_cmd->add_option("--segment-windows", segment_windows, "Windows per segment");
  eval_cmd->add_option("--max-segments", max_segments, "Evaluate at most this many segments");

  std::string memsize_path;
  auto* memsize_cmd = app.add_subcommand("memsize", "Memory footprint of a config as CSV");
  memsize_cmd->add_option("config", memsize_path, "Config file")->required();

  std::string sweep_path, only;
  std::size_t jobs = 1;
  auto* ablate_cmd = app.add_subcommand("ablate", "Run every arm and seed of a sweep file");
  ablate_cmd->add_option("sweep", sweep_path, "Sweep file")->required();
  ablate_cmd->add_option("--jobs", jobs, "Runs trained concurrently");
  ablate_cmd->add_option("--only", only, "Run only the run with this tag");

  std::string probe_path;
  auto* probe_cmd = app.add_subcommand("probe", "Synthetic long-range recall probe");
  probe_cmd->add_option("config", probe_path, "Probe config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageError;
  }

  try {
    if (*train_cmd) return cmd_train(config_path, name, resume, stop_after);
    if (*eval_cmd) return cmd_eval(checkpoint, corpus, carry_state, vocab_path, segment_windows, max_segments, name);
    if (*memsize_cmd) return cmd_memsize(memsize_path, name);
    if (*ablate_cmd) return cmd_ablate(sweep_path, name, jobs, only);
    if (*probe_cmd) return cmd_probe(probe_path, name);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "invalid config: %s\n%s", e.what(), app.help().c_str());
    return kUsageError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return kUsageError;
}

#include "doctest.h"
#include "melodi/config.hpp"
#include "test_util.hpp"

using namespace melodi;

namespace {

std::string field_of(const std::string& text) {
  try {
    validate_config(text);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "";
}

}  // namespace

TEST_CASE("defaults describe the 13-layer S128+L64 model") {
  const RunConfig cfg = validate_config("");
  CHECK(cfg.model.n_layers == 13);
  CHECK(cfg.model.long_term_layer_positions == std::vector<int>{8});
  CHECK(cfg.model.short_term_enabled_layers.size() == 13);
  CHECK(cfg.model.short_tokens == 128);
  CHECK(cfg.model.long_tokens == 64);
  CHECK(cfg.model.q_max == 128);
  CHECK(cfg.train.warmup_steps == 1000);
}

TEST_CASE("serialize then parse is the identity") {
  RunConfig cfg;
  cfg.model = melodi::testing::toy_config();
  cfg.model.memory_policy = MemoryPolicy::xl;
  cfg.model.branching = false;
  cfg.train.max_lr = 0.1 + 0.2;  // not exactly representable in short decimal
  cfg.train.optimizer = OptimizerKind::sgd;
  cfg.train.train_corpus = "data/train";
  cfg.train.eval_carry_state = true;
  const RunConfig back = parse_config(serialize_config(cfg));
  CHECK(back == cfg);
  CHECK(config_hash(back.model) == config_hash(cfg.model));
  cfg.model.seed += 1;
  CHECK(config_hash(back.model) != config_hash(cfg.model));
}

TEST_CASE("lists accept all, none and explicit indices") {
  const RunConfig a = parse_config("n_layers = 3\nshort_term_enabled_layers = all\nlong_term_layer_positions = none\n");
  CHECK(a.model.short_term_enabled_layers == std::vector<int>{0, 1, 2});
  CHECK(a.model.long_term_layer_positions.empty());
  const RunConfig b = parse_config("n_layers = 4\nshort_term_enabled_layers = 0, 2\n# comment\n");
  CHECK(b.model.short_term_enabled_layers == std::vector<int>{0, 2});
  const RunConfig c = parse_config("n_layers = 5\n");
  CHECK(c.model.short_term_enabled_layers.size() == 5);
}

TEST_CASE("malformed text is rejected with the offending key") {
  CHECK_THROWS_AS(parse_config("dim 64\n"), ConfigError);
  CHECK(field_of("frobnicate = 1\n") == "frobnicate");
  CHECK(field_of("dim = 64\ndim = 32\n") == "dim");
  CHECK(field_of("dim = sixty\n") == "dim");
  CHECK(field_of("branching = maybe\n") == "branching");
  CHECK(field_of("memory_policy = lstm\n") == "memory_policy");
  CHECK(field_of("optimizer = adafactor\n") == "optimizer");
}

TEST_CASE("invariants name what they violate") {
  CHECK(field_of("short_tokens = 64\nlong_tokens = 64\n") == "L < S");
  CHECK(field_of("short_tokens = 32\nlong_tokens = 64\n") == "L < S");
  CHECK(field_of("copy_short_as_long = true\n") == "L == S");
  CHECK(field_of("copy_short_as_long = true\nlong_tokens = 128\n").empty());
  CHECK(field_of("long_term_layer_positions = 13\n") == "long_term_layer_positions");
  CHECK(field_of("short_term_enabled_layers = 1,1\n") == "short_term_enabled_layers");
  CHECK(field_of("heads = 7\n") == "heads");
  CHECK(field_of("vocab_size = 100\n") == "vocab_size");
  CHECK(field_of("memory_policy = memorizing\nlong_term_layer_positions = 1,2\n") ==
        "long_term_layer_positions");
  CHECK(field_of("warmup_steps = 5000\nsteps = 100\n") == "warmup_steps");
  CHECK(field_of("min_lr = 0.1\n") == "min_lr");
  CHECK(field_of("grad_clip = 0\n") == "grad_clip");
  // Without a long-term layer, L is unconstrained.
  CHECK(field_of("long_term_layer_positions = none\nlong_tokens = 500\n").empty());
}

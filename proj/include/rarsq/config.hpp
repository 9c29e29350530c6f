#pragma once
// Run configuration for the CLI: one JSON file (comments allowed) covering
// data generation, both training stages, sampling, and evaluation. Unknown
// keys are rejected, every field has a default, and the effective
// configuration can be echoed back out as JSON that reparses to the same
// run. A `paper` profile swaps in the large-scale defaults.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "rarsq/cst.hpp"
#include "rarsq/skill_autoencoder.hpp"

namespace rarsq::config {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Profile { desk, paper };

struct DataConfig {
  std::string source = "sinusoid";  // "sinusoid" or "demos"
  int modes = 8;
  int chunks_per_mode = 512;
  double sigma = 0.01;
  int episodes_per_task = 50;
};

struct EvalConfig {
  int episodes_per_task = 50;
  int replan_every = 0;  // 0 resolves to the chunk length T
  std::vector<std::uint64_t> seeds = {0, 1, 2};
};

struct RunConfig {
  Profile profile = Profile::desk;
  std::string out_dir = "runs/out";
  std::uint64_t seed = 0;
  DataConfig data;
  sae::Stage1Config stage1;
  cst::CstConfig cst;
  cst::SamplingConfig sampling;
  EvalConfig eval;
};

// Profile defaults with all derived fields already synced.
RunConfig defaults(Profile p);

// Strict parse: profile defaults first, explicit keys overlaid, derived
// fields synced, then validated. Throws ConfigError on unknown keys, type
// mismatches, malformed JSON, or invariant violations.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);

void validate(const RunConfig& rc);

// Full echo of the effective configuration; parse_config(effective_json(rc))
// reproduces rc exactly.
std::string effective_json(const RunConfig& rc);

// Commented example covering every key (the parser strips comments).
std::string example_text();

const char* profile_name(Profile p);
const char* mode_name(quant::GradMode m);

}  // namespace rarsq::config

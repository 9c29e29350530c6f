#include "rarsq/config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "rarsq/envlab.hpp"

namespace rarsq::config {

namespace {

using json = nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw ConfigError(msg); }

void expect_keys(const json& j, const std::string& where,
                 std::initializer_list<const char*> keys) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : keys)
      if (item.key() == k) {
        known = true;
        break;
      }
    if (!known) fail("unknown config key \"" + where + item.key() + "\"");
  }
}

template <typename T>
void take(const json& j, const std::string& where, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception&) {
    fail("bad value for \"" + where + key + "\"");
  }
}

const json* sub_object(const json& j, const char* key) {
  if (!j.contains(key)) return nullptr;
  const json& s = j.at(key);
  if (!s.is_object()) fail(std::string("\"") + key + "\" must be an object");
  return &s;
}

void sync_derived(RunConfig& rc) {
  rc.stage1.seed = rc.seed;
  rc.cst.seed = rc.seed;
  rc.sampling.seed = rc.seed;
  rc.cst.K = rc.stage1.K;
  rc.cst.D = rc.stage1.D;
  rc.cst.m = rc.stage1.m;
  rc.cst.T = rc.stage1.T;
  rc.cst.A = rc.stage1.A;
  rc.cst.obs_dim = env::kObsDim;
  rc.cst.n_tasks = static_cast<int>(env::standard_tasks().size());
  if (rc.eval.replan_every == 0) rc.eval.replan_every = rc.stage1.T;
}

}  // namespace

const char* profile_name(Profile p) {
  return p == Profile::desk ? "desk" : "paper";
}

const char* mode_name(quant::GradMode m) {
  return m == quant::GradMode::rotation ? "rotation" : "ste";
}

RunConfig defaults(Profile p) {
  RunConfig rc;
  rc.profile = p;
  if (p == Profile::paper) {
    rc.stage1.batch = 1024;
    rc.stage1.lr = 5.5e-5;
    rc.stage1.epochs = 100;
    rc.stage1.attention_decoder = true;
    rc.cst.g_dim = 384;
    rc.cst.layers = 6;
    rc.cst.heads = 6;
    rc.cst.d_ff = 1536;
  }
  sync_derived(rc);
  return rc;
}

void validate(const RunConfig& rc) {
  const auto& d = rc.data;
  if (d.source != "sinusoid" && d.source != "demos")
    fail("data.source must be \"sinusoid\" or \"demos\"");
  if (d.modes < 2) fail("data.modes must be >= 2");
  if (d.chunks_per_mode < 1) fail("data.chunks_per_mode must be >= 1");
  if (d.sigma < 0.0) fail("data.sigma must be >= 0");
  if (d.episodes_per_task < 1) fail("data.episodes_per_task must be >= 1");

  const auto& s = rc.stage1;
  if (s.T < 1 || s.A < 1 || s.m < 1 || s.K < 1 || s.D < 1)
    fail("stage1 dims must be >= 1");
  if (s.beta <= 0.0) fail("stage1.beta must be > 0");
  if (s.lr <= 0.0) fail("stage1.lr must be > 0");
  if (s.batch < 1 || s.epochs < 1) fail("stage1 batch/epochs must be >= 1");
  if (s.warmup_epochs < 0 || s.warmup_epochs > s.epochs)
    fail("stage1.warmup_epochs must be in [0, epochs]");
  if (s.ema_decay < 0.0 || s.ema_decay >= 1.0)
    fail("stage1.ema_decay must be in [0, 1)");
  if (s.weight_decay < 0.0) fail("stage1.weight_decay must be >= 0");
  if (s.hidden < 1) fail("stage1.hidden must be >= 1");
  if (s.attention_decoder) {
    if (s.dec_layers < 1 || s.dec_d_model < 1 || s.dec_heads < 1 ||
        s.dec_ff < 1)
      fail("stage1 attention decoder dims must be >= 1");
    if (s.dec_d_model % s.dec_heads != 0)
      fail("stage1.dec_d_model must be divisible by stage1.dec_heads");
  }

  const auto& c = rc.cst;
  if (c.h < 1) fail("cst.h must be >= 1");
  if (c.g_dim < 1 || c.layers < 1 || c.heads < 1 || c.d_ff < 1 ||
      c.code_emb < 1 || c.head_hidden < 1)
    fail("cst dims must be >= 1");
  if (c.g_dim % c.heads != 0) fail("cst.g_dim must be divisible by cst.heads");
  if (c.lr <= 0.0) fail("cst.lr must be > 0");
  if (c.batch < 1 || c.epochs < 1) fail("cst batch/epochs must be >= 1");
  if (c.warmup_epochs < 0 || c.warmup_epochs > c.epochs)
    fail("cst.warmup_epochs must be in [0, epochs]");
  if (c.weight_decay < 0.0) fail("cst.weight_decay must be >= 0");
  if (c.lambda_d1 < 0.0 || c.lambda_d2 < 0.0 || c.lambda_ref < 0.0)
    fail("cst loss weights must be >= 0");

  if (!(rc.sampling.p > 0.0) || rc.sampling.p > 1.0)
    fail("sampling.p must be in (0, 1]");
  if (!(rc.sampling.temperature > 0.0))
    fail("sampling.temperature must be > 0");

  if (rc.eval.episodes_per_task < 0)
    fail("eval.episodes_per_task must be >= 0");
  if (rc.eval.replan_every < 1 || rc.eval.replan_every > rc.stage1.T)
    fail("eval.replan_every must be in [1, stage1.T]");
  if (rc.eval.seeds.empty()) fail("eval.seeds must not be empty");
}

RunConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::exception& e) {
    fail(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) fail("config root must be an object");
  expect_keys(j, "", {"profile", "out_dir", "seed", "data", "stage1", "cst",
                      "sampling", "eval"});

  std::string prof = "desk";
  take(j, "", "profile", prof);
  Profile p;
  if (prof == "desk")
    p = Profile::desk;
  else if (prof == "paper")
    p = Profile::paper;
  else
    fail("profile must be \"desk\" or \"paper\"");

  RunConfig rc = defaults(p);
  rc.eval.replan_every = 0;  // re-resolved below against the effective T
  take(j, "", "out_dir", rc.out_dir);
  take(j, "", "seed", rc.seed);

  if (const json* jd = sub_object(j, "data")) {
    expect_keys(*jd, "data.",
                {"source", "modes", "chunks_per_mode", "sigma",
                 "episodes_per_task"});
    take(*jd, "data.", "source", rc.data.source);
    take(*jd, "data.", "modes", rc.data.modes);
    take(*jd, "data.", "chunks_per_mode", rc.data.chunks_per_mode);
    take(*jd, "data.", "sigma", rc.data.sigma);
    take(*jd, "data.", "episodes_per_task", rc.data.episodes_per_task);
  }

  if (const json* js = sub_object(j, "stage1")) {
    expect_keys(*js, "stage1.",
                {"T", "A", "m", "K", "D", "mode", "beta", "batch", "lr",
                 "epochs", "warmup_epochs", "ema_decay", "weight_decay",
                 "hidden", "attention_decoder", "dec_layers", "dec_d_model",
                 "dec_heads", "dec_ff"});
    auto& s = rc.stage1;
    take(*js, "stage1.", "T", s.T);
    take(*js, "stage1.", "A", s.A);
    take(*js, "stage1.", "m", s.m);
    take(*js, "stage1.", "K", s.K);
    take(*js, "stage1.", "D", s.D);
    std::string mode = mode_name(s.mode);
    take(*js, "stage1.", "mode", mode);
    if (mode == "rotation")
      s.mode = quant::GradMode::rotation;
    else if (mode == "ste")
      s.mode = quant::GradMode::ste;
    else
      fail("stage1.mode must be \"rotation\" or \"ste\"");
    take(*js, "stage1.", "beta", s.beta);
    take(*js, "stage1.", "batch", s.batch);
    take(*js, "stage1.", "lr", s.lr);
    take(*js, "stage1.", "epochs", s.epochs);
    take(*js, "stage1.", "warmup_epochs", s.warmup_epochs);
    take(*js, "stage1.", "ema_decay", s.ema_decay);
    take(*js, "stage1.", "weight_decay", s.weight_decay);
    take(*js, "stage1.", "hidden", s.hidden);
    take(*js, "stage1.", "attention_decoder", s.attention_decoder);
    take(*js, "stage1.", "dec_layers", s.dec_layers);
    take(*js, "stage1.", "dec_d_model", s.dec_d_model);
    take(*js, "stage1.", "dec_heads", s.dec_heads);
    take(*js, "stage1.", "dec_ff", s.dec_ff);
  }

  if (const json* jc = sub_object(j, "cst")) {
    expect_keys(*jc, "cst.",
                {"h", "g_dim", "layers", "heads", "d_ff", "code_emb",
                 "head_hidden", "lambda_d1", "lambda_d2", "lambda_ref",
                 "no_ar", "no_refine", "batch", "lr", "epochs",
                 "warmup_epochs", "weight_decay"});
    auto& c = rc.cst;
    take(*jc, "cst.", "h", c.h);
    take(*jc, "cst.", "g_dim", c.g_dim);
    take(*jc, "cst.", "layers", c.layers);
    take(*jc, "cst.", "heads", c.heads);
    take(*jc, "cst.", "d_ff", c.d_ff);
    take(*jc, "cst.", "code_emb", c.code_emb);
    take(*jc, "cst.", "head_hidden", c.head_hidden);
    take(*jc, "cst.", "lambda_d1", c.lambda_d1);
    take(*jc, "cst.", "lambda_d2", c.lambda_d2);
    take(*jc, "cst.", "lambda_ref", c.lambda_ref);
    take(*jc, "cst.", "no_ar", c.no_ar);
    take(*jc, "cst.", "no_refine", c.no_refine);
    take(*jc, "cst.", "batch", c.batch);
    take(*jc, "cst.", "lr", c.lr);
    take(*jc, "cst.", "epochs", c.epochs);
    take(*jc, "cst.", "warmup_epochs", c.warmup_epochs);
    take(*jc, "cst.", "weight_decay", c.weight_decay);
  }

  if (const json* jp = sub_object(j, "sampling")) {
    expect_keys(*jp, "sampling.", {"p", "temperature"});
    take(*jp, "sampling.", "p", rc.sampling.p);
    take(*jp, "sampling.", "temperature", rc.sampling.temperature);
  }

  if (const json* je = sub_object(j, "eval")) {
    expect_keys(*je, "eval.",
                {"episodes_per_task", "replan_every", "seeds"});
    take(*je, "eval.", "episodes_per_task", rc.eval.episodes_per_task);
    take(*je, "eval.", "replan_every", rc.eval.replan_every);
    take(*je, "eval.", "seeds", rc.eval.seeds);
  }

  sync_derived(rc);
  validate(rc);
  return rc;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string effective_json(const RunConfig& rc) {
  nlohmann::ordered_json j;
  j["profile"] = profile_name(rc.profile);
  j["out_dir"] = rc.out_dir;
  j["seed"] = rc.seed;

  auto& jd = j["data"];
  jd["source"] = rc.data.source;
  jd["modes"] = rc.data.modes;
  jd["chunks_per_mode"] = rc.data.chunks_per_mode;
  jd["sigma"] = rc.data.sigma;
  jd["episodes_per_task"] = rc.data.episodes_per_task;

  const auto& s = rc.stage1;
  auto& js = j["stage1"];
  js["T"] = s.T;
  js["A"] = s.A;
  js["m"] = s.m;
  js["K"] = s.K;
  js["D"] = s.D;
  js["mode"] = mode_name(s.mode);
  js["beta"] = s.beta;
  js["batch"] = s.batch;
  js["lr"] = s.lr;
  js["epochs"] = s.epochs;
  js["warmup_epochs"] = s.warmup_epochs;
  js["ema_decay"] = s.ema_decay;
  js["weight_decay"] = s.weight_decay;
  js["hidden"] = s.hidden;
  js["attention_decoder"] = s.attention_decoder;
  js["dec_layers"] = s.dec_layers;
  js["dec_d_model"] = s.dec_d_model;
  js["dec_heads"] = s.dec_heads;
  js["dec_ff"] = s.dec_ff;

  const auto& c = rc.cst;
  auto& jc = j["cst"];
  jc["h"] = c.h;
  jc["g_dim"] = c.g_dim;
  jc["layers"] = c.layers;
  jc["heads"] = c.heads;
  jc["d_ff"] = c.d_ff;
  jc["code_emb"] = c.code_emb;
  jc["head_hidden"] = c.head_hidden;
  jc["lambda_d1"] = c.lambda_d1;
  jc["lambda_d2"] = c.lambda_d2;
  jc["lambda_ref"] = c.lambda_ref;
  jc["no_ar"] = c.no_ar;
  jc["no_refine"] = c.no_refine;
  jc["batch"] = c.batch;
  jc["lr"] = c.lr;
  jc["epochs"] = c.epochs;
  jc["warmup_epochs"] = c.warmup_epochs;
  jc["weight_decay"] = c.weight_decay;

  j["sampling"]["p"] = rc.sampling.p;
  j["sampling"]["temperature"] = rc.sampling.temperature;

  j["eval"]["episodes_per_task"] = rc.eval.episodes_per_task;
  j["eval"]["replan_every"] = rc.eval.replan_every;
  j["eval"]["seeds"] = rc.eval.seeds;

  return j.dump(2) + "\n";
}

std::string example_text() {
  return R"(// Run configuration. Every key is optional and shown at its default;
// unknown keys are rejected. "profile": "paper" swaps in the large-scale
// training defaults (stage1 batch 1024, lr 5.5e-5, 100 epochs, attention
// decoder; context width 384, 6 layers, 6 heads) before the overrides
// below are applied.
{
  "profile": "desk",
  "out_dir": "runs/out",
  "seed": 0,                     // master seed; all stages derive from it

  "data": {
    "source": "sinusoid",        // "sinusoid" chunks or point-mass "demos"
    "modes": 8,                  // distinct sinusoid patterns
    "chunks_per_mode": 512,
    "sigma": 0.01,               // additive noise scale
    "episodes_per_task": 50      // demos per task when source = "demos"
  },

  "stage1": {
    "T": 8,                      // action-chunk length
    "A": 2,                      // action dimension
    "m": 8,                      // latent width
    "K": 16,                     // codes per codebook
    "D": 2,                      // codebook depth
    "mode": "rotation",          // "rotation" or "ste" gradients
    "beta": 0.25,                // commitment weight
    "batch": 64,
    "lr": 0.001,
    "epochs": 50,
    "warmup_epochs": 2,
    "ema_decay": 0.99,           // codebook EMA
    "weight_decay": 1e-06,
    "hidden": 128,               // encoder/decoder MLP width
    "attention_decoder": false,  // swap the MLP decoder for transformer blocks
    "dec_layers": 4,
    "dec_d_model": 64,
    "dec_heads": 4,
    "dec_ff": 256
  },

  "cst": {
    "h": 10,                     // observation window length
    "g_dim": 128,                // context feature width
    "layers": 2,
    "heads": 4,
    "d_ff": 512,
    "code_emb": 32,              // code-embedding width for conditioning
    "head_hidden": 128,
    "lambda_d1": 2.0,            // first-code cross-entropy weight
    "lambda_d2": 1.0,            // deeper-code cross-entropy weight
    "lambda_ref": 20.0,          // offset-refinement weight
    "no_ar": false,              // ablation: drop code conditioning
    "no_refine": false,          // ablation: drop the offset head
    "batch": 64,
    "lr": 0.001,
    "epochs": 30,
    "warmup_epochs": 2,
    "weight_decay": 1e-06
  },

  "sampling": {
    "p": 0.9,                    // nucleus threshold in (0, 1]
    "temperature": 1.0
  },

  "eval": {
    "episodes_per_task": 50,
    "replan_every": 8,           // steps between replans, in [1, T]
    "seeds": [0, 1, 2]
  }
}
)";
}

}  // namespace rarsq::config

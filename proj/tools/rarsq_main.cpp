// Command-line driver: stage-1 quantizer training, skill-transformer
// training on a frozen stage 1, policy evaluation, code-usage analysis,
// and the gradient-mode / ablation comparison study.
//
// Exit codes: 0 ok, 2 training divergence, 3 checkpoint incompatibility,
// 4 bad configuration.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "json.hpp"
#include "rarsq/analyze.hpp"
#include "rarsq/checkpoint.hpp"
#include "rarsq/config.hpp"
#include "rarsq/experiments.hpp"
#include "rarsq/optim.hpp"

namespace fs = std::filesystem;
using namespace rarsq;

namespace {

struct Overrides {
  std::string config_path;
  std::string profile;
  std::string mode;
  std::string out_dir;
  std::int64_t seed = -1;
  int episodes = -1;
  std::vector<std::string> ablate;
};

// Flags overlay the config file at the JSON level, so the strict parser
// stays the single entry point for every run.
config::RunConfig resolve(const Overrides& o) {
  nlohmann::json j = nlohmann::json::object();
  try {
    if (!o.config_path.empty()) {
      std::ifstream in(o.config_path);
      if (!in)
        throw config::ConfigError("cannot open config file: " +
                                  o.config_path);
      std::ostringstream ss;
      ss << in.rdbuf();
      j = nlohmann::json::parse(ss.str(), nullptr, true,
                                /*ignore_comments=*/true);
      if (!j.is_object())
        throw config::ConfigError("config root must be an object");
    }
    if (!o.profile.empty()) j["profile"] = o.profile;
    if (!o.mode.empty()) j["stage1"]["mode"] = o.mode;
    if (!o.out_dir.empty()) j["out_dir"] = o.out_dir;
    if (o.seed >= 0) j["seed"] = o.seed;
    if (o.episodes >= 0) j["eval"]["episodes_per_task"] = o.episodes;
    for (const auto& a : o.ablate) {
      if (a == "no-ar")
        j["cst"]["no_ar"] = true;
      else if (a == "no-refine")
        j["cst"]["no_refine"] = true;
    }
  } catch (const nlohmann::json::exception& e) {
    throw config::ConfigError(std::string("config is not valid JSON: ") +
                              e.what());
  }
  return config::parse_config(j.dump());
}

void echo_config(const config::RunConfig& rc) {
  fs::create_directories(rc.out_dir);
  std::ofstream out(rc.out_dir + "/config.json");
  out << config::effective_json(rc);
}

struct ChunkData {
  std::vector<double> chunks;
  int n = 0;
};

ChunkData stage1_chunks(const config::RunConfig& rc) {
  if (rc.data.source == "sinusoid") {
    auto ds = xp::sinusoid_data(rc, rc.seed);
    return {std::move(ds.chunks), ds.n};
  }
  auto demos = env::collect_demos(rc.data.episodes_per_task, rc.seed);
  auto views = env::make_views(demos, rc.cst.h, rc.stage1.T);
  return {std::move(views.chunks), views.n};
}

int cmd_train_rarsq(const config::RunConfig& rc) {
  echo_config(rc);
  auto data = stage1_chunks(rc);
  std::cout << "[train-rarsq] " << data.n << " chunks from " << rc.data.source
            << ", mode " << config::mode_name(rc.stage1.mode) << ", seed "
            << rc.seed << "\n";
  auto res = sae::train_stage1(data.chunks.data(), data.n, rc.stage1,
                               rc.out_dir + "/stage1_metrics.csv");
  sae::save_stage1(rc.out_dir + "/stage1.bin", res);
  const auto& last = res.metrics.back();
  std::cout << "[train-rarsq] final recon " << last.recon << " quant_l1 "
            << last.quant_l1 << " active_d1 " << last.usage[0].active << "/"
            << rc.stage1.K << " entropy_d1 " << last.usage[0].entropy << "\n"
            << "[train-rarsq] wrote " << rc.out_dir << "/stage1.bin\n";
  return 0;
}

int cmd_train_cst(const config::RunConfig& rc, const std::string& s1_path) {
  echo_config(rc);
  auto hash_before = ckpt::file_hash(s1_path);
  auto s1 = sae::load_stage1(s1_path);
  cst::require_stage1_match(rc.cst, s1);
  auto demos = env::collect_demos(rc.data.episodes_per_task, rc.seed);
  auto views = env::make_views(demos, rc.cst.h, rc.stage1.T);
  std::cout << "[train-cst] " << views.n << " windows from "
            << demos.episodes.size() << " demos, seed " << rc.seed << "\n";
  auto res = cst::train_cst(views, s1, rc.cst,
                            rc.out_dir + "/cst_metrics.csv");
  cst::save_policy(rc.out_dir + "/policy.bin", res);
  auto hash_after = ckpt::file_hash(s1_path);
  if (hash_before != hash_after) {
    std::cerr << "[train-cst] stage-1 checkpoint changed during training\n";
    return 1;
  }
  std::cout << "[train-cst] stage-1 checkpoint hash unchanged before/after ("
            << std::hex << hash_before << std::dec << ")\n";
  const auto& last = res.metrics.back();
  std::cout << "[train-cst] final total " << last.total << " ce_d1 "
            << last.ce[0] << " refine " << last.refine << "\n"
            << "[train-cst] wrote " << rc.out_dir << "/policy.bin\n";
  return 0;
}

int cmd_eval(const config::RunConfig& rc, const std::string& policy_path,
             const std::string& s1_path, bool expert) {
  echo_config(rc);
  xp::EvalReport rep;
  if (expert) {
    rep = xp::evaluate_expert(rc);
  } else {
    if (policy_path.empty() || s1_path.empty())
      throw config::ConfigError("eval needs --policy and --stage1, or "
                                "--expert");
    auto s1 = sae::load_stage1(s1_path);
    auto pol = cst::load_policy(policy_path);
    cst::require_stage1_match(pol.params.cfg, s1);
    rep = xp::evaluate_policy(pol.params, s1, rc);
  }
  auto text = xp::eval_json(rep);
  std::ofstream(rc.out_dir + "/eval.json") << text;
  std::cout << text << "[eval] mean success " << rep.mean_success << " (std "
            << rep.std_success << " over " << rep.per_seed.size()
            << " seeds)\n";
  return 0;
}

int cmd_analyze(const config::RunConfig& rc, const std::string& s1_path) {
  echo_config(rc);
  auto s1 = sae::load_stage1(s1_path);
  if (s1.params.cfg.T != rc.stage1.T || s1.params.cfg.A != rc.stage1.A)
    throw ckpt::CompatError(
        "configured chunk shape does not match the stage-1 checkpoint");
  auto data = stage1_chunks(rc);
  auto rep = analyze::analyze_codes(data.chunks.data(), data.n, s1);

  std::ofstream(rc.out_dir + "/analysis.json") << analyze::report_json(rep);

  std::ofstream usage(rc.out_dir + "/usage.csv");
  usage << "depth,code,count,freq\n";
  char buf[40];
  for (int d = 0; d < rep.D; ++d)
    for (int k = 0; k < rep.K; ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", rep.depths[d].freq[k]);
      usage << d + 1 << "," << k << "," << rep.depths[d].count[k] << ","
            << buf << "\n";
    }
  usage.close();

  if (rep.pairwise_valid) {
    std::ofstream cond(rc.out_dir + "/conditional.csv");
    cond << "k1";
    for (int k = 0; k < rep.K; ++k) cond << ",p_k2_" << k;
    cond << ",row_entropy\n";
    for (int i = 0; i < rep.K; ++i) {
      cond << i;
      for (int k = 0; k < rep.K; ++k) {
        std::snprintf(buf, sizeof buf, "%.17g",
                      rep.conditional[static_cast<std::size_t>(i) * rep.K +
                                      k]);
        cond << "," << buf;
      }
      std::snprintf(buf, sizeof buf, "%.17g", rep.row_entropy[i]);
      cond << "," << buf << "\n";
    }
    std::cout << "[analyze] chi2 " << rep.chi2.stat << " dof "
              << rep.chi2.dof << " p " << rep.chi2.p_value << "\n";
  } else {
    std::cout << "[analyze] single-depth stack: conditional-matrix export "
                 "skipped\n";
  }
  for (int d = 0; d < rep.D; ++d)
    std::cout << "[analyze] depth " << d + 1 << " active "
              << rep.depths[d].active << "/" << rep.K << " perplexity "
              << rep.depths[d].perplexity << "\n";
  std::cout << "[analyze] wrote " << rc.out_dir << "/analysis.json\n";
  return 0;
}

int cmd_compare(const config::RunConfig& rc) {
  echo_config(rc);
  std::vector<xp::ModeRun> runs;
  for (auto seed : rc.eval.seeds) {
    auto data = xp::sinusoid_data(rc, seed);
    for (auto mode : {quant::GradMode::rotation, quant::GradMode::ste}) {
      std::string csv = rc.out_dir + "/s1_" +
                        std::string(config::mode_name(mode)) + "_s" +
                        std::to_string(seed) + ".csv";
      runs.push_back(xp::train_mode(data, mode, seed, rc, csv));
      const auto& r = runs.back();
      std::cout << "[compare] seed " << seed << " " << r.mode << " active_d1 "
                << r.active_d1 << "/" << rc.stage1.K << " entropy "
                << r.entropy_d1 << " quant_l1 " << r.quant_l1 << "\n";
    }
  }
  std::ofstream(rc.out_dir + "/mode_comparison.csv") << xp::mode_csv(runs);
  for (std::size_t i = 0; i + 1 < runs.size(); i += 2)
    std::cout << "[compare] seed " << runs[i].seed << " quant_l1 ratio "
              << runs[i].quant_l1 / runs[i + 1].quant_l1
              << " (rotation/ste)\n";

  auto rows = xp::ablation_grid(rc, rc.out_dir + "/", &std::cout);
  std::ofstream(rc.out_dir + "/ablation.csv")
      << xp::ablation_csv(rows, rc.eval.seeds);
  std::cout << "[compare] variant mean success over " << rc.eval.seeds.size()
            << " seeds:\n";
  for (const auto& row : rows)
    std::cout << "[compare]   " << row.name << " " << row.mean_success
              << "\n";
  std::cout << "[compare] wrote " << rc.out_dir << "/mode_comparison.csv and "
            << rc.out_dir << "/ablation.csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef _OPENMP
  if (const char* s = std::getenv("RARSQ_THREADS")) {
    int n = std::atoi(s);
    if (n > 0) omp_set_num_threads(n);
  }
#endif

  CLI::App app{
      "Residual skill quantization and causal skill transformer toolkit"};
  app.require_subcommand(0, 1);
  bool example = false;
  app.add_flag("--example-config", example,
               "print a commented example configuration and exit");

  Overrides o;
  std::string s1_path, policy_path;
  bool expert = false;

  auto add_common = [&o](CLI::App* c) {
    c->add_option("--config", o.config_path,
                  "JSON configuration file (comments allowed)");
    c->add_option("--profile", o.profile, "configuration profile")
        ->check(CLI::IsMember({"desk", "paper"}));
    c->add_option("--seed", o.seed, "master seed");
    c->add_option("--out", o.out_dir, "output directory");
  };

  auto* tr = app.add_subcommand("train-rarsq",
                                "train the stage-1 quantizing autoencoder");
  add_common(tr);
  tr->add_option("--mode", o.mode, "gradient mode")
      ->check(CLI::IsMember({"rotation", "ste"}));

  auto* tc = app.add_subcommand(
      "train-cst", "train the skill transformer on a frozen stage 1");
  add_common(tc);
  tc->add_option("--stage1", s1_path, "stage-1 checkpoint")->required();
  tc->add_option("--ablate", o.ablate, "ablation switches")
      ->check(CLI::IsMember({"no-ar", "no-refine"}));

  auto* ev =
      app.add_subcommand("eval", "evaluate a policy on the task suite");
  add_common(ev);
  ev->add_option("--policy", policy_path, "policy checkpoint");
  ev->add_option("--stage1", s1_path, "stage-1 checkpoint");
  ev->add_flag("--expert", expert,
               "run the scripted expert instead of a policy");
  ev->add_option("--episodes", o.episodes, "episodes per task");

  auto* an = app.add_subcommand(
      "analyze", "export code-usage statistics for a trained stage 1");
  add_common(an);
  an->add_option("--stage1", s1_path, "stage-1 checkpoint")->required();

  auto* cp = app.add_subcommand(
      "compare", "gradient-mode comparison plus the ablation grid");
  add_common(cp);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 4;
  }

  try {
    if (example) {
      std::cout << config::example_text();
      return 0;
    }
    auto rc = resolve(o);
    if (tr->parsed()) return cmd_train_rarsq(rc);
    if (tc->parsed()) return cmd_train_cst(rc, s1_path);
    if (ev->parsed()) return cmd_eval(rc, policy_path, s1_path, expert);
    if (an->parsed()) return cmd_analyze(rc, s1_path);
    if (cp->parsed()) return cmd_compare(rc);
    std::cout << app.help();
    return 0;
  } catch (const config::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 4;
  } catch (const ckpt::CompatError& e) {
    std::cerr << "checkpoint incompatibility: " << e.what() << "\n";
    return 3;
  } catch (const ckpt::FormatError& e) {
    std::cerr << "checkpoint incompatibility: " << e.what() << "\n";
    return 3;
  } catch (const DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

// SPDX-FileCopyrightText: 2026 trajkit authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "trajkit/harness.hpp"

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace trajkit;

constexpr int kExitOk = 0;
constexpr int kExitConfigError = 2;
constexpr int kExitMissingArtifact = 3;
constexpr int kExitNumericalFailure = 4;

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream is(path);
  if (!is) throw harness::MissingArtifactError("cannot open config file: " + path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw harness::ConfigError(std::string("malformed config json: ") + e.what());
  }
}

fs::path resolve_out(const std::string& out) {
  fs::path p = out.empty() ? fs::path("trajkit_out") : fs::path(out);
  if (p.is_relative()) {
    if (const char* root = std::getenv("TRAJKIT_OUT_ROOT")) p = fs::path(root) / p;
  }
  return p;
}

int run_command(const std::string& name, const json& cfg, const fs::path& out) {
  try {
    json result;
    if (name == "gen-scenes") {
      result = harness::cmd_gen_scenes(cfg, out);
      std::cout << "wrote corpus with " << result.at("count") << " scenes to " << out.string() << "\n";
    } else if (name == "build-cache") {
      result = harness::cmd_build_cache(cfg, out);
      std::cout << "wrote " << result.at("files").size() << " reward tables to " << out.string() << "\n";
    } else if (name == "train") {
      result = harness::cmd_train(cfg, out);
      std::cout << "checkpoint written to " << (out / "checkpoint.hpol").string() << "\n";
    } else if (name == "eval") {
      result = harness::cmd_eval(cfg, out);
      std::cout << "mean EPDMS " << result.at("mean_epdms") << " over " << result.at("scene_count")
                << " scenes; reports in " << out.string() << "\n";
    } else if (name == "ablate") {
      result = harness::cmd_ablate(cfg, out);
      std::cout << "ablation table written to " << (out / "ablation.csv").string() << "\n";
      std::cout << "ranking:";
      for (const auto& cell : result.at("ranking")) std::cout << ' ' << cell.get<std::string>();
      std::cout << "\n";
    } else if (name == "bench-retrieval") {
      result = harness::cmd_bench_retrieval(cfg, out);
      std::cout << "aggregate speedup " << result.at("aggregate_speedup") << " over "
                << result.at("total_queries") << " queries\n";
    } else {
      std::cerr << "unknown command: " << name << "\n";
      return kExitConfigError;
    }
    return kExitOk;
  } catch (const harness::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const harness::MissingArtifactError& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return kExitMissingArtifact;
  } catch (const FormatError& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return kExitMissingArtifact;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumericalFailure;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumericalFailure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"trajkit: hierarchical coarse-to-fine trajectory planning toolkit"};
  app.require_subcommand(1);

  struct SubArgs {
    std::string config;
    std::string out;
    std::string scenes;
    std::size_t vocab_size = 0;
  };
  std::map<std::string, SubArgs> args;

  const char* names[] = {"gen-scenes", "build-cache", "train", "eval", "ablate", "bench-retrieval"};
  const char* descs[] = {"generate a synthetic scenario corpus with expert demonstrations",
                         "precompute per-scene reward tables over a trajectory vocabulary",
                         "train the two-stage policy on a corpus",
                         "evaluate a checkpoint: per-scene metrics, aggregates, closed loop",
                         "run the expansion-variant x top-k ablation grid",
                         "benchmark cache retrieval against direct simulation"};
  for (int i = 0; i < 6; ++i) {
    auto* sub = app.add_subcommand(names[i], descs[i]);
    auto& a = args[names[i]];
    sub->add_option("--config", a.config, "JSON config file");
    sub->add_option("--out", a.out, "output directory (overrides config)");
    if (std::string(names[i]) == "build-cache") {
      sub->add_option("--scenes", a.scenes, "corpus manifest path");
      sub->add_option("--vocab-size", a.vocab_size, "vocabulary size");
    }
  }

  CLI11_PARSE(app, argc, argv);

  const std::string name = app.get_subcommands().front()->get_name();
  const SubArgs& a = args[name];
  json cfg;
  try {
    cfg = load_config(a.config);
    if (!a.scenes.empty()) cfg["scenes"] = a.scenes;
    if (a.vocab_size != 0) cfg["vocab_size"] = a.vocab_size;
  } catch (const harness::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const harness::MissingArtifactError& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return kExitMissingArtifact;
  }

  std::string out = a.out;
  if (out.empty() && cfg.contains("out")) out = cfg.at("out").get<std::string>();
  return run_command(name, cfg, resolve_out(out));
}

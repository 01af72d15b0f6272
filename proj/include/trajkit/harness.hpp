// SPDX-FileCopyrightText: 2026 trajkit authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "trajkit/expert.hpp"
#include "trajkit/policy.hpp"
#include "trajkit/policy_training.hpp"
#include "trajkit/reward_cache.hpp"
#include "trajkit/rollout.hpp"

namespace trajkit::harness {

namespace fs = std::filesystem;
using nlohmann::json;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MissingArtifactError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Small helpers
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::uint64_t fnv1a(std::uint64_t h, const std::uint8_t* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  os << content;
}

inline std::string read_text_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("missing file: " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

template <class T>
T config_get(const json& cfg, const std::string& key, T fallback) {
  if (!cfg.contains(key)) return fallback;
  try {
    return cfg.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

inline void write_run_metadata(const fs::path& out) {
  // Timestamps live in a sidecar so every other artifact is byte-stable.
  const auto now = std::chrono::system_clock::now().time_since_epoch();
  json meta;
  meta["unix_time_s"] = std::chrono::duration_cast<std::chrono::seconds>(now).count();
  write_text_file(out / "run_meta.json", meta.dump(2) + "\n");
}

inline void write_histogram_svg(const fs::path& path, const std::vector<double>& values,
                                const std::string& title, std::size_t bins = 20) {
  const double lo = 0.0, hi = 1.0;
  std::vector<std::size_t> counts(bins, 0);
  for (double v : values) {
    const double t = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
    counts[std::min(bins - 1, static_cast<std::size_t>(t * static_cast<double>(bins)))]++;
  }
  std::size_t peak = 1;
  for (std::size_t c : counts) peak = std::max(peak, c);

  const double W = 640.0, H = 400.0, mx = 50.0, my = 40.0;
  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
  svg << "<rect width='100%' height='100%' fill='white'/>\n";
  svg << "<text x='" << W / 2 << "' y='22' text-anchor='middle' font-family='sans-serif' font-size='15'>"
      << title << "</text>\n";
  const double plot_w = W - 2 * mx, plot_h = H - 2 * my;
  for (std::size_t b = 0; b < bins; ++b) {
    const double bar_h = plot_h * static_cast<double>(counts[b]) / static_cast<double>(peak);
    const double x = mx + plot_w * static_cast<double>(b) / static_cast<double>(bins);
    svg << "<rect x='" << x << "' y='" << H - my - bar_h << "' width='" << plot_w / static_cast<double>(bins) - 1.0
        << "' height='" << bar_h << "' fill='#4878a8'/>\n";
  }
  svg << "<line x1='" << mx << "' y1='" << H - my << "' x2='" << W - mx << "' y2='" << H - my
      << "' stroke='black'/>\n";
  for (int tick = 0; tick <= 5; ++tick) {
    const double v = lo + (hi - lo) * tick / 5.0;
    const double x = mx + plot_w * tick / 5.0;
    svg << "<text x='" << x << "' y='" << H - my + 18 << "' text-anchor='middle' font-family='sans-serif' "
        << "font-size='11'>" << v << "</text>\n";
  }
  svg << "</svg>\n";
  write_text_file(path, svg.str());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Corpus manifest
// ---------------------------------------------------------------------------

struct CorpusEntry {
  std::string id;
  ScenarioKind kind = ScenarioKind::empty;
  std::uint64_t seed = 0;
  std::string scene_file;
  std::string expert_file;
  bool heldout = false;
};

struct LoadedCorpus {
  std::vector<CorpusEntry> entries;
  std::vector<Scene> scenes;
  std::vector<Trajectory> experts;
  std::string corpus_hash;
};

inline LoadedCorpus load_corpus(const fs::path& manifest_path) {
  if (!fs::exists(manifest_path)) throw MissingArtifactError("missing corpus manifest: " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(detail::read_text_file(manifest_path));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed manifest: ") + e.what());
  }
  LoadedCorpus corpus;
  corpus.corpus_hash = manifest.at("corpus_hash").get<std::string>();
  const fs::path root = manifest_path.parent_path();
  for (const auto& e : manifest.at("entries")) {
    CorpusEntry entry;
    entry.id = e.at("id").get<std::string>();
    entry.kind = scenario_kind_from_string(e.at("kind").get<std::string>());
    entry.seed = e.at("seed").get<std::uint64_t>();
    entry.scene_file = e.at("scene").get<std::string>();
    entry.expert_file = e.at("expert").get<std::string>();
    entry.heldout = e.at("split").get<std::string>() == "heldout";
    corpus.entries.push_back(entry);

    const fs::path scene_path = root / entry.scene_file;
    if (!fs::exists(scene_path)) throw MissingArtifactError("missing scene file: " + scene_path.string());
    corpus.scenes.push_back(scene_from_json(json::parse(detail::read_text_file(scene_path))));

    const fs::path expert_path = root / entry.expert_file;
    std::ifstream is(expert_path);
    if (!is) throw MissingArtifactError("missing expert file: " + expert_path.string());
    corpus.experts.push_back(read_trajectory_csv(is));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// gen-scenes
// ---------------------------------------------------------------------------

inline json cmd_gen_scenes(const json& cfg, const fs::path& out) {
  const auto count = detail::config_get<std::size_t>(cfg, "count", 200);
  const auto seed = detail::config_get<std::uint64_t>(cfg, "seed", 42);
  if (count == 0) throw ConfigError("gen-scenes: count must be positive");

  fs::create_directories(out / "scenes");
  fs::create_directories(out / "experts");

  const ScenarioKind kinds[] = {ScenarioKind::empty, ScenarioKind::lead_vehicle, ScenarioKind::cut_in,
                                ScenarioKind::blocked_lane, ScenarioKind::intersection};
  json entries = json::array();
  std::uint64_t hash = 1469598103934665603ULL;
  for (std::size_t i = 0; i < count; ++i) {
    const ScenarioKind kind = kinds[i % 5];
    const std::uint64_t scene_seed = derive_seed(seed, i);
    Scene scene = generate_scene(kind, scene_seed);
    char idbuf[64];
    std::snprintf(idbuf, sizeof(idbuf), "%04zu_%s", i, to_string(kind));
    scene.id = idbuf;

    const Trajectory expert = expert_plan(scene);
    const SubMetricScores check = eval_submetrics(scene, expert);
    if (check.nc != 1.0)
      throw NumericalError("gen-scenes: expert trajectory collides on scene " + scene.id);

    const std::string scene_rel = "scenes/" + scene.id + ".json";
    const std::string expert_rel = "experts/" + scene.id + ".csv";
    const std::string scene_text = scene_to_json(scene).dump(1) + "\n";
    detail::write_text_file(out / scene_rel, scene_text);
    std::ostringstream expert_text;
    write_trajectory_csv(expert_text, expert);
    detail::write_text_file(out / expert_rel, expert_text.str());

    hash = detail::fnv1a(hash, reinterpret_cast<const std::uint8_t*>(scene_text.data()), scene_text.size());
    const std::string et = expert_text.str();
    hash = detail::fnv1a(hash, reinterpret_cast<const std::uint8_t*>(et.data()), et.size());

    json entry;
    entry["id"] = scene.id;
    entry["kind"] = to_string(kind);
    entry["seed"] = scene_seed;
    entry["scene"] = scene_rel;
    entry["expert"] = expert_rel;
    entry["split"] = derive_seed(scene_seed, "split") % 5 == 4 ? "heldout" : "train";
    entries.push_back(entry);
  }

  json manifest;
  manifest["count"] = count;
  manifest["seed"] = seed;
  manifest["corpus_hash"] = detail::hex64(hash);
  manifest["entries"] = entries;
  detail::write_text_file(out / "manifest.json", manifest.dump(1) + "\n");

  json resolved;
  resolved["command"] = "gen-scenes";
  resolved["count"] = count;
  resolved["seed"] = seed;
  detail::write_text_file(out / "resolved_config.json", resolved.dump(2) + "\n");
  detail::write_run_metadata(out);
  return manifest;
}

// ---------------------------------------------------------------------------
// Shared: vocabulary + per-scene reward tables
// ---------------------------------------------------------------------------

inline AnchorVocabulary corpus_vocabulary(const LoadedCorpus& corpus, std::size_t vocab_size) {
  VocabularySpec spec;
  if (!corpus.experts.empty()) {
    spec.horizon = corpus.experts.front().size();
    spec.timestep_s = corpus.experts.front().timestep_s;
  }
  return build_vocabulary(spec, vocab_size);
}

inline std::vector<RewardTable> precompute_corpus_tables(const LoadedCorpus& corpus,
                                                         const AnchorVocabulary& vocab, std::size_t threads) {
  std::vector<RewardTable> tables(corpus.scenes.size());
  // Parallelize across scenes; each table build stays single-threaded.
  std::size_t workers = threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : threads;
  workers = std::min(workers, tables.size());
  std::vector<std::thread> pool;
  std::mutex next_mutex;
  std::size_t next = 0;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i;
        {
          std::lock_guard<std::mutex> lock(next_mutex);
          if (next >= tables.size()) return;
          i = next++;
        }
        tables[i] = precompute_rewards(corpus.scenes[i], vocab, 1);
      }
    });
  }
  for (auto& t : pool) t.join();
  return tables;
}

// ---------------------------------------------------------------------------
// build-cache
// ---------------------------------------------------------------------------

inline json cmd_build_cache(const json& cfg, const fs::path& out) {
  const auto manifest = detail::config_get<std::string>(cfg, "scenes", "");
  if (manifest.empty()) throw ConfigError("build-cache: 'scenes' manifest path required");
  const auto vocab_size = detail::config_get<std::size_t>(cfg, "vocab_size", 1024);
  const auto threads = detail::config_get<std::size_t>(cfg, "threads", 0);

  const LoadedCorpus corpus = load_corpus(manifest);
  const AnchorVocabulary vocab = corpus_vocabulary(corpus, vocab_size);
  fs::create_directories(out);
  const auto tables = precompute_corpus_tables(corpus, vocab, threads);

  json files = json::array();
  for (std::size_t i = 0; i < tables.size(); ++i) {
    const std::string rel = corpus.entries[i].id + ".trrc";
    save_table(tables[i], (out / rel).string());
    files.push_back(rel);
  }

  json resolved;
  resolved["command"] = "build-cache";
  resolved["scenes"] = manifest;
  resolved["vocab_size"] = vocab_size;
  resolved["corpus_hash"] = corpus.corpus_hash;
  resolved["files"] = files;
  detail::write_text_file(out / "cache_manifest.json", resolved.dump(1) + "\n");
  detail::write_text_file(out / "resolved_config.json", resolved.dump(2) + "\n");
  detail::write_run_metadata(out);
  return resolved;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline PolicyConfig policy_config_from_run(const json& cfg) {
  PolicyConfig pc;
  pc.top_k = detail::config_get<std::size_t>(cfg, "top_k", pc.top_k);
  pc.variant = expansion_variant_from_string(detail::config_get<std::string>(cfg, "variant", "polar"));
  pc.gaussian_sigma = detail::config_get<double>(cfg, "gaussian_sigma", pc.gaussian_sigma);
  pc.anchor_count = detail::config_get<std::size_t>(cfg, "anchor_count", pc.anchor_count);
  pc.hidden = detail::config_get<std::size_t>(cfg, "hidden", pc.hidden);
  pc.beta = detail::config_get<double>(cfg, "beta", pc.beta);
  const auto n_exp = detail::config_get<std::size_t>(cfg, "n_exp", pc.expansion.per_axis_count());
  if (n_exp != pc.expansion.per_axis_count()) pc.expansion = ExpansionConfig::grid(n_exp);
  return pc;
}

struct TrainedPolicy {
  PolicyState state;
  std::vector<EpochLog> logs;
};

inline TrainedPolicy run_training(const LoadedCorpus& corpus, const std::vector<RewardTable>& tables,
                                  const PolicyConfig& pc, std::size_t epochs, double learning_rate,
                                  bool cosine, std::uint64_t seed, bool log_epdms) {
  std::vector<TrainingExample> examples;
  for (std::size_t i = 0; i < corpus.scenes.size(); ++i) {
    if (corpus.entries[i].heldout) continue;
    examples.push_back({&corpus.scenes[i], &corpus.experts[i], &tables[i]});
  }
  if (examples.empty()) throw ConfigError("train: no training-split scenes in the corpus");

  TrainedPolicy result{PolicyState::random(pc, derive_seed(seed, "init")), {}};
  TrainOptions opts;
  opts.epochs = epochs;
  opts.learning_rate = learning_rate;
  opts.cosine_decay = cosine;
  opts.seed = seed;
  opts.log_epdms = log_epdms;
  result.logs = train(result.state, examples, opts);
  return result;
}

inline std::string training_log_csv(const std::vector<EpochLog>& logs) {
  std::ostringstream os;
  os << "epoch,L_global,L_dist,L_safe,L_rl,J,mean_epdms,total\n";
  for (const auto& l : logs) {
    os << l.epoch << ',' << detail::format_double(l.l_global) << ',' << detail::format_double(l.l_dist) << ','
       << detail::format_double(l.l_safe) << ',' << detail::format_double(l.l_rl) << ','
       << detail::format_double(l.J) << ',' << detail::format_double(l.mean_epdms) << ','
       << detail::format_double(l.total) << '\n';
  }
  return os.str();
}

inline json cmd_train(const json& cfg, const fs::path& out) {
  const auto manifest = detail::config_get<std::string>(cfg, "scenes", "");
  if (manifest.empty()) throw ConfigError("train: 'scenes' manifest path required");
  const auto epochs = detail::config_get<std::size_t>(cfg, "epochs", 60);
  const auto seed = detail::config_get<std::uint64_t>(cfg, "seed", 1);
  const auto lr = detail::config_get<double>(cfg, "learning_rate", 1e-2);
  const auto cosine = detail::config_get<bool>(cfg, "cosine_decay", true);
  const auto vocab_size = detail::config_get<std::size_t>(cfg, "vocab_size", 1024);
  const auto threads = detail::config_get<std::size_t>(cfg, "threads", 0);
  const auto cache_dir = detail::config_get<std::string>(cfg, "cache_dir", "");

  const LoadedCorpus corpus = load_corpus(manifest);
  const AnchorVocabulary vocab = corpus_vocabulary(corpus, vocab_size);

  std::vector<RewardTable> tables;
  if (!cache_dir.empty()) {
    for (const auto& entry : corpus.entries) {
      const fs::path p = fs::path(cache_dir) / (entry.id + ".trrc");
      if (!fs::exists(p)) throw MissingArtifactError("train: missing cache table " + p.string());
      tables.push_back(load_table(p.string()));
    }
  } else {
    tables = precompute_corpus_tables(corpus, vocab, threads);
  }

  const PolicyConfig pc = policy_config_from_run(cfg);
  const TrainedPolicy trained = run_training(corpus, tables, pc, epochs, lr, cosine, seed, true);

  fs::create_directories(out);
  save_policy(trained.state, (out / "checkpoint.hpol").string());
  detail::write_text_file(out / "train_log.csv", training_log_csv(trained.logs));

  json resolved = cfg;
  resolved["command"] = "train";
  resolved["epochs"] = epochs;
  resolved["seed"] = seed;
  resolved["learning_rate"] = lr;
  resolved["cosine_decay"] = cosine;
  resolved["vocab_size"] = vocab_size;
  resolved["variant"] = to_string(pc.variant);
  resolved["top_k"] = pc.top_k;
  resolved["corpus_hash"] = corpus.corpus_hash;
  detail::write_text_file(out / "resolved_config.json", resolved.dump(2) + "\n");
  detail::write_run_metadata(out);
  return resolved;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct PolicyPlanner {
  const PolicyState* state;
  std::uint64_t seed;
  mutable std::uint64_t calls = 0;

  Trajectory operator()(const Scene& scene) const { return plan(*state, scene, derive_seed(seed, calls++)); }
};

inline SubMetricScores eval_plan_or_zero(const PolicyState& state, const Scene& scene, std::uint64_t seed) {
  try {
    return eval_submetrics(scene, plan(state, scene, seed));
  } catch (const std::out_of_range&) {
    SubMetricScores zero;
    for (std::size_t m = 0; m < SubMetricScores::kCount; ++m) zero.set(m, 0.0);
    return zero;
  }
}

inline json cmd_eval(const json& cfg, const fs::path& out) {
  const auto manifest = detail::config_get<std::string>(cfg, "scenes", "");
  const auto checkpoint = detail::config_get<std::string>(cfg, "checkpoint", "");
  if (manifest.empty() || checkpoint.empty())
    throw ConfigError("eval: 'scenes' and 'checkpoint' paths required");
  if (!fs::exists(checkpoint)) throw MissingArtifactError("eval: missing checkpoint " + checkpoint);
  const auto split = detail::config_get<std::string>(cfg, "split", "heldout");
  const auto seed = detail::config_get<std::uint64_t>(cfg, "seed", 2025);
  const auto closed_loop = detail::config_get<bool>(cfg, "closed_loop", true);
  const auto rollout_steps = detail::config_get<std::size_t>(cfg, "rollout_steps", 20);

  const LoadedCorpus corpus = load_corpus(manifest);
  const PolicyState state = load_policy(checkpoint);
  const MetricWeights weights = state.config.weights;

  std::ostringstream csv;
  csv << "id,kind,split,nc,dac,ddc,tlc,ep,ttc,comfort,lk,hc,ec,pdms_v1,epdms\n";
  std::vector<double> epdms_values;
  std::vector<double> sums(SubMetricScores::kCount, 0.0);
  double sum_v1 = 0.0, sum_v2 = 0.0;
  std::size_t rows = 0;

  std::ostringstream closed_csv;
  closed_csv << "id,kind,steps,route_completion,hd_score,collided\n";
  double sum_rc = 0.0, sum_hd = 0.0;
  std::size_t closed_rows = 0;

  for (std::size_t i = 0; i < corpus.scenes.size(); ++i) {
    const bool in_split = split == "all" || (split == "heldout") == corpus.entries[i].heldout;
    if (!in_split) continue;
    const SubMetricScores s = eval_plan_or_zero(state, corpus.scenes[i], derive_seed(seed, i));
    const double v1 = aggregate_pdms(s, weights, PdmsVersion::v1);
    const double v2 = aggregate_pdms(s, weights, PdmsVersion::v2);
    ++rows;
    sum_v1 += v1;
    sum_v2 += v2;
    epdms_values.push_back(v2);
    csv << corpus.entries[i].id << ',' << to_string(corpus.entries[i].kind) << ','
        << (corpus.entries[i].heldout ? "heldout" : "train");
    for (std::size_t m = 0; m < SubMetricScores::kCount; ++m) {
      sums[m] += s.get(m);
      csv << ',' << detail::format_double(s.get(m));
    }
    csv << ',' << detail::format_double(v1) << ',' << detail::format_double(v2) << '\n';

    if (closed_loop) {
      const RolloutResult r =
          closed_loop_rollout(corpus.scenes[i], PolicyPlanner{&state, derive_seed(seed, i + 1000000)},
                              rollout_steps);
      const double hd = r.step_scores.empty() ? 0.0 : hd_score(r.step_scores, r.route_completion);
      sum_rc += r.route_completion;
      sum_hd += hd;
      ++closed_rows;
      closed_csv << corpus.entries[i].id << ',' << to_string(corpus.entries[i].kind) << ',' << r.steps_executed
                 << ',' << detail::format_double(r.route_completion) << ',' << detail::format_double(hd) << ','
                 << (r.collided ? 1 : 0) << '\n';
    }
  }
  if (rows == 0) throw ConfigError("eval: no scenes matched split '" + split + "'");

  fs::create_directories(out);
  detail::write_text_file(out / "per_scene.csv", csv.str());
  detail::write_histogram_svg(out / "epdms_hist.svg", epdms_values, "EPDMS distribution (" + split + ")");

  json summary;
  summary["scene_count"] = rows;
  summary["split"] = split;
  for (std::size_t m = 0; m < SubMetricScores::kCount; ++m)
    summary["mean"][SubMetricScores::names()[m]] = sums[m] / static_cast<double>(rows);
  summary["mean_pdms_v1"] = sum_v1 / static_cast<double>(rows);
  summary["mean_epdms"] = sum_v2 / static_cast<double>(rows);
  if (closed_loop) {
    detail::write_text_file(out / "closed_loop.csv", closed_csv.str());
    summary["closed_loop"]["scene_count"] = closed_rows;
    summary["closed_loop"]["mean_route_completion"] = sum_rc / static_cast<double>(closed_rows);
    summary["closed_loop"]["mean_hd_score"] = sum_hd / static_cast<double>(closed_rows);
  }
  detail::write_text_file(out / "summary.json", summary.dump(2) + "\n");

  json resolved = cfg;
  resolved["command"] = "eval";
  resolved["split"] = split;
  resolved["seed"] = seed;
  detail::write_text_file(out / "resolved_config.json", resolved.dump(2) + "\n");
  detail::write_run_metadata(out);
  return summary;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblationCell {
  ExpansionVariant variant;
  std::size_t top_k;
  std::vector<double> epdms_per_seed;

  double mean() const {
    double s = 0.0;
    for (double v : epdms_per_seed) s += v;
    return epdms_per_seed.empty() ? 0.0 : s / static_cast<double>(epdms_per_seed.size());
  }
  double range() const {
    if (epdms_per_seed.empty()) return 0.0;
    const auto [lo, hi] = std::minmax_element(epdms_per_seed.begin(), epdms_per_seed.end());
    return *hi - *lo;
  }
};

inline double heldout_mean_epdms(const PolicyState& state, const LoadedCorpus& corpus, std::uint64_t seed) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < corpus.scenes.size(); ++i) {
    if (!corpus.entries[i].heldout) continue;
    const SubMetricScores s = eval_plan_or_zero(state, corpus.scenes[i], derive_seed(seed, i));
    sum += aggregate_pdms(s, state.config.weights, PdmsVersion::v2);
    ++n;
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

inline json cmd_ablate(const json& cfg, const fs::path& out) {
  const auto manifest = detail::config_get<std::string>(cfg, "scenes", "");
  if (manifest.empty()) throw ConfigError("ablate: 'scenes' manifest path required");
  const auto epochs = detail::config_get<std::size_t>(cfg, "epochs", 60);
  const auto lr = detail::config_get<double>(cfg, "learning_rate", 1e-2);
  const auto cosine = detail::config_get<bool>(cfg, "cosine_decay", true);
  const auto vocab_size = detail::config_get<std::size_t>(cfg, "vocab_size", 1024);
  const auto eval_seed = detail::config_get<std::uint64_t>(cfg, "eval_seed", 2025);
  std::vector<std::uint64_t> seeds = detail::config_get<std::vector<std::uint64_t>>(cfg, "seeds", {1, 2, 3});
  if (seeds.empty()) throw ConfigError("ablate: at least one seed required");

  const LoadedCorpus corpus = load_corpus(manifest);
  const AnchorVocabulary vocab = corpus_vocabulary(corpus, vocab_size);
  const auto tables = precompute_corpus_tables(corpus, vocab, 0);

  PolicyConfig base_pc = policy_config_from_run(cfg);
  std::vector<AblationCell> cells;
  for (ExpansionVariant variant : {ExpansionVariant::polar, ExpansionVariant::xy, ExpansionVariant::gaussian})
    for (std::size_t k : {std::size_t{2}, base_pc.anchor_count})
      cells.push_back({variant, k, {}});

  struct Job {
    std::size_t cell;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t c = 0; c < cells.size(); ++c)
    for (std::uint64_t s : seeds) jobs.push_back({c, s});
  std::vector<double> results(jobs.size(), 0.0);

  std::mutex next_mutex;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t ji;
      {
        std::lock_guard<std::mutex> lock(next_mutex);
        if (next >= jobs.size()) return;
        ji = next++;
      }
      PolicyConfig pc = base_pc;
      pc.variant = cells[jobs[ji].cell].variant;
      pc.top_k = cells[jobs[ji].cell].top_k;
      const TrainedPolicy trained =
          run_training(corpus, tables, pc, epochs, lr, cosine, jobs[ji].seed, false);
      results[ji] = heldout_mean_epdms(trained.state, corpus, eval_seed);
    }
  };
  const std::size_t workers = std::min<std::size_t>(std::max(1u, std::thread::hardware_concurrency()), jobs.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  for (std::size_t ji = 0; ji < jobs.size(); ++ji) cells[jobs[ji].cell].epdms_per_seed.push_back(results[ji]);

  std::ostringstream csv;
  csv << "variant,top_k,seed,heldout_mean_epdms,corpus_hash\n";
  for (std::size_t c = 0; c < cells.size(); ++c) {
    for (std::size_t si = 0; si < seeds.size(); ++si) {
      csv << to_string(cells[c].variant) << ',' << cells[c].top_k << ',' << seeds[si] << ','
          << detail::format_double(cells[c].epdms_per_seed[si]) << ',' << corpus.corpus_hash << '\n';
    }
  }
  fs::create_directories(out);
  detail::write_text_file(out / "ablation.csv", csv.str());

  auto cell_of = [&](ExpansionVariant v, std::size_t k) -> const AblationCell& {
    for (const auto& c : cells)
      if (c.variant == v && c.top_k == k) return c;
    throw std::logic_error("ablation cell lookup failed");
  };
  const AblationCell& polar2 = cell_of(ExpansionVariant::polar, 2);
  const AblationCell& xy2 = cell_of(ExpansionVariant::xy, 2);
  const AblationCell& gauss2 = cell_of(ExpansionVariant::gaussian, 2);
  const AblationCell& polar_all = cell_of(ExpansionVariant::polar, base_pc.anchor_count);

  json summary;
  summary["corpus_hash"] = corpus.corpus_hash;
  summary["epochs"] = epochs;
  summary["seeds"] = seeds;
  json cell_rows = json::array();
  std::vector<std::pair<double, std::string>> ranked;
  for (const auto& c : cells) {
    json row;
    row["variant"] = to_string(c.variant);
    row["top_k"] = c.top_k;
    row["mean_epdms"] = c.mean();
    row["min_epdms"] = *std::min_element(c.epdms_per_seed.begin(), c.epdms_per_seed.end());
    row["max_epdms"] = *std::max_element(c.epdms_per_seed.begin(), c.epdms_per_seed.end());
    row["range"] = c.range();
    cell_rows.push_back(row);
    ranked.emplace_back(-c.mean(), std::string(to_string(c.variant)) + "/k" + std::to_string(c.top_k));
  }
  std::sort(ranked.begin(), ranked.end());
  json rank_list = json::array();
  for (const auto& [neg, name] : ranked) rank_list.push_back(name);
  summary["cells"] = cell_rows;
  summary["ranking"] = rank_list;
  summary["ordering"]["polar_gt_xy"] = polar2.mean() > xy2.mean();
  summary["ordering"]["xy_gt_gaussian"] = xy2.mean() > gauss2.mean();
  summary["ordering"]["topk_gt_full"] = polar2.mean() > polar_all.mean();
  summary["ordering"]["polar_xy_gap"] = polar2.mean() - xy2.mean();
  summary["ordering"]["xy_gaussian_gap"] = xy2.mean() - gauss2.mean();
  summary["ordering"]["topk_gap"] = polar2.mean() - polar_all.mean();
  detail::write_text_file(out / "ablation_summary.json", summary.dump(2) + "\n");

  json resolved = cfg;
  resolved["command"] = "ablate";
  resolved["epochs"] = epochs;
  resolved["vocab_size"] = vocab_size;
  detail::write_text_file(out / "resolved_config.json", resolved.dump(2) + "\n");
  detail::write_run_metadata(out);
  return summary;
}

// ---------------------------------------------------------------------------
// bench-retrieval
// ---------------------------------------------------------------------------

inline json cmd_bench_retrieval(const json& cfg, const fs::path& out) {
  const auto manifest = detail::config_get<std::string>(cfg, "scenes", "");
  if (manifest.empty()) throw ConfigError("bench-retrieval: 'scenes' manifest path required");
  const auto vocab_size = detail::config_get<std::size_t>(cfg, "vocab_size", 1024);
  const auto scene_limit = detail::config_get<std::size_t>(cfg, "scene_limit", 10);
  const auto queries_per_scene = detail::config_get<std::size_t>(cfg, "queries_per_scene", 200);
  const auto seed = detail::config_get<std::uint64_t>(cfg, "seed", 7);
  if (queries_per_scene < 100) throw ConfigError("bench-retrieval: queries_per_scene must be >= 100");

  const LoadedCorpus corpus = load_corpus(manifest);
  const AnchorVocabulary vocab = corpus_vocabulary(corpus, vocab_size);
  const std::size_t n_scenes = std::min(scene_limit, corpus.scenes.size());
  if (n_scenes == 0) throw ConfigError("bench-retrieval: empty corpus");

  std::ostringstream csv;
  csv << "id,queries,mean_retrieve_s,mean_oracle_s,speedup\n";
  double total_retrieve = 0.0, total_oracle = 0.0;
  std::size_t total_queries = 0;
  for (std::size_t i = 0; i < n_scenes; ++i) {
    const RewardTable table = precompute_rewards(corpus.scenes[i], vocab);
    Rng rng(derive_seed(seed, i));
    std::vector<Trajectory> queries;
    for (std::size_t q = 0; q < queries_per_scene; ++q) {
      const std::size_t j = rng.uniform_index(vocab.size());
      queries.push_back(perturb_gaussian(vocab.trajectories[j], rng.uniform(0.0, 0.5), rng.next_u64()));
    }
    const RetrievalBenchmark bench = bench_retrieval(corpus.scenes[i], table, queries);
    total_retrieve += bench.mean_retrieve_s * static_cast<double>(queries.size());
    total_oracle += bench.mean_oracle_s * static_cast<double>(queries.size());
    total_queries += queries.size();
    csv << corpus.entries[i].id << ',' << queries.size() << ',' << detail::format_double(bench.mean_retrieve_s)
        << ',' << detail::format_double(bench.mean_oracle_s) << ',' << detail::format_double(bench.speedup)
        << '\n';
  }

  fs::create_directories(out);
  detail::write_text_file(out / "bench.csv", csv.str());

  json summary;
  summary["vocab_size"] = vocab_size;
  summary["scenes"] = n_scenes;
  summary["total_queries"] = total_queries;
  summary["mean_retrieve_s"] = total_retrieve / static_cast<double>(total_queries);
  summary["mean_oracle_s"] = total_oracle / static_cast<double>(total_queries);
  summary["aggregate_speedup"] = total_oracle / std::max(1e-12, total_retrieve);
  detail::write_text_file(out / "summary.json", summary.dump(2) + "\n");

  json resolved = cfg;
  resolved["command"] = "bench-retrieval";
  resolved["vocab_size"] = vocab_size;
  detail::write_text_file(out / "resolved_config.json", resolved.dump(2) + "\n");
  detail::write_run_metadata(out);
  return summary;
}

}  // namespace trajkit::harness

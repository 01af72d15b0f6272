// SPDX-FileCopyrightText: 2026 trajkit authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one pass/fail line per criterion, fixed tolerances.
//
//   acceptance                 runs all criteria
//   acceptance --criterion N   runs a single criterion
//
// Exit code is the number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <vector>

#include "trajkit/harness.hpp"
#include "trajkit/trajkit.hpp"

using namespace trajkit;
namespace fs = std::filesystem;

namespace {

struct Check {
  bool ok = true;
  std::ostringstream log;

  void expect(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      log << "    FAILED: " << what << "\n";
    }
  }
};

Trajectory random_traj(Rng& rng, std::size_t n = 8, double span = 30.0) {
  Trajectory t;
  t.timestep_s = 0.5;
  for (std::size_t i = 0; i < n; ++i) t.waypoints.push_back({rng.uniform(-span, span), rng.uniform(-span, span)});
  return t;
}

Trajectory smooth_arc(double speed = 8.0, double curvature = 0.02, std::size_t n = 8) {
  Trajectory t;
  t.timestep_s = 0.5;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = speed * 0.5 * static_cast<double>(i + 1);
    t.waypoints.push_back({std::sin(curvature * s) / curvature, (1.0 - std::cos(curvature * s)) / curvature});
  }
  return t;
}

// Shared corpus for the training-level criteria; regenerated per process.
fs::path ensure_corpus(std::size_t count, std::uint64_t seed) {
  const fs::path dir = fs::temp_directory_path() /
                       ("trajkit_acceptance_corpus_" + std::to_string(count) + "_" + std::to_string(seed));
  if (!fs::exists(dir / "manifest.json")) {
    fs::create_directories(dir);
    nlohmann::json cfg;
    cfg["count"] = count;
    cfg["seed"] = seed;
    harness::cmd_gen_scenes(cfg, dir);
  }
  return dir;
}

// ---------------------------------------------------------------------------
// 1. Geometry invariants
// ---------------------------------------------------------------------------
bool criterion_1(Check& c) {
  ExpansionConfig identity;
  identity.radial_coeffs = {1.0};
  identity.angular_coeffs = {0.0};

  Rng rng(101);
  const auto cfg = ExpansionConfig::defaults();
  for (int iter = 0; iter < 1000; ++iter) {
    const Trajectory t = random_traj(rng);

    const auto same = expand_polar(t, identity);
    for (std::size_t i = 0; i < t.size(); ++i) {
      c.expect(same[0].waypoints[i].x == t.waypoints[i].x && same[0].waypoints[i].y == t.waypoints[i].y,
               "identity expansion not exact");
    }

    const Trajectory back = from_polar(to_polar(t));
    for (std::size_t i = 0; i < t.size(); ++i)
      c.expect(norm(back.waypoints[i] - t.waypoints[i]) < 1e-9, "polar round-trip above 1e-9");

    const auto variants = expand_polar(t, cfg);
    const auto src_angles = turning_angles(t);
    std::size_t v = 0;
    for (double lambda : cfg.radial_coeffs) {
      for (std::size_t dv = 0; dv < cfg.angular_coeffs.size(); ++dv, ++v) {
        for (std::size_t i = 0; i + 1 < t.size(); ++i) {
          const double src = norm(t.waypoints[i] - t.waypoints[i + 1]);
          const double got = norm(variants[v].waypoints[i] - variants[v].waypoints[i + 1]);
          c.expect(std::abs(got - lambda * src) < 1e-9, "pairwise distance scaling above 1e-9");
        }
        const auto var_angles = turning_angles(variants[v]);
        for (std::size_t a = 0; a < src_angles.size(); ++a)
          c.expect(std::abs(var_angles[a] - src_angles[a]) < 1e-9, "turning angle drift above 1e-9");
      }
    }
    if (!c.ok) return false;  // no point flooding the log
  }
  return c.ok;
}

// ---------------------------------------------------------------------------
// 2. Expansion-quality separation
// ---------------------------------------------------------------------------
bool criterion_2(Check& c) {
  const Trajectory source = smooth_arc();
  const double base = mean_second_difference(source);

  const int n = 1000;
  double mean = 0.0, m2 = 0.0;
  for (int s = 0; s < n; ++s) {
    const double v = mean_second_difference(perturb_gaussian(source, 0.5, static_cast<std::uint64_t>(s)));
    const double delta = v - mean;
    mean += delta / (s + 1);
    m2 += delta * (v - mean);
  }
  const double stderr_mean = std::sqrt(m2 / (n - 1)) / std::sqrt(static_cast<double>(n));
  c.log << "    source second-diff " << base << ", gaussian mean " << mean << " (stderr " << stderr_mean
        << ")\n";
  c.expect(mean - 3.0 * stderr_mean > base, "gaussian perturbation does not significantly raise roughness");

  const auto cfg = ExpansionConfig::defaults();
  Rng rng(55);
  for (int iter = 0; iter < 200; ++iter) {
    const Trajectory t = smooth_arc(rng.uniform(4.0, 12.0), rng.uniform(-0.03, 0.03));
    const auto src_angles = turning_angles(t);
    for (const Trajectory& v : expand_polar(t, cfg)) {
      const auto angles = turning_angles(v);
      for (std::size_t a = 0; a < src_angles.size(); ++a)
        c.expect(std::abs(angles[a] - src_angles[a]) < 1e-9, "polar expansion disturbed a turning angle");
    }
  }
  return c.ok;
}

// ---------------------------------------------------------------------------
// 3. MDPO correctness
// ---------------------------------------------------------------------------
bool criterion_3(Check& c) {
  Rng rng(33);
  for (int iter = 0; iter < 50; ++iter) {
    const std::size_t metrics = 1 + rng.uniform_index(4);
    const std::size_t count = 2 + rng.uniform_index(10);
    const std::size_t k_groups = 1 + rng.uniform_index(3);
    MdpoConfig cfg;
    for (std::size_t m = 0; m < metrics; ++m) {
      cfg.metrics.push_back("m" + std::to_string(m));
      cfg.coeffs.push_back(rng.uniform(0.1, 1.0));
    }
    std::vector<ExpansionGroup> groups(k_groups);
    for (auto& g : groups) {
      g.count = count;
      g.metric_count = metrics;
      g.logits.resize(count * metrics);
      g.rewards.resize(count * metrics);
      for (double& v : g.logits) v = rng.uniform(-2.0, 2.0);
      for (double& v : g.rewards) v = rng.next_double();
    }

    const auto grads = objective_gradient(groups, cfg);
    const double h = 1e-5;
    for (std::size_t k = 0; k < k_groups; ++k) {
      for (std::size_t i = 0; i < groups[k].logits.size(); ++i) {
        auto plus = groups, minus = groups;
        plus[k].logits[i] += h;
        minus[k].logits[i] -= h;
        const double fd = (total_objective(plus, cfg) - total_objective(minus, cfg)) / (2.0 * h);
        c.expect(std::abs(grads[k][i] - fd) < 1e-6, "gradient vs finite differences above 1e-6");
      }
      for (std::size_t m = 0; m < metrics; ++m) {
        double sum = 0.0;
        for (std::size_t j = 0; j < count; ++j) sum += grads[k][j * metrics + m];
        c.expect(std::abs(sum) < 1e-10, "per-(group, metric) gradient sum above 1e-10");
      }

      // Shift invariances.
      const auto p0 = selection_probabilities(groups[k], 0);
      const auto r0 = normalize_rewards(groups[k], 0, cfg);
      ExpansionGroup shifted = groups[k];
      for (double& v : shifted.logits) v += 7.0;
      for (double& v : shifted.rewards) v += 0.31;
      const auto p1 = selection_probabilities(shifted, 0);
      const auto r1 = normalize_rewards(shifted, 0, cfg);
      double psum = 0.0;
      for (std::size_t j = 0; j < count; ++j) {
        psum += p1[j];
        c.expect(std::abs(p0[j] - p1[j]) < 1e-12, "softmax shift invariance above 1e-12");
        c.expect(std::abs(r0[j] - r1[j]) < 1e-12, "z-score shift invariance above 1e-12");
      }
      c.expect(std::abs(psum - 1.0) < 1e-12, "softmax does not sum to 1 within 1e-12");

      // Degenerate group: all-equal rewards give exactly zero.
      ExpansionGroup flat = groups[k];
      for (double& v : flat.rewards) v = 0.77;
      std::vector<ExpansionGroup> flat_groups = {flat};
      c.expect(total_objective(flat_groups, cfg) == 0.0, "all-equal rewards J != 0");
    }
    if (!c.ok) return false;
  }
  return c.ok;
}

// ---------------------------------------------------------------------------
// 4. Retrieval fidelity
// ---------------------------------------------------------------------------
bool criterion_4(Check& c) {
  const AnchorVocabulary vocab = build_vocabulary({}, 1024);
  Scene scene;
  scene.drivable = OccupancyGrid::make(-15.0, -30.0, 140.0, 30.0, 0.5);
  std::fill(scene.drivable.drivable.begin(), scene.drivable.drivable.end(), 1);
  scene.centerline = Centerline::from_points({{0.0, 0.0}, {80.0, 0.0}});
  scene.ego.speed = 8.0;
  scene.id = "acceptance_field";
  const RewardTable table = precompute_rewards(scene, vocab);

  Rng rng(404);
  std::size_t matches = 0;
  for (int q = 0; q < 500; ++q) {
    const double v = rng.uniform(vocab.spec.min_speed, vocab.spec.max_speed);
    const double turn = rng.uniform(-vocab.spec.max_turn, vocab.spec.max_turn);
    Trajectory query = detail::arc_trajectory(v, turn, vocab.spec.horizon, vocab.spec.timestep_s);
    query = perturb_gaussian(query, rng.uniform(0.0, 1.0), rng.next_u64());

    std::size_t brute = 0;
    double best = trajectory_distance(query, vocab.trajectories[0]);
    for (std::size_t j = 1; j < vocab.size(); ++j) {
      const double d = trajectory_distance(query, vocab.trajectories[j]);
      if (d < best) {
        best = d;
        brute = j;
      }
    }
    if (retrieve(table, query).matched_index == brute) ++matches;
  }
  c.log << "    indexed vs exhaustive agreement: " << matches << "/500\n";
  c.expect(matches == 500, "indexed retrieval disagreed with the exhaustive scan");

  for (std::size_t j = 0; j < vocab.size(); j += 7) {
    const auto r = retrieve(table, vocab.trajectories[j]);
    c.expect(r.matched_index == j && r.distance == 0.0, "self-query did not return its own row");
  }

  std::vector<Trajectory> jittered;
  Rng jrng(5);
  for (std::size_t j = 0; j < 500; ++j)
    jittered.push_back(perturb_gaussian(vocab.trajectories[j % vocab.size()], 1e-6, jrng.next_u64()));
  const RetrievalErrorReport rep = retrieval_error_report(scene, table, jittered);
  for (const std::string name : {"nc", "dac", "ddc", "tlc"}) {
    for (std::size_t m = 0; m < rep.metric_names.size(); ++m) {
      if (rep.metric_names[m] == name)
        c.expect(rep.disagreement_rate[m] == 0.0, "penalty disagreement on jittered vocabulary queries");
    }
  }
  return c.ok;
}

// ---------------------------------------------------------------------------
// 5. Retrieval speedup
// ---------------------------------------------------------------------------
bool criterion_5(Check& c) {
  const Scene scene = generate_scene(ScenarioKind::lead_vehicle, 77);
  const AnchorVocabulary vocab = build_vocabulary({}, 1024);
  const RewardTable table = precompute_rewards(scene, vocab, 1);

  Rng rng(9);
  std::vector<Trajectory> queries;
  for (int q = 0; q < 1000; ++q) {
    const std::size_t j = rng.uniform_index(vocab.size());
    queries.push_back(perturb_gaussian(vocab.trajectories[j], rng.uniform(0.0, 0.5), rng.next_u64()));
  }
  const RetrievalBenchmark bench = bench_retrieval(scene, table, queries);
  c.log << "    retrieve " << bench.mean_retrieve_s * 1e6 << " us/query, oracle " << bench.mean_oracle_s * 1e6
        << " us/query, speedup " << bench.speedup << "x\n";
  c.expect(bench.speedup >= 10.0, "retrieval speedup below 10x");
  return c.ok;
}

// ---------------------------------------------------------------------------
// 6. Aggregation correctness
// ---------------------------------------------------------------------------
bool criterion_6(Check& c) {
  const MetricWeights weights;
  Rng rng(66);
  for (int iter = 0; iter < 10000; ++iter) {
    SubMetricScores s;
    for (std::size_t m = 0; m < SubMetricScores::kCount; ++m) s.set(m, rng.next_double());
    for (PdmsVersion ver : {PdmsVersion::v1, PdmsVersion::v2}) {
      const double base = aggregate_pdms(s, weights, ver);
      c.expect(base >= 0.0 && base <= 1.0, "aggregate outside [0,1]");
      const std::size_t m = rng.uniform_index(SubMetricScores::kCount);
      SubMetricScores up = s;
      up.set(m, std::min(1.0, s.get(m) + rng.next_double() * (1.0 - s.get(m))));
      c.expect(aggregate_pdms(up, weights, ver) >= base - 1e-12, "monotonicity violation");
    }
    if (!c.ok) return false;
  }

  SubMetricScores ones;
  for (const std::string pen : {"nc", "dac", "ddc", "tlc"}) {
    SubMetricScores s = ones;
    if (pen == "nc") s.nc = 0.0;
    if (pen == "dac") s.dac = 0.0;
    if (pen == "ddc") s.ddc = 0.0;
    if (pen == "tlc") s.tlc = 0.0;
    c.expect(aggregate_pdms(s, weights, PdmsVersion::v2) == 0.0, "zero penalty does not annihilate");
  }

  SubMetricScores hand;
  hand.ep = 0.8;
  c.expect(std::abs(aggregate_pdms(hand, weights, PdmsVersion::v1) - 11.0 / 12.0) < 1e-12,
           "hand-arithmetic v1 case off");

  Rng hrng(3);
  std::vector<SubMetricScores> steps(6);
  for (auto& s : steps)
    for (std::size_t m = 0; m < SubMetricScores::kCount; ++m) s.set(m, hrng.next_double());
  const double full = hd_score(steps, 1.0);
  for (double rc : {0.0, 0.25, 0.5, 0.75}) {
    c.expect(hd_score(steps, rc) == rc * full, "hd_score not exactly linear in route completion");
  }
  return c.ok;
}

// ---------------------------------------------------------------------------
// 7. Loss-stack gradient check
// ---------------------------------------------------------------------------
bool criterion_7(Check& c) {
  PolicyConfig cfg;
  cfg.anchor_count = 6;
  cfg.top_k = 2;
  cfg.hidden = 6;
  cfg.expansion = ExpansionConfig::grid(2);
  PolicyState state = PolicyState::random(cfg, 11);

  std::vector<Scene> scenes = {generate_scene(ScenarioKind::lead_vehicle, 3),
                               generate_scene(ScenarioKind::blocked_lane, 14)};
  std::vector<Trajectory> experts;
  for (const Scene& s : scenes) experts.push_back(expert_plan(s));
  const AnchorVocabulary vocab = build_vocabulary({}, 256);
  std::vector<RewardTable> tables;
  for (const Scene& s : scenes) tables.push_back(precompute_rewards(s, vocab));

  LossWeights w;
  MdpoConfig mdpo = MdpoConfig::defaults();

  // Capture the supervision targets once; finite differences evaluate the
  // loss at those fixed targets, matching the training semantics.
  std::vector<SceneTargets> targets(scenes.size());
  {
    std::vector<double> warm(state.params.size(), 0.0);
    for (std::size_t i = 0; i < scenes.size(); ++i)
      scene_loss_and_gradient(state, scenes[i], experts[i], tables[i], w, mdpo, 2 + i, derive_seed(99, i),
                              &warm, nullptr, &targets[i]);
  }

  auto batch_loss = [&](const PolicyState& probe, std::vector<double>* grad) {
    double total = 0.0;
    for (std::size_t i = 0; i < scenes.size(); ++i)
      total += scene_loss_and_gradient(probe, scenes[i], experts[i], tables[i], w, mdpo, 2 + i,
                                       derive_seed(99, i), grad, &targets[i])
                   .total;
    return total;
  };

  std::vector<double> grad(state.params.size(), 0.0);
  batch_loss(state, &grad);

  const double h = 1e-4;
  double worst_rel = 0.0;
  for (std::size_t i = 0; i < state.params.size(); ++i) {
    PolicyState plus = state, minus = state;
    plus.params[i] += h;
    minus.params[i] -= h;
    const double fd = (batch_loss(plus, nullptr) - batch_loss(minus, nullptr)) / (2.0 * h);
    const double scale = std::max({1.0, std::abs(fd), std::abs(grad[i])});
    const double rel = std::abs(grad[i] - fd) / scale;
    worst_rel = std::max(worst_rel, rel);
    if (rel >= 1e-5) {
      c.expect(false, "gradient component " + std::to_string(i) + " off by rel " + std::to_string(rel));
      return false;
    }
  }
  c.log << "    " << state.params.size() << " parameters checked, worst relative error " << worst_rel << "\n";
  return c.ok;
}

// ---------------------------------------------------------------------------
// 8. Directional ablation reproduction
// ---------------------------------------------------------------------------
bool criterion_8(Check& c) {
  const fs::path corpus = ensure_corpus(200, 42);
  const fs::path out = fs::temp_directory_path() / "trajkit_acceptance_ablate";
  fs::remove_all(out);

  nlohmann::json cfg;
  cfg["scenes"] = (corpus / "manifest.json").string();
  cfg["seeds"] = {1, 2, 3};
  const nlohmann::json summary = harness::cmd_ablate(cfg, out);

  auto cell = [&](const std::string& variant, std::size_t k) -> nlohmann::json {
    for (const auto& row : summary.at("cells"))
      if (row.at("variant") == variant && row.at("top_k") == k) return row;
    throw std::logic_error("cell missing");
  };
  const auto polar2 = cell("polar", 2);
  const auto xy2 = cell("xy", 2);
  const auto gauss2 = cell("gaussian", 2);
  const auto polar_full = cell("polar", 20);

  auto mean = [](const nlohmann::json& j) { return j.at("mean_epdms").get<double>(); };
  auto range = [](const nlohmann::json& j) { return j.at("range").get<double>(); };

  c.log << "    polar/2 " << mean(polar2) << " (range " << range(polar2) << "), xy/2 " << mean(xy2)
        << " (range " << range(xy2) << "), gaussian/2 " << mean(gauss2) << " (range " << range(gauss2)
        << "), polar/20 " << mean(polar_full) << " (range " << range(polar_full) << ")\n";
  c.log << "    ranking:";
  for (const auto& r : summary.at("ranking")) c.log << " " << r.get<std::string>();
  c.log << "\n";

  c.expect(mean(polar2) - mean(xy2) > std::max(range(polar2), range(xy2)),
           "polar > xy gap does not exceed the cross-seed range");
  c.expect(mean(xy2) - mean(gauss2) > std::max(range(xy2), range(gauss2)),
           "xy > gaussian gap does not exceed the cross-seed range");
  c.expect(mean(polar2) - mean(polar_full) > std::max(range(polar2), range(polar_full)),
           "top-k=2 > top-k=M1 gap does not exceed the cross-seed range");
  c.expect(summary.at("ranking")[0].get<std::string>() == "polar/k2", "polar/k2 does not rank first");
  return c.ok;
}

// ---------------------------------------------------------------------------
// 9. End-to-end sanity
// ---------------------------------------------------------------------------
bool criterion_9(Check& c) {
  const fs::path corpus_dir = ensure_corpus(200, 42);
  const harness::LoadedCorpus corpus = harness::load_corpus(corpus_dir / "manifest.json");
  const AnchorVocabulary vocab = harness::corpus_vocabulary(corpus, 1024);
  const auto tables = harness::precompute_corpus_tables(corpus, vocab, 0);

  PolicyConfig pc;
  const PolicyState untrained = PolicyState::random(pc, derive_seed(1, "init"));
  const harness::TrainedPolicy trained = harness::run_training(corpus, tables, pc, 60, 1e-2, true, 1, false);

  const double before = harness::heldout_mean_epdms(untrained, corpus, 2025);
  const double after = harness::heldout_mean_epdms(trained.state, corpus, 2025);
  c.log << "    heldout mean EPDMS: untrained " << before << ", trained " << after << "\n";
  c.expect(after > before, "training does not improve held-out EPDMS");

  // Blocking-agent closed-loop suite: trained policy vs straight-line stub.
  double hd_policy = 0.0, hd_stub = 0.0;
  const std::size_t suite = 20;
  for (std::uint64_t s = 0; s < suite; ++s) {
    const Scene scene = generate_scene(ScenarioKind::blocked_lane, 5000 + s);
    const RolloutResult rp =
        closed_loop_rollout(scene, harness::PolicyPlanner{&trained.state, derive_seed(77, s)}, 20);
    const RolloutResult rs = closed_loop_rollout(scene, StraightPlanner{}, 20);
    hd_policy += rp.step_scores.empty() ? 0.0 : hd_score(rp.step_scores, rp.route_completion);
    hd_stub += rs.step_scores.empty() ? 0.0 : hd_score(rs.step_scores, rs.route_completion);
  }
  hd_policy /= suite;
  hd_stub /= suite;
  c.log << "    closed-loop HD score: trained " << hd_policy << ", straight stub " << hd_stub << "\n";
  c.expect(hd_policy > hd_stub, "trained policy does not beat the straight-line stub in closed loop");
  return c.ok;
}

struct Criterion {
  int id;
  const char* name;
  double time_limit_s;
  std::function<bool(Check&)> fn;
};

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--criterion") == 0 && i + 1 < argc) only = std::atoi(argv[i + 1]);
  }

  const std::vector<Criterion> criteria = {
      {1, "geometry invariants (identity, similarity, round-trip)", 5.0, criterion_1},
      {2, "expansion-quality separation (noise vs structure)", 10.0, criterion_2},
      {3, "decoupled-objective correctness (gradients, invariances)", 5.0, criterion_3},
      {4, "retrieval fidelity (exact index, ties, jitter)", 30.0, criterion_4},
      {5, "retrieval speedup >= 10x over direct simulation", 120.0, criterion_5},
      {6, "aggregation correctness (monotone, annihilation, arithmetic)", 0.0, criterion_6},
      {7, "loss-stack gradient vs finite differences", 30.0, criterion_7},
      {8, "directional ablation ordering (polar > xy > gaussian, k2 > full)", 1800.0, criterion_8},
      {9, "end-to-end sanity (trained > untrained, policy > stub)", 600.0, criterion_9},
  };

  int failures = 0;
  for (const Criterion& cr : criteria) {
    if (only != 0 && cr.id != only) continue;
    Check check;
    const auto t0 = std::chrono::steady_clock::now();
    bool ok = false;
    try {
      ok = cr.fn(check);
    } catch (const std::exception& e) {
      check.ok = false;
      check.log << "    EXCEPTION: " << e.what() << "\n";
    }
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    bool within_time = cr.time_limit_s <= 0.0 || elapsed <= cr.time_limit_s;
    if (!within_time) check.log << "    runtime " << elapsed << "s exceeds limit " << cr.time_limit_s << "s\n";
    ok = ok && check.ok && within_time;
    std::cout << (ok ? "[PASS]" : "[FAIL]") << " criterion " << cr.id << ": " << cr.name << " ("
              << elapsed << "s)\n";
    std::cout << check.log.str();
    if (!ok) ++failures;
  }
  return failures;
}

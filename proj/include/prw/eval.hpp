#pragma once

#include <array>
#include <vector>

#include "prw/config.hpp"
#include "prw/curriculum.hpp"

namespace prw {

struct HeldOutConfig {
  std::size_t samples_per_task = 32;
};

struct HeldOutReport {
  std::array<double, kNumTasks> per_task{};
  double combined = 0.0;  // mean over tasks
};

// Deterministic held-out flow-matching loss per task. Routing runs in
// inference mode (no router noise). The evaluation set depends only on
// `eval_seed`, so two models evaluated with the same seed see identical data.
inline HeldOutReport evaluate_heldout(Model& m, std::uint64_t eval_seed, const HeldOutConfig& cfg = {},
                                      const DataProvider& data = {}) {
  const DataProvider provider = data ? data : synthetic_provider(m.layout);
  const bool noise_was = m.blocks.empty() ? false : m.blocks.front().router.noise_enabled;
  m.set_noise(false);
  HeldOutReport rep;
  Tape tape;
  for (std::size_t t = 0; t < kNumTasks; ++t) {
    double acc = 0.0;
    for (std::size_t i = 0; i < cfg.samples_per_task; ++i) {
      tape.clear();
      TaskSample s = provider(static_cast<TaskId>(t), stream_seed(eval_seed, "heldout", {t, i}));
      Rng noise = make_stream(eval_seed, "heldout-noise", {t, i});
      FlowSample f = make_flow_sample(s, m.layout, noise);
      acc += flow_matching_loss(tape, m, f, nullptr).loss.value().data[0];
    }
    rep.per_task[t] = acc / static_cast<double>(cfg.samples_per_task);
    rep.combined += rep.per_task[t] / static_cast<double>(kNumTasks);
  }
  m.set_noise(noise_was);
  return rep;
}

struct DualitySeedResult {
  std::uint64_t seed = 0;
  HeldOutReport staged, cotrain;
  bool staged_wins() const { return staged.combined <= cotrain.combined; }
};

struct DualityReport {
  std::vector<DualitySeedResult> seeds;
  std::size_t staged_wins() const {
    std::size_t n = 0;
    for (const auto& s : seeds) n += s.staged_wins() ? 1 : 0;
    return n;
  }
};

inline std::uint64_t study_seed(std::uint64_t base, std::size_t i) { return base + i; }
inline std::uint64_t heldout_seed(std::uint64_t run_seed) { return stream_seed(run_seed, "heldout"); }

// Trains a staged curriculum and the co-training baseline from the same
// initialization for each seed and compares held-out losses.
inline DualityReport run_duality_study(const RunConfig& cfg, std::size_t n_seeds,
                                       const std::function<void(const DualitySeedResult&)>& on_seed = {}) {
  DualityReport rep;
  const DataProvider data = synthetic_provider(cfg.layout);
  const HeldOutConfig hc{cfg.eval.heldout_samples_per_task};
  for (std::size_t i = 0; i < n_seeds; ++i) {
    RunConfig c = cfg;
    c.seed = study_seed(cfg.seed, i);
    TrainState staged = make_train_state(c.model_config(), c.layout, TrainMode::Staged);
    run_curriculum(staged, c.stages, data);
    TrainState co = make_train_state(c.model_config(), c.layout, TrainMode::CoTrain);
    run_cotrain(co, c.stages, data);
    DualitySeedResult r;
    r.seed = c.seed;
    r.staged = evaluate_heldout(staged.model, heldout_seed(c.seed), hc, data);
    r.cotrain = evaluate_heldout(co.model, heldout_seed(c.seed), hc, data);
    if (on_seed) on_seed(r);
    rep.seeds.push_back(r);
  }
  return rep;
}

struct SweepPoint {
  std::string axis;  // "alpha", "rho" or "rank"
  double value = 0.0;
  double loss = 0.0;  // held-out loss on the final stage's task
};

struct SweepReport {
  std::vector<SweepPoint> points;

  const SweepPoint& best(const std::string& axis) const {
    const SweepPoint* b = nullptr;
    for (const auto& p : points)
      if (p.axis == axis && (!b || p.loss < b->loss)) b = &p;
    if (!b) throw Error("sweep: no points on axis " + axis);
    return *b;
  }
};

struct SweepGrid {
  std::vector<double> alpha{0.0, 0.1, 0.5, 1.0};
  std::vector<double> rho{0.6, 0.7, 0.8, 0.9, 1.0};
  std::vector<std::size_t> rank{2, 4, 8, 16};
};

// One-factor-at-a-time sweep over the final stage: stages 0..T-2 are trained
// once, then the last stage is retrained from that prefix for every setting
// while the other two factors keep their configured values.
inline SweepReport run_final_stage_sweep(const RunConfig& cfg, const SweepGrid& grid = {},
                                         const std::function<void(const SweepPoint&)>& on_point = {}) {
  if (cfg.stages.size() < 2) throw ValidationError("sweep: needs at least two stages");
  const DataProvider data = synthetic_provider(cfg.layout);
  std::vector<StageConfig> prefix(cfg.stages.begin(), cfg.stages.end() - 1);
  TrainState base = make_train_state(cfg.model_config(), cfg.layout, TrainMode::Staged);
  run_curriculum(base, prefix, data);
  const StageConfig last = cfg.stages.back();
  const std::uint64_t eval_seed = heldout_seed(cfg.seed);
  auto run_one = [&](const std::string& axis, double value, StageConfig sc) {
    TrainState st = base;
    grow_expert_pool(st, sc);
    train_stage(st, sc, data);
    st.model.set_noise(false);
    double acc = 0.0;
    const std::size_t n = cfg.eval.heldout_samples_per_task;
    Tape tape;
    for (std::size_t i = 0; i < n; ++i) {
      tape.clear();
      const auto t = static_cast<std::size_t>(sc.task);
      TaskSample s = data(sc.task, stream_seed(eval_seed, "heldout", {t, i}));
      Rng noise = make_stream(eval_seed, "heldout-noise", {t, i});
      acc += flow_matching_loss(tape, st.model, make_flow_sample(s, cfg.layout, noise), nullptr).loss.value().data[0];
    }
    SweepPoint p{axis, value, acc / static_cast<double>(n)};
    if (on_point) on_point(p);
    return p;
  };
  SweepReport rep;
  for (double a : grid.alpha) {
    StageConfig sc = last;
    sc.alpha = a;
    rep.points.push_back(run_one("alpha", a, sc));
  }
  for (double r : grid.rho) {
    StageConfig sc = last;
    sc.rho = r;
    rep.points.push_back(run_one("rho", r, sc));
  }
  for (std::size_t k : grid.rank) {
    if (k > cfg.d_model) continue;
    StageConfig sc = last;
    sc.lora_rank = k;
    sc.lora_alpha = 2.0 * static_cast<double>(k);
    rep.points.push_back(run_one("rank", static_cast<double>(k), sc));
  }
  return rep;
}

struct RouteStats {
  std::size_t pool_size = 0;
  double u_hard = 0.0;  // share of decisions on expert N-1
  double u_soft = 0.0;
  std::vector<std::vector<double>> per_block_histogram;  // [block][expert]
  std::vector<double> overall_histogram;
  std::vector<std::size_t> underused;  // experts below 1% utilization
};

// Inference-mode routing statistics over `samples` (router noise disabled).
inline RouteStats route_stats(Model& m, const std::vector<TaskSample>& samples, std::uint64_t seed) {
  if (samples.empty()) throw ValidationError("route-stats: no samples");
  if (m.pool_size() == 0) throw ValidationError("route-stats: model has no experts");
  const bool noise_was = m.blocks.front().router.noise_enabled;
  m.set_noise(false);
  RoutingTrace all;
  Tape tape;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    tape.clear();
    Rng noise = make_stream(seed, "noise", {i});
    FlowSample f = make_flow_sample(samples[i], m.layout, noise);
    RoutingTrace t = forward(tape, m, f.input, nullptr).trace;
    for (auto& b : t.per_block) b.prob_vars.clear();
    append_trace(all, t);
  }
  m.set_noise(noise_was);
  all.stage_expert = m.pool_size() - 1;
  RouteStats rs;
  rs.pool_size = m.pool_size();
  rs.u_hard = usage_ratio(all);
  rs.u_soft = soft_usage_value(all);
  rs.overall_histogram = expert_histogram(all, rs.pool_size);
  for (const auto& b : all.per_block) {
    RoutingTrace one;
    one.per_block.push_back(b);
    rs.per_block_histogram.push_back(expert_histogram(one, rs.pool_size));
  }
  for (std::size_t k = 0; k < rs.pool_size; ++k)
    if (rs.overall_histogram[k] < 0.01) rs.underused.push_back(k);
  return rs;
}

}  // namespace prw

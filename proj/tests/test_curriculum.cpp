#include <gtest/gtest.h>

#include <map>

#include "prw/checkpoint.hpp"
#include "prw/curriculum.hpp"
#include "prw/hash.hpp"
#include "prw/metrics.hpp"
#include "test_util.hpp"

namespace prw {
namespace {

TokenLayout small_layout() { return TokenLayout{}; }

TrainState fresh_state(std::uint64_t seed, TrainMode mode = TrainMode::Staged) {
  TokenLayout l = small_layout();
  return make_train_state(Model::derive_config(l, 16, 2, 2, seed), l, mode);
}

std::vector<StageConfig> short_stages(std::size_t iterations) {
  auto s = default_stage_configs();
  for (auto& c : s) {
    c.iterations = iterations;
    c.learning_rate = 1e-3;
    c.batch_size = 2;
  }
  return s;
}

std::vector<FlowSample> random_inputs(std::size_t n, std::uint64_t seed, const TokenLayout& layout) {
  std::vector<FlowSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    Rng r = make_stream(seed, "data", {i});
    const auto task = static_cast<TaskId>(i % kNumTasks);
    out.push_back(make_flow_sample(gen_stage_sample(task, r, layout.task_layout()), layout, r));
  }
  return out;
}

Tensor predict(Model& m, const FlowSample& f) {
  m.set_noise(false);
  Tape tape;
  return forward(tape, m, f.input, nullptr).velocity.value();
}

std::map<std::string, std::string> hashes(Model& m, bool frozen_only) {
  std::map<std::string, std::string> out;
  for (auto& p : m.named_params())
    if (!frozen_only || !p.tensor->requires_grad) out[p.name] = sha256_hex(f64_le_bytes(p.tensor->data));
  return out;
}

bool same_record(const MetricsRecord& a, const MetricsRecord& b) {
  return a.step == b.step && a.stage == b.stage && a.l_task == b.l_task && a.l_veteran == b.l_veteran &&
         a.u_hard == b.u_hard && a.u_soft == b.u_soft && a.expert_histogram == b.expert_histogram;
}

TEST(Growth, PoolSizeAndTrainability) {
  TrainState st = fresh_state(1);
  auto stages = short_stages(3);
  grow_expert_pool(st, stages[0]);
  EXPECT_EQ(st.model.pool_size(), 1u);
  train_stage(st, stages[0], synthetic_provider(st.model.layout));
  grow_expert_pool(st, stages[1]);
  EXPECT_EQ(st.model.pool_size(), 2u);
  for (auto& b : st.model.blocks) {
    EXPECT_FALSE(b.pool.trainable[0]);
    EXPECT_TRUE(b.pool.trainable[1]);
    EXPECT_EQ(b.router.w_r.cols(), 2u);
    EXPECT_EQ(b.router.w_n.cols(), 2u);
  }
  for (auto& p : st.model.named_params()) {
    if (p.group == ParamGroup::Base) {
      EXPECT_FALSE(p.tensor->requires_grad) << p.name;
    } else if (p.group == ParamGroup::Router) {
      EXPECT_TRUE(p.tensor->requires_grad) << p.name;
    } else {
      EXPECT_EQ(p.tensor->requires_grad, p.expert == 1) << p.name;
    }
  }
}

TEST(Growth, WrongStageIndexIsAnError) {
  TrainState st = fresh_state(2);
  auto stages = short_stages(1);
  EXPECT_THROW(grow_expert_pool(st, stages[1]), StageOrderError);
  grow_expert_pool(st, stages[0]);
  EXPECT_THROW(grow_expert_pool(st, stages[0]), StageOrderError);
  EXPECT_THROW(train_stage(st, stages[1], synthetic_provider(st.model.layout)), StageOrderError);
  std::vector<StageConfig> skipped{stages[0], stages[2]};
  EXPECT_THROW(validate_stage_order(skipped), StageOrderError);
}

TEST(Growth, ForwardBeforeFirstGrowthIsAnError) {
  TrainState st = fresh_state(2);
  FlowSample f = random_inputs(1, 2, st.model.layout)[0];
  EXPECT_THROW(predict(st.model, f), Error);
}

TEST(Growth, OutputPreservedWhileExpertsUntrained) {
  TrainState st = fresh_state(3);
  auto stages = short_stages(1);
  auto inputs = random_inputs(100, 33, st.model.layout);
  grow_expert_pool(st, stages[0]);
  for (std::size_t t = 1; t < 5; ++t) {
    std::vector<Tensor> before;
    for (const auto& f : inputs) before.push_back(predict(st.model, f));
    grow_expert_pool(st, stages[t]);
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i)
      worst = std::max(worst, testing::max_abs_diff(before[i], predict(st.model, inputs[i])));
    EXPECT_LT(worst, 1e-12) << "growth to " << t + 1 << " experts";
  }
}

// A trained veteran's residual is scaled by its softmax weight, and the new
// zero router column takes softmax mass. Removing the veteran residuals
// removes the drift, so the new expert itself contributes nothing.
TEST(Growth, TrainedVeteransDriftOnlyThroughGateMass) {
  TrainState st = fresh_state(3);
  auto stages = short_stages(20);
  grow_expert_pool(st, stages[0]);
  train_stage(st, stages[0], synthetic_provider(st.model.layout));
  auto inputs = random_inputs(100, 34, st.model.layout);
  Model pre = st.model;
  grow_expert_pool(st, stages[1]);
  double drift = 0.0;
  for (const auto& f : inputs) drift = std::max(drift, testing::max_abs_diff(predict(pre, f), predict(st.model, f)));
  EXPECT_GT(drift, 1e-6);
  for (Model* m : {&pre, &st.model})
    for (auto& b : m->blocks) {
      b.pool.experts[0].b_k = Tensor(b.pool.experts[0].b_k.shape);
      b.pool.experts[0].b_v = Tensor(b.pool.experts[0].b_v.shape);
    }
  double worst = 0.0;
  for (const auto& f : inputs) worst = std::max(worst, testing::max_abs_diff(predict(pre, f), predict(st.model, f)));
  EXPECT_LT(worst, 1e-12);
}

TEST(Freezing, FrozenArraysHashIdenticalAfterStage) {
  TrainState st = fresh_state(4);
  auto stages = short_stages(30);
  stages[1].iterations = 100;
  const DataProvider data = synthetic_provider(st.model.layout);
  grow_expert_pool(st, stages[0]);
  train_stage(st, stages[0], data);
  grow_expert_pool(st, stages[1]);
  auto frozen = hashes(st.model, true);
  auto all = hashes(st.model, false);
  ASSERT_GT(frozen.size(), 0u);
  train_stage(st, stages[1], data);
  apply_trainability(st.model, 1, TrainMode::Staged);
  auto after = hashes(st.model, false);
  for (const auto& [name, h] : frozen) EXPECT_EQ(after.at(name), h) << name;
  std::size_t changed = 0;
  for (const auto& [name, h] : all) changed += after.at(name) != h;
  EXPECT_GT(changed, 0u);
  for (const auto& [name, h] : all) {
    if (name.find("expert1") != std::string::npos && name.find(".b_") != std::string::npos) {
      EXPECT_NE(after.at(name), h) << name;
    }
  }
}

TEST(FlowLoss, ForcedOutputGivesZero) {
  TrainState st = fresh_state(5);
  grow_expert_pool(st, short_stages(1)[0]);
  FlowSample f = random_inputs(1, 5, st.model.layout)[0];
  f.velocity = predict(st.model, f);
  Tape tape;
  EXPECT_EQ(flow_matching_loss(tape, st.model, f, nullptr).loss.value().data[0], 0.0);
}

TEST(FlowLoss, ZeroOutputGivesMeanSquare) {
  TrainState st = fresh_state(6);
  grow_expert_pool(st, short_stages(1)[0]);
  st.model.head = Tensor(st.model.head.shape);
  st.model.head_bias = Tensor(st.model.head_bias.shape);
  st.model.set_noise(false);
  FlowSample f = random_inputs(1, 6, st.model.layout)[0];
  double ms = 0.0;
  for (double v : f.velocity.data) ms += v * v;
  ms /= static_cast<double>(f.velocity.size());
  Tape tape;
  EXPECT_NEAR(flow_matching_loss(tape, st.model, f, nullptr).loss.value().data[0], ms, 1e-14);
}

TEST(FlowLoss, MatchesLoopMse) {
  TrainState st = fresh_state(7);
  grow_expert_pool(st, short_stages(1)[0]);
  for (const auto& f : random_inputs(5, 7, st.model.layout)) {
    Tensor pred = predict(st.model, f);
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred.data[i] - f.velocity.data[i]) * (pred.data[i] - f.velocity.data[i]);
    Tape tape;
    EXPECT_NEAR(flow_matching_loss(tape, st.model, f, nullptr).loss.value().data[0], acc / static_cast<double>(pred.size()),
                1e-14);
  }
}

TEST(FlowLoss, ShapeMismatchIsAnError) {
  TrainState st = fresh_state(8);
  grow_expert_pool(st, short_stages(1)[0]);
  FlowSample f = random_inputs(1, 8, st.model.layout)[0];
  f.velocity = Tensor({3, 3});
  Tape tape;
  EXPECT_THROW(flow_matching_loss(tape, st.model, f, nullptr), ShapeError);
}

TEST(TrainStage, StageZeroHasNoVeteranLoss) {
  TrainState st = fresh_state(9);
  auto stages = short_stages(40);
  std::vector<MetricsRecord> recs;
  TrainHooks hooks;
  hooks.on_metrics = [&](const MetricsRecord& r) { recs.push_back(r); };
  grow_expert_pool(st, stages[0]);
  train_stage(st, stages[0], synthetic_provider(st.model.layout), hooks);
  ASSERT_EQ(recs.size(), 40u);
  for (const auto& r : recs) {
    EXPECT_EQ(r.l_veteran, 0.0);
    EXPECT_EQ(r.u_hard, 1.0);
    EXPECT_TRUE(std::isfinite(r.l_task));
  }
  EXPECT_EQ(stages[1].rho, 0.8);
  EXPECT_EQ(stages[1].alpha, 0.5);
}

TEST(TrainStage, MetricsCarryHistogramOverPool) {
  TrainState st = fresh_state(10);
  auto stages = short_stages(5);
  std::vector<MetricsRecord> recs;
  TrainHooks hooks;
  hooks.on_metrics = [&](const MetricsRecord& r) { recs.push_back(r); };
  run_curriculum(st, {stages[0], stages[1], stages[2]}, synthetic_provider(st.model.layout), hooks);
  ASSERT_EQ(recs.size(), 15u);
  for (const auto& r : recs) {
    EXPECT_EQ(r.expert_histogram.size(), r.stage + 1);
    double s = 0.0;
    for (double h : r.expert_histogram) s += h;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_EQ(recs.back().step, 15u);
}

TEST(Curriculum, FullRunHasFiveExpertsAndHistory) {
  TrainState st = fresh_state(11);
  run_curriculum(st, short_stages(4), synthetic_provider(st.model.layout));
  EXPECT_EQ(st.model.pool_size(), 5u);
  EXPECT_EQ(st.completed.size(), 5u);
  EXPECT_EQ(st.global_step, 20u);
}

TEST(Curriculum, ResumeFromStageTwoReproducesStageThreeMetrics) {
  const auto dir = testing::scratch_dir("resume");
  auto stages = short_stages(25);
  std::vector<MetricsRecord> first, second;
  {
    TrainState st = fresh_state(12);
    TrainHooks hooks;
    hooks.on_metrics = [&](const MetricsRecord& r) {
      if (r.stage == 3) first.push_back(r);
    };
    hooks.on_stage_end = [&](const TrainState& s) {
      if (s.completed.back().stage_index == 2) save_checkpoint(s, dir / "stage_2");
    };
    run_curriculum(st, stages, synthetic_provider(st.model.layout), hooks);
  }
  TrainState resumed = load_checkpoint(dir / "stage_2");
  ASSERT_EQ(resumed.completed.size(), 3u);
  TrainHooks hooks;
  hooks.on_metrics = [&](const MetricsRecord& r) {
    if (r.stage == 3) second.push_back(r);
  };
  run_curriculum(resumed, stages, synthetic_provider(resumed.model.layout), hooks);
  ASSERT_EQ(first.size(), 25u);
  ASSERT_EQ(second.size(), first.size());
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_TRUE(same_record(first[i], second[i])) << "step " << i;
  std::filesystem::remove_all(dir);
}

TEST(Curriculum, MidStageResumeMatchesUninterrupted) {
  const auto dir = testing::scratch_dir("midstage");
  auto stages = short_stages(12);
  std::vector<MetricsRecord> full, resumed_recs;
  TrainState a = fresh_state(13);
  TrainHooks ha;
  ha.on_metrics = [&](const MetricsRecord& r) { full.push_back(r); };
  ha.checkpoint_every = 5;
  ha.on_mid_checkpoint = [&](const TrainState& s) {
    if (s.active->stage_index == 1 && s.step == 5) save_checkpoint(s, dir / "mid");
  };
  run_curriculum(a, {stages[0], stages[1]}, synthetic_provider(a.model.layout), ha);
  TrainState b = load_checkpoint(dir / "mid");
  TrainHooks hb;
  hb.on_metrics = [&](const MetricsRecord& r) { resumed_recs.push_back(r); };
  run_curriculum(b, {stages[0], stages[1]}, synthetic_provider(b.model.layout), hb);
  ASSERT_EQ(resumed_recs.size(), 7u);
  for (std::size_t i = 0; i < resumed_recs.size(); ++i) EXPECT_TRUE(same_record(full[full.size() - 7 + i], resumed_recs[i]));
  auto ha_hash = hashes(a.model, false), hb_hash = hashes(b.model, false);
  EXPECT_EQ(ha_hash, hb_hash);
  std::filesystem::remove_all(dir);
}

TEST(Cotrain, SameStepBudgetSingleExpertAllTrainable) {
  auto stages = short_stages(6);
  TrainState st = fresh_state(14, TrainMode::CoTrain);
  std::vector<MetricsRecord> recs;
  TrainHooks hooks;
  hooks.on_metrics = [&](const MetricsRecord& r) { recs.push_back(r); };
  run_cotrain(st, stages, synthetic_provider(st.model.layout), hooks);
  EXPECT_EQ(st.global_step, 30u);
  EXPECT_EQ(recs.size(), 30u);
  EXPECT_EQ(st.model.pool_size(), 1u);
  for (auto& p : st.model.named_params()) EXPECT_TRUE(p.tensor->requires_grad) << p.name;
  for (const auto& r : recs) EXPECT_EQ(r.l_veteran, 0.0);
}

TEST(Cotrain, TaskMixFollowsSampleBudget) {
  auto stages = default_stage_configs();
  std::array<std::size_t, kNumTasks> counts{};
  const std::size_t n = 20000;
  for (std::size_t s = 0; s < n; ++s) ++counts[static_cast<std::size_t>(detail::cotrain_task(stages, 3, s, 0))];
  double total = 0.0;
  for (const auto& c : stages) total += static_cast<double>(c.iterations * c.batch_size);
  for (const auto& c : stages) {
    const double expect = static_cast<double>(c.iterations * c.batch_size) / total;
    EXPECT_NEAR(counts[static_cast<std::size_t>(c.task)] / static_cast<double>(n), expect, 0.015);
  }
}

TEST(Curriculum, SameSeedSameParameters) {
  auto stages = short_stages(6);
  TrainState a = fresh_state(15), b = fresh_state(15);
  run_curriculum(a, stages, synthetic_provider(a.model.layout));
  run_curriculum(b, stages, synthetic_provider(b.model.layout));
  EXPECT_EQ(hashes(a.model, false), hashes(b.model, false));
}

}  // namespace
}  // namespace prw

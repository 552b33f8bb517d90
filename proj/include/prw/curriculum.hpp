#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "prw/model.hpp"
#include "prw/routing_supervision.hpp"
#include "prw/synth.hpp"

namespace prw {

class StageOrderError : public Error {
 public:
  using Error::Error;
};

struct StageConfig {
  std::size_t stage_index = 0;
  TaskId task = TaskId::MaskInpainting;
  double rho = 1.0;
  double alpha = 0.0;
  double learning_rate = 1e-4;
  std::size_t iterations = 3000;
  std::size_t batch_size = 4;
  std::size_t lora_rank = 4;
  double lora_alpha = 8.0;

  SupervisionConfig supervision() const { return {rho, alpha}; }
  bool operator==(const StageConfig&) const = default;
};

// The five-step recipe in task order; stage 0 is unsupervised (rho 1, alpha 0),
// every later stage targets rho 0.8 with alpha 0.5. Iteration counts keep the
// 4:4:8:1:4 proportions of the full-scale schedule.
inline std::vector<StageConfig> default_stage_configs(double iteration_scale = 1.0, std::size_t lora_rank = 4) {
  const std::size_t base_iters[kNumTasks] = {2000, 2000, 4000, 500, 2000};
  std::vector<StageConfig> out;
  for (std::size_t t = 0; t < kNumTasks; ++t) {
    StageConfig c;
    c.stage_index = t;
    c.task = static_cast<TaskId>(t);
    c.rho = t == 0 ? 1.0 : 0.8;
    c.alpha = t == 0 ? 0.0 : 0.5;
    c.iterations = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(base_iters[t] * iteration_scale)));
    c.lora_rank = lora_rank;
    c.lora_alpha = 2.0 * static_cast<double>(lora_rank);
    out.push_back(c);
  }
  return out;
}

enum class TrainMode { Staged, CoTrain };

struct AdamMoments {
  std::vector<double> m, v;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainState {
  Model model;
  std::map<std::string, AdamMoments> moments;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::Staged;
  std::vector<StageConfig> completed;
  std::optional<StageConfig> active;
  std::size_t step = 0;         // optimizer steps taken in the active stage
  std::size_t global_step = 0;  // optimizer steps across all stages
};

inline TrainState make_train_state(const ModelConfig& cfg, const TokenLayout& layout, TrainMode mode = TrainMode::Staged) {
  TrainState s;
  s.model = Model::create(cfg, layout);
  s.seed = cfg.seed;
  s.mode = mode;
  return s;
}

// Stage 0 trains the base weights with expert 0; later stages freeze the base
// and train only the router and the newest expert. Co-training trains all.
inline void apply_trainability(Model& m, std::size_t stage_index, TrainMode mode) {
  const bool base_on = mode == TrainMode::CoTrain || stage_index == 0;
  for (auto& p : m.named_params())
    if (p.group == ParamGroup::Base) p.tensor->requires_grad = base_on;
  for (auto& b : m.blocks) {
    b.router.set_trainable(true);
    if (mode == TrainMode::CoTrain) {
      for (std::size_t k = 0; k < b.pool.size(); ++k) b.pool.set_trainable(k, true);
    } else {
      b.pool.train_only_last();
    }
  }
}

// Appends one zero-up-projection expert (and a zero router column) to every block.
inline void grow_expert_pool(TrainState& state, const StageConfig& cfg) {
  auto& m = state.model;
  if (m.pool_size() != cfg.stage_index) {
    throw StageOrderError("grow_expert_pool: pool holds " + std::to_string(m.pool_size()) +
                          " experts but stage index is " + std::to_string(cfg.stage_index));
  }
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    Rng rng = make_stream(state.seed, "init", {1000 + cfg.stage_index, b});
    m.blocks[b].pool.append(LowRankExpert::create(m.config.d_model, cfg.lora_rank, cfg.lora_alpha, rng));
    m.blocks[b].router.add_expert_column();
  }
  apply_trainability(m, cfg.stage_index, state.mode);
}

struct FlowSample {
  Tensor z1;  // clean target tokens
  Tensor z0;  // standard-normal noise tokens
  double u = 0.5;
  Tensor x_u;       // (1 - u) z0 + u z1
  Tensor velocity;  // z1 - z0
  ModelInput input;
};

inline FlowSample make_flow_sample(const TaskSample& s, const TokenLayout& layout, Rng& rng) {
  FlowSample f;
  f.z1 = patchify(to_signed(s.target), layout.patch);
  f.z0 = Tensor(f.z1.shape);
  for (auto& v : f.z0.data) v = standard_normal(rng);
  do {
    f.u = uniform01(rng);
  } while (f.u <= 0.0);
  f.x_u = Tensor(f.z1.shape);
  f.velocity = Tensor(f.z1.shape);
  for (std::size_t i = 0; i < f.z1.size(); ++i) {
    f.x_u.data[i] = (1.0 - f.u) * f.z0.data[i] + f.u * f.z1.data[i];
    f.velocity.data[i] = f.z1.data[i] - f.z0.data[i];
  }
  f.input = encode_conditions(s, layout);
  f.input.x_tokens = f.x_u;
  f.input.time = f.u;
  return f;
}

struct FlowLoss {
  Var loss;
  RoutingTrace trace;
};

// Velocity MSE between the model prediction and z1 - z0.
inline FlowLoss flow_matching_loss(Tape& tape, Model& m, const FlowSample& sample, Rng* noise_rng,
                                   const RoutingTrace* replay = nullptr) {
  if (sample.velocity.shape != Shape{m.layout.patches(), m.layout.x_features()}) {
    throw ShapeError("flow_matching_loss: target velocity " + shape_str(sample.velocity.shape) +
                     " does not match the token layout");
  }
  ModelForward fw = forward(tape, m, sample.input, noise_rng, replay);
  return {ad::mse(fw.velocity, tape.constant(sample.velocity)), std::move(fw.trace)};
}

struct MetricsRecord {
  std::size_t step = 0;
  std::size_t stage = 0;
  double l_task = 0.0;
  double l_veteran = 0.0;
  double u_hard = 0.0;
  double u_soft = 0.0;
  std::vector<double> expert_histogram;
  double wall_ms = 0.0;
};

using DataProvider = std::function<TaskSample(TaskId, std::uint64_t sample_seed)>;

inline DataProvider synthetic_provider(const TokenLayout& layout) {
  return [task_layout = layout.task_layout()](TaskId task, std::uint64_t seed) {
    Rng rng(seed);
    return gen_stage_sample(task, rng, task_layout);
  };
}

struct TrainHooks {
  std::function<void(const MetricsRecord&)> on_metrics;
  // Called after mid-stage step counts divisible by checkpoint_every (0 = never).
  std::function<void(const TrainState&)> on_mid_checkpoint;
  std::size_t checkpoint_every = 0;
  std::function<void(const TrainState&)> on_stage_end;
};

namespace detail {

inline void adam_update(TrainState& state, double lr, const AdamConfig& adam = {}) {
  const double t = static_cast<double>(state.step + 1);
  const double c1 = 1.0 - std::pow(adam.beta1, t);
  const double c2 = 1.0 - std::pow(adam.beta2, t);
  for (auto& p : state.model.named_params()) {
    Tensor& w = *p.tensor;
    if (!w.requires_grad || !w.grad) continue;
    auto& mo = state.moments[p.name];
    if (mo.m.size() != w.size()) {
      mo.m.assign(w.size(), 0.0);
      mo.v.assign(w.size(), 0.0);
    }
    const auto& g = *w.grad;
    for (std::size_t i = 0; i < w.size(); ++i) {
      mo.m[i] = adam.beta1 * mo.m[i] + (1.0 - adam.beta1) * g[i];
      mo.v[i] = adam.beta2 * mo.v[i] + (1.0 - adam.beta2) * g[i] * g[i];
      const double mh = mo.m[i] / c1, vh = mo.v[i] / c2;
      w.data[i] -= lr * mh / (std::sqrt(vh) + adam.eps);
    }
    w.grad.reset();
  }
}

// Task of sample `index` at `step` when co-training: mixture weighted by each
// stage's sample budget.
inline TaskId cotrain_task(const std::vector<StageConfig>& stages, std::uint64_t seed, std::size_t step,
                           std::size_t index) {
  double total = 0.0;
  for (const auto& s : stages) total += static_cast<double>(s.iterations * s.batch_size);
  Rng rng = make_stream(seed, "order", {step, index});
  double u = uniform01(rng) * total;
  for (const auto& s : stages) {
    u -= static_cast<double>(s.iterations * s.batch_size);
    if (u < 0.0) return s.task;
  }
  return stages.back().task;
}

}  // namespace detail

struct StepResult {
  double l_task = 0.0;
  double l_veteran = 0.0;
  RoutingTrace trace;
};

// One optimizer step on a batch. `tasks[i]` is the task of batch element i.
inline StepResult train_step(TrainState& state, const StageConfig& cfg, const std::vector<TaskId>& tasks,
                             const DataProvider& data, std::size_t stream_stage) {
  auto& m = state.model;
  m.set_noise(true);
  Tape tape;
  std::vector<Var> losses;
  RoutingTrace trace;
  for (std::size_t b = 0; b < tasks.size(); ++b) {
    TaskSample s = data(tasks[b], stream_seed(state.seed, "data", {stream_stage, state.step, b}));
    Rng noise = make_stream(state.seed, "noise", {stream_stage, state.step, b});
    FlowSample f = make_flow_sample(s, m.layout, noise);
    FlowLoss fl = flow_matching_loss(tape, m, f, &noise);
    losses.push_back(fl.loss);
    append_trace(trace, fl.trace);
  }
  Var task_loss = ad::mean(ad::concat_rows(losses));
  Var vet = veteran_loss(soft_usage(trace), cfg.supervision());
  Var total = total_loss(task_loss, vet);
  StepResult r{task_loss.value().data[0], vet.value().data[0], std::move(trace)};
  if (!std::isfinite(r.l_task) || !std::isfinite(r.l_veteran)) {
    throw NonFiniteError("stage " + std::to_string(cfg.stage_index) + " step " + std::to_string(state.step) +
                         ": non-finite loss (L_task " + std::to_string(r.l_task) + ", L_veteran " +
                         std::to_string(r.l_veteran) + ")");
  }
  tape.backward(total);
  detail::adam_update(state, cfg.learning_rate);
  return r;
}

inline MetricsRecord make_metrics(const TrainState& state, std::size_t stage, const StepResult& r, double wall_ms) {
  MetricsRecord rec;
  rec.step = state.global_step;
  rec.stage = stage;
  rec.l_task = r.l_task;
  rec.l_veteran = r.l_veteran;
  rec.u_hard = usage_ratio(r.trace);
  rec.u_soft = soft_usage_value(r.trace);
  rec.expert_histogram = expert_histogram(r.trace, state.model.pool_size());
  rec.wall_ms = wall_ms;
  return rec;
}

// Runs the remaining optimizer steps of `cfg` (from state.step). Frozen
// parameters are never written.
inline void train_stage(TrainState& state, const StageConfig& cfg, const DataProvider& data, const TrainHooks& hooks = {}) {
  if (state.model.pool_size() != cfg.stage_index + 1) {
    throw StageOrderError("train_stage: expected " + std::to_string(cfg.stage_index + 1) + " experts, pool holds " +
                          std::to_string(state.model.pool_size()));
  }
  cfg.supervision().validate();
  if (!state.active || !(*state.active == cfg)) {
    state.active = cfg;
    state.step = 0;
    state.moments.clear();
  }
  apply_trainability(state.model, cfg.stage_index, state.mode);
  state.model.zero_grad();
  const std::vector<TaskId> tasks(cfg.batch_size, cfg.task);
  while (state.step < cfg.iterations) {
    const auto t0 = std::chrono::steady_clock::now();
    StepResult r;
    try {
      r = train_step(state, cfg, tasks, data, cfg.stage_index);
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("stage " + std::to_string(cfg.stage_index) + " step " + std::to_string(state.step) + ": " +
                           e.what());
    }
    ++state.step;
    ++state.global_step;
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (hooks.on_metrics) hooks.on_metrics(make_metrics(state, cfg.stage_index, r, ms));
    if (hooks.checkpoint_every && hooks.on_mid_checkpoint && state.step % hooks.checkpoint_every == 0 &&
        state.step < cfg.iterations) {
      hooks.on_mid_checkpoint(state);
    }
  }
  state.completed.push_back(cfg);
  state.active.reset();
  state.step = 0;
  state.moments.clear();
  if (hooks.on_stage_end) hooks.on_stage_end(state);
}

struct RouterOnlyResult {
  std::vector<double> soft_usage;  // per step, with router noise
  double final_soft_usage = 0.0;   // noise-free, on the same inputs
  double final_usage_ratio = 0.0;
};

// Trains only the routers of a model whose pool already holds the stage
// expert, minimizing alpha * |soft_usage - rho| on a fixed set of inputs.
// Every other parameter is frozen.
inline RouterOnlyResult train_router_only(TrainState& state, const SupervisionConfig& sup,
                                          const std::vector<FlowSample>& inputs, std::size_t steps, double lr) {
  if (inputs.empty()) throw Error("train_router_only: no inputs");
  auto& m = state.model;
  for (auto& p : m.named_params()) p.tensor->requires_grad = p.group == ParamGroup::Router;
  m.zero_grad();
  state.moments.clear();
  state.step = 0;
  RouterOnlyResult out;
  auto batch_trace = [&](Tape& tape, Rng* noise) {
    RoutingTrace trace;
    for (const auto& f : inputs) append_trace(trace, forward(tape, m, f.input, noise).trace);
    return trace;
  };
  for (std::size_t s = 0; s < steps; ++s) {
    m.set_noise(true);
    Rng noise = make_stream(state.seed, "noise", {7000, s});
    Tape tape;
    RoutingTrace trace = batch_trace(tape, &noise);
    Var u = soft_usage(trace);
    out.soft_usage.push_back(u.value().data[0]);
    tape.backward(veteran_loss(u, sup));
    detail::adam_update(state, lr);
    ++state.step;
  }
  m.set_noise(false);
  Tape tape;
  RoutingTrace trace = batch_trace(tape, nullptr);
  out.final_soft_usage = soft_usage_value(trace);
  out.final_usage_ratio = usage_ratio(trace);
  state.step = 0;
  state.moments.clear();
  return out;
}

inline void validate_stage_order(const std::vector<StageConfig>& configs) {
  for (std::size_t i = 0; i < configs.size(); ++i)
    if (configs[i].stage_index != i) {
      throw StageOrderError("stage configs must be ordered by stage_index starting at 0 (entry " + std::to_string(i) +
                            " has index " + std::to_string(configs[i].stage_index) + ")");
    }
}

// Grows the pool and trains each stage in order, resuming where `state` left
// off (completed stages are skipped; an active stage continues at state.step).
inline void run_curriculum(TrainState& state, const std::vector<StageConfig>& configs, const DataProvider& data,
                           const TrainHooks& hooks = {}) {
  validate_stage_order(configs);
  if (state.mode != TrainMode::Staged) throw Error("run_curriculum: state is in co-training mode");
  for (std::size_t i = state.completed.size(); i < configs.size(); ++i) {
    const auto& cfg = configs[i];
    if (state.model.pool_size() == cfg.stage_index) grow_expert_pool(state, cfg);
    train_stage(state, cfg, data, hooks);
  }
}

inline std::size_t cotrain_iterations(const std::vector<StageConfig>& configs) {
  std::size_t n = 0;
  for (const auto& c : configs) n += c.iterations;
  return n;
}

// Shared-projection baseline: one expert, every parameter trainable, tasks
// mixed in proportion to the staged sample budget, same total step count.
inline void run_cotrain(TrainState& state, const std::vector<StageConfig>& configs, const DataProvider& data,
                        const TrainHooks& hooks = {}) {
  validate_stage_order(configs);
  if (configs.empty()) throw Error("run_cotrain: no stage configs");
  if (state.mode != TrainMode::CoTrain) throw Error("run_cotrain: state is not in co-training mode");
  StageConfig cfg = configs.front();
  cfg.rho = 1.0;
  cfg.alpha = 0.0;
  cfg.iterations = cotrain_iterations(configs);
  if (state.model.pool_size() == 0) grow_expert_pool(state, cfg);
  if (!state.active || !(*state.active == cfg)) {
    state.active = cfg;
    state.step = 0;
    state.moments.clear();
  }
  apply_trainability(state.model, 0, TrainMode::CoTrain);
  state.model.zero_grad();
  while (state.step < cfg.iterations) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<TaskId> tasks;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) tasks.push_back(detail::cotrain_task(configs, state.seed, state.step, b));
    StepResult r = train_step(state, cfg, tasks, data, 99);
    ++state.step;
    ++state.global_step;
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (hooks.on_metrics) hooks.on_metrics(make_metrics(state, 0, r, ms));
    if (hooks.checkpoint_every && hooks.on_mid_checkpoint && state.step % hooks.checkpoint_every == 0 &&
        state.step < cfg.iterations) {
      hooks.on_mid_checkpoint(state);
    }
  }
  state.completed = configs;
  state.active.reset();
  state.step = 0;
  state.moments.clear();
  if (hooks.on_stage_end) hooks.on_stage_end(state);
}

}  // namespace prw

#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "prw/curriculum.hpp"
#include "prw/gradcheck.hpp"

namespace prw {

inline std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::Base: return "base";
    case ParamGroup::Router: return "router";
    case ParamGroup::Expert: return "expert";
  }
  return "?";
}

struct GradcheckOptions {
  std::size_t coords_per_tensor = 6;  // probed coordinates per parameter array
  std::size_t n_experts = 3;
  std::size_t lora_rank = 4;
  double rho = 0.8;
  double alpha = 0.5;
  double step = 1e-5;
  double threshold = 1e-4;
  double floor = 1e-5;  // |g| below this is compared in absolute terms
  TaskId task = TaskId::Grounding;
  std::uint64_t seed = 0;
  // Test fixture: scales the analytic gradient of one group after backward.
  std::optional<ParamGroup> corrupt_group;
};

struct GroupResult {
  ParamGroup group;
  double max_rel_error = 0.0;
  std::size_t coords = 0;
  std::string worst_param;
};

struct GradcheckReport {
  std::vector<GroupResult> groups;
  double veteran_grad_max_abs = 0.0;  // largest |d L_veteran / d theta| over all parameters
  bool passed = true;
  std::vector<std::string> failing;
};

// Builds a model with `n_experts` experts whose up-projections and router are
// randomized (so every group carries gradient), records one routing trace with
// router noise, then compares analytic and central-difference gradients of
// L_task + L_veteran with that trace replayed.
// Small token layout used for gradient checks: 4 tokens per latent stream and
// 8 condition tokens.
inline TokenLayout gradcheck_layout() {
  TokenLayout l;
  l.grid = 8;
  l.patch = 4;
  l.text_len = 4;
  return l;
}

inline GradcheckReport run_gradcheck(const ModelConfig& cfg, const TokenLayout& layout, const GradcheckOptions& opt) {
  if (cfg.d_model > 16) throw ValidationError("gradcheck: d_model must be <= 16 (got " + std::to_string(cfg.d_model) + ")");
  if (opt.n_experts < 1) throw ValidationError("gradcheck: need at least one expert");
  TrainState st = make_train_state(cfg, layout);
  for (std::size_t t = 0; t < opt.n_experts; ++t) {
    StageConfig sc;
    sc.stage_index = t;
    sc.lora_rank = opt.lora_rank;
    sc.lora_alpha = 2.0 * static_cast<double>(opt.lora_rank);
    grow_expert_pool(st, sc);
  }
  Model& m = st.model;
  Rng init = make_stream(opt.seed, "init", {7777});
  for (auto& b : m.blocks) {
    for (auto& e : b.pool.experts) {
      for (auto* t : {&e.b_k, &e.b_v})
        for (auto& v : t->data) v = 0.3 * standard_normal(init);
    }
    for (auto* t : {&b.router.w_r, &b.router.w_n})
      for (auto& v : t->data) v = 0.5 * standard_normal(init);
  }
  for (auto& p : m.named_params()) p.tensor->requires_grad = true;
  m.set_noise(true);

  Rng data = make_stream(opt.seed, "data", {7777});
  TaskSample s = gen_stage_sample(opt.task, data, layout.task_layout());
  Rng noise = make_stream(opt.seed, "noise", {7777});
  FlowSample f = make_flow_sample(s, layout, noise);
  const SupervisionConfig sup{opt.rho, opt.alpha};

  RoutingTrace trace;
  {
    Tape tape;
    trace = flow_matching_loss(tape, m, f, &noise).trace;
  }
  auto loss_value = [&]() {
    Tape tape;
    FlowLoss fl = flow_matching_loss(tape, m, f, nullptr, &trace);
    return total_loss(fl.loss, veteran_loss(soft_usage(fl.trace), sup)).value().data[0];
  };

  // Analytic gradients of the full objective.
  m.zero_grad();
  {
    Tape tape;
    FlowLoss fl = flow_matching_loss(tape, m, f, nullptr, &trace);
    tape.backward(total_loss(fl.loss, veteran_loss(soft_usage(fl.trace), sup)));
  }
  std::vector<std::vector<double>> analytic;
  for (auto& p : m.named_params())
    analytic.push_back(p.tensor->grad ? *p.tensor->grad : std::vector<double>(p.tensor->size(), 0.0));
  if (opt.corrupt_group) {
    auto params = m.named_params();
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].group == *opt.corrupt_group)
        for (auto& v : analytic[i]) v = 1.5 * v + 1e-3;
  }

  GradcheckReport rep;
  // Veteran term on its own.
  m.zero_grad();
  {
    Tape tape;
    FlowLoss fl = flow_matching_loss(tape, m, f, nullptr, &trace);
    tape.backward(veteran_loss(soft_usage(fl.trace), sup));
  }
  for (auto& p : m.named_params())
    if (p.tensor->grad)
      for (double g : *p.tensor->grad) rep.veteran_grad_max_abs = std::max(rep.veteran_grad_max_abs, std::fabs(g));
  m.zero_grad();

  std::array<GroupResult, 3> by_group{GroupResult{ParamGroup::Base, 0.0, 0, {}},
                                      GroupResult{ParamGroup::Router, 0.0, 0, {}},
                                      GroupResult{ParamGroup::Expert, 0.0, 0, {}}};
  Rng pick = make_stream(opt.seed, "order", {7777});
  auto params = m.named_params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& t = *params[i].tensor;
    std::vector<std::size_t> coords;
    if (t.size() <= opt.coords_per_tensor) {
      for (std::size_t c = 0; c < t.size(); ++c) coords.push_back(c);
    } else {
      for (std::size_t c = 0; c < opt.coords_per_tensor; ++c)
        coords.push_back(static_cast<std::size_t>(uniform_int(pick, 0, static_cast<int>(t.size()) - 1)));
    }
    Tensor numeric = finite_difference_gradient_inplace(loss_value, t, opt.step, coords);
    const double err = max_relative_error(analytic[i], numeric.data, coords, opt.floor);
    auto& g = by_group[static_cast<std::size_t>(params[i].group)];
    g.coords += coords.size();
    if (err >= g.max_rel_error) {
      g.max_rel_error = err;
      g.worst_param = params[i].name;
    }
  }
  for (auto& g : by_group) {
    rep.groups.push_back(g);
    if (!(g.max_rel_error < opt.threshold)) {
      rep.passed = false;
      rep.failing.emplace_back(group_name(g.group));
    }
  }
  return rep;
}

}  // namespace prw

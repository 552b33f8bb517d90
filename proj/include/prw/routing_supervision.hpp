#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "prw/attention.hpp"
#include "prw/autodiff.hpp"

namespace prw {

// Routing decisions of one block; token rows from several samples may be
// concatenated. `prob_vars` are the tape handles of the gate probabilities, in
// row order, when the trace was recorded for training.
struct BlockRouting {
  RoutingDecision decision;
  std::vector<Var> prob_vars;
};

struct RoutingTrace {
  std::vector<BlockRouting> per_block;
  std::size_t stage_expert = 0;  // N - 1

  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& b : per_block) n += b.decision.selected.size();
    return n;
  }

  void validate(std::size_t n_blocks, std::size_t pool_size) const {
    if (per_block.size() != n_blocks) {
      throw ShapeError("routing trace: " + std::to_string(per_block.size()) + " blocks recorded, model has " +
                       std::to_string(n_blocks));
    }
    for (const auto& b : per_block)
      for (auto e : b.decision.selected)
        if (e >= pool_size) throw ShapeError("routing trace: expert index " + std::to_string(e) + " >= pool size");
  }
};

struct SupervisionConfig {
  double rho = 1.0;
  double alpha = 0.0;

  void validate() const {
    if (!(rho >= 0.0 && rho <= 1.0)) throw Error("supervision: rho must lie in [0, 1]");
    if (!(alpha >= 0.0)) throw Error("supervision: alpha must be >= 0");
  }
};

inline Tensor concat_rows_value(const Tensor& a, const Tensor& b) {
  if (a.size() == 0) return b;
  if (b.size() == 0) return a;
  if (a.cols() != b.cols()) throw ShapeError("concat: column mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor out({a.rows() + b.rows(), a.cols()});
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

// Appends the token rows of `more` to `into`, block by block.
inline void append_trace(RoutingTrace& into, const RoutingTrace& more) {
  if (into.per_block.empty()) {
    into = more;
    return;
  }
  if (into.per_block.size() != more.per_block.size()) throw ShapeError("append_trace: block count mismatch");
  for (std::size_t b = 0; b < more.per_block.size(); ++b) {
    auto& dst = into.per_block[b];
    const auto& src = more.per_block[b];
    dst.decision.logits = concat_rows_value(dst.decision.logits, src.decision.logits);
    dst.decision.gate_probs = concat_rows_value(dst.decision.gate_probs, src.decision.gate_probs);
    dst.decision.noise_draw = concat_rows_value(dst.decision.noise_draw, src.decision.noise_draw);
    dst.decision.selected.insert(dst.decision.selected.end(), src.decision.selected.begin(), src.decision.selected.end());
    dst.decision.gate_value.insert(dst.decision.gate_value.end(), src.decision.gate_value.begin(),
                                   src.decision.gate_value.end());
    dst.prob_vars.insert(dst.prob_vars.end(), src.prob_vars.begin(), src.prob_vars.end());
  }
}

// U_t: fraction of hard routing decisions (over blocks and tokens) that pick
// the stage expert. A metric only; it carries no gradient.
inline double usage_ratio(const RoutingTrace& trace) {
  std::size_t hits = 0, total = 0;
  for (const auto& b : trace.per_block) {
    for (auto e : b.decision.selected) hits += (e == trace.stage_expert) ? 1 : 0;
    total += b.decision.selected.size();
  }
  if (total == 0) throw Error("usage_ratio: empty routing trace");
  return static_cast<double>(hits) / static_cast<double>(total);
}

// Mean gate probability of the stage expert over blocks and tokens.
inline double soft_usage_value(const RoutingTrace& trace) {
  double s = 0.0;
  std::size_t total = 0;
  for (const auto& b : trace.per_block) {
    const auto& p = b.decision.gate_probs;
    for (std::size_t i = 0; i < p.rows(); ++i) s += p.at(i, trace.stage_expert);
    total += p.rows();
  }
  if (total == 0) throw Error("soft_usage: empty routing trace");
  return s / static_cast<double>(total);
}

// Differentiable counterpart of soft_usage_value built from the recorded gate
// probabilities.
inline Var soft_usage(const RoutingTrace& trace) {
  std::vector<Var> cols;
  for (const auto& b : trace.per_block)
    for (const auto& pv : b.prob_vars) cols.push_back(ad::slice_cols(pv, trace.stage_expert, trace.stage_expert + 1));
  if (cols.empty()) throw Error("soft_usage: trace holds no recorded gate probabilities");
  return ad::mean(ad::concat_rows(cols));
}

inline double veteran_loss(double usage, const SupervisionConfig& cfg) { return cfg.alpha * std::fabs(usage - cfg.rho); }

inline Var veteran_loss(const Var& usage, const SupervisionConfig& cfg) {
  return ad::scale(ad::abs(ad::add_scalar(usage, -cfg.rho)), cfg.alpha);
}

inline double total_loss(double task_loss, double vet_loss) {
  if (!std::isfinite(task_loss) || !std::isfinite(vet_loss)) {
    throw NonFiniteError("total_loss: non-finite term (task " + std::to_string(task_loss) + ", veteran " +
                         std::to_string(vet_loss) + ")");
  }
  return task_loss + vet_loss;
}

inline Var total_loss(const Var& task_loss, const Var& vet_loss) { return ad::add(task_loss, vet_loss); }

// Share of hard decisions per expert; sums to 1.
inline std::vector<double> expert_histogram(const RoutingTrace& trace, std::size_t pool_size) {
  std::vector<double> h(pool_size, 0.0);
  std::size_t total = 0;
  for (const auto& b : trace.per_block) {
    for (auto e : b.decision.selected) h.at(e) += 1.0;
    total += b.decision.selected.size();
  }
  if (total == 0) throw Error("expert_histogram: empty routing trace");
  for (auto& v : h) v /= static_cast<double>(total);
  return h;
}

}  // namespace prw

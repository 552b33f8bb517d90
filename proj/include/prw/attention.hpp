#pragma once

// Routed low-rank KV experts inside a multimodal attention block.
//
// A block carries three token streams: the noisy latent x, the condition
// stream y and the source latent h. x and h share one QKV/output projection,
// y has its own. For the source stream a noisy top-1 router picks one
// low-rank expert per token; the expert's K/V delta, scaled by its gate
// probability, is added to the shared base K/V projection of h. h first
// attends to its adapted K/V (source self-attention), then x and y attend
// jointly over the concatenated keys/values of all three streams, with the h
// segment re-projected from the updated source tokens.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "prw/autodiff.hpp"
#include "prw/rng.hpp"
#include "prw/tensor.hpp"

namespace prw {

struct ModelConfig {
  std::size_t d_model = 16;
  std::size_t n_blocks = 2;
  std::size_t n_heads = 2;
  std::size_t len_x = 16;
  std::size_t len_y = 30;
  std::size_t len_h = 16;
  std::uint64_t seed = 0;

  void validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
      throw ShapeError("model config: d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                       std::to_string(n_heads) + ")");
    }
    if (n_blocks < 1) throw ShapeError("model config: n_blocks must be >= 1");
    if (len_x < 1 || len_y < 1 || len_h < 1) throw ShapeError("model config: stream lengths must be >= 1");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline Tensor random_matrix(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  Tensor t({rows, cols});
  for (auto& v : t.data) v = stddev * standard_normal(rng);
  return t;
}

// One parameter-efficient KV projection expert: delta_K = s * (h A_k) B_k and
// delta_V = s * (h A_v) B_v with s = lora_alpha / rank. Up-projections start at zero.
struct LowRankExpert {
  Tensor a_k, b_k, a_v, b_v;
  std::size_t rank = 0;
  double scale = 1.0;

  static LowRankExpert create(std::size_t d_model, std::size_t rank, double lora_alpha, Rng& rng) {
    if (rank < 1 || rank > d_model) {
      throw ShapeError("expert rank " + std::to_string(rank) + " must lie in [1, " + std::to_string(d_model) + "]");
    }
    LowRankExpert e;
    const double std_a = 1.0 / std::sqrt(static_cast<double>(d_model));
    e.a_k = random_matrix(d_model, rank, std_a, rng);
    e.b_k = Tensor::zeros(rank, d_model);
    e.a_v = random_matrix(d_model, rank, std_a, rng);
    e.b_v = Tensor::zeros(rank, d_model);
    e.rank = rank;
    e.scale = lora_alpha / static_cast<double>(rank);
    return e;
  }

  std::vector<std::pair<std::string, Tensor*>> tensors() {
    return {{"a_k", &a_k}, {"b_k", &b_k}, {"a_v", &a_v}, {"b_v", &b_v}};
  }

  void set_trainable(bool on) {
    for (auto& [_, t] : tensors()) t->requires_grad = on;
  }
};

struct ExpertPool {
  std::vector<LowRankExpert> experts;
  std::vector<bool> trainable;

  std::size_t size() const { return experts.size(); }

  void append(LowRankExpert e) {
    experts.push_back(std::move(e));
    trainable.push_back(false);
  }

  // Only the newest expert learns; all veterans are frozen.
  void train_only_last() {
    for (std::size_t k = 0; k < experts.size(); ++k) set_trainable(k, k + 1 == experts.size());
  }

  void set_trainable(std::size_t k, bool on) {
    trainable.at(k) = on;
    experts.at(k).set_trainable(on);
  }
};

struct RouterParams {
  Tensor w_r;  // d x N routing projection
  Tensor w_n;  // d x N noise-scale projection
  bool noise_enabled = true;

  static RouterParams create(std::size_t d_model, std::size_t n_experts) {
    return RouterParams{Tensor::zeros(d_model, n_experts), Tensor::zeros(d_model, n_experts), true};
  }

  std::size_t n_experts() const { return w_r.cols(); }

  // New expert columns start at zero so existing logits are untouched.
  void add_expert_column() {
    auto widen = [](Tensor& t) {
      const std::size_t d = t.shape[0], n = t.shape[1];
      Tensor w({d, n + 1});
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < n; ++j) w.data[i * (n + 1) + j] = t.data[i * n + j];
      w.requires_grad = t.requires_grad;
      t = std::move(w);
    };
    widen(w_r);
    widen(w_n);
  }

  void set_trainable(bool on) {
    w_r.requires_grad = on;
    w_n.requires_grad = on;
  }
};

// Per-token routing outcome for one block.
struct RoutingDecision {
  Tensor logits;      // L x N
  Tensor gate_probs;  // L x N, empty until select_expert or the block fills it
  std::vector<std::size_t> selected;
  std::vector<double> gate_value;
  Tensor noise_draw;  // L x N, zeros when noise is disabled

  std::size_t tokens() const { return logits.rows(); }
  std::size_t n_experts() const { return logits.cols(); }
};

struct LatentTriple {
  Tensor x;  // len_x x d
  Tensor y;  // len_y x d
  Tensor h;  // len_h x d
};

struct LatentVars {
  Var x, y, h;
};

// Shared QKV + output projection of one stream family.
struct ProjectionParams {
  Tensor wq, wk, wv, wo;

  static ProjectionParams create(std::size_t d, double out_scale, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    ProjectionParams p;
    p.wq = random_matrix(d, d, s, rng);
    p.wk = random_matrix(d, d, s, rng);
    p.wv = random_matrix(d, d, s, rng);
    p.wo = random_matrix(d, d, s * out_scale, rng);
    return p;
  }
};

struct ProjectionVars {
  Var wq, wk, wv, wo;
};

inline ProjectionVars bind(Tape& tape, ProjectionParams& p) {
  return {tape.param(p.wq), tape.param(p.wk), tape.param(p.wv), tape.param(p.wo)};
}

struct QKV {
  Var q, k, v;
};

inline QKV project_qkv(const Var& tokens, const ProjectionVars& p) {
  return {ad::matmul(tokens, p.wq), ad::matmul(tokens, p.wk), ad::matmul(tokens, p.wv)};
}

struct BlockParams {
  ProjectionParams shared;  // applied to x and h
  ProjectionParams text;    // applied to y
  Tensor mlp_in;            // d x 2d
  Tensor mlp_out;           // 2d x d
  RouterParams router;
  ExpertPool pool;

  static BlockParams create(std::size_t d_model, Rng& rng) {
    BlockParams b;
    b.shared = ProjectionParams::create(d_model, 0.5, rng);
    b.text = ProjectionParams::create(d_model, 0.5, rng);
    b.mlp_in = random_matrix(d_model, 2 * d_model, 1.0 / std::sqrt(static_cast<double>(d_model)), rng);
    b.mlp_out = random_matrix(2 * d_model, d_model, 0.5 / std::sqrt(static_cast<double>(2 * d_model)), rng);
    b.router = RouterParams::create(d_model, 0);
    return b;
  }

  // Parameters outside the router and the expert pool.
  std::vector<std::pair<std::string, Tensor*>> base_tensors() {
    return {{"shared.wq", &shared.wq}, {"shared.wk", &shared.wk}, {"shared.wv", &shared.wv},
            {"shared.wo", &shared.wo}, {"text.wq", &text.wq},     {"text.wk", &text.wk},
            {"text.wv", &text.wv},     {"text.wo", &text.wo},     {"mlp_in", &mlp_in},
            {"mlp_out", &mlp_out}};
  }
};

// w = h W_r + eps * softplus(h W_n). With noise disabled the noise term is not
// evaluated at all. `fixed_noise` replays a previous draw instead of sampling.
struct RouterOutput {
  Var logits;
  Tensor noise;
};

inline RouterOutput compute_router_logits(const Var& h, RouterParams& router, Rng* rng,
                                          const Tensor* fixed_noise = nullptr) {
  Tape& tape = *h.tape();
  const std::size_t d = h.cols(), L = h.rows(), N = router.n_experts();
  if (router.w_r.shape != Shape{d, N} || router.w_n.shape != Shape{d, N}) {
    throw ShapeError("router: source width " + std::to_string(d) + " vs W_r " + shape_str(router.w_r.shape) +
                     " / W_n " + shape_str(router.w_n.shape));
  }
  Var clean = ad::matmul(h, tape.param(router.w_r));
  if (!router.noise_enabled) return {clean, Tensor({L, N})};
  Tensor eps({L, N});
  if (fixed_noise) {
    if (fixed_noise->shape != eps.shape) throw ShapeError("router: replayed noise has shape " + shape_str(fixed_noise->shape));
    eps.data = fixed_noise->data;
  } else {
    if (!rng) throw Error("router: noise enabled but no generator supplied");
    for (auto& e : eps.data) e = standard_normal(*rng);
  }
  Var noise_scale = ad::softplus(ad::matmul(h, tape.param(router.w_n)));
  Var logits = ad::add(clean, ad::mul(tape.constant(eps), noise_scale));
  return {logits, std::move(eps)};
}

// Tensor-level convenience wrapper; returns logits and the noise draw only.
inline RoutingDecision compute_router_logits(const Tensor& h, const RouterParams& router, Rng* rng) {
  Tape tape;
  RouterParams r = router;
  r.set_trainable(false);
  auto out = compute_router_logits(tape.constant(h), r, rng);
  RoutingDecision d;
  d.logits = Tensor(out.logits.shape(), out.logits.value().data);
  d.noise_draw = std::move(out.noise);
  return d;
}

inline Tensor softmax_rows_value(const Tensor& logits) {
  Tape tape;
  Var p = ad::softmax_rows(tape.constant(logits));
  return Tensor(p.shape(), p.value().data);
}

// Top-1 over the softmax-normalized logits; ties go to the lowest index.
inline void select_expert(RoutingDecision& d) {
  if (d.gate_probs.size() == 0 && d.logits.size() > 0) d.gate_probs = softmax_rows_value(d.logits);
  const std::size_t L = d.gate_probs.rows(), N = d.gate_probs.cols();
  d.selected.assign(L, 0);
  d.gate_value.assign(L, 0.0);
  for (std::size_t i = 0; i < L; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < N; ++k)
      if (d.gate_probs.at(i, k) > d.gate_probs.at(i, best)) best = k;
    d.selected[i] = best;
    d.gate_value[i] = d.gate_probs.at(i, best);
  }
}

struct KV {
  Var k, v;
};

// (K^, V^) = base(h) + g_i * E_{e_i}(h) row by row, where e_i is token i's
// selected expert and g_i its gate probability (differentiable through
// `gate_probs`). Experts with no routed token are not evaluated.
inline KV adapt_kv(const Var& h, ExpertPool& pool, const RoutingDecision& decision, const Var& gate_probs,
                   const Var& wk, const Var& wv) {
  Tape& tape = *h.tape();
  const std::size_t L = h.rows();
  if (decision.selected.size() != L) throw ShapeError("adapt_kv: routing covers " +
                                                      std::to_string(decision.selected.size()) + " tokens, source has " +
                                                      std::to_string(L));
  for (auto e : decision.selected) {
    if (e >= pool.size()) {
      throw ShapeError("adapt_kv: selected expert " + std::to_string(e) + " out of range for pool of " +
                       std::to_string(pool.size()));
    }
  }
  Var k = ad::matmul(h, wk);
  Var v = ad::matmul(h, wv);
  if (pool.size() == 0) return {k, v};
  Var gate = ad::pick_per_row(gate_probs, decision.selected);
  for (std::size_t e = 0; e < pool.size(); ++e) {
    Tensor mask({L, 1});
    bool any = false;
    for (std::size_t i = 0; i < L; ++i) {
      if (decision.selected[i] == e) {
        mask.data[i] = 1.0;
        any = true;
      }
    }
    if (!any) continue;
    auto& ex = pool.experts[e];
    Var g = ad::mul(gate, tape.constant(std::move(mask)));
    Var dk = ad::scale(ad::matmul(ad::matmul(h, tape.param(ex.a_k)), tape.param(ex.b_k)), ex.scale);
    Var dv = ad::scale(ad::matmul(ad::matmul(h, tape.param(ex.a_v)), tape.param(ex.b_v)), ex.scale);
    k = ad::add(k, ad::scale_rows(dk, g));
    v = ad::add(v, ad::scale_rows(dv, g));
  }
  return {k, v};
}

// h + Attn(Q_h, K^, V^) W_o
inline Var source_self_attention(const Var& h, const Var& k_hat, const Var& v_hat, const Var& q_h, const Var& wo,
                                 std::size_t n_heads) {
  return ad::add(h, ad::matmul(ad::attention(q_h, k_hat, v_hat, n_heads), wo));
}

struct StemOutput {
  Var x, y;
};

// Queries of x and y attend over concat(K_x, K_y, K_h) / concat(V_x, V_y, V_h);
// the h segment is projected from the updated source stream with the shared
// weights.
inline StemOutput stem_attention(const Var& x, const Var& y, const Var& h_updated, const ProjectionVars& shared,
                                 const ProjectionVars& text, std::size_t n_heads) {
  const std::size_t lx = x.rows(), ly = y.rows();
  if (x.cols() != y.cols() || x.cols() != h_updated.cols()) {
    throw ShapeError("stem_attention: stream widths " + shape_str(x.shape()) + ", " + shape_str(y.shape()) +
                     ", " + shape_str(h_updated.shape()) + " disagree");
  }
  QKV qx = project_qkv(x, shared);
  QKV qy = project_qkv(y, text);
  QKV qh = project_qkv(h_updated, shared);
  Var q = ad::concat_rows({qx.q, qy.q});
  Var k = ad::concat_rows({qx.k, qy.k, qh.k});
  Var v = ad::concat_rows({qx.v, qy.v, qh.v});
  Var out = ad::attention(q, k, v, n_heads);
  Var x_out = ad::add(x, ad::matmul(ad::slice_rows(out, 0, lx), shared.wo));
  Var y_out = ad::add(y, ad::matmul(ad::slice_rows(out, lx, lx + ly), text.wo));
  return {x_out, y_out};
}

inline Var feed_forward(const Var& x, const Var& w_in, const Var& w_out) {
  return ad::add(x, ad::matmul(ad::tanh(ad::matmul(x, w_in)), w_out));
}

struct BlockResult {
  LatentVars out;
  RoutingDecision decision;
  Var gate_probs;
};

// Router -> top-1 selection -> adaptive KV -> source self-attention -> stem
// attention -> x-stream feed-forward. `replay` pins the noise draw and the
// selected experts of an earlier pass (used for gradient checks).
inline BlockResult prw_block_forward(const LatentVars& in, BlockParams& p, std::size_t n_heads, Rng* rng,
                                     const RoutingDecision* replay = nullptr) {
  if (p.pool.size() == 0) throw Error("block: expert pool is empty (grow the pool before the first forward pass)");
  Tape& tape = *in.h.tape();
  ProjectionVars shared = bind(tape, p.shared);
  ProjectionVars text = bind(tape, p.text);

  RouterOutput routed = compute_router_logits(in.h, p.router, rng, replay ? &replay->noise_draw : nullptr);
  Var probs = ad::softmax_rows(routed.logits);

  RoutingDecision decision;
  decision.logits = Tensor(routed.logits.shape(), routed.logits.value().data);
  decision.gate_probs = Tensor(probs.shape(), probs.value().data);
  decision.noise_draw = std::move(routed.noise);
  select_expert(decision);
  if (replay) {
    if (replay->selected.size() != decision.selected.size()) throw ShapeError("block: replayed selection size mismatch");
    decision.selected = replay->selected;
    for (std::size_t i = 0; i < decision.selected.size(); ++i)
      decision.gate_value[i] = decision.gate_probs.at(i, decision.selected[i]);
  }

  KV kv = adapt_kv(in.h, p.pool, decision, probs, shared.wk, shared.wv);
  Var q_h = ad::matmul(in.h, shared.wq);
  Var h_updated = source_self_attention(in.h, kv.k, kv.v, q_h, shared.wo, n_heads);
  StemOutput stem = stem_attention(in.x, in.y, h_updated, shared, text, n_heads);
  Var x_out = feed_forward(stem.x, tape.param(p.mlp_in), tape.param(p.mlp_out));
  return {{x_out, stem.y, h_updated}, std::move(decision), probs};
}

// Same block without routing or experts: K/V of h come from the base projection only.
inline LatentVars baseline_block_forward(const LatentVars& in, BlockParams& p, std::size_t n_heads) {
  Tape& tape = *in.h.tape();
  ProjectionVars shared = bind(tape, p.shared);
  ProjectionVars text = bind(tape, p.text);
  Var k = ad::matmul(in.h, shared.wk);
  Var v = ad::matmul(in.h, shared.wv);
  Var q_h = ad::matmul(in.h, shared.wq);
  Var h_updated = source_self_attention(in.h, k, v, q_h, shared.wo, n_heads);
  StemOutput stem = stem_attention(in.x, in.y, h_updated, shared, text, n_heads);
  Var x_out = feed_forward(stem.x, tape.param(p.mlp_in), tape.param(p.mlp_out));
  return {x_out, stem.y, h_updated};
}

}  // namespace prw

#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "prw/attention.hpp"
#include "prw/routing_supervision.hpp"
#include "prw/synth.hpp"

namespace prw {

// How grid samples are cut into tokens. Both latent streams use
// (grid / patch)^2 patch tokens; the condition stream is text_len word tokens
// followed by one control-map token per patch.
struct TokenLayout {
  std::size_t grid = 16;
  std::size_t patch = 4;
  std::size_t channels = 3;
  std::size_t text_len = 14;
  std::size_t vocab = vocab::kSize;

  std::size_t patches() const { return (grid / patch) * (grid / patch); }
  std::size_t x_features() const { return patch * patch * channels; }
  std::size_t h_features() const { return patch * patch * (channels + 1); }
  std::size_t control_features() const { return patch * patch; }
  std::size_t len_y() const { return text_len + patches(); }

  void validate() const {
    if (patch == 0 || grid % patch != 0) throw ShapeError("token layout: grid must be a multiple of patch");
    if (text_len == 0) throw ShapeError("token layout: text_len must be >= 1");
  }

  TaskLayout task_layout() const {
    TaskLayout t;
    t.scene.height = t.scene.width = grid;
    t.scene.channels = channels;
    t.text_len = text_len;
    return t;
  }

  bool operator==(const TokenLayout&) const = default;
};

inline constexpr std::size_t kTimeFeatures = 9;

inline Tensor time_features(double u) {
  Tensor t({1, kTimeFeatures});
  t.data[0] = u;
  for (std::size_t k = 0; k < 4; ++k) {
    const double w = 2.0 * std::numbers::pi * static_cast<double>(1u << k) * u;
    t.data[1 + 2 * k] = std::sin(w);
    t.data[2 + 2 * k] = std::cos(w);
  }
  return t;
}

// H x W x C grid -> (patches x patch*patch*C) rows in raster order of patches.
inline Tensor patchify(const Tensor& grid, std::size_t patch) {
  const std::size_t H = grid.shape.at(0), W = grid.shape.at(1), C = grid.rank() > 2 ? grid.shape[2] : 1;
  const std::size_t ph = H / patch, pw = W / patch;
  Tensor out({ph * pw, patch * patch * C});
  for (std::size_t pr = 0; pr < ph; ++pr)
    for (std::size_t pc = 0; pc < pw; ++pc)
      for (std::size_t i = 0; i < patch; ++i)
        for (std::size_t j = 0; j < patch; ++j)
          for (std::size_t k = 0; k < C; ++k)
            out.data[(pr * pw + pc) * patch * patch * C + (i * patch + j) * C + k] =
                grid.data[((pr * patch + i) * W + pc * patch + j) * C + k];
  return out;
}

inline Tensor unpatchify(const Tensor& tokens, std::size_t H, std::size_t W, std::size_t C, std::size_t patch) {
  const std::size_t pw = W / patch;
  Tensor grid({H, W, C});
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c)
      for (std::size_t k = 0; k < C; ++k)
        grid.data[(r * W + c) * C + k] =
            tokens.data[((r / patch) * pw + c / patch) * patch * patch * C + ((r % patch) * patch + c % patch) * C + k];
  return grid;
}

// Color channels to [-1, 1]; mask/control channels stay in {0, 1}.
inline Tensor to_signed(const Tensor& t) {
  Tensor out(t.shape, t.data);
  for (auto& v : out.data) v = 2.0 * v - 1.0;
  return out;
}

struct ModelInput {
  Tensor x_tokens;        // len_x x x_features (noisy latent)
  double time = 0.0;      // flow time u
  Tensor source_tokens;   // len_h x h_features
  std::vector<std::size_t> text_ids;
  Tensor control_tokens;  // patches x control_features
  std::size_t task = 0;
};

// Source / condition tokens of a TaskSample; x_tokens and time are filled by the caller.
inline ModelInput encode_conditions(const TaskSample& s, const TokenLayout& layout) {
  ModelInput in;
  Tensor src(s.source.shape, s.source.data);
  const std::size_t C = layout.channels;
  for (std::size_t i = 0; i < src.size(); ++i)
    if (i % (C + 1) != C) src.data[i] = 2.0 * src.data[i] - 1.0;
  in.source_tokens = patchify(src, layout.patch);
  in.text_ids.assign(s.text.begin(), s.text.end());
  in.control_tokens = patchify(s.control, layout.patch);
  in.task = static_cast<std::size_t>(s.task);
  return in;
}

enum class ParamGroup { Base, Router, Expert };

struct NamedParam {
  std::string name;
  Tensor* tensor;
  ParamGroup group;
  std::size_t expert = 0;  // valid for ParamGroup::Expert
};

struct Model {
  ModelConfig config;
  TokenLayout layout;

  Tensor embed_x, embed_x_bias;
  Tensor embed_h, embed_h_bias;
  Tensor embed_text;
  Tensor embed_control, embed_control_bias;
  Tensor pos_x, pos_h, pos_y;
  Tensor time_proj, time_bias;
  Tensor task_embed;
  Tensor head, head_bias;
  std::vector<BlockParams> blocks;

  static ModelConfig derive_config(const TokenLayout& layout, std::size_t d_model, std::size_t n_blocks,
                                   std::size_t n_heads, std::uint64_t seed) {
    ModelConfig c;
    c.d_model = d_model;
    c.n_blocks = n_blocks;
    c.n_heads = n_heads;
    c.len_x = layout.patches();
    c.len_h = layout.patches();
    c.len_y = layout.len_y();
    c.seed = seed;
    return c;
  }

  // Base weights from the "init" stream; the expert pool starts empty.
  static Model create(const ModelConfig& cfg, const TokenLayout& layout) {
    cfg.validate();
    layout.validate();
    if (cfg.len_x != layout.patches() || cfg.len_h != layout.patches() || cfg.len_y != layout.len_y()) {
      throw ShapeError("model config stream lengths do not match the token layout");
    }
    Model m;
    m.config = cfg;
    m.layout = layout;
    Rng rng = make_stream(cfg.seed, "init");
    const std::size_t d = cfg.d_model;
    auto lin = [&](std::size_t in) { return random_matrix(in, d, 1.0 / std::sqrt(static_cast<double>(in)), rng); };
    m.embed_x = lin(layout.x_features());
    m.embed_x_bias = Tensor::zeros(1, d);
    m.embed_h = lin(layout.h_features());
    m.embed_h_bias = Tensor::zeros(1, d);
    m.embed_text = random_matrix(layout.vocab, d, 1.0, rng);
    m.embed_control = lin(layout.control_features());
    m.embed_control_bias = Tensor::zeros(1, d);
    m.pos_x = random_matrix(cfg.len_x, d, 0.5, rng);
    m.pos_h = random_matrix(cfg.len_h, d, 0.5, rng);
    m.pos_y = random_matrix(cfg.len_y, d, 0.5, rng);
    m.time_proj = lin(kTimeFeatures);
    m.time_bias = Tensor::zeros(1, d);
    m.task_embed = random_matrix(kNumTasks, d, 1.0, rng);
    m.head = random_matrix(d, layout.x_features(), 1.0 / std::sqrt(static_cast<double>(d)), rng);
    m.head_bias = Tensor::zeros(1, layout.x_features());
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) m.blocks.push_back(BlockParams::create(d, rng));
    return m;
  }

  std::size_t pool_size() const { return blocks.empty() ? 0 : blocks.front().pool.size(); }

  void set_noise(bool on) {
    for (auto& b : blocks) b.router.noise_enabled = on;
  }

  // Every parameter array in a fixed order.
  std::vector<NamedParam> named_params() {
    std::vector<NamedParam> out{{"embed_x", &embed_x, ParamGroup::Base},
                                {"embed_x_bias", &embed_x_bias, ParamGroup::Base},
                                {"embed_h", &embed_h, ParamGroup::Base},
                                {"embed_h_bias", &embed_h_bias, ParamGroup::Base},
                                {"embed_text", &embed_text, ParamGroup::Base},
                                {"embed_control", &embed_control, ParamGroup::Base},
                                {"embed_control_bias", &embed_control_bias, ParamGroup::Base},
                                {"pos_x", &pos_x, ParamGroup::Base},
                                {"pos_h", &pos_h, ParamGroup::Base},
                                {"pos_y", &pos_y, ParamGroup::Base},
                                {"time_proj", &time_proj, ParamGroup::Base},
                                {"time_bias", &time_bias, ParamGroup::Base},
                                {"task_embed", &task_embed, ParamGroup::Base},
                                {"head", &head, ParamGroup::Base},
                                {"head_bias", &head_bias, ParamGroup::Base}};
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const std::string pre = "block" + std::to_string(b) + ".";
      for (auto& [n, t] : blocks[b].base_tensors()) out.push_back({pre + n, t, ParamGroup::Base});
      out.push_back({pre + "router.w_r", &blocks[b].router.w_r, ParamGroup::Router});
      out.push_back({pre + "router.w_n", &blocks[b].router.w_n, ParamGroup::Router});
      for (std::size_t k = 0; k < blocks[b].pool.size(); ++k)
        for (auto& [n, t] : blocks[b].pool.experts[k].tensors())
          out.push_back({pre + "expert" + std::to_string(k) + "." + n, t, ParamGroup::Expert, k});
    }
    return out;
  }

  void zero_grad() {
    for (auto& p : named_params()) p.tensor->zero_grad();
  }
};

struct ModelForward {
  Var velocity;  // len_x x x_features
  RoutingTrace trace;
  LatentVars final_streams;
};

inline LatentVars embed_streams(Tape& tape, Model& m, const ModelInput& in) {
  const auto& L = m.layout;
  if (in.x_tokens.shape != Shape{L.patches(), L.x_features()} ||
      in.source_tokens.shape != Shape{L.patches(), L.h_features()} || in.text_ids.size() != L.text_len ||
      in.control_tokens.shape != Shape{L.patches(), L.control_features()} || in.task >= kNumTasks) {
    throw ShapeError("model input does not match the token layout (x " + shape_str(in.x_tokens.shape) + ", h " +
                     shape_str(in.source_tokens.shape) + ", text " + std::to_string(in.text_ids.size()) + ")");
  }
  Var time = ad::add(ad::matmul(tape.constant(time_features(in.time)), tape.param(m.time_proj)),
                     tape.param(m.time_bias));
  Var x = ad::add_row(ad::add_row(ad::matmul(tape.constant(in.x_tokens), tape.param(m.embed_x)), tape.param(m.embed_x_bias)),
                      time);
  x = ad::add(x, tape.param(m.pos_x));

  Var task = ad::gather_rows(tape.param(m.task_embed), {in.task});
  Var h = ad::add_row(ad::matmul(tape.constant(in.source_tokens), tape.param(m.embed_h)), tape.param(m.embed_h_bias));
  h = ad::add(ad::add_row(h, task), tape.param(m.pos_h));

  Var words = ad::gather_rows(tape.param(m.embed_text), in.text_ids);
  Var ctrl = ad::add_row(ad::matmul(tape.constant(in.control_tokens), tape.param(m.embed_control)),
                         tape.param(m.embed_control_bias));
  Var y = ad::add(ad::concat_rows({words, ctrl}), tape.param(m.pos_y));
  return {x, y, h};
}

// Full forward pass: embed, run every block, project the x stream to a
// velocity. `replay` (optional) pins per-block noise draws and selections.
inline ModelForward forward(Tape& tape, Model& m, const ModelInput& in, Rng* noise_rng,
                            const RoutingTrace* replay = nullptr) {
  LatentVars s = embed_streams(tape, m, in);
  ModelForward out;
  out.trace.stage_expert = m.pool_size() == 0 ? 0 : m.pool_size() - 1;
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    const RoutingDecision* rep = replay ? &replay->per_block.at(b).decision : nullptr;
    BlockResult r = prw_block_forward(s, m.blocks[b], m.config.n_heads, noise_rng, rep);
    s = r.out;
    out.trace.per_block.push_back({std::move(r.decision), {r.gate_probs}});
  }
  out.velocity = ad::add_row(ad::matmul(s.x, tape.param(m.head)), tape.param(m.head_bias));
  out.final_streams = s;
  return out;
}

}  // namespace prw

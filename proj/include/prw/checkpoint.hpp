#pragma once

#include <string>
#include <vector>

#include "prw/config.hpp"
#include "prw/hash.hpp"
#include "prw/io.hpp"

namespace prw {

inline constexpr int kCheckpointVersion = 1;

// Directory layout: manifest.json plus one raw little-endian float64 file per
// array. Parameters live in params/, Adam moments in adam/.
namespace detail {

inline ojson array_entry(const std::string& name, const std::string& file, const Shape& shape, const std::string& bytes) {
  ojson e;
  e["name"] = name;
  e["file"] = file;
  e["dtype"] = "float64-le";
  e["shape"] = shape;
  e["sha256"] = sha256_hex(bytes);
  return e;
}

inline std::vector<double> read_array(const fs::path& dir, const ojson& entry, std::size_t expect_numel) {
  const std::string file = entry.at("file").get<std::string>();
  const std::string bytes = read_file(dir / file);
  if (sha256_hex(bytes) != entry.at("sha256").get<std::string>()) {
    throw ValidationError("checkpoint: hash mismatch for " + file);
  }
  auto values = f64_from_le_bytes(bytes);
  if (values.size() != expect_numel) {
    throw ValidationError("checkpoint: " + file + " holds " + std::to_string(values.size()) + " values, expected " +
                          std::to_string(expect_numel));
  }
  return values;
}

inline StageConfig stage_from_json(const ojson& j) { return parse_stage(j, "stage"); }

}  // namespace detail

inline void save_checkpoint(const TrainState& state_in, const fs::path& dir) {
  TrainState& state = const_cast<TrainState&>(state_in);  // named_params() hands out mutable pointers only
  ensure_dir(dir / "params");
  ensure_dir(dir / "adam");
  const Model& m = state.model;

  ojson man;
  man["format"] = "prw-checkpoint";
  man["version"] = kCheckpointVersion;
  man["mode"] = state.mode == TrainMode::Staged ? "staged" : "cotrain";
  man["rng"] = {{"master_seed", state.seed},
                {"generator", "mt19937_64"},
                {"streams", {"data", "noise", "init", "order"}},
                {"derivation", "splitmix64 over (master_seed, fnv1a(name), coords...)"}};
  man["model"] = {{"d_model", m.config.d_model}, {"n_blocks", m.config.n_blocks}, {"n_heads", m.config.n_heads},
                  {"len_x", m.config.len_x},     {"len_y", m.config.len_y},       {"len_h", m.config.len_h},
                  {"seed", m.config.seed}};
  man["layout"] = {{"grid_cells", m.layout.grid},
                   {"patch_cells", m.layout.patch},
                   {"channels", m.layout.channels},
                   {"text_tokens", m.layout.text_len},
                   {"vocab", m.layout.vocab}};
  man["completed_stages"] = ojson::array();
  for (const auto& s : state.completed) man["completed_stages"].push_back(stage_to_json(s));
  man["active_stage"] = state.active ? stage_to_json(*state.active) : ojson(nullptr);
  man["step"] = state.step;
  man["global_step"] = state.global_step;

  ojson pool = ojson::array();
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    ojson blk = ojson::array();
    const auto& p = m.blocks[b].pool;
    for (std::size_t k = 0; k < p.size(); ++k)
      blk.push_back({{"rank", p.experts[k].rank}, {"scale", p.experts[k].scale}, {"trainable", bool(p.trainable[k])}});
    pool.push_back(blk);
  }
  man["expert_pool"] = pool;

  man["arrays"] = ojson::array();
  for (auto& p : state.model.named_params()) {
    const std::string bytes = f64_le_bytes(p.tensor->data);
    const std::string file = "params/" + p.name + ".bin";
    write_file(dir / file, bytes);
    man["arrays"].push_back(detail::array_entry(p.name, file, p.tensor->shape, bytes));
  }
  man["adam_moments"] = ojson::array();
  for (const auto& [name, mom] : state.moments) {
    ojson e;
    e["name"] = name;
    for (const char* which : {"m", "v"}) {
      const auto& vals = which[0] == 'm' ? mom.m : mom.v;
      const std::string bytes = f64_le_bytes(vals);
      const std::string file = std::string("adam/") + name + "." + which + ".bin";
      write_file(dir / file, bytes);
      e[which] = detail::array_entry(name, file, Shape{vals.size()}, bytes);
    }
    man["adam_moments"].push_back(e);
  }
  write_file(dir / "manifest.json", man.dump(2) + "\n");
}

inline TrainState load_checkpoint(const fs::path& dir) {
  const std::string text = read_file(dir / "manifest.json");
  ojson man;
  try {
    man = ojson::parse(text);
  } catch (const ojson::parse_error& e) {
    throw ValidationError("checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }
  try {
    if (man.at("format") != "prw-checkpoint" || man.at("version") != kCheckpointVersion) {
      throw ValidationError("checkpoint: unsupported format or version");
    }
    const auto& mj = man.at("model");
    ModelConfig cfg;
    cfg.d_model = mj.at("d_model");
    cfg.n_blocks = mj.at("n_blocks");
    cfg.n_heads = mj.at("n_heads");
    cfg.len_x = mj.at("len_x");
    cfg.len_y = mj.at("len_y");
    cfg.len_h = mj.at("len_h");
    cfg.seed = mj.at("seed");
    const auto& lj = man.at("layout");
    TokenLayout layout;
    layout.grid = lj.at("grid_cells");
    layout.patch = lj.at("patch_cells");
    layout.channels = lj.at("channels");
    layout.text_len = lj.at("text_tokens");
    layout.vocab = lj.at("vocab");

    const std::string mode = man.at("mode");
    if (mode != "staged" && mode != "cotrain") throw ValidationError("checkpoint: unknown mode '" + mode + "'");
    TrainState st = make_train_state(cfg, layout, mode == "staged" ? TrainMode::Staged : TrainMode::CoTrain);
    st.seed = man.at("rng").at("master_seed");
    for (const auto& s : man.at("completed_stages")) st.completed.push_back(detail::stage_from_json(s));
    if (!man.at("active_stage").is_null()) st.active = detail::stage_from_json(man.at("active_stage"));
    st.step = man.at("step");
    st.global_step = man.at("global_step");

    const auto& pool = man.at("expert_pool");
    if (pool.size() != cfg.n_blocks) throw ValidationError("checkpoint: expert_pool lists the wrong number of blocks");
    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
      auto& blk = st.model.blocks[b];
      for (const auto& e : pool[b]) {
        const std::size_t rank = e.at("rank");
        LowRankExpert x;
        x.rank = rank;
        x.scale = e.at("scale");
        x.a_k = Tensor::zeros(cfg.d_model, rank);
        x.b_k = Tensor::zeros(rank, cfg.d_model);
        x.a_v = Tensor::zeros(cfg.d_model, rank);
        x.b_v = Tensor::zeros(rank, cfg.d_model);
        blk.pool.append(std::move(x));
        blk.pool.set_trainable(blk.pool.size() - 1, e.at("trainable").get<bool>());
      }
      blk.router = RouterParams::create(cfg.d_model, blk.pool.size());
    }

    const auto& arrays = man.at("arrays");
    auto params = st.model.named_params();
    if (arrays.size() != params.size()) {
      throw ValidationError("checkpoint: manifest lists " + std::to_string(arrays.size()) + " arrays, model has " +
                            std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& e = arrays[i];
      if (e.at("name") != params[i].name) {
        throw ValidationError("checkpoint: array " + std::to_string(i) + " is '" + e.at("name").get<std::string>() +
                              "', expected '" + params[i].name + "'");
      }
      if (e.at("shape").get<Shape>() != params[i].tensor->shape) {
        throw ValidationError("checkpoint: shape mismatch for " + params[i].name);
      }
      params[i].tensor->data = detail::read_array(dir, e, params[i].tensor->size());
    }
    for (const auto& e : man.at("adam_moments")) {
      AdamMoments mom;
      const std::size_t n_m = e.at("m").at("shape").at(0), n_v = e.at("v").at("shape").at(0);
      mom.m = detail::read_array(dir, e.at("m"), n_m);
      mom.v = detail::read_array(dir, e.at("v"), n_v);
      st.moments[e.at("name").get<std::string>()] = std::move(mom);
    }

    // Parameter trainability follows the stage being (or last) trained.
    const std::size_t stage = st.active ? st.active->stage_index : (st.completed.empty() ? 0 : st.completed.back().stage_index);
    if (st.mode == TrainMode::CoTrain || st.model.pool_size() > 0) {
      const bool base_on = st.mode == TrainMode::CoTrain || stage == 0;
      for (auto& p : st.model.named_params())
        if (p.group == ParamGroup::Base) p.tensor->requires_grad = base_on;
      for (auto& b : st.model.blocks) b.router.set_trainable(true);
    }
    return st;
  } catch (const ojson::exception& e) {
    throw ValidationError(std::string("checkpoint manifest: ") + e.what());
  }
}

}  // namespace prw

#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prw/curriculum.hpp"
#include "prw/io.hpp"

namespace prw {

using ojson = nlohmann::ordered_json;

inline constexpr int kConfigVersion = 1;

class ConfigError : public ValidationError {
 public:
  ConfigError(const std::string& path, const std::string& what) : ValidationError("config: " + path + ": " + what), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct EvalSettings {
  std::size_t heldout_samples_per_task = 32;
  std::size_t duality_seeds = 5;
  bool operator==(const EvalSettings&) const = default;
};

struct RunConfig {
  int version = kConfigVersion;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  std::size_t d_model = 16;
  std::size_t n_blocks = 2;
  std::size_t n_heads = 2;
  TokenLayout layout;
  std::vector<StageConfig> stages = default_stage_configs();
  std::size_t checkpoint_every_steps = 0;  // 0 = stage ends only
  bool metrics_wall_time = false;
  EvalSettings eval;

  ModelConfig model_config() const { return Model::derive_config(layout, d_model, n_blocks, n_heads, seed); }

  void validate() const {
    if (version != kConfigVersion) throw ConfigError("version", "unsupported version " + std::to_string(version));
    try {
      layout.validate();
    } catch (const Error& e) {
      throw ConfigError("layout", e.what());
    }
    try {
      model_config().validate();
    } catch (const Error& e) {
      throw ConfigError("model", e.what());
    }
    if (stages.empty()) throw ConfigError("stages", "at least one stage is required");
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const auto& s = stages[i];
      const std::string at = "stages[" + std::to_string(i) + "]";
      if (s.stage_index != i) {
        throw ConfigError(at + ".stage_index", "expected " + std::to_string(i) + " (stages must be ordered from 0)");
      }
      try {
        s.supervision().validate();
      } catch (const Error& e) {
        throw ConfigError(at + ".supervision", e.what());
      }
      if (!(s.learning_rate > 0.0)) throw ConfigError(at + ".learning_rate", "must be > 0");
      if (s.iterations == 0) throw ConfigError(at + ".iterations", "must be >= 1");
      if (s.batch_size == 0) throw ConfigError(at + ".batch_size", "must be >= 1");
      if (s.lora_rank == 0 || s.lora_rank > d_model) {
        throw ConfigError(at + ".lora_rank", "must lie in [1, d_model]");
      }
      if (!(s.lora_alpha > 0.0)) throw ConfigError(at + ".lora_alpha", "must be > 0");
    }
    if (eval.heldout_samples_per_task == 0) throw ConfigError("eval.heldout_samples_per_task", "must be >= 1");
    if (eval.duality_seeds == 0) throw ConfigError("eval.duality_seeds", "must be >= 1");
  }

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

// Reads the members of one JSON object and rejects keys nobody asked for.
class ObjectReader {
 public:
  ObjectReader(const ojson& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(label(), "expected an object");
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const ojson* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void read(const std::string& key, std::size_t& out) {
    if (const ojson* v = find(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(child(key), "expected a non-negative integer");
      out = v->get<std::size_t>();
    }
  }

  void read(const std::string& key, std::uint64_t& out, bool) {
    if (const ojson* v = find(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(child(key), "expected an unsigned 64-bit integer");
      out = v->get<std::uint64_t>();
    }
  }

  void read(const std::string& key, int& out) {
    if (const ojson* v = find(key)) {
      if (!v->is_number_integer()) throw ConfigError(child(key), "expected an integer");
      out = v->get<int>();
    }
  }

  void read(const std::string& key, double& out) {
    if (const ojson* v = find(key)) {
      if (!v->is_number()) throw ConfigError(child(key), "expected a number");
      out = v->get<double>();
    }
  }

  void read(const std::string& key, bool& out) {
    if (const ojson* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(child(key), "expected true or false");
      out = v->get<bool>();
    }
  }

  void read(const std::string& key, std::string& out) {
    if (const ojson* v = find(key)) {
      if (!v->is_string()) throw ConfigError(child(key), "expected a string");
      out = v->get<std::string>();
    }
  }

  void require(const std::string& key) {
    if (!j_.contains(key)) throw ConfigError(child(key), "missing required key");
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(child(it.key()), "unknown key");
  }

 private:
  std::string label() const { return path_.empty() ? "<root>" : path_; }

  const ojson& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline StageConfig parse_stage(const ojson& j, const std::string& path) {
  ObjectReader r(j, path);
  StageConfig s;
  r.require("stage_index");
  r.require("task");
  r.read("stage_index", s.stage_index);
  std::string task;
  r.read("task", task);
  try {
    s.task = parse_task(task);
  } catch (const Error& e) {
    throw ConfigError(r.child("task"), e.what());
  }
  if (const ojson* sup = r.find("supervision")) {
    ObjectReader rs(*sup, r.child("supervision"));
    rs.read("rho", s.rho);
    rs.read("alpha", s.alpha);
    rs.finish();
  }
  r.read("learning_rate", s.learning_rate);
  r.read("iterations", s.iterations);
  r.read("batch_size", s.batch_size);
  r.read("lora_rank", s.lora_rank);
  s.lora_alpha = 2.0 * static_cast<double>(s.lora_rank);
  r.read("lora_alpha", s.lora_alpha);
  r.finish();
  return s;
}

}  // namespace detail

inline RunConfig run_config_from_json(const ojson& j) {
  detail::ObjectReader r(j, "");
  RunConfig c;
  r.require("version");
  r.read("version", c.version);
  if (c.version != kConfigVersion) throw ConfigError("version", "unsupported version " + std::to_string(c.version));
  r.read("seed", c.seed, true);
  r.read("output_dir", c.output_dir);
  if (const ojson* m = r.find("model")) {
    detail::ObjectReader rm(*m, "model");
    rm.read("d_model", c.d_model);
    rm.read("n_blocks", c.n_blocks);
    rm.read("n_heads", c.n_heads);
    rm.finish();
  }
  if (const ojson* l = r.find("layout")) {
    detail::ObjectReader rl(*l, "layout");
    rl.read("grid_cells", c.layout.grid);
    rl.read("patch_cells", c.layout.patch);
    rl.read("text_tokens", c.layout.text_len);
    rl.finish();
  }
  if (const ojson* t = r.find("training")) {
    detail::ObjectReader rt(*t, "training");
    rt.read("checkpoint_every_steps", c.checkpoint_every_steps);
    rt.read("metrics_wall_time", c.metrics_wall_time);
    rt.finish();
  }
  if (const ojson* e = r.find("eval")) {
    detail::ObjectReader re(*e, "eval");
    re.read("heldout_samples_per_task", c.eval.heldout_samples_per_task);
    re.read("duality_seeds", c.eval.duality_seeds);
    re.finish();
  }
  if (const ojson* st = r.find("stages")) {
    if (!st->is_array()) throw ConfigError("stages", "expected an array");
    c.stages.clear();
    for (std::size_t i = 0; i < st->size(); ++i)
      c.stages.push_back(detail::parse_stage((*st)[i], "stages[" + std::to_string(i) + "]"));
  }
  r.finish();
  c.validate();
  return c;
}

inline RunConfig parse_run_config(std::string_view text) {
  ojson j;
  try {
    j = ojson::parse(text);
  } catch (const ojson::parse_error& e) {
    throw ConfigError("<root>", std::string("malformed JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

inline RunConfig load_run_config(const fs::path& p) { return parse_run_config(read_file(p)); }

inline ojson stage_to_json(const StageConfig& s) {
  ojson j;
  j["stage_index"] = s.stage_index;
  j["task"] = std::string(task_name(s.task));
  j["supervision"] = {{"rho", s.rho}, {"alpha", s.alpha}};
  j["learning_rate"] = s.learning_rate;
  j["iterations"] = s.iterations;
  j["batch_size"] = s.batch_size;
  j["lora_rank"] = s.lora_rank;
  j["lora_alpha"] = s.lora_alpha;
  return j;
}

inline ojson to_json(const RunConfig& c) {
  ojson j;
  j["version"] = c.version;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["model"] = {{"d_model", c.d_model}, {"n_blocks", c.n_blocks}, {"n_heads", c.n_heads}};
  j["layout"] = {{"grid_cells", c.layout.grid}, {"patch_cells", c.layout.patch}, {"text_tokens", c.layout.text_len}};
  j["training"] = {{"checkpoint_every_steps", c.checkpoint_every_steps}, {"metrics_wall_time", c.metrics_wall_time}};
  j["eval"] = {{"heldout_samples_per_task", c.eval.heldout_samples_per_task},
               {"duality_seeds", c.eval.duality_seeds}};
  j["stages"] = ojson::array();
  for (const auto& s : c.stages) j["stages"].push_back(stage_to_json(s));
  return j;
}

inline std::string serialize_run_config(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

}  // namespace prw

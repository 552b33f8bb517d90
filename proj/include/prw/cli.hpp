#pragma once

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "prw/checkpoint.hpp"
#include "prw/config.hpp"
#include "prw/dataset.hpp"
#include "prw/eval.hpp"
#include "prw/gradcheck_runner.hpp"
#include "prw/metrics.hpp"

namespace prw {

enum ExitCode : int { kExitOk = 0, kExitValidation = 1, kExitNumeric = 2, kExitIo = 3 };

// PRW_LOG=quiet silences progress lines on stderr; anything else keeps them.
inline bool log_enabled() {
  const char* v = std::getenv("PRW_LOG");
  return !(v && std::string(v) == "quiet");
}

struct CliOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string baseline = "staged";
  std::optional<std::size_t> stage;
  std::optional<std::size_t> samples;
  std::string study;
  std::string checkpoint;
  std::string against;
  std::string resume;
  std::string dataset;
  std::string task;
  std::string corrupt;
};

namespace cli_detail {

inline RunConfig resolve_config(const CliOptions& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (!o.out.empty()) c.output_dir = o.out;
  c.validate();
  return c;
}

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline fs::path stage_dir(const fs::path& out, std::size_t t) { return out / "checkpoints" / ("stage_" + std::to_string(t)); }

inline int cmd_train(const CliOptions& o, std::ostream& out, std::ostream& log) {
  RunConfig c = resolve_config(o);
  if (o.baseline != "staged" && o.baseline != "cotrain") {
    throw ValidationError("--baseline must be 'staged' or 'cotrain'");
  }
  const bool cotrain = o.baseline == "cotrain";
  std::vector<StageConfig> stages = c.stages;
  if (o.stage) {
    if (*o.stage >= stages.size()) throw ValidationError("--stage " + std::to_string(*o.stage) + " is beyond the configured stages");
    if (!cotrain) stages.resize(*o.stage + 1);
  }
  const fs::path dir = c.output_dir;
  ensure_dir(dir / "checkpoints");
  write_file(dir / "config.json", serialize_run_config(c));

  TrainState st = o.resume.empty()
                      ? make_train_state(c.model_config(), c.layout, cotrain ? TrainMode::CoTrain : TrainMode::Staged)
                      : load_checkpoint(o.resume);
  if ((st.mode == TrainMode::CoTrain) != cotrain) throw ValidationError("resume checkpoint was trained in the other mode");
  if (st.model.config != c.model_config()) throw ValidationError("resume checkpoint model does not match the config");

  MetricsWriter metrics(dir / "metrics.jsonl", c.metrics_wall_time, !o.resume.empty());
  TrainHooks hooks;
  hooks.on_metrics = [&](const MetricsRecord& r) { metrics.write(r); };
  hooks.checkpoint_every = c.checkpoint_every_steps;
  hooks.on_mid_checkpoint = [&](const TrainState& s) {
    const std::string name = (cotrain ? std::string("cotrain") : "stage_" + std::to_string(s.active->stage_index)) +
                             "_step_" + std::to_string(s.step);
    save_checkpoint(s, dir / "checkpoints" / name);
  };
  hooks.on_stage_end = [&](const TrainState& s) {
    const fs::path p = cotrain ? dir / "checkpoints" / "cotrain" : stage_dir(dir, s.completed.back().stage_index);
    save_checkpoint(s, p);
    if (log_enabled()) log << "checkpoint " << p.string() << " (global step " << s.global_step << ")\n";
  };
  const DataProvider data = synthetic_provider(c.layout);
  if (cotrain) {
    run_cotrain(st, stages, data, hooks);
  } else {
    run_curriculum(st, stages, data, hooks);
  }
  out << "trained " << (cotrain ? "cotrain" : "staged") << " model: pool size " << st.model.pool_size()
      << ", stages completed " << st.completed.size() << ", steps " << st.global_step << "\n";
  return kExitOk;
}

inline int cmd_gradcheck(const CliOptions& o, std::ostream& out) {
  RunConfig c = resolve_config(o);
  GradcheckOptions g;
  g.seed = c.seed;
  if (o.samples) g.coords_per_tensor = *o.samples;
  if (o.stage) g.n_experts = *o.stage + 1;
  const StageConfig& sc = c.stages.at(std::min(g.n_experts, c.stages.size()) - 1);
  g.rho = sc.rho;
  g.alpha = sc.alpha;
  g.task = sc.task;
  g.lora_rank = sc.lora_rank;
  if (!o.corrupt.empty()) {
    if (o.corrupt == "base") g.corrupt_group = ParamGroup::Base;
    else if (o.corrupt == "router") g.corrupt_group = ParamGroup::Router;
    else if (o.corrupt == "expert") g.corrupt_group = ParamGroup::Expert;
    else throw ValidationError("--corrupt must name base, router or expert");
  }
  const TokenLayout layout = gradcheck_layout();
  const ModelConfig mc = Model::derive_config(layout, c.d_model, c.n_blocks, c.n_heads, c.seed);
  GradcheckReport r = run_gradcheck(mc, layout, g);
  for (const auto& gr : r.groups) {
    out << "group " << group_name(gr.group) << ": max relative error " << gr.max_rel_error << " over " << gr.coords
        << " coordinates (worst " << gr.worst_param << ") " << (gr.max_rel_error < g.threshold ? "ok" : "FAIL") << "\n";
  }
  out << "veteran-loss gradient max |g| = " << r.veteran_grad_max_abs << " (alpha " << g.alpha << ")\n";
  if (!r.passed) {
    out << "gradcheck failed for:";
    for (const auto& f : r.failing) out << " " << f;
    out << "\n";
    return kExitNumeric;
  }
  out << "gradcheck passed\n";
  return kExitOk;
}

inline std::vector<TaskSample> samples_for(const CliOptions& o, const TokenLayout& layout, std::uint64_t seed) {
  if (!o.dataset.empty()) return load_dataset(o.dataset);
  if (o.task.empty()) throw ValidationError("route-stats needs --dataset FILE or --task NAME");
  const TaskId task = parse_task(o.task);
  std::vector<TaskSample> out;
  const std::size_t n = o.samples.value_or(64);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(stream_seed(seed, "route-stats", {static_cast<std::size_t>(task), i}));
    out.push_back(gen_stage_sample(task, rng, layout.task_layout()));
  }
  return out;
}

inline int cmd_route_stats(const CliOptions& o, std::ostream& out) {
  if (o.checkpoint.empty()) throw ValidationError("route-stats needs --checkpoint DIR");
  TrainState st = load_checkpoint(o.checkpoint);
  if (!o.config.empty()) {
    RunConfig c = resolve_config(o);
    if (st.model.config.d_model != c.d_model || st.model.config.n_blocks != c.n_blocks) {
      throw ValidationError("checkpoint model does not match the config");
    }
  }
  if (o.stage && st.model.pool_size() != *o.stage + 1) {
    throw ValidationError("pool-size mismatch: checkpoint holds " + std::to_string(st.model.pool_size()) +
                          " experts, stage " + std::to_string(*o.stage) + " expects " + std::to_string(*o.stage + 1));
  }
  const std::uint64_t seed = o.seed.value_or(st.seed);
  RouteStats rs = route_stats(st.model, samples_for(o, st.model.layout, seed), seed);
  out << "pool size " << rs.pool_size << "\n";
  out << "U_hard(expert " << rs.pool_size - 1 << ") " << fmt(rs.u_hard) << "\n";
  out << "U_soft(expert " << rs.pool_size - 1 << ") " << fmt(rs.u_soft) << "\n";
  for (std::size_t b = 0; b < rs.per_block_histogram.size(); ++b) {
    out << "block " << b << " histogram";
    for (double h : rs.per_block_histogram[b]) out << " " << fmt(h);
    out << "\n";
  }
  out << "overall histogram";
  for (double h : rs.overall_histogram) out << " " << fmt(h);
  out << "\n";
  for (auto k : rs.underused) out << "warning: expert " << k << " below 1% utilization\n";
  return kExitOk;
}

inline int cmd_synth(const CliOptions& o, std::ostream& out) {
  if (o.task.empty()) throw ValidationError("synth needs --task NAME");
  if (o.out.empty()) throw ValidationError("synth needs --out FILE");
  const TaskId task = parse_task(o.task);
  RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  const std::uint64_t seed = o.seed.value_or(c.seed);
  DatasetAudit a = write_dataset(o.out, task, o.samples.value_or(1000), seed, c.layout);
  out << "wrote " << a.records << " " << task_name(task) << " records to " << o.out << "\n";
  out << "audit: " << a.summary() << "\n";
  return kExitOk;
}

inline int cmd_verify(const CliOptions& o, std::ostream& out) {
  std::string target = !o.dataset.empty() ? o.dataset : o.checkpoint;
  if (target.empty()) throw ValidationError("verify needs --dataset FILE or --checkpoint DIR");
  if (fs::is_directory(target)) {
    TrainState st = load_checkpoint(target);
    out << "checkpoint ok: " << st.model.named_params().size() << " arrays, pool size " << st.model.pool_size() << "\n";
    return kExitOk;
  }
  VerifyReport r = verify_dataset(target);
  if (!r.ok) {
    out << "verify failed: " << r.first_error << "\n";
    return kExitValidation;
  }
  out << "dataset ok: " << r.records << " records\n";
  return kExitOk;
}

inline void print_heldout(std::ostream& out, const std::string& label, const HeldOutReport& r) {
  out << label;
  for (std::size_t t = 0; t < kNumTasks; ++t) out << " " << task_name(static_cast<TaskId>(t)) << "=" << fmt(r.per_task[t]);
  out << " combined=" << fmt(r.combined) << "\n";
}

inline int cmd_eval(const CliOptions& o, std::ostream& out, std::ostream& log) {
  RunConfig c = resolve_config(o);
  const HeldOutConfig hc{o.samples.value_or(c.eval.heldout_samples_per_task)};
  if (o.study == "duality-seeds") {
    const std::size_t n = c.eval.duality_seeds;
    DualityReport rep = run_duality_study(c, n, [&](const DualitySeedResult& r) {
      if (log_enabled()) log << "seed " << r.seed << " done\n";
    });
    for (const auto& r : rep.seeds) {
      out << "seed " << r.seed << ": staged " << fmt(r.staged.combined) << " cotrain " << fmt(r.cotrain.combined)
          << (r.staged_wins() ? " staged<=cotrain" : " staged>cotrain") << "\n";
    }
    out << "staged wins " << rep.staged_wins() << "/" << n << "\n";
    return kExitOk;
  }
  if (o.study == "sweep") {
    SweepReport rep = run_final_stage_sweep(c, {}, [&](const SweepPoint& p) {
      if (log_enabled()) log << p.axis << "=" << p.value << " done\n";
    });
    out << "axis value heldout_loss\n";
    for (const auto& p : rep.points) out << p.axis << " " << p.value << " " << fmt(p.loss) << "\n";
    out << "best alpha " << rep.best("alpha").value << ", best rank " << rep.best("rank").value << ", best rho "
        << rep.best("rho").value << " (reference optimum 0.8)\n";
    return kExitOk;
  }
  if (o.checkpoint.empty()) throw ValidationError("eval needs --checkpoint DIR");
  if ((o.study == "duality" || o.study == "compare") && o.against.empty()) {
    throw ValidationError("missing baseline checkpoint (--against DIR)");
  }
  if (!o.study.empty() && o.study != "duality" && o.study != "compare") {
    throw ValidationError("unknown study '" + o.study + "' (duality, compare, duality-seeds, sweep)");
  }
  const std::uint64_t eval_seed = heldout_seed(c.seed);
  TrainState a = load_checkpoint(o.checkpoint);
  HeldOutReport ra = evaluate_heldout(a.model, eval_seed, hc);
  print_heldout(out, o.study == "duality" ? "staged " : "model  ", ra);
  if (!o.against.empty()) {
    TrainState b = load_checkpoint(o.against);
    HeldOutReport rb = evaluate_heldout(b.model, eval_seed, hc);
    print_heldout(out, o.study == "duality" ? "cotrain" : "against", rb);
    out << "difference (first - second) combined=" << fmt(ra.combined - rb.combined) << "\n";
  }
  return kExitOk;
}

}  // namespace cli_detail

// Entry point of the prw tool. Returns the process exit code.
inline int run_cli(int argc, char** argv, std::ostream& out = std::cout, std::ostream& log = std::cerr) {
  CLI::App app{"Progressive routed-expert training harness"};
  app.require_subcommand(1);
  CliOptions o;
  auto common = [&](CLI::App* s) {
    s->add_option("--config", o.config, "run config (JSON)");
    s->add_option("--seed", o.seed, "master seed override");
    s->add_option("--out", o.out, "output directory or file");
  };
  auto* train = app.add_subcommand("train", "run the staged curriculum or the co-training baseline");
  common(train);
  train->add_option("--baseline", o.baseline, "staged or cotrain")->check(CLI::IsMember({"staged", "cotrain"}));
  train->add_option("--stage", o.stage, "stop after this stage");
  train->add_option("--resume", o.resume, "checkpoint directory to resume from");

  auto* grad = app.add_subcommand("gradcheck", "compare analytic and finite-difference gradients");
  common(grad);
  grad->add_option("--samples", o.samples, "probed coordinates per parameter array");
  grad->add_option("--stage", o.stage, "check the model as of this stage (pool size stage+1)");
  grad->add_option("--corrupt", o.corrupt, "")->group("");  // test fixture

  auto* rs = app.add_subcommand("route-stats", "inference-mode routing statistics of a checkpoint");
  common(rs);
  rs->add_option("--checkpoint", o.checkpoint, "checkpoint directory")->required();
  rs->add_option("--dataset", o.dataset, "dataset dump to route");
  rs->add_option("--task", o.task, "synthesize samples of this task instead");
  rs->add_option("--samples", o.samples, "number of synthesized samples");
  rs->add_option("--stage", o.stage, "expected stage of the checkpoint");

  auto* syn = app.add_subcommand("synth", "write a synthetic dataset dump and print its audit");
  common(syn);
  syn->add_option("--task", o.task, "task id")->required();
  syn->add_option("--samples", o.samples, "record count");

  auto* ev = app.add_subcommand("eval", "held-out evaluation and studies");
  common(ev);
  ev->add_option("--study", o.study, "duality, compare, duality-seeds or sweep");
  ev->add_option("--checkpoint", o.checkpoint, "checkpoint to evaluate (staged model for duality)");
  ev->add_option("--against", o.against, "second checkpoint (co-trained baseline for duality)");
  ev->add_option("--samples", o.samples, "held-out samples per task");

  auto* ver = app.add_subcommand("verify", "verify a dataset dump or a checkpoint directory");
  ver->add_option("--dataset", o.dataset, "dataset dump");
  ver->add_option("--checkpoint", o.checkpoint, "checkpoint directory");
  ver->add_option("path", o.dataset, "dataset dump or checkpoint directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    log << "error: " << e.what() << "\n";
    return kExitValidation;
  }

  try {
    if (*train) return cli_detail::cmd_train(o, out, log);
    if (*grad) return cli_detail::cmd_gradcheck(o, out);
    if (*rs) return cli_detail::cmd_route_stats(o, out);
    if (*syn) return cli_detail::cmd_synth(o, out);
    if (*ev) return cli_detail::cmd_eval(o, out, log);
    if (*ver) return cli_detail::cmd_verify(o, out);
  } catch (const IoError& e) {
    log << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NonFiniteError& e) {
    log << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return kExitValidation;
}

}  // namespace prw

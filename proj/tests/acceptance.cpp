// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--only 1,2,...] [--strict] [--report FILE]
//
// Exit status is 0 once every selected criterion has been evaluated; with
// --strict it is the number of failing criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "prw/checkpoint.hpp"
#include "prw/cli.hpp"
#include "prw/config.hpp"
#include "prw/curriculum.hpp"
#include "prw/dataset.hpp"
#include "prw/eval.hpp"
#include "prw/gradcheck_runner.hpp"
#include "prw/hash.hpp"
#include "prw/metrics.hpp"

namespace {

using namespace prw;

const fs::path kToy = fs::path(PRW_SOURCE_DIR) / "configs" / "toy.json";

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string num(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, double sd = 1.0) {
  Tensor t({r, c});
  for (auto& v : t.data) v = sd * standard_normal(rng);
  return t;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("prw_acceptance_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::map<std::string, std::string> dir_bytes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_file(e.path());
  return out;
}

TrainState toy_state(const RunConfig& c) { return make_train_state(c.model_config(), c.layout); }

std::vector<FlowSample> random_inputs(std::size_t n, std::uint64_t seed, const TokenLayout& layout) {
  std::vector<FlowSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    Rng r = make_stream(seed, "data", {i});
    out.push_back(make_flow_sample(gen_stage_sample(static_cast<TaskId>(i % kNumTasks), r, layout.task_layout()), layout, r));
  }
  return out;
}

Tensor predict(Model& m, const FlowSample& f) {
  m.set_noise(false);
  Tape tape;
  return forward(tape, m, f.input, nullptr).velocity.value();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

// 1. Zero up-projections make the PRW block equal the baseline block exactly.
Verdict identity_invariant() {
  Rng rng(101);
  const std::size_t d = 16;
  std::size_t mismatches = 0;
  for (int rep = 0; rep < 100; ++rep) {
    BlockParams b = BlockParams::create(d, rng);
    for (std::size_t k = 0; k < 3; ++k) {
      b.pool.append(LowRankExpert::create(d, 4, 8.0, rng));
      b.router.add_expert_column();
    }
    for (auto* t : {&b.router.w_r, &b.router.w_n})
      for (auto& v : t->data) v = standard_normal(rng);
    Tensor x = random_tensor(16, d, rng), y = random_tensor(30, d, rng), h = random_tensor(16, d, rng);
    Tape tape;
    Rng noise(static_cast<std::uint64_t>(rep));
    BlockResult prw = prw_block_forward({tape.constant(x), tape.constant(y), tape.constant(h)}, b, 2, &noise);
    LatentVars base = baseline_block_forward({tape.constant(x), tape.constant(y), tape.constant(h)}, b, 2);
    if (!prw.out.x.value().same_values(base.x.value()) || !prw.out.y.value().same_values(base.y.value()) ||
        !prw.out.h.value().same_values(base.h.value())) {
      ++mismatches;
    }
  }
  return {mismatches == 0, std::to_string(mismatches) + " of 100 inputs differ from the baseline block (tolerance 0)"};
}

// 2. Analytic vs central-difference gradients, every group, d = 16.
Verdict gradient_suite() {
  RunConfig c = load_run_config(kToy);
  const TokenLayout l = gradcheck_layout();
  bool pass = true;
  std::string detail;
  for (std::size_t n : {1, 3, 5}) {
    GradcheckOptions g;
    g.seed = c.seed;
    g.n_experts = n;
    const StageConfig& sc = c.stages.at(n - 1);
    g.rho = sc.rho;
    g.alpha = sc.alpha;
    g.task = sc.task;
    GradcheckReport r = run_gradcheck(Model::derive_config(l, c.d_model, c.n_blocks, c.n_heads, c.seed), l, g);
    pass = pass && r.passed;
    detail += "N=" + std::to_string(n) + ":";
    for (const auto& gr : r.groups) detail += " " + std::string(group_name(gr.group)) + " " + num(gr.max_rel_error);
    detail += "; ";
  }
  return {pass, detail + "threshold 1e-4, h = 1e-5"};
}

// 3. One expert per token (ablation) and bit-deterministic inference.
Verdict sparsity_determinism() {
  Rng rng(103);
  const std::size_t d = 16, N = 4, L = 12;
  std::size_t violations = 0;
  for (int rep = 0; rep < 100; ++rep) {
    ExpertPool pool;
    for (std::size_t k = 0; k < N; ++k) {
      LowRankExpert e = LowRankExpert::create(d, 4, 8.0, rng);
      for (auto* t : {&e.b_k, &e.b_v})
        for (auto& v : t->data) v = 0.3 * standard_normal(rng);
      pool.append(std::move(e));
    }
    Tensor h = random_tensor(L, d, rng), wk = random_tensor(d, d, rng), wv = random_tensor(d, d, rng);
    RoutingDecision dec;
    dec.logits = random_tensor(L, N, rng, 2.0);
    select_expert(dec);
    auto kv_of = [&](ExpertPool& p) {
      Tape t;
      KV kv = adapt_kv(t.constant(h), p, dec, t.constant(dec.gate_probs), t.constant(wk), t.constant(wv));
      return std::make_pair(kv.k.value(), kv.v.value());
    };
    auto full = kv_of(pool);
    for (std::size_t k = 0; k < N; ++k) {
      ExpertPool ab = pool;
      ab.experts[k].b_k = Tensor::zeros(4, d);
      ab.experts[k].b_v = Tensor::zeros(4, d);
      auto cut = kv_of(ab);
      for (std::size_t i = 0; i < L; ++i) {
        bool row_same = true;
        for (std::size_t c = 0; c < d; ++c)
          row_same = row_same && cut.first.at(i, c) == full.first.at(i, c) && cut.second.at(i, c) == full.second.at(i, c);
        // Row i may change only when k is token i's selected expert, and then must.
        if (row_same == (dec.selected[i] == k)) ++violations;
      }
    }
  }
  RunConfig c = load_run_config(kToy);
  TrainState st = toy_state(c);
  for (std::size_t t = 0; t < 3; ++t) grow_expert_pool(st, c.stages[t]);
  for (auto& b : st.model.blocks) {
    for (auto& e : b.pool.experts)
      for (auto* t : {&e.b_k, &e.b_v})
        for (auto& v : t->data) v = 0.3 * standard_normal(rng);
    for (auto* t : {&b.router.w_r, &b.router.w_n})
      for (auto& v : t->data) v = standard_normal(rng);
  }
  std::size_t nondeterministic = 0;
  for (const auto& f : random_inputs(50, 103, c.layout)) {
    Tensor a = predict(st.model, f), b = predict(st.model, f);
    if (!a.same_values(b)) ++nondeterministic;
  }
  return {violations == 0 && nondeterministic == 0,
          "ablation violations " + std::to_string(violations) + " over 100 x " + std::to_string(N * L) +
              " (expert, token) pairs; non-identical reruns " + std::to_string(nondeterministic) + " of 50"};
}

// 4. Frozen arrays keep their bytes through every stage.
Verdict frozen_conservation() {
  RunConfig c = load_run_config(kToy);
  TrainState st = toy_state(c);
  const DataProvider data = synthetic_provider(c.layout);
  std::size_t checked = 0, changed = 0;
  for (auto sc : c.stages) {
    sc.iterations = std::min<std::size_t>(sc.iterations, 300);
    grow_expert_pool(st, sc);
    std::map<std::string, std::string> before;
    for (auto& p : st.model.named_params())
      if (!p.tensor->requires_grad) before[p.name] = sha256_hex(f64_le_bytes(p.tensor->data));
    train_stage(st, sc, data);
    for (auto& p : st.model.named_params()) {
      auto it = before.find(p.name);
      if (it == before.end()) continue;
      ++checked;
      if (sha256_hex(f64_le_bytes(p.tensor->data)) != it->second) ++changed;
    }
  }
  return {changed == 0 && checked > 0, std::to_string(checked) + " frozen array hashes checked over 5 stages (300 steps each), " +
                                           std::to_string(changed) + " changed"};
}

// 5. Router-only training reaches the target density.
Verdict veteran_gate() {
  TokenLayout layout;
  TrainState st = make_train_state(Model::derive_config(layout, 16, 2, 2, 5), layout);
  for (std::size_t t = 0; t < 3; ++t) {
    StageConfig sc;
    sc.stage_index = t;
    grow_expert_pool(st, sc);
  }
  std::vector<FlowSample> inputs;
  for (std::size_t i = 0; i < 4; ++i) {
    Rng r = make_stream(5, "data", {42, i});
    inputs.push_back(make_flow_sample(gen_stage_sample(TaskId::Grounding, r, layout.task_layout()), layout, r));
  }
  RouterOnlyResult r = train_router_only(st, SupervisionConfig{0.8, 0.5}, inputs, 2000, 1e-3);
  return {std::fabs(r.final_soft_usage - 0.8) <= 0.05,
          "soft usage " + num(r.final_soft_usage) + " after 2000 steps (target 0.8 +/- 0.05, N=3, d=16); hard usage " +
              num(r.final_usage_ratio)};
}

RoutingTrace one_hot_trace(const std::vector<std::vector<std::size_t>>& sel, std::size_t n, std::size_t stage_expert) {
  RoutingTrace t;
  t.stage_expert = stage_expert;
  for (const auto& block : sel) {
    BlockRouting br;
    br.decision.gate_probs = Tensor({block.size(), n});
    for (std::size_t i = 0; i < block.size(); ++i) br.decision.gate_probs.at(i, block[i]) = 1.0;
    select_expert(br.decision);
    t.per_block.push_back(br);
  }
  return t;
}

// 6. Tabulated usage / veteran / total loss values.
Verdict unit_values() {
  struct Row {
    std::string name;
    double got, want;
  };
  const SupervisionConfig s1{0.8, 0.5}, s0{1.0, 0.0};
  std::vector<Row> rows{
      {"U(all N-1)", usage_ratio(one_hot_trace({{2, 2}, {2, 2}}, 3, 2)), 1.0},
      {"U(half N-1)", usage_ratio(one_hot_trace({{2, 0}, {1, 2}}, 3, 2)), 0.5},
      {"U(6 of 8)", usage_ratio(one_hot_trace({{3, 3}, {3, 0}, {3, 3}, {1, 3}}, 4, 3)), 0.75},
      {"Lvet(0.6; 0.8, 0.5)", veteran_loss(0.6, s1), 0.1},
      {"Lvet(0.37; 1, 0)", veteran_loss(0.37, s0), 0.0},
      {"Lvet(u = rho)", veteran_loss(0.8, s1), 0.0},
      {"Ltotal(0.25, 0.1)", total_loss(0.25, 0.1), 0.35},
      {"Ltotal(x, 0)", total_loss(0.42, veteran_loss(0.9, s0)), 0.42},
  };
  bool pass = true;
  std::string detail;
  for (const auto& r : rows) {
    // Within 4 ulps of the decimal value; the decimal inputs are not exact binary fractions.
    const bool ok = std::fabs(r.got - r.want) <= 4.0 * std::numeric_limits<double>::epsilon() * std::fabs(r.want);
    pass = pass && ok;
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s=%.17g%s; ", r.name.c_str(), r.got, r.got == r.want ? "" : ok ? " (rounding)" : " (WRONG)");
    detail += buf;
  }
  return {pass, detail};
}

// 7. Mask pipeline audit over 1e5 inpainting samples.
Verdict mask_audit() {
  DatasetAudit a;
  const TaskLayout tl = TokenLayout{}.task_layout();
  for (std::size_t i = 0; i < 100000; ++i) {
    Rng rng(sample_seed(2024, TaskId::MaskInpainting, i));
    a.add(gen_stage_sample(TaskId::MaskInpainting, rng, tl), tl.mask.iou_threshold);
  }
  const bool mix = std::fabs(a.kind_share(MaskKind::Random) - 0.2) <= 0.01 &&
                   std::fabs(a.kind_share(MaskKind::ObjectShaped) - 0.4) <= 0.01 &&
                   std::fabs(a.kind_share(MaskKind::IrregularObject) - 0.4) <= 0.01;
  return {mix && a.records == 100000 && a.masks() == 100000 && a.random_iou_violations == 0 &&
              a.polygon_vertex_violations == 0 && a.non_simple_polygons == 0,
          a.summary()};
}

// 8. Growth preservation, measured where growth happens in the curriculum.
Verdict growth_preservation() {
  RunConfig c = load_run_config(kToy);
  TrainState st = toy_state(c);
  const DataProvider data = synthetic_provider(c.layout);
  auto inputs = random_inputs(100, 108, c.layout);
  double worst_trained = 0.0, worst_untrained = 0.0;
  {
    TrainState fresh = toy_state(c);
    grow_expert_pool(fresh, c.stages[0]);
    for (std::size_t t = 1; t < 5; ++t) {
      std::vector<Tensor> before;
      for (const auto& f : inputs) before.push_back(predict(fresh.model, f));
      grow_expert_pool(fresh, c.stages[t]);
      for (std::size_t i = 0; i < inputs.size(); ++i)
        worst_untrained = std::max(worst_untrained, max_abs_diff(before[i], predict(fresh.model, inputs[i])));
    }
  }
  std::string per_stage;
  for (std::size_t t = 0; t < 4; ++t) {
    StageConfig sc = c.stages[t];
    sc.iterations = std::min<std::size_t>(sc.iterations, 300);
    if (t == 0) grow_expert_pool(st, sc);
    train_stage(st, sc, data);
    std::vector<Tensor> before;
    for (const auto& f : inputs) before.push_back(predict(st.model, f));
    grow_expert_pool(st, c.stages[t + 1]);
    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) worst = std::max(worst, max_abs_diff(before[i], predict(st.model, inputs[i])));
    per_stage += " " + num(worst);
    worst_trained = std::max(worst_trained, worst);
  }
  return {worst_trained < 1e-12 && worst_untrained < 1e-12,
          "max |diff| after growth: trained veterans" + per_stage + " (N=1..4 -> N+1, 300 steps per stage); untrained experts " +
              num(worst_untrained) + "; tolerance 1e-12"};
}

// 9. Staged vs co-training on the toy suite, plus the rho sweep.
Verdict duality(std::string& sweep_line) {
  RunConfig c = load_run_config(kToy);
  DualityReport rep = run_duality_study(c, 5, [](const DualitySeedResult& r) {
    std::cerr << "  seed " << r.seed << ": staged " << num(r.staged.combined) << " cotrain " << num(r.cotrain.combined) << "\n";
  });
  std::string detail = "staged <= cotrain on " + std::to_string(rep.staged_wins()) + "/5 seeds (need >= 4);";
  for (const auto& r : rep.seeds) detail += " " + num(r.staged.combined) + " vs " + num(r.cotrain.combined) + ";";
  SweepGrid grid;
  grid.alpha.clear();
  grid.rank.clear();
  SweepReport sweep = run_final_stage_sweep(c, grid);
  sweep_line = "rho sweep (final-stage held-out loss):";
  for (const auto& p : sweep.points) sweep_line += " " + num(p.value) + "=" + num(p.loss);
  sweep_line += "; best rho " + num(sweep.best("rho").value) + ", reference optimum 0.8";
  return {rep.staged_wins() >= 4, detail};
}

// 10. Two full toy runs are byte-identical.
Verdict end_to_end_determinism() {
  const fs::path dir = scratch("determinism");
  std::vector<std::string> codes;
  for (const char* run : {"a", "b"}) {
    std::vector<std::string> args{"prw", "train", "--config", kToy.string(), "--out", (dir / run).string()};
    std::vector<char*> argv;
    for (auto& s : args) argv.push_back(s.data());
    std::ostringstream out, err;
    codes.push_back(std::to_string(run_cli(static_cast<int>(argv.size()), argv.data(), out, err)));
  }
  if (codes[0] != "0" || codes[1] != "0") return {false, "train exited " + codes[0] + " / " + codes[1]};
  const bool metrics = read_file(dir / "a" / "metrics.jsonl") == read_file(dir / "b" / "metrics.jsonl");
  const bool final_ckpt = dir_bytes(dir / "a" / "checkpoints" / "stage_4") == dir_bytes(dir / "b" / "checkpoints" / "stage_4");
  const bool all_ckpt = dir_bytes(dir / "a" / "checkpoints") == dir_bytes(dir / "b" / "checkpoints");
  const std::string digest = sha256_hex(read_file(dir / "a" / "metrics.jsonl")).substr(0, 16);
  fs::remove_all(dir);
  return {metrics && final_ckpt, std::string("metrics ") + (metrics ? "identical" : "DIFFER") + " (sha256 " + digest +
                                     "...), final checkpoint " + (final_ckpt ? "identical" : "DIFFERS") +
                                     ", all stage checkpoints " + (all_ckpt ? "identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  bool strict = false;
  std::string report_path;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--strict") {
      strict = true;
    } else if (a == "--report" && i + 1 < argc) {
      report_path = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
    } else {
      std::cerr << "usage: acceptance [--only 1,2,...] [--strict] [--report FILE]\n";
      return 64;
    }
  }
  std::ofstream report;
  if (!report_path.empty()) {
    report.open(report_path);
    if (!report) {
      std::cerr << "cannot write " << report_path << "\n";
      return 3;
    }
  }
  auto emit = [&](const std::string& line) {
    std::cout << line << std::endl;
    if (report) report << line << std::endl;
  };
  std::string sweep_line;
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"identity invariant", identity_invariant},
      {"gradient suite", gradient_suite},
      {"sparsity and determinism", sparsity_determinism},
      {"frozen-veteran conservation", frozen_conservation},
      {"veteran-gate efficacy", veteran_gate},
      {"usage / veteran / total loss values", unit_values},
      {"mask pipeline audit", mask_audit},
      {"growth preservation", growth_preservation},
      {"duality study", [&] { return duality(sweep_line); }},
      {"end-to-end determinism", end_to_end_determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += v.pass ? 0 : 1;
    char t[32];
    std::snprintf(t, sizeof t, "%.1f s", secs);
    emit("criterion " + std::to_string(id) + " " + (v.pass ? "PASS" : "FAIL") + " " + criteria[i].first + ": " + v.detail +
         " [" + t + "]");
    if (id == 9 && !sweep_line.empty()) emit("criterion 9 report " + sweep_line);
  }
  emit("summary: " + std::to_string(failures) + " failing criteria");
  return strict ? failures : 0;
}

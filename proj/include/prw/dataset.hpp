#pragma once

#include <array>
#include <fstream>
#include <string>
#include <vector>

#include "prw/config.hpp"
#include "prw/hash.hpp"
#include "prw/io.hpp"
#include "prw/synth.hpp"

namespace prw {

inline constexpr int kDatasetVersion = 1;

inline std::uint64_t sample_seed(std::uint64_t master, TaskId task, std::size_t index) {
  return stream_seed(master, "data", {static_cast<std::size_t>(task), index});
}

// True when every cell whose target color differs from the source color lies
// on the sample's documented support.
inline bool diff_within_support(const TaskSample& s) {
  const std::size_t H = s.target.shape[0], W = s.target.shape[1], C = s.target.shape[2];
  if (s.task == TaskId::Controllable || s.task == TaskId::Customized) return true;  // sources are not scenes
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      bool differs = false;
      for (std::size_t k = 0; k < C; ++k)
        differs = differs || s.target.data[(r * W + c) * C + k] != s.source.data[(r * W + c) * (C + 1) + k];
      if (differs && !s.support.at(r, c)) return false;
    }
  return true;
}

struct DatasetAudit {
  std::size_t records = 0;
  std::array<std::size_t, 3> mask_kinds{};  // random, object-shaped, irregular
  std::size_t random_iou_violations = 0;    // accepted random masks with IoU > threshold
  double max_random_iou = 0.0;
  std::size_t polygon_vertex_violations = 0;
  std::size_t non_simple_polygons = 0;
  std::size_t support_violations = 0;

  void add(const TaskSample& s, double iou_threshold = 0.3) {
    ++records;
    if (!diff_within_support(s)) ++support_violations;
    if (!s.mask) return;
    const auto& m = *s.mask;
    ++mask_kinds[static_cast<std::size_t>(m.kind)];
    if (m.kind == MaskKind::Random) {
      max_random_iou = std::max(max_random_iou, m.max_object_iou);
      if (m.max_object_iou > iou_threshold) ++random_iou_violations;
    }
    if (m.kind == MaskKind::IrregularObject) {
      if (!m.polygon || m.polygon->size() != 20) ++polygon_vertex_violations;
      if (m.polygon && !is_simple_polygon(*m.polygon)) ++non_simple_polygons;
    }
  }

  std::size_t masks() const { return mask_kinds[0] + mask_kinds[1] + mask_kinds[2]; }

  double kind_share(MaskKind k) const {
    return masks() ? static_cast<double>(mask_kinds[static_cast<std::size_t>(k)]) / static_cast<double>(masks()) : 0.0;
  }

  std::string summary() const {
    std::string s = "records " + std::to_string(records);
    if (masks()) {
      char buf[256];
      std::snprintf(buf, sizeof buf,
                    "; mask kinds random %.4f object %.4f irregular %.4f; max random-mask IoU %.4f; IoU violations %zu;"
                    " polygon vertex violations %zu; non-simple polygons %zu",
                    kind_share(MaskKind::Random), kind_share(MaskKind::ObjectShaped), kind_share(MaskKind::IrregularObject),
                    max_random_iou, random_iou_violations, polygon_vertex_violations, non_simple_polygons);
      s += buf;
    }
    s += "; support violations " + std::to_string(support_violations);
    return s;
  }
};

namespace detail {

inline ojson encode_array(const Shape& shape, const std::vector<double>& values) {
  return {{"shape", shape}, {"data", base64_encode(f64_le_bytes(values))}};
}

inline std::vector<double> grid_values(const BoolGrid& g) { return {g.cells.begin(), g.cells.end()}; }

}  // namespace detail

// One dataset record without its hash field.
inline ojson sample_record(const TaskSample& s, std::size_t index, std::uint64_t seed) {
  ojson r;
  r["index"] = index;
  r["task"] = std::string(task_name(s.task));
  r["seed"] = seed;
  ojson a;
  a["source"] = detail::encode_array(s.source.shape, s.source.data);
  a["text"] = detail::encode_array({s.text.size()}, std::vector<double>(s.text.begin(), s.text.end()));
  a["control"] = detail::encode_array(s.control.shape, s.control.data);
  a["target"] = detail::encode_array(s.target.shape, s.target.data);
  a["support"] = detail::encode_array({s.support.height, s.support.width}, detail::grid_values(s.support));
  if (s.mask) a["mask"] = detail::encode_array({s.mask->bitmap.height, s.mask->bitmap.width}, detail::grid_values(s.mask->bitmap));
  r["arrays"] = a;
  if (s.mask) {
    r["mask_kind"] = std::string(mask_kind_name(s.mask->kind));
    r["polygon_vertices"] = s.mask->polygon ? s.mask->polygon->size() : 0;
  }
  return r;
}

inline std::string record_line(const TaskSample& s, std::size_t index, std::uint64_t seed) {
  ojson r = sample_record(s, index, seed);
  r["sha256"] = sha256_hex(r.dump());
  return r.dump();
}

inline ojson dataset_header(TaskId task, std::size_t count, std::uint64_t master_seed, const TokenLayout& layout) {
  return {{"format", "prw-dataset"},
          {"version", kDatasetVersion},
          {"task", std::string(task_name(task))},
          {"count", count},
          {"master_seed", master_seed},
          {"layout", {{"grid_cells", layout.grid}, {"patch_cells", layout.patch}, {"text_tokens", layout.text_len}}}};
}

// Writes a header line and `count` records; returns the audit of what was written.
inline DatasetAudit write_dataset(const fs::path& path, TaskId task, std::size_t count, std::uint64_t master_seed,
                                  const TokenLayout& layout = {}) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << dataset_header(task, count, master_seed, layout).dump() << '\n';
  DatasetAudit audit;
  const TaskLayout tl = layout.task_layout();
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t seed = sample_seed(master_seed, task, i);
    Rng rng(seed);
    TaskSample s = gen_stage_sample(task, rng, tl);
    audit.add(s, tl.mask.iou_threshold);
    out << record_line(s, i, seed) << '\n';
  }
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
  return audit;
}

struct VerifyReport {
  std::size_t records = 0;
  bool ok = true;
  std::string first_error;
};

// Checks every record hash and re-derives each record from its seed.
inline VerifyReport verify_dataset(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  VerifyReport rep;
  auto fail = [&](const std::string& why) {
    rep.ok = false;
    rep.first_error = why;
    return rep;
  };
  std::string line;
  if (!std::getline(in, line)) return fail("missing header line");
  ojson header;
  TaskId task;
  TokenLayout layout;
  std::size_t count = 0;
  try {
    header = ojson::parse(line);
    if (header.at("format") != "prw-dataset" || header.at("version") != kDatasetVersion) return fail("unsupported header");
    task = parse_task(header.at("task").get<std::string>());
    count = header.at("count");
    layout.grid = header.at("layout").at("grid_cells");
    layout.patch = header.at("layout").at("patch_cells");
    layout.text_len = header.at("layout").at("text_tokens");
  } catch (const std::exception& e) {
    return fail(std::string("bad header: ") + e.what());
  }
  const TaskLayout tl = layout.task_layout();
  while (std::getline(in, line)) {
    const std::size_t i = rep.records;
    const std::string where = "record " + std::to_string(i);
    ojson r;
    try {
      r = ojson::parse(line);
    } catch (const ojson::parse_error&) {
      return fail(where + ": not valid JSON");
    }
    if (!r.contains("sha256") || !r["sha256"].is_string()) return fail(where + ": missing hash");
    const std::string stated = r["sha256"];
    r.erase("sha256");
    if (sha256_hex(r.dump()) != stated) return fail(where + ": hash mismatch");
    if (!r.contains("index") || r["index"] != i) return fail(where + ": out-of-order index");
    if (!r.contains("seed") || !r["seed"].is_number_unsigned()) return fail(where + ": missing seed");
    const std::uint64_t seed = r["seed"];
    Rng rng(seed);
    ojson expect = sample_record(gen_stage_sample(task, rng, tl), i, seed);
    if (expect != r) return fail(where + ": content does not match regeneration from its seed");
    ++rep.records;
  }
  if (rep.records != count) return fail("header announces " + std::to_string(count) + " records, file holds " + std::to_string(rep.records));
  return rep;
}

namespace detail {

inline Tensor decode_array(const ojson& a) {
  Tensor t(a.at("shape").get<Shape>());
  auto values = f64_from_le_bytes(base64_decode(a.at("data").get<std::string>()));
  if (values.size() != t.size()) throw ValidationError("dataset: array payload does not match its shape");
  t.data = std::move(values);
  return t;
}

inline BoolGrid decode_grid(const ojson& a) {
  Tensor t = decode_array(a);
  if (t.rank() != 2) throw ValidationError("dataset: grid arrays must be 2-D");
  BoolGrid g(t.shape[0], t.shape[1]);
  for (std::size_t i = 0; i < t.size(); ++i) g.cells[i] = t.data[i] != 0.0 ? 1 : 0;
  return g;
}

}  // namespace detail

// Decodes every record of a dataset dump. Hashes are checked; regeneration is not.
inline std::vector<TaskSample> load_dataset(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("dataset: missing header line");
  std::vector<TaskSample> out;
  while (std::getline(in, line)) {
    const std::string where = "dataset record " + std::to_string(out.size());
    try {
      ojson r = ojson::parse(line);
      const std::string stated = r.at("sha256");
      r.erase("sha256");
      if (sha256_hex(r.dump()) != stated) throw ValidationError(where + ": hash mismatch");
      const auto& a = r.at("arrays");
      TaskSample s;
      s.task = parse_task(r.at("task").get<std::string>());
      s.source = detail::decode_array(a.at("source"));
      for (double v : detail::decode_array(a.at("text")).data) s.text.push_back(static_cast<int>(v));
      s.control = detail::decode_array(a.at("control"));
      s.target = detail::decode_array(a.at("target"));
      s.support = detail::decode_grid(a.at("support"));
      if (a.contains("mask")) {
        MaskSpec m;
        m.bitmap = detail::decode_grid(a.at("mask"));
        const std::string kind = r.at("mask_kind");
        for (MaskKind k : {MaskKind::Random, MaskKind::ObjectShaped, MaskKind::IrregularObject})
          if (mask_kind_name(k) == kind) m.kind = k;
        s.mask = std::move(m);
      }
      out.push_back(std::move(s));
    } catch (const ojson::exception& e) {
      throw ValidationError(where + ": " + e.what());
    }
  }
  return out;
}

}  // namespace prw

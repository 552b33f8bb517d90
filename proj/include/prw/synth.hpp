#pragma once

// Procedural grid scenes and the five curriculum task generators: mask
// inpainting (random / object-shaped / irregular Bezier masks), referring
// grounding, edge-conditioned generation, subject customization and
// instruction editing.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "prw/rng.hpp"
#include "prw/tensor.hpp"

namespace prw {

enum class TaskId { MaskInpainting = 0, Grounding = 1, Controllable = 2, Customized = 3, InstructionEdit = 4 };

inline constexpr std::size_t kNumTasks = 5;

inline std::string_view task_name(TaskId t) {
  switch (t) {
    case TaskId::MaskInpainting: return "mask_inpainting";
    case TaskId::Grounding: return "grounding";
    case TaskId::Controllable: return "controllable";
    case TaskId::Customized: return "customized";
    case TaskId::InstructionEdit: return "instruction_edit";
  }
  return "?";
}

inline TaskId parse_task(std::string_view s) {
  for (std::size_t i = 0; i < kNumTasks; ++i)
    if (task_name(static_cast<TaskId>(i)) == s) return static_cast<TaskId>(i);
  throw Error("unknown task id '" + std::string(s) + "'");
}

// Condition-token vocabulary.
namespace vocab {
inline constexpr int kPad = 0;
inline constexpr int kTask = 1;      // + TaskId
inline constexpr int kMode = 6;      // + GroundingMode
inline constexpr int kClass = 9;     // + class id (3)
inline constexpr int kColor = 12;    // + object color id (6)
inline constexpr int kAnnot = 18;    // + annotation color id (3)
inline constexpr int kVerb = 21;     // + EditVerb
inline constexpr int kPos = 24;      // + 4x4 position bin
inline constexpr int kDir = 40;      // + direction (up, down, left, right)
inline constexpr int kSize = 44;
}  // namespace vocab

inline constexpr int kNumClasses = 3;  // rectangle, cross, disc
inline constexpr int kNumColors = 6;
inline constexpr int kNumAnnotColors = 3;

using Color = std::array<double, 3>;

inline const std::array<Color, kNumColors>& object_palette() {
  static const std::array<Color, kNumColors> p{{{0.9, 0.2, 0.2},
                                                {0.2, 0.8, 0.3},
                                                {0.2, 0.3, 0.9},
                                                {0.9, 0.85, 0.2},
                                                {0.8, 0.3, 0.8},
                                                {0.2, 0.8, 0.85}}};
  return p;
}

inline const std::array<Color, kNumAnnotColors>& annotation_palette() {
  static const std::array<Color, kNumAnnotColors> p{{{1.0, 1.0, 1.0}, {0.0, 0.0, 0.0}, {1.0, 0.5, 0.0}}};
  return p;
}

inline const std::array<Color, 4>& background_palette() {
  static const std::array<Color, 4> p{{{0.45, 0.4, 0.35}, {0.35, 0.4, 0.45}, {0.5, 0.5, 0.45}, {0.4, 0.45, 0.4}}};
  return p;
}

struct BoolGrid {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> cells;

  BoolGrid() = default;
  BoolGrid(std::size_t h, std::size_t w) : height(h), width(w), cells(h * w, 0) {}

  bool at(std::size_t r, std::size_t c) const { return cells[r * width + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v = true) { cells[r * width + c] = v ? 1 : 0; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : cells) n += v;
    return n;
  }
  bool operator==(const BoolGrid&) const = default;
};

// Half-open [r0, r1) x [c0, c1).
struct BBox {
  int r0 = 0, c0 = 0, r1 = 0, c1 = 0;
  int height() const { return r1 - r0; }
  int width() const { return c1 - c0; }
  bool empty() const { return height() <= 0 || width() <= 0; }
  bool overlaps(const BBox& o) const { return r0 < o.r1 && o.r0 < r1 && c0 < o.c1 && o.c0 < c1; }
  bool operator==(const BBox&) const = default;
};

inline std::optional<BBox> tight_bbox(const BoolGrid& g) {
  BBox b{static_cast<int>(g.height), static_cast<int>(g.width), 0, 0};
  bool any = false;
  for (std::size_t r = 0; r < g.height; ++r)
    for (std::size_t c = 0; c < g.width; ++c)
      if (g.at(r, c)) {
        any = true;
        b.r0 = std::min(b.r0, static_cast<int>(r));
        b.c0 = std::min(b.c0, static_cast<int>(c));
        b.r1 = std::max(b.r1, static_cast<int>(r) + 1);
        b.c1 = std::max(b.c1, static_cast<int>(c) + 1);
      }
  if (!any) return std::nullopt;
  return b;
}

struct ObjectAnnotation {
  int class_id = 0;
  int color_id = 0;
  BoolGrid bitmap;
  BBox bbox;
};

struct SceneConfig {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 3;
  int min_objects = 1;
  int max_objects = 4;
  int min_size = 3;
  int max_size = 6;
  int placement_retries = 50;
};

struct GridScene {
  Tensor canvas;      // H x W x C
  Tensor background;  // H x W x C, the canvas before objects were painted
  std::vector<ObjectAnnotation> objects;
  std::uint64_t scene_id = 0;
  std::vector<int> caption;  // [count, (class, color, r0, c0, r1, c1)...]
};

inline Color cell_color(const Tensor& canvas, std::size_t r, std::size_t c) {
  const std::size_t W = canvas.shape[1], C = canvas.shape[2];
  const double* p = &canvas.data[(r * W + c) * C];
  return {p[0], p[1], p[2]};
}

inline void set_cell_color(Tensor& canvas, std::size_t r, std::size_t c, const Color& col) {
  const std::size_t W = canvas.shape[1], C = canvas.shape[2];
  double* p = &canvas.data[(r * W + c) * C];
  for (std::size_t k = 0; k < 3; ++k) p[k] = col[k];
}

inline void paint(Tensor& canvas, const BoolGrid& where, const Color& col) {
  for (std::size_t r = 0; r < where.height; ++r)
    for (std::size_t c = 0; c < where.width; ++c)
      if (where.at(r, c)) set_cell_color(canvas, r, c, col);
}

// Bitmap of a primitive as a function of its class and box.
inline BoolGrid render_shape(int class_id, const BBox& b, std::size_t H, std::size_t W) {
  BoolGrid g(H, W);
  const int h = b.height(), w = b.width();
  const double cr = b.r0 + h / 2.0, cc = b.c0 + w / 2.0;
  const int thick = std::max(1, std::min(h, w) / 3);
  const int band_r = b.r0 + (h - thick) / 2, band_c = b.c0 + (w - thick) / 2;
  for (int r = b.r0; r < b.r1; ++r)
    for (int c = b.c0; c < b.c1; ++c) {
      if (r < 0 || c < 0 || r >= static_cast<int>(H) || c >= static_cast<int>(W)) continue;
      bool in = false;
      switch (class_id) {
        case 0: in = true; break;
        case 1: in = (r >= band_r && r < band_r + thick) || (c >= band_c && c < band_c + thick); break;
        default: {
          const double dr = (r + 0.5 - cr) / (h / 2.0), dc = (c + 0.5 - cc) / (w / 2.0);
          in = dr * dr + dc * dc <= 1.0;
        }
      }
      if (in) g.set(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
    }
  return g;
}

inline Tensor make_background(const SceneConfig& cfg, Rng& rng) {
  const auto& pal = background_palette();
  const int a = uniform_int(rng, 0, 3);
  int b = uniform_int(rng, 0, 2);
  if (b >= a) ++b;
  const int pattern = uniform_int(rng, 0, 2);
  const int period = uniform_int(rng, 0, 1) ? 8 : 4;
  Tensor bg({cfg.height, cfg.width, cfg.channels});
  for (std::size_t r = 0; r < cfg.height; ++r)
    for (std::size_t c = 0; c < cfg.width; ++c) {
      const std::size_t br = r / static_cast<std::size_t>(period), bc = c / static_cast<std::size_t>(period);
      const bool alt = pattern == 0 ? (br % 2) : pattern == 1 ? (bc % 2) : ((br + bc) % 2);
      set_cell_color(bg, r, c, pal[alt ? b : a]);
    }
  return bg;
}

inline std::vector<int> encode_caption(const std::vector<ObjectAnnotation>& objects) {
  std::vector<int> cap{static_cast<int>(objects.size())};
  for (const auto& o : objects) {
    cap.insert(cap.end(), {o.class_id, o.color_id, o.bbox.r0, o.bbox.c0, o.bbox.r1, o.bbox.c1});
  }
  return cap;
}

inline std::vector<ObjectAnnotation> decode_caption(const std::vector<int>& caption, std::size_t H, std::size_t W) {
  if (caption.empty()) throw Error("caption: empty token list");
  const auto n = static_cast<std::size_t>(caption[0]);
  if (caption.size() != 1 + 6 * n) throw Error("caption: length does not match object count");
  std::vector<ObjectAnnotation> objs;
  for (std::size_t i = 0; i < n; ++i) {
    const int* t = &caption[1 + 6 * i];
    ObjectAnnotation o;
    o.class_id = t[0];
    o.color_id = t[1];
    o.bbox = BBox{t[2], t[3], t[4], t[5]};
    o.bitmap = render_shape(o.class_id, o.bbox, H, W);
    objs.push_back(std::move(o));
  }
  return objs;
}

// Tries to place an object of the given class/color/size somewhere that does
// not overlap `taken`. Returns nothing after `retries` failures.
inline std::optional<ObjectAnnotation> place_object(int class_id, int color_id, int h, int w,
                                                    const std::vector<BBox>& taken, const SceneConfig& cfg, Rng& rng) {
  for (int attempt = 0; attempt < cfg.placement_retries; ++attempt) {
    const int r0 = uniform_int(rng, 0, static_cast<int>(cfg.height) - h);
    const int c0 = uniform_int(rng, 0, static_cast<int>(cfg.width) - w);
    BBox box{r0, c0, r0 + h, c0 + w};
    if (std::any_of(taken.begin(), taken.end(), [&](const BBox& t) { return t.overlaps(box); })) continue;
    ObjectAnnotation o;
    o.class_id = class_id;
    o.color_id = color_id;
    o.bitmap = render_shape(class_id, box, cfg.height, cfg.width);
    auto tb = tight_bbox(o.bitmap);
    if (!tb || !(*tb == box)) continue;
    o.bbox = box;
    return o;
  }
  return std::nullopt;
}

inline void refresh_scene(GridScene& s) {
  s.canvas = Tensor(s.background.shape, s.background.data);
  for (const auto& o : s.objects) paint(s.canvas, o.bitmap, object_palette()[static_cast<std::size_t>(o.color_id)]);
  s.caption = encode_caption(s.objects);
}

// 1-4 non-overlapping primitives on a two-tone textured background.
inline GridScene gen_scene(Rng& rng, const SceneConfig& cfg = {}) {
  GridScene s;
  s.scene_id = rng();
  s.background = make_background(cfg, rng);
  const int target = uniform_int(rng, cfg.min_objects, cfg.max_objects);
  std::vector<BBox> taken;
  for (int i = 0; i < target; ++i) {
    const int cls = uniform_int(rng, 0, kNumClasses - 1);
    const int col = uniform_int(rng, 0, kNumColors - 1);
    const int h = uniform_int(rng, cfg.min_size, cfg.max_size);
    const int w = uniform_int(rng, cfg.min_size, cfg.max_size);
    if (auto o = place_object(cls, col, h, w, taken, cfg, rng)) {
      taken.push_back(o->bbox);
      s.objects.push_back(std::move(*o));
    }
  }
  refresh_scene(s);
  return s;
}

inline double iou(const BoolGrid& a, const BoolGrid& b) {
  if (a.height != b.height || a.width != b.width) throw ShapeError("iou: grids differ in shape");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    inter += (a.cells[i] && b.cells[i]) ? 1 : 0;
    uni += (a.cells[i] || b.cells[i]) ? 1 : 0;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

enum class MaskKind { Random = 0, ObjectShaped = 1, IrregularObject = 2 };

inline std::string_view mask_kind_name(MaskKind k) {
  switch (k) {
    case MaskKind::Random: return "random";
    case MaskKind::ObjectShaped: return "object";
    case MaskKind::IrregularObject: return "irregular";
  }
  return "?";
}

struct Point {
  double row = 0.0, col = 0.0;
};

struct MaskSpec {
  MaskKind kind = MaskKind::Random;
  BoolGrid bitmap;
  std::optional<std::size_t> source_object;
  std::optional<std::vector<Point>> polygon;
  double max_object_iou = 0.0;  // largest IoU with any scene object
};

struct MaskConfig {
  double iou_threshold = 0.3;
  int min_strokes = 1;
  int max_strokes = 3;
  int min_steps = 4;
  int max_steps = 12;
  int max_radius = 1;
  double jitter_max = 0.3;
  std::size_t polygon_points = 20;
  int max_resample = 1000;
  int polygon_retries = 16;
};

// Free-form brush strokes: random walks with per-step radius in [0, max_radius].
inline BoolGrid random_walk_mask(std::size_t H, std::size_t W, Rng& rng, const MaskConfig& cfg = {}) {
  BoolGrid g(H, W);
  const int strokes = uniform_int(rng, cfg.min_strokes, cfg.max_strokes);
  for (int s = 0; s < strokes; ++s) {
    int r = uniform_int(rng, 0, static_cast<int>(H) - 1);
    int c = uniform_int(rng, 0, static_cast<int>(W) - 1);
    const int steps = uniform_int(rng, cfg.min_steps, cfg.max_steps);
    int dr = uniform_int(rng, -1, 1), dc = uniform_int(rng, -1, 1);
    for (int k = 0; k < steps; ++k) {
      const int rad = uniform_int(rng, 0, cfg.max_radius);
      for (int i = -rad; i <= rad; ++i)
        for (int j = -rad; j <= rad; ++j) {
          const int rr = r + i, cc = c + j;
          if (rr >= 0 && cc >= 0 && rr < static_cast<int>(H) && cc < static_cast<int>(W))
            g.set(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc));
        }
      if (uniform_int(rng, 0, 2) == 0) {
        dr = uniform_int(rng, -1, 1);
        dc = uniform_int(rng, -1, 1);
      }
      r = std::clamp(r + dr, 0, static_cast<int>(H) - 1);
      c = std::clamp(c + dc, 0, static_cast<int>(W) - 1);
    }
  }
  return g;
}

// Accepted iff IoU with every object is at most the threshold ("exceeds" is strict).
inline bool accept_random_mask(const BoolGrid& mask, const GridScene& scene, double threshold = 0.3) {
  return std::all_of(scene.objects.begin(), scene.objects.end(),
                     [&](const ObjectAnnotation& o) { return iou(mask, o.bitmap) <= threshold; });
}

// One random-walk draw; std::nullopt when rejected by the IoU rule.
inline std::optional<MaskSpec> random_mask(const GridScene& scene, Rng& rng, const MaskConfig& cfg = {}) {
  MaskSpec m;
  m.kind = MaskKind::Random;
  m.bitmap = random_walk_mask(scene.canvas.shape[0], scene.canvas.shape[1], rng, cfg);
  if (!accept_random_mask(m.bitmap, scene, cfg.iou_threshold)) return std::nullopt;
  for (const auto& o : scene.objects) m.max_object_iou = std::max(m.max_object_iou, iou(m.bitmap, o.bitmap));
  return m;
}

namespace geom {

inline double cross(const Point& o, const Point& a, const Point& b) {
  return (a.row - o.row) * (b.col - o.col) - (a.col - o.col) * (b.row - o.row);
}

inline bool on_segment(const Point& p, const Point& a, const Point& b, double eps = 1e-12) {
  if (std::fabs(cross(a, b, p)) > eps) return false;
  return p.row >= std::min(a.row, b.row) - eps && p.row <= std::max(a.row, b.row) + eps &&
         p.col >= std::min(a.col, b.col) - eps && p.col <= std::max(a.col, b.col) + eps;
}

inline bool segments_intersect(const Point& p1, const Point& p2, const Point& q1, const Point& q2) {
  const double d1 = cross(q1, q2, p1), d2 = cross(q1, q2, p2);
  const double d3 = cross(p1, p2, q1), d4 = cross(p1, p2, q2);
  if (((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0))) return true;
  return on_segment(p1, q1, q2) || on_segment(p2, q1, q2) || on_segment(q1, p1, p2) || on_segment(q2, p1, p2);
}

}  // namespace geom

// Closed polygon with no zero-length edge, no touching non-adjacent edges and
// no overlapping adjacent edges.
inline bool is_simple_polygon(const std::vector<Point>& poly) {
  const std::size_t n = poly.size();
  if (n < 3) return false;
  for (std::size_t i = 0; i < n; ++i) {
    const Point& a = poly[i];
    const Point& b = poly[(i + 1) % n];
    if (a.row == b.row && a.col == b.col) return false;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const Point& a1 = poly[i];
    const Point& a2 = poly[(i + 1) % n];
    for (std::size_t j = i + 1; j < n; ++j) {
      const Point& b1 = poly[j];
      const Point& b2 = poly[(j + 1) % n];
      const bool adjacent = (j == i + 1) || (i == 0 && j == n - 1);
      if (adjacent) {
        // Shared vertex only: the far endpoint must not lie on the other edge.
        const Point& other_a = (j == i + 1) ? a1 : a2;
        const Point& other_b = (j == i + 1) ? b2 : b1;
        if (geom::on_segment(other_b, a1, a2) || geom::on_segment(other_a, b1, b2)) return false;
        continue;
      }
      if (geom::segments_intersect(a1, a2, b1, b2)) return false;
    }
  }
  return true;
}

// Even-odd fill sampled at cell centers; a center lying on an edge is inside.
inline BoolGrid rasterize_polygon(const std::vector<Point>& poly, std::size_t H, std::size_t W) {
  BoolGrid g(H, W);
  const std::size_t n = poly.size();
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const Point p{r + 0.5, c + 0.5};
      bool inside = false, on_edge = false;
      for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
        const Point& a = poly[i];
        const Point& b = poly[j];
        if (geom::on_segment(p, a, b)) {
          on_edge = true;
          break;
        }
        if ((a.row > p.row) != (b.row > p.row)) {
          const double col_at = a.col + (p.row - a.row) * (b.col - a.col) / (b.row - a.row);
          if (p.col < col_at) inside = !inside;
        }
      }
      if (on_edge || inside) g.set(r, c);
    }
  return g;
}

// Closed loop of four quadratic Bezier segments around `box`: on-curve points
// at the edge midpoints, control points at the corners. Each of the eight
// points is pushed away from the box center by jitter[i] * diagonal and
// clamped to the canvas. Returns `n_points` samples at uniform parameter spacing.
inline std::vector<Point> bezier_polygon(const BBox& box, const std::array<double, 8>& jitter, std::size_t H,
                                         std::size_t W, std::size_t n_points = 20) {
  const double r0 = box.r0, r1 = box.r1, c0 = box.c0, c1 = box.c1;
  const double rm = (r0 + r1) / 2.0, cm = (c0 + c1) / 2.0;
  const double diag = std::hypot(r1 - r0, c1 - c0);
  // midpoint, corner, midpoint, corner, ... clockwise from the top edge.
  std::array<Point, 8> pts{{{r0, cm}, {r0, c1}, {rm, c1}, {r1, c1}, {r1, cm}, {r1, c0}, {rm, c0}, {r0, c0}}};
  for (std::size_t i = 0; i < 8; ++i) {
    const double dr = pts[i].row - rm, dc = pts[i].col - cm;
    const double len = std::hypot(dr, dc);
    if (len > 0) {
      pts[i].row += jitter[i] * diag * dr / len;
      pts[i].col += jitter[i] * diag * dc / len;
    }
    pts[i].row = std::clamp(pts[i].row, 0.0, static_cast<double>(H));
    pts[i].col = std::clamp(pts[i].col, 0.0, static_cast<double>(W));
  }
  std::vector<Point> out;
  out.reserve(n_points);
  for (std::size_t j = 0; j < n_points; ++j) {
    const double s = 4.0 * static_cast<double>(j) / static_cast<double>(n_points);
    const auto seg = std::min<std::size_t>(3, static_cast<std::size_t>(s));
    const double t = s - static_cast<double>(seg);
    const Point& p0 = pts[2 * seg];
    const Point& p1 = pts[2 * seg + 1];
    const Point& p2 = pts[(2 * seg + 2) % 8];
    const double u = 1.0 - t;
    out.push_back({u * u * p0.row + 2 * u * t * p1.row + t * t * p2.row,
                   u * u * p0.col + 2 * u * t * p1.col + t * t * p2.col});
  }
  return out;
}

inline MaskSpec bezier_irregular_mask(const ObjectAnnotation& obj, std::size_t H, std::size_t W, Rng& rng,
                                      const MaskConfig& cfg = {}) {
  if (obj.bbox.empty()) throw Error("bezier_irregular_mask: degenerate bounding box");
  std::vector<Point> poly;
  for (int attempt = 0; attempt <= cfg.polygon_retries; ++attempt) {
    std::array<double, 8> jitter{};
    if (attempt < cfg.polygon_retries)
      for (auto& j : jitter) j = cfg.jitter_max * uniform01(rng);
    poly = bezier_polygon(obj.bbox, jitter, H, W, cfg.polygon_points);
    if (is_simple_polygon(poly)) break;
  }
  MaskSpec m;
  m.kind = MaskKind::IrregularObject;
  m.bitmap = rasterize_polygon(poly, H, W);
  m.polygon = std::move(poly);
  return m;
}

// Random 20%, object-shaped 40%, irregular object-shaped 40%.
inline MaskKind sample_mask_type(Rng& rng) {
  const double u = uniform01(rng);
  if (u < 0.2) return MaskKind::Random;
  if (u < 0.6) return MaskKind::ObjectShaped;
  return MaskKind::IrregularObject;
}

enum class GroundingMode { BoxDetect = 0, MaskSeg = 1, InstanceDetect = 2 };
enum class EditVerb { Recolor = 0, Remove = 1, Move = 2 };

struct TaskLayout {
  SceneConfig scene;
  MaskConfig mask;
  std::size_t text_len = 14;
};

struct TaskSample {
  TaskId task = TaskId::MaskInpainting;
  Tensor source;   // H x W x (C + 1); last channel is the inpainting mask
  std::vector<int> text;
  Tensor control;  // H x W edge map (zeros unless controllable)
  Tensor target;   // H x W x C
  std::optional<MaskSpec> mask;
  BoolGrid support;  // cells where target may differ from the scene it was derived from
};

// Cell is an edge when a 4-neighbor has a different color.
inline Tensor edge_map(const Tensor& canvas) {
  const std::size_t H = canvas.shape[0], W = canvas.shape[1];
  Tensor e({H, W});
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const Color here = cell_color(canvas, r, c);
      const int nb[4][2] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
      for (const auto& d : nb) {
        const long rr = static_cast<long>(r) + d[0], cc = static_cast<long>(c) + d[1];
        if (rr < 0 || cc < 0 || rr >= static_cast<long>(H) || cc >= static_cast<long>(W)) continue;
        if (cell_color(canvas, static_cast<std::size_t>(rr), static_cast<std::size_t>(cc)) != here) {
          e.data[r * W + c] = 1.0;
          break;
        }
      }
    }
  return e;
}

inline int position_bin(const BBox& b, std::size_t H, std::size_t W) {
  const int rb = std::min(3, static_cast<int>((b.r0 + b.r1) * 2 / static_cast<int>(H)));
  const int cb = std::min(3, static_cast<int>((b.c0 + b.c1) * 2 / static_cast<int>(W)));
  return rb * 4 + cb;
}

inline std::vector<int> pad_text(std::vector<int> t, std::size_t len) {
  if (t.size() > len) t.resize(len);
  t.resize(len, vocab::kPad);
  return t;
}

inline std::vector<int> caption_words(const GridScene& s) {
  std::vector<int> w;
  for (const auto& o : s.objects) {
    w.push_back(vocab::kClass + o.class_id);
    w.push_back(vocab::kColor + o.color_id);
    w.push_back(vocab::kPos + position_bin(o.bbox, s.canvas.shape[0], s.canvas.shape[1]));
  }
  return w;
}

inline Tensor with_mask_channel(const Tensor& canvas, const BoolGrid* mask) {
  const std::size_t H = canvas.shape[0], W = canvas.shape[1], C = canvas.shape[2];
  Tensor out({H, W, C + 1});
  for (std::size_t r = 0; r < H; ++r)
    for (std::size_t c = 0; c < W; ++c) {
      const bool m = mask && mask->at(r, c);
      for (std::size_t k = 0; k < C; ++k) out.data[(r * W + c) * (C + 1) + k] = m ? 0.0 : canvas.data[(r * W + c) * C + k];
      out.data[(r * W + c) * (C + 1) + C] = m ? 1.0 : 0.0;
    }
  return out;
}

inline BoolGrid bbox_perimeter(const BBox& b, std::size_t H, std::size_t W) {
  BoolGrid g(H, W);
  for (int r = b.r0; r < b.r1; ++r)
    for (int c = b.c0; c < b.c1; ++c)
      if (r == b.r0 || r == b.r1 - 1 || c == b.c0 || c == b.c1 - 1) g.set(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
  return g;
}

inline std::optional<std::size_t> find_object(const GridScene& scene, const ObjectAnnotation& obj) {
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& o = scene.objects[i];
    if (o.bbox == obj.bbox && o.class_id == obj.class_id && o.color_id == obj.color_id) return i;
  }
  return std::nullopt;
}

// Referring-expression grounding. Box: outline obj's bbox; mask: fill obj's
// bitmap; instance: outline a random instance of obj's class.
inline TaskSample grounding_augment(const GridScene& scene, const ObjectAnnotation& obj, GroundingMode mode, Rng& rng,
                                    const TaskLayout& layout = {}) {
  const std::size_t H = scene.canvas.shape[0], W = scene.canvas.shape[1];
  const int annot = uniform_int(rng, 0, kNumAnnotColors - 1);
  const Color& col = annotation_palette()[static_cast<std::size_t>(annot)];
  TaskSample s;
  s.task = TaskId::Grounding;
  s.source = with_mask_channel(scene.canvas, nullptr);
  s.control = Tensor({H, W});
  s.target = Tensor(scene.canvas.shape, scene.canvas.data);
  std::vector<int> text{vocab::kTask + static_cast<int>(TaskId::Grounding), vocab::kMode + static_cast<int>(mode),
                        vocab::kClass + obj.class_id};
  if (mode == GroundingMode::InstanceDetect) {
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < scene.objects.size(); ++i)
      if (scene.objects[i].class_id == obj.class_id) candidates.push_back(i);
    if (candidates.empty()) throw Error("grounding: no instance of class " + std::to_string(obj.class_id) + " in scene");
    const auto& pick = scene.objects[candidates[static_cast<std::size_t>(
        uniform_int(rng, 0, static_cast<int>(candidates.size()) - 1))]];
    s.support = bbox_perimeter(pick.bbox, H, W);
  } else {
    if (!find_object(scene, obj)) throw Error("grounding: referred object is not part of the scene");
    text.push_back(vocab::kColor + obj.color_id);
    s.support = mode == GroundingMode::BoxDetect ? bbox_perimeter(obj.bbox, H, W) : obj.bitmap;
  }
  text.push_back(vocab::kAnnot + annot);
  paint(s.target, s.support, col);
  s.text = pad_text(std::move(text), layout.text_len);
  return s;
}

namespace detail {

inline MaskSpec draw_inpainting_mask(const GridScene& scene, Rng& rng, const MaskConfig& cfg) {
  const std::size_t H = scene.canvas.shape[0], W = scene.canvas.shape[1];
  const MaskKind kind = sample_mask_type(rng);
  if (kind == MaskKind::Random) {
    for (int i = 0; i < cfg.max_resample; ++i)
      if (auto m = random_mask(scene, rng, cfg)) return *m;
    // A lone background cell always has IoU 0.
    MaskSpec m;
    m.kind = MaskKind::Random;
    m.bitmap = BoolGrid(H, W);
    for (std::size_t i = 0; i < H * W; ++i) {
      bool covered = false;
      for (const auto& o : scene.objects) covered = covered || o.bitmap.cells[i];
      if (!covered) {
        m.bitmap.cells[i] = 1;
        break;
      }
    }
    return m;
  }
  const auto idx = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(scene.objects.size()) - 1));
  MaskSpec m;
  if (kind == MaskKind::ObjectShaped) {
    m.kind = MaskKind::ObjectShaped;
    m.bitmap = scene.objects[idx].bitmap;
  } else {
    m = bezier_irregular_mask(scene.objects[idx], H, W, rng, cfg);
  }
  m.source_object = idx;
  return m;
}

inline TaskSample instruction_edit(const GridScene& scene, Rng& rng, const TaskLayout& layout) {
  const std::size_t H = scene.canvas.shape[0], W = scene.canvas.shape[1];
  const auto idx = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(scene.objects.size()) - 1));
  const ObjectAnnotation& obj = scene.objects[idx];
  auto verb = static_cast<EditVerb>(uniform_int(rng, 0, 2));
  GridScene edited = scene;
  int arg = vocab::kPad;
  BoolGrid support = obj.bitmap;

  if (verb == EditVerb::Move) {
    const int first = uniform_int(rng, 0, 3);
    const int dist = uniform_int(rng, 2, 3);
    bool moved = false;
    for (int k = 0; k < 4 && !moved; ++k) {
      const int dir = (first + k) % 4;
      const int dr = dir == 0 ? -dist : dir == 1 ? dist : 0;
      const int dc = dir == 2 ? -dist : dir == 3 ? dist : 0;
      BBox nb{obj.bbox.r0 + dr, obj.bbox.c0 + dc, obj.bbox.r1 + dr, obj.bbox.c1 + dc};
      if (nb.r0 < 0 || nb.c0 < 0 || nb.r1 > static_cast<int>(H) || nb.c1 > static_cast<int>(W)) continue;
      bool clash = false;
      for (std::size_t j = 0; j < scene.objects.size(); ++j)
        clash = clash || (j != idx && scene.objects[j].bbox.overlaps(nb));
      if (clash) continue;
      auto& moved_obj = edited.objects[idx];
      moved_obj.bbox = nb;
      moved_obj.bitmap = render_shape(obj.class_id, nb, H, W);
      for (std::size_t i = 0; i < support.cells.size(); ++i) support.cells[i] |= moved_obj.bitmap.cells[i];
      arg = vocab::kDir + dir;
      moved = true;
    }
    if (!moved) verb = EditVerb::Recolor;
  }
  if (verb == EditVerb::Recolor) {
    int c = uniform_int(rng, 0, kNumColors - 2);
    if (c >= obj.color_id) ++c;
    edited.objects[idx].color_id = c;
    arg = vocab::kColor + c;
  } else if (verb == EditVerb::Remove) {
    edited.objects.erase(edited.objects.begin() + static_cast<std::ptrdiff_t>(idx));
  }
  refresh_scene(edited);

  TaskSample s;
  s.task = TaskId::InstructionEdit;
  s.source = with_mask_channel(scene.canvas, nullptr);
  s.control = Tensor({H, W});
  s.target = edited.canvas;
  s.support = std::move(support);
  s.text = pad_text({vocab::kTask + static_cast<int>(TaskId::InstructionEdit), vocab::kVerb + static_cast<int>(verb),
                     vocab::kClass + obj.class_id, vocab::kColor + obj.color_id, arg},
                    layout.text_len);
  return s;
}

inline TaskSample customized(Rng& rng, const TaskLayout& layout) {
  const auto& cfg = layout.scene;
  GridScene ref = gen_scene(rng, cfg);
  const ObjectAnnotation& subject = ref.objects.front();
  GridScene out;
  out.scene_id = rng();
  out.background = make_background(cfg, rng);
  SceneConfig place_cfg = cfg;
  place_cfg.placement_retries = 1000;
  auto placed = place_object(subject.class_id, subject.color_id, subject.bbox.height(), subject.bbox.width(), {},
                             place_cfg, rng);
  out.objects.push_back(placed ? std::move(*placed) : subject);
  refresh_scene(out);
  const auto& o = out.objects.front();

  TaskSample s;
  s.task = TaskId::Customized;
  s.source = with_mask_channel(ref.canvas, nullptr);
  s.control = Tensor({cfg.height, cfg.width});
  s.target = out.canvas;
  s.support = BoolGrid(cfg.height, cfg.width);
  s.text = pad_text({vocab::kTask + static_cast<int>(TaskId::Customized), vocab::kClass + o.class_id,
                     vocab::kColor + o.color_id, vocab::kPos + position_bin(o.bbox, cfg.height, cfg.width)},
                    layout.text_len);
  return s;
}

}  // namespace detail

inline TaskSample gen_stage_sample(TaskId task, Rng& rng, const TaskLayout& layout = {}) {
  const auto& cfg = layout.scene;
  const std::size_t H = cfg.height, W = cfg.width;
  switch (task) {
    case TaskId::MaskInpainting: {
      GridScene scene = gen_scene(rng, cfg);
      MaskSpec m = detail::draw_inpainting_mask(scene, rng, layout.mask);
      TaskSample s;
      s.task = task;
      s.source = with_mask_channel(scene.canvas, &m.bitmap);
      s.control = Tensor({H, W});
      s.target = scene.canvas;
      s.support = m.bitmap;
      std::vector<int> text{vocab::kTask + static_cast<int>(task)};
      auto words = caption_words(scene);
      text.insert(text.end(), words.begin(), words.end());
      s.text = pad_text(std::move(text), layout.text_len);
      s.mask = std::move(m);
      return s;
    }
    case TaskId::Grounding: {
      GridScene scene = gen_scene(rng, cfg);
      const auto idx = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(scene.objects.size()) - 1));
      const auto mode = static_cast<GroundingMode>(uniform_int(rng, 0, 2));
      return grounding_augment(scene, scene.objects[idx], mode, rng, layout);
    }
    case TaskId::Controllable: {
      GridScene scene = gen_scene(rng, cfg);
      TaskSample s;
      s.task = task;
      s.source = Tensor({H, W, cfg.channels + 1});
      s.control = edge_map(scene.canvas);
      s.target = scene.canvas;
      s.support = BoolGrid(H, W);
      std::vector<int> text{vocab::kTask + static_cast<int>(task)};
      auto words = caption_words(scene);
      text.insert(text.end(), words.begin(), words.end());
      s.text = pad_text(std::move(text), layout.text_len);
      return s;
    }
    case TaskId::Customized: return detail::customized(rng, layout);
    case TaskId::InstructionEdit: {
      GridScene scene = gen_scene(rng, cfg);
      return detail::instruction_edit(scene, rng, layout);
    }
  }
  throw Error("gen_stage_sample: invalid task id");
}

}  // namespace prw

#include "fgss/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <thread>

#include "fgss/image_io.hpp"
#include "fgss/rng.hpp"
#include "json.hpp"

namespace fgss::synth {

using nlohmann::json;

std::string to_string(Texture t) {
  switch (t) {
    case Texture::solid: return "solid";
    case Texture::double_line: return "double-line";
    case Texture::hatched: return "hatched";
  }
  return "solid";
}

Texture texture_from_string(const std::string& s) {
  if (s == "solid") return Texture::solid;
  if (s == "double-line") return Texture::double_line;
  if (s == "hatched") return Texture::hatched;
  throw std::invalid_argument("unknown texture: " + s);
}

namespace {

// Gap left between walls so each wall is its own 8-connected component.
constexpr int kJunctionGap = 3;

int margin_for(const SynthSpec& s) { return std::max(s.wall_width.hi / 2 + 4, s.canvas_size / 16); }
int min_room_for(const SynthSpec& s) { return 3 * s.wall_width.hi + 30; }

struct Shape {
  bool diagonal = false;
  // Axis-aligned: [x, x+w) × [y, y+h).
  int x = 0, y = 0, w = 0, h = 0;
  // Diagonal: segment a-b with half thickness.
  double ax = 0, ay = 0, bx = 0, by = 0, half = 0;
  int thickness = 1;
  Texture texture = Texture::solid;
};

double seg_distance(double px, double py, const Shape& s) {
  const double dx = s.bx - s.ax, dy = s.by - s.ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - s.ax) * dx + (py - s.ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double qx = s.ax + t * dx - px, qy = s.ay + t * dy - py;
  return std::sqrt(qx * qx + qy * qy);
}

BoundingBox diagonal_bbox(const Shape& s, int canvas) {
  const int x0 = std::max(0, static_cast<int>(std::floor(std::min(s.ax, s.bx) - s.half - 1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(std::min(s.ay, s.by) - s.half - 1)));
  const int x1 = std::min(canvas - 1, static_cast<int>(std::ceil(std::max(s.ax, s.bx) + s.half + 1)));
  const int y1 = std::min(canvas - 1, static_cast<int>(std::ceil(std::max(s.ay, s.by) + s.half + 1)));
  return {x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

struct Paint {
  float ink = 0.1f;
  float paper = 0.95f;
};

float texture_value(const Shape& s, int x, int y, double edge_dist, const Paint& p) {
  switch (s.texture) {
    case Texture::solid: return p.ink;
    case Texture::double_line: {
      const double t = std::max(1.0, std::round(s.thickness / 6.0));
      if (edge_dist < t) return p.ink;
      return p.ink + 0.8f * (p.paper - p.ink);
    }
    case Texture::hatched: {
      if (edge_dist < 1.0) return p.ink;
      return ((x + y) % 6) < 2 ? p.ink : p.ink + 0.85f * (p.paper - p.ink);
    }
  }
  return p.ink;
}

void render_shape(const Shape& s, Raster& img, BitMask& mask, const Paint& paint, BoundingBox& bbox_out) {
  const int H = img.height(), W = img.width();
  if (!s.diagonal) {
    for (int y = s.y; y < s.y + s.h; ++y) {
      for (int x = s.x; x < s.x + s.w; ++x) {
        if (y < 0 || x < 0 || y >= H || x >= W) continue;
        const double edge = std::min({x - s.x, s.x + s.w - 1 - x, y - s.y, s.y + s.h - 1 - y});
        img.at(y, x) = texture_value(s, x, y, edge, paint);
        mask.set(y, x, true);
      }
    }
    bbox_out = {s.x, s.y, s.w, s.h};
    return;
  }
  const BoundingBox region = diagonal_bbox(s, W);
  int x0 = W, y0 = H, x1 = -1, y1 = -1;
  for (int y = region.y; y < region.y + region.h; ++y) {
    for (int x = region.x; x < region.x + region.w; ++x) {
      const double d = seg_distance(x + 0.5, y + 0.5, s);
      if (d > s.half) continue;
      img.at(y, x) = texture_value(s, x, y, s.half - d, paint);
      mask.set(y, x, true);
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
    }
  }
  bbox_out = {x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

// Splits an axis-aligned wall around a door opening when both leaves stay long.
void add_wall(std::vector<Shape>& shapes, Shape s, bool horizontal, double door_prob, Rng& rng) {
  const int len = horizontal ? s.w : s.h;
  const int thick = horizontal ? s.h : s.w;
  const int min_piece = std::max(3 * thick, 16);
  if (rng.bernoulli(door_prob)) {
    const int gap = rng.uniform_int(20, 40);
    const int lo = min_piece, hi = len - min_piece - gap;
    if (hi >= lo) {
      const int start = rng.uniform_int(lo, hi);
      Shape a = s, b = s;
      if (horizontal) {
        a.w = start;
        b.x = s.x + start + gap;
        b.w = len - start - gap;
      } else {
        a.h = start;
        b.y = s.y + start + gap;
        b.h = len - start - gap;
      }
      shapes.push_back(a);
      shapes.push_back(b);
      return;
    }
  }
  shapes.push_back(s);
}

std::vector<int> grid_lines(int lo, int hi, int n, Rng& rng) {
  std::vector<int> v(n + 1);
  const double step = static_cast<double>(hi - lo) / n;
  v[0] = lo;
  v[n] = hi;
  for (int i = 1; i < n; ++i) {
    const double jitter = rng.uniform(-0.12, 0.12) * step;
    v[i] = static_cast<int>(std::lround(lo + i * step + jitter));
  }
  return v;
}

}  // namespace

void validate(const SynthSpec& s) {
  if (s.wall_width.lo < 1 || s.wall_width.hi > 64 || s.wall_width.lo > s.wall_width.hi) {
    throw std::invalid_argument("synth: wallWidthRange must lie within [1, 64]");
  }
  if (s.door_gap_prob < 0 || s.door_gap_prob > 1 || s.diagonal_wall_prob < 0 || s.diagonal_wall_prob > 1) {
    throw std::invalid_argument("synth: probabilities must lie in [0, 1]");
  }
  if (s.room_rows.lo < 1 || s.room_cols.lo < 1 || s.room_rows.lo > s.room_rows.hi ||
      s.room_cols.lo > s.room_cols.hi) {
    throw std::invalid_argument("synth: room grid ranges must be positive and ordered");
  }
  if (s.textures.empty()) throw std::invalid_argument("synth: at least one texture required");
  const int margin = margin_for(s);
  const int usable = s.canvas_size - 3 * margin;
  const int need = std::max(s.room_rows.hi, s.room_cols.hi) * min_room_for(s);
  if (usable < need) {
    throw std::invalid_argument("synth: canvas " + std::to_string(s.canvas_size) +
                                " too small for room grid (needs " + std::to_string(need + 3 * margin) + ")");
  }
}

SynthSample generate(const SynthSpec& spec) {
  validate(spec);
  Rng rng(spec.seed);
  const int N = spec.canvas_size;
  const int margin = margin_for(spec);
  const int rows = rng.uniform_int(spec.room_rows.lo, spec.room_rows.hi);
  const int cols = rng.uniform_int(spec.room_cols.lo, spec.room_cols.hi);
  const int base = rng.uniform_int(spec.wall_width.lo, spec.wall_width.hi);
  auto interior_width = [&] {
    const int w = static_cast<int>(std::lround(base * rng.uniform(0.45, 0.9)));
    return std::clamp(w, spec.wall_width.lo, base);
  };

  const Texture primary = spec.textures[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(spec.textures.size()) - 1))];
  auto pick_texture = [&] {
    if (spec.textures.size() > 1 && rng.bernoulli(0.2)) {
      return spec.textures[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(spec.textures.size()) - 1))];
    }
    return primary;
  };

  const int x0 = margin + rng.uniform_int(0, margin / 2);
  const int x1 = N - margin - rng.uniform_int(0, margin / 2);
  const int y0 = margin + rng.uniform_int(0, margin / 2);
  const int y1 = N - margin - rng.uniform_int(0, margin / 2);
  const auto xs = grid_lines(x0, x1, cols, rng);
  const auto ys = grid_lines(y0, y1, rows, rng);

  std::vector<int> wv(cols + 1), wh(rows + 1);
  for (int j = 0; j <= cols; ++j) wv[j] = (j == 0 || j == cols) ? base : interior_width();
  for (int i = 0; i <= rows; ++i) wh[i] = (i == 0 || i == rows) ? base : interior_width();
  auto left = [&](int j) { return xs[j] - wv[j] / 2; };
  auto top = [&](int i) { return ys[i] - wh[i] / 2; };

  std::vector<Shape> shapes;
  const int hx0 = left(0), hx1 = left(cols) + wv[cols];
  for (int i = 0; i <= rows; ++i) {
    Shape s;
    s.x = hx0;
    s.y = top(i);
    s.w = hx1 - hx0;
    s.h = wh[i];
    s.thickness = wh[i];
    s.texture = pick_texture();
    add_wall(shapes, s, true, spec.door_gap_prob, rng);
  }
  for (int j = 0; j <= cols; ++j) {
    const bool exterior = (j == 0 || j == cols);
    for (int i = 0; i < rows; ++i) {
      if (!exterior && rng.bernoulli(0.2)) continue;
      Shape s;
      s.x = left(j);
      s.w = wv[j];
      s.y = top(i) + wh[i] + kJunctionGap;
      s.h = top(i + 1) - kJunctionGap - s.y;
      s.thickness = wv[j];
      s.texture = pick_texture();
      if (s.h < 4) continue;
      add_wall(shapes, s, false, exterior ? spec.door_gap_prob * 0.5 : spec.door_gap_prob, rng);
    }
  }

  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      if (!rng.bernoulli(spec.diagonal_wall_prob)) continue;
      const int wd = interior_width();
      const double half = wd / 2.0;
      const double m = half + kJunctionGap + 2;
      const double ix0 = left(j) + wv[j] + m, ix1 = left(j + 1) - m;
      const double iy0 = top(i) + wh[i] + m, iy1 = top(i + 1) - m;
      const double span = std::min(ix1 - ix0, iy1 - iy0);
      const double len = span * rng.uniform(0.35, 0.6);
      if (len < 3.0 * wd || span <= 0) continue;
      Shape s;
      s.diagonal = true;
      s.half = half;
      s.thickness = wd;
      s.texture = pick_texture();
      const int corner = rng.uniform_int(0, 3);
      const double cx = (corner & 1) ? ix1 : ix0;
      const double cy = (corner & 2) ? iy1 : iy0;
      const double sx = (corner & 1) ? -1.0 : 1.0;
      const double sy = (corner & 2) ? -1.0 : 1.0;
      s.ax = cx + sx * len;
      s.ay = cy;
      s.bx = cx;
      s.by = cy + sy * len;
      shapes.push_back(s);
    }
  }

  Paint paint;
  paint.paper = static_cast<float>(rng.uniform(0.88, 0.98));
  paint.ink = static_cast<float>(rng.uniform(0.03, 0.25));

  SynthSample out;
  out.image = Raster(N, N, 1, paint.paper);
  out.mask = BitMask(N, N);
  for (const Shape& s : shapes) {
    WallRecord rec;
    render_shape(s, out.image, out.mask, paint, rec.bbox);
    rec.width_px = s.thickness;
    rec.diagonal = s.diagonal;
    rec.texture = s.texture;
    rec.orientation = rec.bbox.h > rec.bbox.w ? Orientation::vertical : Orientation::horizontal;
    rec.length_px = std::max(rec.bbox.w, rec.bbox.h);
    out.walls.push_back(rec);
  }

  // Small clutter strokes away from walls; they stay background in the mask.
  const int glyphs = rng.uniform_int(4, 16);
  for (int g = 0; g < glyphs; ++g) {
    const int gx = rng.uniform_int(0, N - 1), gy = rng.uniform_int(0, N - 1);
    const bool horiz = rng.bernoulli(0.5);
    const int len = rng.uniform_int(2, 10);
    const int gw = horiz ? len : 2, gh = horiz ? 2 : len;
    bool clear = true;
    for (int y = gy - 3; y < gy + gh + 3 && clear; ++y) {
      for (int x = gx - 3; x < gx + gw + 3; ++x) {
        if (!out.mask.in_bounds(y, x) || out.mask.at(y, x)) {
          clear = false;
          break;
        }
      }
    }
    if (!clear) continue;
    const float tone = paint.ink + static_cast<float>(rng.uniform(0.1, 0.4)) * (paint.paper - paint.ink);
    for (int y = gy; y < gy + gh; ++y) {
      for (int x = gx; x < gx + gw; ++x) out.image.at(y, x) = tone;
    }
  }

  const double sigma = rng.uniform(0.01, 0.04);
  for (float& v : out.image.data()) v += static_cast<float>(sigma * rng.normal());
  out.image.clamp01();
  return out;
}

Split split_indices(int count) {
  Split s;
  const int n_val = count * 15 / 100;
  const int n_test = count * 15 / 100;
  const int n_train = count - n_val - n_test;
  for (int i = 0; i < count; ++i) {
    if (i < n_train) {
      s.train.push_back(i);
    } else if (i < n_train + n_val) {
      s.val.push_back(i);
    } else {
      s.test.push_back(i);
    }
  }
  return s;
}

namespace {

json spec_to_json(const SynthSpec& s) {
  json t = json::array();
  for (Texture x : s.textures) t.push_back(to_string(x));
  return {{"seed", s.seed},
          {"canvasSize", s.canvas_size},
          {"roomRows", {s.room_rows.lo, s.room_rows.hi}},
          {"roomCols", {s.room_cols.lo, s.room_cols.hi}},
          {"wallWidthRange", {s.wall_width.lo, s.wall_width.hi}},
          {"textures", t},
          {"doorGapProb", s.door_gap_prob},
          {"diagonalWallProb", s.diagonal_wall_prob}};
}

SynthSpec spec_from_json(const json& j) {
  SynthSpec s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.canvas_size = j.at("canvasSize").get<int>();
  s.room_rows = {j.at("roomRows")[0].get<int>(), j.at("roomRows")[1].get<int>()};
  s.room_cols = {j.at("roomCols")[0].get<int>(), j.at("roomCols")[1].get<int>()};
  s.wall_width = {j.at("wallWidthRange")[0].get<int>(), j.at("wallWidthRange")[1].get<int>()};
  s.textures.clear();
  for (const auto& t : j.at("textures")) s.textures.push_back(texture_from_string(t.get<std::string>()));
  s.door_gap_prob = j.at("doorGapProb").get<double>();
  s.diagonal_wall_prob = j.at("diagonalWallProb").get<double>();
  return s;
}

json wall_to_json(const WallRecord& w) {
  return {{"bbox", {w.bbox.x, w.bbox.y, w.bbox.w, w.bbox.h}},
          {"widthPx", w.width_px},
          {"orientation", to_string(w.orientation)},
          {"lengthPx", w.length_px},
          {"diagonal", w.diagonal},
          {"texture", to_string(w.texture)}};
}

WallRecord wall_from_json(const json& j) {
  WallRecord w;
  const auto& b = j.at("bbox");
  w.bbox = {b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()};
  w.width_px = j.at("widthPx").get<double>();
  w.orientation = j.at("orientation").get<std::string>() == "vertical" ? Orientation::vertical
                                                                      : Orientation::horizontal;
  w.length_px = j.at("lengthPx").get<int>();
  w.diagonal = j.at("diagonal").get<bool>();
  w.texture = texture_from_string(j.at("texture").get<std::string>());
  return w;
}

std::string file_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d.png", index);
  return buf;
}

}  // namespace

std::string manifest_json(const DatasetManifest& m) {
  json entries = json::array();
  for (const auto& e : m.entries) {
    json walls = json::array();
    for (const auto& w : e.walls) walls.push_back(wall_to_json(w));
    entries.push_back({{"index", e.index}, {"seed", e.seed}, {"image", e.image}, {"mask", e.mask}, {"walls", walls}});
  }
  json j = {{"version", m.version},
            {"spec", spec_to_json(m.spec)},
            {"count", m.entries.size()},
            {"split", {{"train", m.split.train}, {"val", m.split.val}, {"test", m.split.test}}},
            {"samples", entries}};
  return j.dump(2);
}

DatasetManifest generate_set(const SynthSpec& spec, int count, const std::filesystem::path& out_dir, int threads) {
  if (count < 1) throw std::invalid_argument("generateSet: count must be >= 1");
  validate(spec);
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  std::filesystem::create_directories(out_dir / "masks", ec);
  if (ec) throw std::runtime_error("cannot create dataset directory " + out_dir.string() + ": " + ec.message());

  DatasetManifest m;
  m.spec = spec;
  m.entries.resize(static_cast<std::size_t>(count));
  m.split = split_indices(count);

  auto work = [&](int i) {
    SynthSpec s = spec;
    s.seed = spec.seed + static_cast<std::uint64_t>(i);
    SynthSample sample = generate(s);
    ManifestEntry& e = m.entries[static_cast<std::size_t>(i)];
    e.index = i;
    e.seed = s.seed;
    e.image = "images/" + file_name(i);
    e.mask = "masks/" + file_name(i);
    e.walls = std::move(sample.walls);
    io::write_png(out_dir / e.image, sample.image);
    io::write_png(out_dir / e.mask, sample.mask);
  };

  threads = std::max(1, threads);
  if (threads == 1) {
    for (int i = 0; i < count; ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (int i = t; i < count; i += threads) work(i);
        } catch (...) {
          errors[static_cast<std::size_t>(t)] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  std::ofstream out(out_dir / "manifest.json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + (out_dir / "manifest.json").string());
  out << manifest_json(m) << "\n";
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("cannot open " + (dir / "manifest.json").string());
  const json j = json::parse(in);
  DatasetManifest m;
  m.version = j.at("version").get<int>();
  m.spec = spec_from_json(j.at("spec"));
  for (const auto& e : j.at("samples")) {
    ManifestEntry me;
    me.index = e.at("index").get<int>();
    me.seed = e.at("seed").get<std::uint64_t>();
    me.image = e.at("image").get<std::string>();
    me.mask = e.at("mask").get<std::string>();
    for (const auto& w : e.at("walls")) me.walls.push_back(wall_from_json(w));
    m.entries.push_back(std::move(me));
  }
  const auto& sp = j.at("split");
  m.split.train = sp.at("train").get<std::vector<int>>();
  m.split.val = sp.at("val").get<std::vector<int>>();
  m.split.test = sp.at("test").get<std::vector<int>>();
  return m;
}

SynthSpec spec_for_entry(const DatasetManifest& m, const ManifestEntry& e) {
  SynthSpec s = m.spec;
  s.seed = e.seed;
  return s;
}

}  // namespace fgss::synth

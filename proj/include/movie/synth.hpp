#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "movie/common.hpp"
#include "movie/tensor.hpp"

namespace movie::synth {

enum class ObjectShape { Circle, Square, Triangle };
enum class Color { Red, Green, Blue };

inline constexpr std::size_t kNumColors = 3;

inline const char* shape_name(ObjectShape s) {
  switch (s) {
    case ObjectShape::Circle: return "circle";
    case ObjectShape::Square: return "square";
    default: return "triangle";
  }
}
inline const char* color_name(Color c) {
  switch (c) {
    case Color::Red: return "red";
    case Color::Green: return "green";
    default: return "blue";
  }
}

struct SceneObject {
  ObjectShape shape;
  Color color;
  double cx, cy;   // pixels, canvas coordinates
  double radius;   // pixels
};

struct SceneSpec {
  std::size_t canvas_size = 64;
  std::vector<SceneObject> objects;
};

struct SceneGeometry {
  std::size_t canvas_size = 64;
  double radius_min = 3.0;
  double radius_max = 7.0;
};

// Rejection-samples non-overlapping, fully-inside objects. Object count is
// uniform on [0, max_objects]; after 1000 failed placements the target count
// drops by one and sampling continues.
inline SceneSpec sample_scene(Rng& rng, std::size_t max_objects,
                              const SceneGeometry& geo = {}) {
  SceneSpec spec;
  spec.canvas_size = geo.canvas_size;
  std::size_t target = rng.index(max_objects + 1);
  std::size_t rejections = 0;
  while (spec.objects.size() < target) {
    SceneObject o;
    o.shape = ObjectShape(rng.index(3));
    o.color = Color(rng.index(3));
    o.radius = rng.uniform(geo.radius_min, geo.radius_max);
    o.cx = rng.uniform(o.radius, double(geo.canvas_size) - o.radius);
    o.cy = rng.uniform(o.radius, double(geo.canvas_size) - o.radius);
    bool ok = true;
    for (const auto& e : spec.objects) {
      double dx = e.cx - o.cx, dy = e.cy - o.cy;
      if (std::sqrt(dx * dx + dy * dy) <= e.radius + o.radius) {
        ok = false;
        break;
      }
    }
    if (ok) {
      spec.objects.push_back(o);
      rejections = 0;
    } else if (++rejections >= 1000) {
      target--;
      rejections = 0;
    }
  }
  return spec;
}

namespace detail {
inline bool inside(const SceneObject& o, double x, double y) {
  double dx = x - o.cx, dy = y - o.cy;
  switch (o.shape) {
    case ObjectShape::Circle:
      return dx * dx + dy * dy <= o.radius * o.radius;
    case ObjectShape::Square:
      return std::abs(dx) <= o.radius && std::abs(dy) <= o.radius;
    case ObjectShape::Triangle: {
      // equilateral, apex up (screen y grows downward)
      double ax = o.cx, ay = o.cy - o.radius;
      double bx = o.cx - o.radius * 0.8660254037844386, by = o.cy + o.radius * 0.5;
      double cx = o.cx + o.radius * 0.8660254037844386, cy = o.cy + o.radius * 0.5;
      auto side = [](double px, double py, double qx, double qy, double rx, double ry) {
        return (qx - px) * (ry - py) - (qy - py) * (rx - px);
      };
      double d1 = side(ax, ay, bx, by, x, y);
      double d2 = side(bx, by, cx, cy, x, y);
      double d3 = side(cx, cy, ax, ay, x, y);
      bool neg = d1 < 0 || d2 < 0 || d3 < 0;
      bool pos = d1 > 0 || d2 > 0 || d3 > 0;
      return !(neg && pos);
    }
  }
  return false;
}

inline std::array<float, 3> rgb(Color c) {
  switch (c) {
    case Color::Red: return {1.f, 0.f, 0.f};
    case Color::Green: return {0.f, 1.f, 0.f};
    default: return {0.f, 0.f, 1.f};
  }
}
}  // namespace detail

// Rasterizes filled shapes on a white background at the requested size;
// coordinates scale uniformly by size / canvas_size. Deterministic
// pixel-center inside-tests, no anti-aliasing.
inline std::vector<float> render_scene(const SceneSpec& spec, std::size_t size) {
  std::vector<float> img(3 * size * size, 1.0f);
  double s = double(size) / double(spec.canvas_size);
  for (const auto& o : spec.objects) {
    SceneObject so = o;
    so.cx *= s;
    so.cy *= s;
    so.radius *= s;
    auto col = detail::rgb(o.color);
    // bounding box keeps rasterization near-linear in object area
    std::size_t x0 = std::size_t(std::max(0.0, std::floor(so.cx - so.radius - 1)));
    std::size_t y0 = std::size_t(std::max(0.0, std::floor(so.cy - so.radius - 1)));
    std::size_t x1 = std::min(size, std::size_t(std::ceil(so.cx + so.radius + 1)));
    std::size_t y1 = std::min(size, std::size_t(std::ceil(so.cy + so.radius + 1)));
    for (std::size_t y = y0; y < y1; ++y)
      for (std::size_t x = x0; x < x1; ++x)
        if (detail::inside(so, double(x) + 0.5, double(y) + 0.5))
          for (std::size_t c = 0; c < 3; ++c)
            img[(c * size + y) * size + x] = col[c];
  }
  return img;
}

// ---- queries ---------------------------------------------------------------

// Fixed vocabulary; line 0 is the pad token.
inline const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> v = {
      "<pad>", "how", "many", "red", "green", "blue", "circle", "square",
      "triangle", "circles", "squares", "triangles", "shapes", "are", "there",
      "what", "color", "is", "the", "shape"};
  return v;
}

inline std::size_t token_id(const std::string& word) {
  const auto& v = vocabulary();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] == word) return i;
  throw ContractError("token '" + word + "' not in vocabulary");
}

// Categories: the three colors then the three shapes.
inline const std::vector<std::string>& categories() {
  static const std::vector<std::string> c = {"red", "green", "blue",
                                             "circle", "square", "triangle"};
  return c;
}

enum class QueryTemplate {
  Category,           // class-id query
  HowManyColorShape,  // "how many red circles are there"
  HowManyShape,       // "how many circles are there"
  HowManyColor,       // "how many shapes are red"
  WhatColor,          // "what color is the shape" (single-object scenes)
};

struct Query {
  bool is_tokens = false;
  std::size_t category_id = 0;          // when !is_tokens
  std::vector<std::size_t> tokens;      // when is_tokens (unpadded)
};

struct QueryResult {
  Query query;
  int count = 0;            // exact predicate count (color index for WhatColor)
  std::string question_type;
};

inline int count_matching(const SceneSpec& spec, std::optional<Color> color,
                          std::optional<ObjectShape> shape) {
  int n = 0;
  for (const auto& o : spec.objects)
    n += (!color || o.color == *color) && (!shape || o.shape == *shape);
  return n;
}

inline QueryResult make_query(const SceneSpec& spec, QueryTemplate tmpl, Rng& rng) {
  QueryResult r;
  Color color = Color(rng.index(3));
  ObjectShape shape = ObjectShape(rng.index(3));
  auto plural = [&](ObjectShape s) {
    return std::string(shape_name(s)) + "s";
  };
  switch (tmpl) {
    case QueryTemplate::Category: {
      std::size_t cat = rng.index(categories().size());
      r.query.is_tokens = false;
      r.query.category_id = cat;
      r.count = cat < 3 ? count_matching(spec, Color(cat), std::nullopt)
                        : count_matching(spec, std::nullopt, ObjectShape(cat - 3));
      r.question_type = "category";
      break;
    }
    case QueryTemplate::HowManyColorShape:
      r.query.is_tokens = true;
      r.query.tokens = {token_id("how"), token_id("many"), token_id(color_name(color)),
                        token_id(plural(shape)), token_id("are"), token_id("there")};
      r.count = count_matching(spec, color, shape);
      r.question_type = "how_many_color_shape";
      break;
    case QueryTemplate::HowManyShape:
      r.query.is_tokens = true;
      r.query.tokens = {token_id("how"), token_id("many"), token_id(plural(shape)),
                        token_id("are"), token_id("there")};
      r.count = count_matching(spec, std::nullopt, shape);
      r.question_type = "how_many_shape";
      break;
    case QueryTemplate::HowManyColor:
      r.query.is_tokens = true;
      r.query.tokens = {token_id("how"), token_id("many"), token_id("shapes"),
                        token_id("are"), token_id(color_name(color))};
      r.count = count_matching(spec, color, std::nullopt);
      r.question_type = "how_many_color";
      break;
    case QueryTemplate::WhatColor:
      if (spec.objects.size() != 1)
        throw ContractError("WhatColor template needs a single-object scene");
      r.query.is_tokens = true;
      r.query.tokens = {token_id("what"), token_id("color"), token_id("is"),
                        token_id("the"), token_id("shape")};
      r.count = int(spec.objects[0].color);
      r.question_type = "what_color";
      break;
  }
  return r;
}

// ---- geometry plumbing -----------------------------------------------------

// Places the image at the top-left of an SxS zero canvas, original pixels
// bit-exact.
inline std::vector<float> pad_to_fixed(const std::vector<float>& img, std::size_t s,
                                       std::size_t target) {
  if (img.size() != 3 * s * s)
    throw ShapeError("pad_to_fixed: image is not 3x" + std::to_string(s) + "x" +
                     std::to_string(s));
  if (s > target)
    throw ContractError("pad_to_fixed: source size " + std::to_string(s) +
                        " exceeds target " + std::to_string(target));
  if (s == target) return img;
  std::vector<float> out(3 * target * target, 0.0f);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < s; ++y)
      std::memcpy(out.data() + (c * target + y) * target,
                  img.data() + (c * s + y) * s, s * sizeof(float));
  return out;
}

// Train-time augmentation: horizontal flip with probability 1/2 plus an
// integer jitter of up to +-4 px with white fill. Both keep every query
// answer unchanged: flips map valid scenes to valid scenes, and since
// object centers sit at least one radius (>= 3 px) inside the canvas a
// 4 px shift can clip an object but never remove it.
inline void augment_in_place(std::vector<float>& img, std::size_t s, Rng& rng) {
  if (img.size() != 3 * s * s)
    throw ShapeError("augment_in_place: image is not 3x" + std::to_string(s) +
                     "x" + std::to_string(s));
  if (rng.index(2)) {
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s / 2; ++x)
          std::swap(img[(c * s + y) * s + x], img[(c * s + y) * s + s - 1 - x]);
  }
  long dx = long(rng.index(9)) - 4, dy = long(rng.index(9)) - 4;
  if (dx == 0 && dy == 0) return;
  std::vector<float> out(3 * s * s, 1.0f);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < s; ++y) {
      long sy = long(y) - dy;
      if (sy < 0 || sy >= long(s)) continue;
      for (std::size_t x = 0; x < s; ++x) {
        long sx = long(x) - dx;
        if (sx < 0 || sx >= long(s)) continue;
        out[(c * s + y) * s + x] = img[(c * s + sy) * s + sx];
      }
    }
  img = std::move(out);
}

inline std::vector<float> resize_nearest(const std::vector<float>& img,
                                         std::size_t from, std::size_t to) {
  if (img.size() != 3 * from * from)
    throw ShapeError("resize_nearest: image is not 3x" + std::to_string(from) +
                     "x" + std::to_string(from));
  if (from == to) return img;
  std::vector<float> out(3 * to * to);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < to; ++y) {
      std::size_t sy = std::min(from - 1, std::size_t(double(y) * from / to));
      for (std::size_t x = 0; x < to; ++x) {
        std::size_t sx = std::min(from - 1, std::size_t(double(x) * from / to));
        out[(c * to + y) * to + x] = img[(c * from + sy) * from + sx];
      }
    }
  return out;
}

// Uniform draw from the multi-scale training set.
inline std::size_t sample_scale(Rng& rng, const std::vector<std::size_t>& sizes) {
  if (sizes.empty()) throw ContractError("sample_scale: empty size set");
  return sizes[rng.index(sizes.size())];
}

// ---- dataset container -----------------------------------------------------

struct DataSample {
  std::size_t image_offset = 0;  // byte offset into the image blob
  Query query;
  int count = 0;
  std::string question_type;
};

struct Dataset {
  std::size_t canvas_size = 64;
  std::vector<DataSample> samples;
  std::vector<float> blob;  // concatenated canvas-size renders, little-endian

  std::vector<float> image(std::size_t i) const {
    std::size_t n = 3 * canvas_size * canvas_size;
    std::size_t off = samples.at(i).image_offset / sizeof(float);
    return std::vector<float>(blob.begin() + off, blob.begin() + off + n);
  }

  // Answer label: count for counting questions, offset color id for
  // "what color" questions (color answers live after the count classes).
  std::size_t answer(std::size_t i, std::size_t count_classes) const {
    const auto& s = samples.at(i);
    if (s.question_type == "what_color") return count_classes + std::size_t(s.count);
    return std::size_t(s.count);
  }
};

// Half the batch from zero-count samples, half from non-zero (non-count
// question types count as non-zero); odd sizes round the non-zero half up.
inline std::vector<std::size_t> balanced_batch(const Dataset& ds, Rng& rng,
                                               std::size_t batch_size) {
  std::vector<std::size_t> zero, nonzero;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    bool is_zero =
        ds.samples[i].question_type != "what_color" && ds.samples[i].count == 0;
    (is_zero ? zero : nonzero).push_back(i);
  }
  if (zero.empty() || nonzero.empty())
    throw ContractError("balanced_batch: a stratum is empty");
  std::size_t n_nonzero = (batch_size + 1) / 2;
  std::vector<std::size_t> batch;
  batch.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size - n_nonzero; ++i)
    batch.push_back(zero[rng.index(zero.size())]);
  for (std::size_t i = 0; i < n_nonzero; ++i)
    batch.push_back(nonzero[rng.index(nonzero.size())]);
  return batch;
}

inline void save_dataset(const Dataset& ds, const std::string& dir);
inline Dataset load_dataset(const std::string& dir);

inline void save_dataset(const Dataset& ds, const std::string& dir) {
  std::ofstream manifest(dir + "/manifest.txt");
  if (!manifest) throw IoError("cannot write " + dir + "/manifest.txt");
  manifest << "canvas_size=" << ds.canvas_size << "\n";
  for (const auto& s : ds.samples) {
    manifest << s.image_offset << " ";
    if (s.query.is_tokens) {
      manifest << "tokens ";
      for (std::size_t i = 0; i < s.query.tokens.size(); ++i)
        manifest << (i ? "," : "") << s.query.tokens[i];
    } else {
      manifest << "category " << s.query.category_id;
    }
    manifest << " " << s.count << " " << s.question_type << "\n";
  }
  std::ofstream blob(dir + "/images.bin", std::ios::binary);
  if (!blob) throw IoError("cannot write " + dir + "/images.bin");
  blob.write(reinterpret_cast<const char*>(ds.blob.data()),
             std::streamsize(ds.blob.size() * sizeof(float)));
  if (!blob) throw IoError("short write to " + dir + "/images.bin");
}

inline Dataset load_dataset(const std::string& dir) {
  std::ifstream manifest(dir + "/manifest.txt");
  if (!manifest) throw IoError("cannot read " + dir + "/manifest.txt");
  Dataset ds;
  std::string header;
  if (!std::getline(manifest, header) || header.rfind("canvas_size=", 0) != 0)
    throw IoError("bad dataset manifest header in " + dir);
  ds.canvas_size = std::stoul(header.substr(12));
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    DataSample s;
    std::size_t p1 = line.find(' ');
    std::size_t p2 = line.find(' ', p1 + 1);
    std::size_t p3 = line.find(' ', p2 + 1);
    std::size_t p4 = line.find(' ', p3 + 1);
    if (p4 == std::string::npos) throw IoError("bad manifest line: " + line);
    s.image_offset = std::stoul(line.substr(0, p1));
    std::string kind = line.substr(p1 + 1, p2 - p1 - 1);
    std::string query = line.substr(p2 + 1, p3 - p2 - 1);
    s.count = std::stoi(line.substr(p3 + 1, p4 - p3 - 1));
    s.question_type = line.substr(p4 + 1);
    if (kind == "tokens") {
      s.query.is_tokens = true;
      std::size_t pos = 0;
      while (pos < query.size()) {
        std::size_t comma = query.find(',', pos);
        if (comma == std::string::npos) comma = query.size();
        s.query.tokens.push_back(std::stoul(query.substr(pos, comma - pos)));
        pos = comma + 1;
      }
    } else if (kind == "category") {
      s.query.category_id = std::stoul(query);
    } else {
      throw IoError("bad query kind '" + kind + "' in manifest");
    }
    ds.samples.push_back(std::move(s));
  }
  std::ifstream blob(dir + "/images.bin", std::ios::binary | std::ios::ate);
  if (!blob) throw IoError("cannot read " + dir + "/images.bin");
  std::size_t bytes = std::size_t(blob.tellg());
  blob.seekg(0);
  ds.blob.resize(bytes / sizeof(float));
  blob.read(reinterpret_cast<char*>(ds.blob.data()), std::streamsize(bytes));
  return ds;
}

inline void save_vocabulary(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  for (const auto& w : vocabulary()) f << w << "\n";
}

// ---- generation ------------------------------------------------------------

enum class QueryKind { Category, Question, Mixed };

struct GenConfig {
  std::size_t n_samples = 5000;
  std::size_t max_objects = 9;
  SceneGeometry geometry;
  QueryKind query_kind = QueryKind::Question;
};

// Pure per index: sample i depends only on (rng, i), so shards generated by
// different workers merge deterministically in index order.
inline Dataset generate(const GenConfig& cfg, const Rng& base) {
  Dataset ds;
  ds.canvas_size = cfg.geometry.canvas_size;
  std::size_t img_bytes = 3 * ds.canvas_size * ds.canvas_size * sizeof(float);
  ds.blob.reserve(cfg.n_samples * img_bytes / sizeof(float));
  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    Rng rng = base.fork(i);
    QueryTemplate tmpl;
    switch (cfg.query_kind) {
      case QueryKind::Category:
        tmpl = QueryTemplate::Category;
        break;
      case QueryKind::Question:
        tmpl = QueryTemplate(1 + rng.index(3));
        break;
      case QueryKind::Mixed:
        tmpl = rng.index(2) == 0 ? QueryTemplate::WhatColor
                                 : QueryTemplate(1 + rng.index(3));
        break;
    }
    SceneSpec spec;
    if (tmpl == QueryTemplate::WhatColor) {
      // color questions use single-object scenes so the answer is unambiguous
      do {
        spec = sample_scene(rng, 1, cfg.geometry);
      } while (spec.objects.size() != 1);
    } else {
      spec = sample_scene(rng, cfg.max_objects, cfg.geometry);
    }
    auto qr = make_query(spec, tmpl, rng);
    DataSample s;
    s.image_offset = ds.blob.size() * sizeof(float);
    s.query = qr.query;
    s.count = qr.count;
    s.question_type = qr.question_type;
    auto img = render_scene(spec, ds.canvas_size);
    ds.blob.insert(ds.blob.end(), img.begin(), img.end());
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace movie::synth

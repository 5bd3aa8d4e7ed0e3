#include "bicanet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "json.hpp"

namespace bicanet::data {
namespace {

using json = nlohmann::ordered_json;

bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

class HeaderReader {
 public:
  HeaderReader(const std::vector<std::uint8_t>& bytes, std::size_t pos) : bytes_(bytes), pos_(pos) {}

  std::size_t pos() const { return pos_; }

  void skip_separators() {
    while (pos_ < bytes_.size()) {
      if (is_space(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  int number(const char* what) {
    skip_separators();
    const std::size_t start = pos_;
    long long v = 0;
    while (pos_ < bytes_.size() && bytes_[pos_] >= '0' && bytes_[pos_] <= '9') {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > 1'000'000) throw ParseError(start, std::string(what) + " is too large");
      ++pos_;
    }
    if (pos_ == start) throw ParseError(start, std::string("expected ") + what);
    return static_cast<int>(v);
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path.string());
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

using Rgb = std::array<double, 3>;

Rgb hsv_to_rgb(double h, double s, double v) {
  const double i = std::floor(h * 6.0);
  const double f = h * 6.0 - i;
  const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// Foreground hues spread over the colour wheel; background is drawn per image.
Rgb base_color(int cls, int num_classes) {
  const double hue = static_cast<double>(cls - 1) / static_cast<double>(num_classes - 1);
  return hsv_to_rgb(hue, 0.75, 0.9);
}

struct ShapeGeometry {
  Primitive kind = Primitive::kRectangle;
  double cx = 0, cy = 0, r = 0;
  double half_w = 0, half_h = 0;
  int orientation = 0;  // triangle apex: quarter turns from "up"
};

double edge(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

bool covers(const ShapeGeometry& g, double px, double py) {
  const double dx = px - g.cx, dy = py - g.cy;
  switch (g.kind) {
    case Primitive::kRectangle:
      return std::abs(dx) <= g.half_w && std::abs(dy) <= g.half_h;
    case Primitive::kDisk:
      return dx * dx + dy * dy <= g.r * g.r;
    case Primitive::kRing: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= g.r * g.r && d2 >= 0.25 * g.r * g.r;
    }
    case Primitive::kTriangle: {
      double u = dx, v = dy;
      for (int k = 0; k < g.orientation; ++k) {
        const double t = u;
        u = v;
        v = -t;
      }
      const double r = g.r;
      const double e0 = edge(0, -r, r, r, u, v), e1 = edge(r, r, -r, r, u, v), e2 = edge(-r, r, 0, -r, u, v);
      return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
    }
  }
  return false;
}

std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

json spec_to_json(const SyntheticSpec& s) {
  json j;
  j["num_classes"] = s.num_classes;
  j["min_shapes"] = s.min_shapes;
  j["max_shapes"] = s.max_shapes;
  j["width"] = s.width;
  j["height"] = s.height;
  j["color_jitter"] = s.color_jitter;
  j["color_confusion"] = s.color_confusion;
  j["noise"] = s.noise;
  j["seed"] = s.seed;
  return j;
}

void require_same_extent(const SegSample& s) {
  const Shape is = s.image.shape();
  if (is.n != 1 || is.c != 3) throw DataError("sample image must be (1, 3, h, w), got " + is.str());
  if (s.labels.n != 1 || s.labels.h != is.h || s.labels.w != is.w) {
    throw DataError("sample labels (" + std::to_string(s.labels.h) + "x" + std::to_string(s.labels.w) +
                    ") do not match image " + is.str());
  }
}

}  // namespace

// ---- rasters ----------------------------------------------------------------

Raster decode_pnm(const std::vector<std::uint8_t>& bytes) {
  if (bytes.empty() || bytes[0] != 'P') throw ParseError(0, "missing 'P' magic");
  if (bytes.size() < 2 || (bytes[1] != '5' && bytes[1] != '6')) throw ParseError(1, "only P5 and P6 are supported");
  if (bytes.size() < 3 || (!is_space(bytes[2]) && bytes[2] != '#')) throw ParseError(2, "expected whitespace after magic");
  Raster r;
  r.channels = bytes[1] == '5' ? 1 : 3;
  HeaderReader h(bytes, 2);
  h.skip_separators();
  const std::size_t w_at = h.pos();
  r.width = h.number("width");
  r.height = h.number("height");
  if (r.width < 1 || r.height < 1) throw ParseError(w_at, "width and height must be positive");
  h.skip_separators();
  const std::size_t max_at = h.pos();
  const int maxval = h.number("maxval");
  if (maxval != 255) throw ParseError(max_at, "only maxval 255 is supported, got " + std::to_string(maxval));
  if (h.pos() >= bytes.size() || !is_space(bytes[h.pos()])) throw ParseError(h.pos(), "expected one whitespace before data");
  const std::size_t start = h.pos() + 1;
  const std::size_t expected = static_cast<std::size_t>(r.width) * r.height * r.channels;
  if (bytes.size() - start < expected) {
    throw ParseError(bytes.size(), "truncated pixel data: expected " + std::to_string(expected) + " bytes, found " +
                                       std::to_string(bytes.size() - start));
  }
  if (bytes.size() - start > expected) throw ParseError(start + expected, "trailing bytes after pixel data");
  r.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start), bytes.end());
  return r;
}

std::vector<std::uint8_t> encode_pnm(const Raster& r) {
  if (r.channels != 1 && r.channels != 3) throw std::invalid_argument("raster must have 1 or 3 channels");
  if (r.width < 1 || r.height < 1) throw std::invalid_argument("raster must be non-empty");
  if (r.pixels.size() != static_cast<std::size_t>(r.width) * r.height * r.channels) {
    throw std::invalid_argument("raster pixel count does not match its extents");
  }
  const std::string header = std::string(r.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(r.width) + " " +
                             std::to_string(r.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), r.pixels.begin(), r.pixels.end());
  return out;
}

Raster read_pnm(const std::filesystem::path& path) { return decode_pnm(read_file(path)); }

void write_pnm(const std::filesystem::path& path, const Raster& raster) { write_file(path, encode_pnm(raster)); }

LabelMap read_labels(const std::filesystem::path& path, int num_classes) {
  const Raster r = read_pnm(path);
  if (r.channels != 1) throw DataError(path.string() + ": label maps must be P5");
  LabelMap labels(1, r.height, r.width);
  labels.data = r.pixels;
  try {
    check_labels(labels, num_classes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return labels;
}

void write_labels(const std::filesystem::path& path, const LabelMap& labels, int b) {
  Raster r{labels.w, labels.h, 1, {}};
  const auto first = labels.data.begin() + static_cast<std::ptrdiff_t>(labels.index(b, 0, 0));
  r.pixels.assign(first, first + static_cast<std::ptrdiff_t>(labels.h) * labels.w);
  write_pnm(path, r);
}

const std::array<std::array<std::uint8_t, 3>, 256>& palette() {
  static const auto table = [] {
    std::array<std::array<std::uint8_t, 3>, 256> t{};
    for (int i = 0; i < 256; ++i) {
      int c = i, r = 0, g = 0, b = 0;
      for (int j = 0; j < 8; ++j) {
        r |= ((c >> 0) & 1) << (7 - j);
        g |= ((c >> 1) & 1) << (7 - j);
        b |= ((c >> 2) & 1) << (7 - j);
        c >>= 3;
      }
      t[i] = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g), static_cast<std::uint8_t>(b)};
    }
    return t;
  }();
  return table;
}

Raster colorize(const LabelMap& labels, int b) {
  Raster r{labels.w, labels.h, 3, {}};
  r.pixels.reserve(static_cast<std::size_t>(labels.h) * labels.w * 3);
  for (int y = 0; y < labels.h; ++y)
    for (int x = 0; x < labels.w; ++x) {
      const auto& rgb = palette()[labels.at(b, y, x)];
      r.pixels.insert(r.pixels.end(), rgb.begin(), rgb.end());
    }
  return r;
}

Raster to_raster(const Tensor<float>& image, int b) {
  const Shape s = image.shape();
  if (s.c != 3) throw ShapeError("channels", "to_raster expects 3 channels, got " + s.str());
  Raster r{s.w, s.h, 3, {}};
  r.pixels.resize(static_cast<std::size_t>(s.h) * s.w * 3);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x)
      for (int c = 0; c < 3; ++c)
        r.pixels[(static_cast<std::size_t>(y) * s.w + x) * 3 + c] = quantize(image.at(b, c, y, x));
  return r;
}

Tensor<float> from_raster(const Raster& r) {
  if (r.channels != 3) throw DataError("images must be P6 (3 channels)");
  Tensor<float> t(Shape{1, 3, r.height, r.width});
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x)
      for (int c = 0; c < 3; ++c)
        t.at(0, c, y, x) = static_cast<float>(r.pixels[(static_cast<std::size_t>(y) * r.width + x) * 3 + c]) / 255.0f;
  return t;
}

// ---- synthetic data -------------------------------------------------------------

void validate(const SegSample& sample) {
  require_same_extent(sample);
  const bool any = std::any_of(sample.labels.data.begin(), sample.labels.data.end(),
                               [](std::uint8_t v) { return v != LabelMap::kIgnore; });
  if (!any) throw DataError("sample has no labelled pixel");
}

Primitive primitive_for_class(int cls) {
  if (cls < 1) throw std::invalid_argument("class 0 is background and has no primitive");
  return static_cast<Primitive>((cls - 1) % 4);
}

void validate(const SyntheticSpec& s) {
  if (s.num_classes < 2 || s.num_classes >= LabelMap::kIgnore) throw ConfigError("synthetic: num_classes must be in [2, 254]");
  if (s.min_shapes < 0 || s.max_shapes < s.min_shapes) throw ConfigError("synthetic: need 0 <= min_shapes <= max_shapes");
  if (s.width < 8 || s.height < 8) throw ConfigError("synthetic: canvas must be at least 8x8");
  if (s.color_jitter < 0 || s.noise < 0) throw ConfigError("synthetic: jitter and noise must be non-negative");
  if (s.color_confusion < 0 || s.color_confusion > 1) throw ConfigError("synthetic: color_confusion must be in [0, 1]");
}

SegSample generate_sample(const SyntheticSpec& spec, std::size_t index) {
  validate(spec);
  std::mt19937_64 rng(splitmix64(spec.seed ^ splitmix64(index)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  const int H = spec.height, W = spec.width, L = spec.num_classes;
  std::vector<Rgb> canvas(static_cast<std::size_t>(H) * W);
  SegSample s{Tensor<float>(Shape{1, 3, H, W}), LabelMap(1, H, W, 0)};

  const double grey = uniform(0.15, 0.55);
  const Rgb tint{uniform(-0.08, 0.08), uniform(-0.08, 0.08), uniform(-0.08, 0.08)};
  for (auto& px : canvas) px = {grey + tint[0], grey + tint[1], grey + tint[2]};

  const int shapes = pick(spec.min_shapes, spec.max_shapes);
  const double extent = std::min(H, W);
  for (int k = 0; k < shapes; ++k) {
    const int cls = pick(1, L - 1);
    ShapeGeometry g;
    g.kind = primitive_for_class(cls);
    g.cx = uniform(0, W);
    g.cy = uniform(0, H);
    g.r = uniform(extent / 8.0, extent / 3.5);
    g.half_w = g.r * uniform(0.6, 1.0);
    g.half_h = g.r * uniform(0.6, 1.0);
    g.orientation = pick(0, 3);

    int paint_cls = cls;
    if (L > 2 && unit(rng) < spec.color_confusion) {
      paint_cls = pick(1, L - 2);
      if (paint_cls >= cls) ++paint_cls;
    }
    Rgb color = base_color(paint_cls, L);
    for (auto& c : color) c += uniform(-spec.color_jitter, spec.color_jitter);

    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        if (covers(g, x + 0.5, y + 0.5)) {
          canvas[static_cast<std::size_t>(y) * W + x] = color;
          s.labels.at(0, y, x) = static_cast<std::uint8_t>(cls);
        }
  }

  std::normal_distribution<double> noise(0.0, spec.noise > 0 ? spec.noise : 1.0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = canvas[static_cast<std::size_t>(y) * W + x][c];
        if (spec.noise > 0) v += noise(rng);
        // Store exactly what an 8-bit raster can hold so disk round-trips are lossless.
        s.image.at(0, c, y, x) = static_cast<float>(quantize(v)) / 255.0f;
      }
  return s;
}

std::vector<SegSample> generate_synthetic(const SyntheticSpec& spec, std::size_t count) {
  if (count < 1) throw std::invalid_argument("generate_synthetic: count must be >= 1");
  std::vector<SegSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_sample(spec, i));
  return out;
}

// ---- augmentation -------------------------------------------------------------

SegSample resize(const SegSample& in, int height, int width) {
  require_same_extent(in);
  if (height < 1 || width < 1) throw std::invalid_argument("resize: target extents must be >= 1");
  const int H = in.labels.h, W = in.labels.w;
  SegSample out{Tensor<float>(Shape{1, 3, height, width}), LabelMap(1, height, width)};
  const double ry = static_cast<double>(H) / height, rx = static_cast<double>(W) / width;
  for (int y = 0; y < height; ++y) {
    const double sy = std::clamp((y + 0.5) * ry - 0.5, 0.0, H - 1.0);
    const int y0 = static_cast<int>(sy), y1 = std::min(y0 + 1, H - 1);
    const double fy = sy - y0;
    const int ny = std::min(static_cast<int>((y + 0.5) * ry), H - 1);
    for (int x = 0; x < width; ++x) {
      const double sx = std::clamp((x + 0.5) * rx - 0.5, 0.0, W - 1.0);
      const int x0 = static_cast<int>(sx), x1 = std::min(x0 + 1, W - 1);
      const double fx = sx - x0;
      for (int c = 0; c < 3; ++c) {
        const double v = (1 - fy) * ((1 - fx) * in.image.at(0, c, y0, x0) + fx * in.image.at(0, c, y0, x1)) +
                         fy * ((1 - fx) * in.image.at(0, c, y1, x0) + fx * in.image.at(0, c, y1, x1));
        out.image.at(0, c, y, x) = static_cast<float>(v);
      }
      const int nx = std::min(static_cast<int>((x + 0.5) * rx), W - 1);
      out.labels.at(0, y, x) = in.labels.at(0, ny, nx);
    }
  }
  return out;
}

SegSample flip_horizontal(const SegSample& in) {
  require_same_extent(in);
  SegSample out = in;
  const int H = in.labels.h, W = in.labels.w;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      out.labels.at(0, y, x) = in.labels.at(0, y, W - 1 - x);
      for (int c = 0; c < 3; ++c) out.image.at(0, c, y, x) = in.image.at(0, c, y, W - 1 - x);
    }
  return out;
}

SegSample flip_vertical(const SegSample& in) {
  require_same_extent(in);
  SegSample out = in;
  const int H = in.labels.h, W = in.labels.w;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      out.labels.at(0, y, x) = in.labels.at(0, H - 1 - y, x);
      for (int c = 0; c < 3; ++c) out.image.at(0, c, y, x) = in.image.at(0, c, H - 1 - y, x);
    }
  return out;
}

SegSample crop(const SegSample& in, int y0, int x0, int height, int width) {
  require_same_extent(in);
  if (height < 1 || width < 1) throw std::invalid_argument("crop: extents must be >= 1");
  SegSample out{Tensor<float>(Shape{1, 3, height, width}, 0.0f), LabelMap(1, height, width, LabelMap::kIgnore)};
  for (int y = 0; y < height; ++y) {
    const int sy = y0 + y;
    if (sy < 0 || sy >= in.labels.h) continue;
    for (int x = 0; x < width; ++x) {
      const int sx = x0 + x;
      if (sx < 0 || sx >= in.labels.w) continue;
      out.labels.at(0, y, x) = in.labels.at(0, sy, sx);
      for (int c = 0; c < 3; ++c) out.image.at(0, c, y, x) = in.image.at(0, c, sy, sx);
    }
  }
  return out;
}

SegSample augment(const SegSample& sample, const AugmentConfig& cfg, std::mt19937_64& rng) {
  if (cfg.scale_min <= 0 || cfg.scale_max < cfg.scale_min) throw ConfigError("augment: bad scale range");
  if (cfg.aspect_min <= 0 || cfg.aspect_max < cfg.aspect_min) throw ConfigError("augment: bad aspect range");
  if (cfg.crop_height < 1 || cfg.crop_width < 1) throw ConfigError("augment: crop must be >= 1");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double scale = cfg.scale_min + (cfg.scale_max - cfg.scale_min) * unit(rng);
  const double aspect = cfg.aspect_min + (cfg.aspect_max - cfg.aspect_min) * unit(rng);
  const bool hflip = unit(rng) < 0.5;
  const bool vflip = unit(rng) < 0.5;

  // aspect = (width scale) / (height scale)
  const int h = std::max(1, static_cast<int>(std::lround(sample.labels.h * scale / std::sqrt(aspect))));
  const int w = std::max(1, static_cast<int>(std::lround(sample.labels.w * scale * std::sqrt(aspect))));
  SegSample out = (h == sample.labels.h && w == sample.labels.w) ? sample : resize(sample, h, w);
  if (cfg.horizontal_flip && hflip) out = flip_horizontal(out);
  if (cfg.vertical_flip && vflip) out = flip_vertical(out);

  auto offset = [&](int have, int want) {
    return have >= want ? std::uniform_int_distribution<int>(0, have - want)(rng)
                        : std::uniform_int_distribution<int>(have - want, 0)(rng);
  };
  const int y0 = offset(h, cfg.crop_height);
  const int x0 = offset(w, cfg.crop_width);
  if (y0 == 0 && x0 == 0 && h == cfg.crop_height && w == cfg.crop_width) return out;
  return crop(out, y0, x0, cfg.crop_height, cfg.crop_width);
}

// ---- on-disk datasets ------------------------------------------------------------

const std::vector<std::size_t>& Manifest::split(const std::string& name) const {
  for (const auto& [n, ids] : splits)
    if (n == name) return ids;
  throw DataError("dataset has no split named '" + name + "'");
}

std::string sample_stem(std::size_t index) {
  std::string s = std::to_string(index);
  return std::string(s.size() < 4 ? 4 - s.size() : 0, '0') + s;
}

Manifest write_synthetic_dataset(const std::filesystem::path& dir, const SyntheticSpec& spec, std::size_t count,
                                 std::size_t val_count) {
  validate(spec);
  if (count < 1) throw std::invalid_argument("dataset: count must be >= 1");
  if (val_count >= count) throw ConfigError("dataset: val_count must leave at least one training sample");
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "labels");
  Manifest m;
  m.num_classes = spec.num_classes;
  m.splits = {{"train", {}}, {"val", {}}};
  for (std::size_t i = 0; i < count; ++i) {
    const SegSample s = generate_sample(spec, i);
    write_pnm(dir / "images" / (sample_stem(i) + ".ppm"), to_raster(s.image));
    write_labels(dir / "labels" / (sample_stem(i) + ".pgm"), s.labels);
    (i < count - val_count ? m.splits[0].second : m.splits[1].second).push_back(i);
  }
  json j;
  j["num_classes"] = m.num_classes;
  j["count"] = count;
  j["generator"] = spec_to_json(spec);
  json splits = json::object();
  for (const auto& [name, ids] : m.splits) splits[name] = ids;
  j["splits"] = splits;
  const std::string text = j.dump(2) + "\n";
  write_file(dir / "manifest.json", std::vector<std::uint8_t>(text.begin(), text.end()));
  return m;
}

Manifest read_manifest(const std::filesystem::path& dir) {
  const auto bytes = read_file(dir / "manifest.json");
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw ParseError(e.byte, std::string("manifest.json: ") + e.what());
  }
  Manifest m;
  try {
    m.num_classes = j.at("num_classes").get<int>();
    for (const auto& [name, ids] : j.at("splits").items()) m.splits.emplace_back(name, ids.get<std::vector<std::size_t>>());
  } catch (const json::exception& e) {
    throw DataError(std::string("manifest.json: ") + e.what());
  }
  if (m.num_classes < 2) throw DataError("manifest.json: num_classes must be >= 2");
  return m;
}

std::vector<SegSample> load_split(const std::filesystem::path& dir, const std::string& split) {
  const Manifest m = read_manifest(dir);
  std::vector<SegSample> out;
  for (const std::size_t id : m.split(split)) {
    SegSample s;
    s.image = from_raster(read_pnm(dir / "images" / (sample_stem(id) + ".ppm")));
    s.labels = read_labels(dir / "labels" / (sample_stem(id) + ".pgm"), m.num_classes);
    validate(s);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace bicanet::data

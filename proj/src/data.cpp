#include "af/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "af/common.hpp"

namespace fs = std::filesystem;

namespace af {
namespace {

// Raster palette and geometry, as fractions of image width/height. Frozen:
// the annotation files and every label-consistency test depend on them.
constexpr double kBackground = 0.15;
constexpr double kHeadValue = 0.85;
constexpr double kInkValue = 0.08;
constexpr double kNoiseAmp = 0.02;

constexpr double kHeadCx = 0.50, kHeadCy = 0.52;
constexpr double kHeadRx = 0.40, kHeadRy = 0.46;

constexpr double kEyeY = 0.40;
constexpr double kEyeLeftX = 0.35, kEyeRightX = 0.65;
constexpr double kEyeHalfSpanX = 0.075;
constexpr double kEyeMinRy = 0.015, kEyeOpenRy = 0.065;

constexpr double kBrowHalfSpan = 0.09;
constexpr double kBrowBaseY = 0.28;
constexpr double kBrowLift = 0.05;
constexpr double kBrowOuterTilt = 0.03;
constexpr double kBrowInnerDrop = 0.05;
constexpr double kBrowHalfWidth = 0.012;

constexpr double kMouthCx = 0.50, kMouthCy = 0.72;
constexpr double kMouthHalfSpan = 0.16;
constexpr double kMouthAmp = 0.06;
constexpr double kMouthHalfWidth = 0.015;
constexpr int kMouthPolylinePoints = 33;

constexpr std::size_t kMinRenderSize = 32;
constexpr std::size_t kMaxImageSide = 1 << 15;
constexpr double kMaskedRowChance = 0.1;

void check_latent(const FaceLatent& l) {
  if (std::abs(l.mouth_curve) > 1.0 || std::abs(l.brow_raise) > 1.0 ||
      l.eye_open < 0.0 || l.eye_open > 1.0 || l.brow_knit < 0.0 ||
      l.brow_knit > 1.0)
    throw std::invalid_argument("face latent out of range");
}

// d is the signed pixel distance to the shape edge (negative inside);
// coverage ramps over ~1px.
double smooth_cover(double d) {
  const double t = std::clamp(0.5 - d, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

void paint(std::vector<double>& g, std::size_t i, double value, double cov) {
  g[i] += (value - g[i]) * cov;
}

void fill_ellipse(std::vector<double>& g, std::size_t h, std::size_t w,
                  double cx, double cy, double rx, double ry, double value) {
  const double scale = std::min(rx, ry);
  const std::size_t ya = static_cast<std::size_t>(
      std::clamp(std::floor(cy - ry - 1.0), 0.0, static_cast<double>(h)));
  const std::size_t yb = static_cast<std::size_t>(
      std::clamp(std::ceil(cy + ry + 1.0), 0.0, static_cast<double>(h)));
  for (std::size_t y = ya; y < yb; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
      const double d = (std::sqrt(dx * dx + dy * dy) - 1.0) * scale;
      const double cov = smooth_cover(d);
      if (cov > 0.0) paint(g, y * w + x, value, cov);
    }
}

double seg_dist(double px, double py, double ax, double ay, double bx,
                double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 == 0.0 ? 0.0 : ((px - ax) * vx + (py - ay) * vy) / len2;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

struct Pt {
  double x, y;
};

void stroke_polyline(std::vector<double>& g, std::size_t h, std::size_t w,
                     const std::vector<Pt>& pts, double halfwidth,
                     double value) {
  double xa = pts[0].x, xb = pts[0].x, ya = pts[0].y, yb = pts[0].y;
  for (const Pt& p : pts) {
    xa = std::min(xa, p.x);
    xb = std::max(xb, p.x);
    ya = std::min(ya, p.y);
    yb = std::max(yb, p.y);
  }
  const double m = halfwidth + 1.0;
  const auto lo = [](double v, std::size_t n) {
    return static_cast<std::size_t>(
        std::clamp(std::floor(v), 0.0, static_cast<double>(n)));
  };
  const auto hi = [](double v, std::size_t n) {
    return static_cast<std::size_t>(
        std::clamp(std::ceil(v), 0.0, static_cast<double>(n)));
  };
  for (std::size_t y = lo(ya - m, h); y < hi(yb + m, h); ++y)
    for (std::size_t x = lo(xa - m, w); x < hi(xb + m, w); ++x) {
      double d = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i + 1 < pts.size(); ++i)
        d = std::min(d, seg_dist(x + 0.5, y + 0.5, pts[i].x, pts[i].y,
                                 pts[i + 1].x, pts[i + 1].y));
      const double cov = smooth_cover(d - halfwidth);
      if (cov > 0.0) paint(g, y * w + x, value, cov);
    }
}

void stroke_brow(std::vector<double>& g, std::size_t h, std::size_t w,
                 const FaceLatent& l, double eye_x, double inner_sign) {
  const double base_y = (kBrowBaseY - kBrowLift * l.brow_raise) * h;
  const Pt outer{(eye_x - inner_sign * kBrowHalfSpan) * w,
                 base_y - kBrowOuterTilt * l.brow_raise * h};
  const Pt inner{(eye_x + inner_sign * kBrowHalfSpan) * w,
                 base_y + kBrowInnerDrop * l.brow_knit * h};
  stroke_polyline(g, h, w, {outer, inner}, kBrowHalfWidth * h, kInkValue);
}

std::vector<Pt> mouth_polyline(const FaceLatent& l, std::size_t h,
                               std::size_t w) {
  std::vector<Pt> pts(kMouthPolylinePoints);
  for (int i = 0; i < kMouthPolylinePoints; ++i) {
    const double u = -1.0 + 2.0 * i / (kMouthPolylinePoints - 1);
    pts[i].x = (kMouthCx + u * kMouthHalfSpan) * w;
    pts[i].y = kMouthCy * h + l.mouth_curve * kMouthAmp * h * (1.0 - 2.0 * u * u);
  }
  return pts;
}

std::vector<int> au_labels(const FaceLatent& l) {
  const double mc = l.mouth_curve, eo = l.eye_open;
  const double br = l.brow_raise, bk = l.brow_knit;
  const bool hit[kNumAus] = {
      br > 0.3,
      br > 0.6,
      br < -0.3,
      bk > 0.5,
      eo > 0.8,
      eo < 0.2,
      mc > 0.4,
      mc < -0.4,
      std::abs(mc) > 0.7,
      bk > 0.3 && br < 0.0,
      eo > 0.6 && br > 0.2,
      mc > 0.2 && eo > 0.5,
  };
  std::vector<int> out(kNumAus);
  for (std::size_t i = 0; i < kNumAus; ++i) out[i] = hit[i] ? 1 : 0;
  return out;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t at = line.find(sep, start);
    if (at == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, at - start));
    start = at + 1;
  }
}

double parse_real(const std::string& field, std::size_t lineno) {
  const char* s = field.c_str();
  char* end = nullptr;
  const double v = std::strtod(s, &end);
  if (end == s || *end != '\0' || !std::isfinite(v))
    throw ParseError(msg("expected a real number, got \"", field, "\""),
                     lineno);
  return v;
}

int parse_label_int(const std::string& field, std::size_t lineno) {
  const char* s = field.c_str();
  char* end = nullptr;
  const long v = std::strtol(s, &end, 10);
  if (end == s || *end != '\0' || v < std::numeric_limits<int>::min() ||
      v > std::numeric_limits<int>::max())
    throw ParseError(msg("expected an integer, got \"", field, "\""), lineno);
  return static_cast<int>(v);
}

void check_va_range(double v, const char* what, std::size_t lineno) {
  if (v != kVaMissing && std::abs(v) > 1.0)
    throw ParseError(msg(what, " ", v, " outside [-1,1] and not the ",
                         kVaMissing, " sentinel"),
                     lineno);
}

std::size_t expr_class_count(DataMode mode) {
  return mode == DataMode::kMtl ? 8 : 6;
}

}  // namespace

const char* mode_name(DataMode m) {
  return m == DataMode::kMtl ? "mtl" : "lsd";
}

DataMode parse_mode(const std::string& name) {
  if (name == "mtl" || name == "MTL") return DataMode::kMtl;
  if (name == "lsd" || name == "LSD") return DataMode::kLsd;
  throw std::invalid_argument(msg("unknown data mode \"", name, "\""));
}

const std::vector<std::array<double, 4>>& expr_prototypes(DataMode m) {
  // (valence, arousal, brow_raise, brow_knit)
  static const std::vector<std::array<double, 4>> mtl{
      {0.0, 0.0, 0.0, 0.0},     // neutral
      {-0.8, 0.5, -0.6, 0.9},   // anger
      {-0.6, 0.1, -0.3, 0.6},   // disgust
      {-0.6, 0.8, 0.6, 0.6},    // fear
      {0.9, 0.5, 0.1, 0.0},     // happiness
      {-0.7, -0.4, 0.4, 0.3},   // sadness
      {0.2, 0.9, 0.9, 0.0},     // surprise
      {0.4, -0.5, -0.3, 0.2},   // other
  };
  static const std::vector<std::array<double, 4>> lsd(mtl.begin() + 1,
                                                      mtl.begin() + 7);
  return m == DataMode::kMtl ? mtl : lsd;
}

const std::vector<std::string>& expr_names(DataMode m) {
  static const std::vector<std::string> mtl{"neutral",   "anger",   "disgust",
                                            "fear",      "happiness", "sadness",
                                            "surprise",  "other"};
  static const std::vector<std::string> lsd(mtl.begin() + 1, mtl.begin() + 7);
  return m == DataMode::kMtl ? mtl : lsd;
}

Tensor render_face(const FaceLatent& latent, std::size_t h, std::size_t w) {
  if (h < kMinRenderSize || w < kMinRenderSize)
    throw std::invalid_argument(
        msg("render size ", w, "x", h, " below minimum ", kMinRenderSize));
  check_latent(latent);
  std::vector<double> g(h * w, kBackground);
  fill_ellipse(g, h, w, kHeadCx * w, kHeadCy * h, kHeadRx * w, kHeadRy * h,
               kHeadValue);
  const double eye_ry = (kEyeMinRy + kEyeOpenRy * latent.eye_open) * h;
  fill_ellipse(g, h, w, kEyeLeftX * w, kEyeY * h, kEyeHalfSpanX * w, eye_ry,
               kInkValue);
  fill_ellipse(g, h, w, kEyeRightX * w, kEyeY * h, kEyeHalfSpanX * w, eye_ry,
               kInkValue);
  stroke_brow(g, h, w, latent, kEyeLeftX, 1.0);
  stroke_brow(g, h, w, latent, kEyeRightX, -1.0);
  stroke_polyline(g, h, w, mouth_polyline(latent, h, w), kMouthHalfWidth * h,
                  kInkValue);
  Rng noise(derive_seed(latent.jitter_seed, "pixel-noise"));
  for (double& v : g)
    v = std::clamp(v + noise.uniform(-kNoiseAmp, kNoiseAmp), 0.0, 1.0);
  std::vector<double> rgb(3 * h * w);
  for (std::size_t c = 0; c < 3; ++c)
    std::copy(g.begin(), g.end(), rgb.begin() + c * h * w);
  return Tensor::from({3, h, w}, std::move(rgb));
}

PixelBox mouth_region(std::size_t h, std::size_t w) {
  const double m = kMouthHalfWidth * h + 1.5;
  const auto lo = [](double v) {
    return static_cast<std::size_t>(std::max(0.0, std::floor(v)));
  };
  const auto hi = [](double v, std::size_t n) {
    return static_cast<std::size_t>(
        std::min(static_cast<double>(n), std::ceil(v)));
  };
  PixelBox box;
  box.x0 = lo((kMouthCx - kMouthHalfSpan) * w - m);
  box.x1 = hi((kMouthCx + kMouthHalfSpan) * w + m, w);
  box.y0 = lo((kMouthCy - kMouthAmp) * h - m);
  box.y1 = hi((kMouthCy + kMouthAmp) * h + m, h);
  return box;
}

Labels label_from_latent(const FaceLatent& latent, DataMode mode) {
  check_latent(latent);
  Labels out;
  out.valence = latent.mouth_curve;
  out.arousal = 2.0 * latent.eye_open - 1.0;
  const double p[4] = {out.valence, out.arousal, latent.brow_raise,
                       latent.brow_knit};
  const auto& protos = expr_prototypes(mode);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < protos.size(); ++c) {
    double d2 = 0.0;
    for (int k = 0; k < 4; ++k) {
      const double d = p[k] - protos[c][k];
      d2 += d * d;
    }
    if (d2 < best) {
      best = d2;
      out.expr = static_cast<int>(c);
    }
  }
  out.aus = au_labels(latent);
  return out;
}

FaceLatent sample_latent(DataMode mode, Rng& rng) {
  FaceLatent l;
  if (rng.bernoulli(0.75)) {
    const auto& protos = expr_prototypes(mode);
    const auto& p = protos[rng.uniform_index(protos.size())];
    l.mouth_curve = std::clamp(p[0] + rng.uniform(-0.25, 0.25), -1.0, 1.0);
    l.eye_open =
        std::clamp((p[1] + 1.0) / 2.0 + rng.uniform(-0.15, 0.15), 0.0, 1.0);
    l.brow_raise = std::clamp(p[2] + rng.uniform(-0.25, 0.25), -1.0, 1.0);
    l.brow_knit = std::clamp(p[3] + rng.uniform(-0.15, 0.15), 0.0, 1.0);
  } else {
    l.mouth_curve = rng.uniform(-1.0, 1.0);
    l.eye_open = rng.uniform(0.0, 1.0);
    l.brow_raise = rng.uniform(-1.0, 1.0);
    l.brow_knit = rng.uniform(0.0, 1.0);
  }
  l.jitter_seed = rng.next_u64();
  return l;
}

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw std::invalid_argument(
        msg("expected a [3 x H x W] image, got ", shape_str(image.shape())));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(msg("cannot open ", path, " for writing"));
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  f << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> bytes(3 * plane);
  auto v = image.data();
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      bytes[i * 3 + c] = static_cast<unsigned char>(
          std::lround(std::clamp(v[c * plane + i], 0.0, 1.0) * 255.0));
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError(msg("short write to ", path));
}

namespace {

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string next_ppm_token(std::istream& in) {
  std::string tok;
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      c = in.get();
    } else {
      break;
    }
  }
  while (c != EOF && !std::isspace(c) && c != '#') {
    tok.push_back(static_cast<char>(c));
    c = in.get();
  }
  if (c != EOF) in.unget();
  return tok;
}

std::size_t ppm_number(std::istream& in, const char* what) {
  const std::string tok = next_ppm_token(in);
  char* end = nullptr;
  const unsigned long v = std::strtoul(tok.c_str(), &end, 10);
  if (tok.empty() || end != tok.c_str() + tok.size())
    throw ParseError(msg("bad pixmap ", what, ": \"", tok, "\""));
  return static_cast<std::size_t>(v);
}

}  // namespace

Tensor load_image(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(msg("cannot open ", path));
  if (next_ppm_token(f) != "P6")
    throw ParseError(msg(path, ": not a binary P6 pixmap"));
  const std::size_t w = ppm_number(f, "width");
  const std::size_t h = ppm_number(f, "height");
  const std::size_t maxval = ppm_number(f, "maxval");
  if (w == 0 || h == 0 || w > kMaxImageSide || h > kMaxImageSide)
    throw ParseError(msg(path, ": implausible dimensions ", w, "x", h));
  if (maxval != 255)
    throw ParseError(msg(path, ": unsupported maxval ", maxval));
  f.get();  // single whitespace byte separating header and payload
  std::vector<unsigned char> bytes(3 * w * h);
  f.read(reinterpret_cast<char*>(bytes.data()),
         static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(f.gcount()) != bytes.size())
    throw ParseError(msg(path, ": truncated pixel payload"));
  const std::size_t plane = h * w;
  std::vector<double> v(3 * plane);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      v[c * plane + i] = bytes[i * 3 + c] / 255.0;
  return Tensor::from({3, h, w}, std::move(v));
}

std::string generate_dataset(std::size_t n, DataMode mode, std::uint64_t seed,
                             const std::string& out_dir, std::size_t size) {
  if (n == 0) throw std::invalid_argument("sample count must be at least 1");
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  if (ec)
    throw IoError(msg("cannot create ", out_dir, ": ", ec.message()));
  Rng rng(derive_seed(seed, "gen-data"));
  std::vector<Sample> rows;
  rows.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const FaceLatent latent = sample_latent(mode, rng);
    const Labels lab = label_from_latent(latent, mode);
    char name[32];
    std::snprintf(name, sizeof name, "images/%06zu.ppm", i);
    write_ppm((fs::path(out_dir) / name).string(),
              render_face(latent, size, size));
    Sample s;
    s.path = name;
    s.expr = lab.expr;
    if (mode == DataMode::kMtl) {
      s.valence = lab.valence;
      s.arousal = lab.arousal;
      s.aus = lab.aus;
      if (rng.bernoulli(kMaskedRowChance)) {
        switch (rng.uniform_index(3)) {
          case 0:
            s.valence = kVaMissing;
            s.arousal = kVaMissing;
            break;
          case 1:
            s.expr = kClassMissing;
            break;
          default:
            std::fill(s.aus.begin(), s.aus.end(), kClassMissing);
        }
      }
    }
    rows.push_back(std::move(s));
  }
  const std::string apath = (fs::path(out_dir) / "annotations.csv").string();
  write_annotations(apath, rows, mode);
  return apath;
}

void write_annotations(const std::string& path,
                       const std::vector<Sample>& samples, DataMode mode) {
  std::ofstream f(path);
  if (!f) throw IoError(msg("cannot open ", path, " for writing"));
  if (mode == DataMode::kMtl) {
    f << "path,valence,arousal,expr";
    for (std::size_t k = 0; k < kNumAus; ++k) f << ",au" << k;
    f << "\n";
  } else {
    f << "path,expr\n";
  }
  char num[32];
  for (const Sample& s : samples) {
    f << s.path;
    if (mode == DataMode::kMtl) {
      if (s.aus.size() != kNumAus)
        throw std::invalid_argument(
            msg("sample ", s.path, " has ", s.aus.size(), " AU labels"));
      std::snprintf(num, sizeof num, "%.6f", s.valence);
      f << ',' << num;
      std::snprintf(num, sizeof num, "%.6f", s.arousal);
      f << ',' << num << ',' << s.expr;
      for (int a : s.aus) f << ',' << a;
    } else {
      f << ',' << s.expr;
    }
    f << "\n";
  }
  f.flush();
  if (!f) throw IoError(msg("short write to ", path));
}

std::vector<Sample> parse_annotations(const std::string& path, DataMode mode) {
  std::ifstream f(path);
  if (!f) throw IoError(msg("cannot open ", path));
  const std::size_t want = mode == DataMode::kMtl ? 4 + kNumAus : 2;
  const int n_classes = static_cast<int>(expr_class_count(mode));
  std::vector<Sample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1) {
      if (split(line, ',').size() != want)
        throw ParseError(msg("header has wrong field count for ",
                             mode_name(mode), " annotations"),
                         lineno);
      continue;
    }
    if (line.empty()) continue;
    const std::vector<std::string> fields = split(line, ',');
    if (fields.size() != want)
      throw ParseError(
          msg("expected ", want, " fields, got ", fields.size()), lineno);
    Sample s;
    s.path = fields[0];
    if (s.path.empty()) throw ParseError("empty image path", lineno);
    if (mode == DataMode::kMtl) {
      s.valence = parse_real(fields[1], lineno);
      s.arousal = parse_real(fields[2], lineno);
      check_va_range(s.valence, "valence", lineno);
      check_va_range(s.arousal, "arousal", lineno);
      s.expr = parse_label_int(fields[3], lineno);
      if (s.expr < kClassMissing || s.expr >= n_classes)
        throw ParseError(msg("expression id ", s.expr, " out of range"),
                         lineno);
      s.aus.resize(kNumAus);
      bool any_au = false;
      for (std::size_t k = 0; k < kNumAus; ++k) {
        const int v = parse_label_int(fields[4 + k], lineno);
        if (v < -1 || v > 1)
          throw ParseError(msg("au", k, " must be 0, 1, or -1, got ", v),
                           lineno);
        s.aus[k] = v;
        any_au |= v != kClassMissing;
      }
      const bool any_valid = s.valence != kVaMissing ||
                             s.arousal != kVaMissing ||
                             s.expr != kClassMissing || any_au;
      if (!any_valid)
        throw ParseError("row has every task masked", lineno);
    } else {
      s.expr = parse_label_int(fields[1], lineno);
      if (s.expr < 0 || s.expr >= n_classes)
        throw ParseError(msg("expression id ", s.expr, " out of range"),
                         lineno);
    }
    out.push_back(std::move(s));
  }
  return out;
}

Dataset load_dataset(const std::string& annotation_path, DataMode mode) {
  Dataset ds;
  ds.mode = mode;
  ds.meta = parse_annotations(annotation_path, mode);
  const fs::path base = fs::path(annotation_path).parent_path();
  ds.pixels.reserve(ds.meta.size());
  for (const Sample& s : ds.meta) {
    const Tensor img = load_image((base / s.path).string());
    if (ds.pixels.empty()) {
      ds.height = img.dim(1);
      ds.width = img.dim(2);
    } else if (img.dim(1) != ds.height || img.dim(2) != ds.width) {
      throw std::invalid_argument(
          msg(s.path, " is ", img.dim(2), "x", img.dim(1),
              " but the dataset is ", ds.width, "x", ds.height));
    }
    std::vector<std::uint8_t> px(img.size());
    auto v = img.data();
    for (std::size_t i = 0; i < px.size(); ++i)
      px[i] = static_cast<std::uint8_t>(std::lround(v[i] * 255.0));
    ds.pixels.push_back(std::move(px));
  }
  return ds;
}

Tensor hflip(const Tensor& image) {
  if (image.rank() != 3)
    throw std::invalid_argument("hflip expects a [C x H x W] image");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<double> out(image.size());
  auto v = image.data();
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out[(ci * h + y) * w + x] = v[(ci * h + y) * w + (w - 1 - x)];
  return Tensor::from(image.shape(), std::move(out));
}

Tensor crop_resize(const Tensor& image, std::size_t y0, std::size_t x0,
                   std::size_t ch, std::size_t cw) {
  if (image.rank() != 3)
    throw std::invalid_argument("crop_resize expects a [C x H x W] image");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (ch == 0 || cw == 0 || y0 + ch > h || x0 + cw > w)
    throw std::invalid_argument(msg("crop [", y0, ",", y0 + ch, ") x [", x0,
                                    ",", x0 + cw, ") outside ", w, "x", h));
  const double sy = h > 1 ? static_cast<double>(ch - 1) / (h - 1) : 0.0;
  const double sx = w > 1 ? static_cast<double>(cw - 1) / (w - 1) : 0.0;
  std::vector<double> out(image.size());
  auto v = image.data();
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = y * sy;
    const std::size_t iy = static_cast<std::size_t>(fy);
    const std::size_t iy2 = std::min(iy + 1, ch - 1);
    const double ty = fy - iy;
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = x * sx;
      const std::size_t ix = static_cast<std::size_t>(fx);
      const std::size_t ix2 = std::min(ix + 1, cw - 1);
      const double tx = fx - ix;
      for (std::size_t ci = 0; ci < c; ++ci) {
        const auto at = [&](std::size_t yy, std::size_t xx) {
          return v[(ci * h + y0 + yy) * w + x0 + xx];
        };
        out[(ci * h + y) * w + x] =
            (1 - ty) * ((1 - tx) * at(iy, ix) + tx * at(iy, ix2)) +
            ty * ((1 - tx) * at(iy2, ix) + tx * at(iy2, ix2));
      }
    }
  }
  return Tensor::from(image.shape(), std::move(out));
}

BatchStream::BatchStream(const Dataset& ds, std::size_t batch_size,
                         std::uint64_t seed, bool augment)
    : ds_(&ds), batch_size_(batch_size), seed_(seed), augment_(augment) {
  if (batch_size == 0)
    throw std::invalid_argument("batch size must be at least 1");
  if (ds.meta.empty()) throw std::invalid_argument("empty sample set");
  if (ds.pixels.size() != ds.meta.size())
    throw std::invalid_argument("dataset has unloaded images");
  order_.resize(ds.meta.size());
  start_epoch(0);
}

void BatchStream::start_epoch(std::size_t epoch) {
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  Rng shuffler(derive_seed(seed_, "epoch-shuffle", epoch));
  shuffler.shuffle(order_);
  aug_rng_ = Rng(derive_seed(seed_, "epoch-augment", epoch));
  pos_ = 0;
}

std::size_t BatchStream::batches_per_epoch() const {
  return (order_.size() + batch_size_ - 1) / batch_size_;
}

bool BatchStream::next(Batch& out) {
  if (pos_ >= order_.size()) return false;
  const std::size_t b = std::min(batch_size_, order_.size() - pos_);
  const std::size_t h = ds_->height, w = ds_->width, plane = 3 * h * w;
  out = Batch{};
  std::vector<double> stacked(b * plane);
  for (std::size_t k = 0; k < b; ++k) {
    const std::size_t idx = order_[pos_ + k];
    std::vector<double> px(plane);
    const std::vector<std::uint8_t>& raw = ds_->pixels[idx];
    for (std::size_t i = 0; i < plane; ++i) px[i] = raw[i] / 255.0;
    Tensor img = Tensor::from({3, h, w}, std::move(px));
    if (augment_) {
      const double f = aug_rng_.uniform(0.925, 1.0);
      const std::size_t crop_h =
          std::min(h, static_cast<std::size_t>(std::ceil(f * h)));
      const std::size_t crop_w =
          std::min(w, static_cast<std::size_t>(std::ceil(f * w)));
      const std::size_t oy = aug_rng_.uniform_index(h - crop_h + 1);
      const std::size_t ox = aug_rng_.uniform_index(w - crop_w + 1);
      img = crop_resize(img, oy, ox, crop_h, crop_w);
      if (aug_rng_.bernoulli(0.5)) img = hflip(img);
      const double scale = aug_rng_.uniform(0.8, 1.2);
      for (double& v : img.data_mut()) v = std::clamp(v * scale, 0.0, 1.0);
    }
    std::copy(img.data().begin(), img.data().end(),
              stacked.begin() + k * plane);
    const Sample& s = ds_->meta[idx];
    out.valence.push_back(s.valence);
    out.arousal.push_back(s.arousal);
    out.expr.push_back(s.expr);
    out.aus.push_back(s.aus);
  }
  out.images = Tensor::from({b, 3, h, w}, std::move(stacked));
  pos_ += b;
  return true;
}

}  // namespace af

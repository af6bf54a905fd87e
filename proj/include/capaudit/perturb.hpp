#pragma once

// Spatial and object perturbations of an item image (flips, rotations,
// anchor repositioning, Gaussian blur) plus the compositing diagnostics
// used to screen repositioning artifacts.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "capaudit/error.hpp"
#include "capaudit/image.hpp"
#include "capaudit/rng.hpp"

namespace capaudit::perturb {

enum class Family { kVerticalFlip, kHorizontalFlip, kRotation, kReposition, kBlur };
enum class Anchor { kTL, kTR, kBL, kBR };

inline constexpr std::array<Family, 5> kAllFamilies = {
    Family::kVerticalFlip, Family::kHorizontalFlip, Family::kRotation, Family::kReposition,
    Family::kBlur};
inline constexpr std::array<Anchor, 4> kAllAnchors = {Anchor::kTL, Anchor::kTR, Anchor::kBL,
                                                      Anchor::kBR};
inline constexpr std::array<double, 4> kRotationAngles = {-10.0, -5.0, 5.0, 10.0};
inline constexpr std::array<double, 2> kBlurSigmas = {1.0, 2.0};

inline std::string family_name(Family f) {
  switch (f) {
    case Family::kVerticalFlip: return "vertical_flip";
    case Family::kHorizontalFlip: return "horizontal_flip";
    case Family::kRotation: return "rotation";
    case Family::kReposition: return "reposition";
    case Family::kBlur: return "blur";
  }
  return "?";
}

inline Family parse_family(std::string_view s) {
  for (Family f : kAllFamilies)
    if (family_name(f) == s) return f;
  throw ConfigError("unknown perturbation family '" + std::string(s) + "'");
}

inline std::string anchor_name(Anchor a) {
  switch (a) {
    case Anchor::kTL: return "TL";
    case Anchor::kTR: return "TR";
    case Anchor::kBL: return "BL";
    case Anchor::kBR: return "BR";
  }
  return "?";
}

inline Anchor parse_anchor(std::string_view s) {
  for (Anchor a : kAllAnchors)
    if (anchor_name(a) == s) return a;
  throw ConfigError("unknown anchor '" + std::string(s) + "'");
}

// Formats a number the short way: 5 -> "5", 1 -> "1.0" for sigmas.
inline std::string format_angle(double a) {
  std::ostringstream os;
  if (a > 0) os << '+';
  if (a == std::round(a)) {
    os << static_cast<long long>(a);
  } else {
    os << a;
  }
  return os.str();
}

inline std::string format_sigma(double s) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(1);
  os << s;
  return os.str();
}

struct PerturbationSpec {
  Family family = Family::kVerticalFlip;
  double angle_deg = 0.0;
  Anchor anchor = Anchor::kTL;
  double sigma = 0.0;

  static PerturbationSpec vertical_flip() { return {Family::kVerticalFlip}; }
  static PerturbationSpec horizontal_flip() { return {Family::kHorizontalFlip}; }

  // `allow_any` admits composite angles produced by chain canonicalization
  // and the zero angle used in tests.
  static PerturbationSpec rotation(double angle, bool allow_any = false) {
    if (!allow_any && std::find(kRotationAngles.begin(), kRotationAngles.end(), angle) ==
                          kRotationAngles.end())
      throw ConfigError("rotation angle must be one of -10, -5, +5, +10 (got " +
                        format_angle(angle) + ")");
    PerturbationSpec s{Family::kRotation};
    s.angle_deg = angle;
    return s;
  }
  static PerturbationSpec reposition(Anchor a) {
    PerturbationSpec s{Family::kReposition};
    s.anchor = a;
    return s;
  }
  static PerturbationSpec blur(double sigma) {
    if (std::find(kBlurSigmas.begin(), kBlurSigmas.end(), sigma) == kBlurSigmas.end())
      throw ConfigError("blur sigma must be 1.0 or 2.0");
    PerturbationSpec s{Family::kBlur};
    s.sigma = sigma;
    return s;
  }

  std::string key() const {
    switch (family) {
      case Family::kRotation: return "rotation:" + format_angle(angle_deg);
      case Family::kReposition: return "reposition:" + anchor_name(anchor);
      case Family::kBlur: return "blur:" + format_sigma(sigma);
      default: return family_name(family);
    }
  }

  static PerturbationSpec parse(std::string_view key, bool allow_any_angle = false) {
    const auto colon = key.find(':');
    const Family f = parse_family(key.substr(0, colon));
    const std::string arg = colon == std::string_view::npos ? "" : std::string(key.substr(colon + 1));
    switch (f) {
      case Family::kVerticalFlip:
      case Family::kHorizontalFlip:
        if (!arg.empty()) throw ConfigError("flip takes no parameter: " + std::string(key));
        return {f};
      case Family::kRotation:
        try {
          return rotation(std::stod(arg), allow_any_angle);
        } catch (const std::invalid_argument&) {
          throw ConfigError("bad rotation angle in '" + std::string(key) + "'");
        }
      case Family::kReposition: return reposition(parse_anchor(arg));
      case Family::kBlur:
        try {
          return blur(std::stod(arg));
        } catch (const std::invalid_argument&) {
          throw ConfigError("bad blur sigma in '" + std::string(key) + "'");
        }
    }
    throw ConfigError("unreachable");
  }

  bool operator==(const PerturbationSpec& o) const { return key() == o.key(); }
};

// Every fixed parameterization of the given families, in canonical order.
inline std::vector<PerturbationSpec> expand_specs(const std::vector<Family>& families) {
  std::vector<PerturbationSpec> out;
  for (Family f : kAllFamilies) {
    if (std::find(families.begin(), families.end(), f) == families.end()) continue;
    switch (f) {
      case Family::kVerticalFlip:
      case Family::kHorizontalFlip: out.push_back({f}); break;
      case Family::kRotation:
        for (double a : kRotationAngles) out.push_back(PerturbationSpec::rotation(a));
        break;
      case Family::kReposition:
        for (Anchor a : kAllAnchors) out.push_back(PerturbationSpec::reposition(a));
        break;
      case Family::kBlur:
        for (double s : kBlurSigmas) out.push_back(PerturbationSpec::blur(s));
        break;
    }
  }
  return out;
}

inline std::vector<PerturbationSpec> all_specs() {
  return expand_specs({kAllFamilies.begin(), kAllFamilies.end()});
}

// ---------------------------------------------------------------------------
// Chains of transforms, used for second-order variants.

using Chain = std::vector<PerturbationSpec>;

// Folds algebraic identities so equivalent chains share one key: a flip
// twice is the identity, rotations add, a second reposition replaces the
// first.
inline Chain canonicalize(const Chain& chain) {
  Chain out;
  for (const auto& s : chain) {
    if (!out.empty()) {
      const auto& last = out.back();
      if (last.family == s.family) {
        if (s.family == Family::kVerticalFlip || s.family == Family::kHorizontalFlip) {
          out.pop_back();
          continue;
        }
        if (s.family == Family::kRotation) {
          const double sum = last.angle_deg + s.angle_deg;
          out.pop_back();
          if (sum != 0.0) out.push_back(PerturbationSpec::rotation(sum, true));
          continue;
        }
        if (s.family == Family::kReposition) {
          out.back() = s;
          continue;
        }
      }
    }
    out.push_back(s);
  }
  return out;
}

inline std::string chain_key(const Chain& chain) {
  if (chain.empty()) return "orig";
  std::string k;
  for (const auto& s : chain) {
    if (!k.empty()) k += '|';
    k += s.key();
  }
  return k;
}

inline Chain parse_chain(std::string_view key) {
  Chain out;
  if (key == "orig" || key.empty()) return out;
  std::size_t start = 0;
  while (start <= key.size()) {
    const auto bar = key.find('|', start);
    out.push_back(PerturbationSpec::parse(key.substr(start, bar - start), true));
    if (bar == std::string_view::npos) break;
    start = bar + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------

struct Scene {
  std::string item_id;
  Image image;
  Mask mask;      // object mask
  Mask salient;   // pixels the object may not be moved onto (may be empty)
};

struct Diagnostics {
  double bg_delta = 0.0;
  double seam_ratio = 0.0;  // NaN when the ring statistic is undefined
};

struct VariantRecord {
  std::string item_id;
  PerturbationSpec spec;
  Image image;
  Mask mask;  // object mask after the transform (the moved mask for reposition)
  Mask salient;
  std::optional<Diagnostics> diagnostics;
  int tries = 0;

  Scene scene() const { return {item_id, image, mask, salient}; }
};

inline Mask salient_or_empty(const Scene& s) {
  return s.salient.bits.empty() ? Mask(s.image.width, s.image.height) : s.salient;
}

// ---------------------------------------------------------------------------
// Flips

enum class Axis { kVertical, kHorizontal };

inline Image flip_image(const Image& img, Axis axis) {
  Image out(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const int sx = axis == Axis::kHorizontal ? img.width - 1 - x : x;
      const int sy = axis == Axis::kVertical ? img.height - 1 - y : y;
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = img.at(sx, sy, c);
    }
  return out;
}

inline Mask flip_mask(const Mask& m, Axis axis) {
  Mask out(m.width, m.height);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      const int sx = axis == Axis::kHorizontal ? m.width - 1 - x : x;
      const int sy = axis == Axis::kVertical ? m.height - 1 - y : y;
      out.set(x, y, m.at(sx, sy));
    }
  return out;
}

inline VariantRecord flip(const Scene& s, Axis axis) {
  VariantRecord v;
  v.item_id = s.item_id;
  v.spec = axis == Axis::kVertical ? PerturbationSpec::vertical_flip()
                                   : PerturbationSpec::horizontal_flip();
  v.image = flip_image(s.image, axis);
  v.mask = flip_mask(s.mask, axis);
  v.salient = flip_mask(salient_or_empty(s), axis);
  return v;
}

// ---------------------------------------------------------------------------
// Rotation about the image center. Positive angles turn the content
// counter-clockwise as displayed (y axis pointing down).

inline Image rotate_image(const Image& img, double angle_deg) {
  const double th = angle_deg * std::numbers::pi / 180.0;
  const double ct = std::cos(th), st = std::sin(th);
  const double cx = (img.width - 1) / 2.0, cy = (img.height - 1) / 2.0;
  Image out(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double sx = cx + ct * dx - st * dy;
      const double sy = cy + st * dx + ct * dy;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double ax = sx - fx, ay = sy - fy;
      const int x0 = reflect_index(static_cast<int>(fx), img.width);
      const int x1 = reflect_index(static_cast<int>(fx) + 1, img.width);
      const int y0 = reflect_index(static_cast<int>(fy), img.height);
      const int y1 = reflect_index(static_cast<int>(fy) + 1, img.height);
      for (int c = 0; c < 3; ++c) {
        const double top = (1 - ax) * img.at(x0, y0, c) + ax * img.at(x1, y0, c);
        const double bot = (1 - ax) * img.at(x0, y1, c) + ax * img.at(x1, y1, c);
        out.at(x, y, c) = (1 - ay) * top + ay * bot;
      }
    }
  return out;
}

// Nearest-neighbour, zero outside the frame.
inline Mask rotate_mask(const Mask& m, double angle_deg) {
  const double th = angle_deg * std::numbers::pi / 180.0;
  const double ct = std::cos(th), st = std::sin(th);
  const double cx = (m.width - 1) / 2.0, cy = (m.height - 1) / 2.0;
  Mask out(m.width, m.height);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      const double dx = x - cx, dy = y - cy;
      const int sx = static_cast<int>(std::lround(cx + ct * dx - st * dy));
      const int sy = static_cast<int>(std::lround(cy + st * dx + ct * dy));
      out.set(x, y, m.in_bounds(sx, sy) && m.at(sx, sy));
    }
  return out;
}

inline VariantRecord rotate(const Scene& s, double angle_deg, bool allow_any = false) {
  VariantRecord v;
  v.item_id = s.item_id;
  v.spec = PerturbationSpec::rotation(angle_deg, allow_any || angle_deg == 0.0);
  v.image = rotate_image(s.image, angle_deg);
  v.mask = rotate_mask(s.mask, angle_deg);
  v.salient = rotate_mask(salient_or_empty(s), angle_deg);
  return v;
}

// ---------------------------------------------------------------------------
// Gaussian blur: separable, normalized kernel of radius ceil(3 sigma),
// half-sample symmetric boundary.

inline std::vector<double> gaussian_kernel(double sigma) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * r + 1);
  double sum = 0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  return k;
}

inline Image blur_image(const Image& img, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  Image tmp(img.width, img.height), out(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * img.at(reflect_index(x + i, img.width), y, c);
        tmp.at(x, y, c) = acc;
      }
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (int i = -r; i <= r; ++i)
          acc += k[i + r] * tmp.at(x, reflect_index(y + i, img.height), c);
        out.at(x, y, c) = acc;
      }
  return out;
}

inline VariantRecord gaussian_blur(const Scene& s, double sigma) {
  VariantRecord v;
  v.item_id = s.item_id;
  v.spec = PerturbationSpec::blur(sigma);
  v.image = blur_image(s.image, sigma);
  v.mask = s.mask;
  v.salient = salient_or_empty(s);
  return v;
}

// ---------------------------------------------------------------------------
// Diagnostics

inline constexpr double kBgRadius = 8.0;
inline constexpr double kSeamInner = 2.0;
inline constexpr double kSeamOuter = 5.0;

inline double bg_delta(const Image& before, const Image& after, const Mask& ms, const Mask& mt,
                       double r_bg = kBgRadius) {
  if (before.width != after.width || before.height != after.height)
    throw InputError("bg_delta: image shapes differ");
  const Mask excluded = dilate(mask_union(ms, mt), r_bg);
  double sum = 0;
  std::size_t n = 0;
  for (int y = 0; y < before.height; ++y)
    for (int x = 0; x < before.width; ++x) {
      if (excluded.at(x, y)) continue;
      for (int c = 0; c < 3; ++c) sum += std::abs(after.at(x, y, c) - before.at(x, y, c));
      ++n;
    }
  if (n == 0) throw DegenerateRegion("bg_delta: dilated masks cover the whole image");
  return sum / static_cast<double>(n);
}

// Band straddling the mask boundary: up to r_out pixels outside the mask
// and up to r_in pixels inside it.
inline Mask boundary_ring(const Mask& m, double r_in, double r_out) {
  return mask_minus(dilate(m, r_out), erode(m, r_in));
}

inline double ring_energy(const Image& img, const Mask& ring) {
  const auto g = sobel_magnitude(img);
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < ring.bits.size(); ++i)
    if (ring.bits[i]) {
      sum += g[i];
      ++n;
    }
  if (n == 0) throw DegenerateRegion("seam_ratio: empty ring");
  return sum / static_cast<double>(n);
}

inline double seam_ratio(const Image& before, const Image& after, const Mask& ms, const Mask& mt,
                         double r1 = kSeamInner, double r2 = kSeamOuter) {
  if (!(r1 < r2)) throw DomainError("seam_ratio requires r1 < r2");
  const double target = ring_energy(after, boundary_ring(mt, r1, r2));
  const double source = ring_energy(before, boundary_ring(ms, r1, r2));
  if (source <= 0.0) throw DegenerateRegion("seam_ratio: zero-gradient source ring");
  return target / source;
}

// ---------------------------------------------------------------------------
// Repositioning

struct RepositionOptions {
  int max_tries = 25;
  bool feather = true;
  double feather_px = 3.0;
  double jitter_fraction = 0.05;   // of the image diagonal, per retry
  double perpendicular_px = 2.0;   // seeded noise amplitude
  double fill_ring_px = 16.0;
  double min_quadrant_share = 0.5;
  std::uint64_t seed = 2025;
};

// Anchor points are the centers of the image quadrants, in pixel-center
// coordinates.
inline Point anchor_point(Anchor a, int width, int height) {
  const double left = width / 4.0 - 0.5, right = 3.0 * width / 4.0 - 0.5;
  const double top = height / 4.0 - 0.5, bottom = 3.0 * height / 4.0 - 0.5;
  switch (a) {
    case Anchor::kTL: return {left, top};
    case Anchor::kTR: return {right, top};
    case Anchor::kBL: return {left, bottom};
    case Anchor::kBR: return {right, bottom};
  }
  return {};
}

inline bool in_quadrant(Anchor a, int x, int y, int width, int height) {
  const bool left = 2 * x < width, top = 2 * y < height;
  switch (a) {
    case Anchor::kTL: return left && top;
    case Anchor::kTR: return !left && top;
    case Anchor::kBL: return left && !top;
    case Anchor::kBR: return !left && !top;
  }
  return false;
}

inline Mask shift_mask(const Mask& m, int tx, int ty) {
  Mask out(m.width, m.height);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(x, y) && out.in_bounds(x + tx, y + ty)) out.set(x + tx, y + ty);
  return out;
}

// Channel-wise median of the band around the source mask; used to fill the
// region the object vacates.
inline std::array<double, 3> ring_fill_color(const Image& img, const Mask& ms, double r) {
  const Mask ring = mask_minus(dilate(ms, r), ms);
  std::array<std::vector<double>, 3> vals;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      if (ring.at(x, y))
        for (int c = 0; c < 3; ++c) vals[c].push_back(img.at(x, y, c));
  std::array<double, 3> out{0.5, 0.5, 0.5};
  for (int c = 0; c < 3; ++c) {
    auto& v = vals[c];
    if (v.empty()) continue;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    out[c] = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  }
  return out;
}

// Paste the source object translated by (tx, ty) onto the image with the
// source region filled. Feathering uses a linear alpha ramp over the
// innermost `feather_px` pixels of the moved mask.
inline Image composite(const Image& img, const Mask& ms, int tx, int ty,
                       const RepositionOptions& opt) {
  Image out = img;
  const auto fill = ring_fill_color(img, ms, opt.fill_ring_px);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      if (ms.at(x, y))
        for (int c = 0; c < 3; ++c) out.at(x, y, c) = fill[c];
  const Mask mt = shift_mask(ms, tx, ty);
  std::vector<double> inner;
  if (opt.feather) inner = squared_distance_to(mask_not(mt));
  const Image background = out;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      if (!mt.at(x, y)) continue;
      double alpha = 1.0;
      if (opt.feather) {
        const double d = std::sqrt(inner[static_cast<std::size_t>(y) * img.width + x]);
        alpha = std::min(1.0, d / opt.feather_px);
      }
      for (int c = 0; c < 3; ++c)
        out.at(x, y, c) =
            alpha * img.at(x - tx, y - ty, c) + (1.0 - alpha) * background.at(x, y, c);
    }
  return out;
}

// Moves the object so its centroid lands on the anchor point. A placement
// is accepted when the moved object stays fully in frame, touches no
// salient pixel, and keeps at least `min_quadrant_share` of its area in the
// anchor's quadrant; otherwise the target walks toward the image center
// with seeded perpendicular jitter.
inline VariantRecord reposition(const Scene& s, Anchor anchor,
                                const RepositionOptions& opt = {}) {
  const Mask& ms = s.mask;
  if (ms.area() == 0) throw InputError("reposition: empty mask for item " + s.item_id);
  const int w = s.image.width, h = s.image.height;
  const Point c = centroid(ms);
  const Point a = anchor_point(anchor, w, h);
  const Point center{(w - 1) / 2.0, (h - 1) / 2.0};
  double dx = center.x - a.x, dy = center.y - a.y;
  const double len = std::hypot(dx, dy);
  dx /= len;
  dy /= len;
  const double step = opt.jitter_fraction * std::hypot(double(w), double(h));
  const Mask salient = salient_or_empty(s);
  Rng rng(derive_seed(opt.seed, s.item_id + "|" + anchor_name(anchor)));

  std::vector<std::pair<int, int>> pixels;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (ms.at(x, y)) pixels.emplace_back(x, y);

  for (int k = 0; k < opt.max_tries; ++k) {
    Point target{a.x + k * step * dx, a.y + k * step * dy};
    if (k > 0) {
      const double noise = rng.uniform(-opt.perpendicular_px, opt.perpendicular_px);
      target.x += -dy * noise;
      target.y += dx * noise;
    }
    const int tx = static_cast<int>(std::lround(target.x - c.x));
    const int ty = static_cast<int>(std::lround(target.y - c.y));
    bool ok = true;
    std::size_t inside_quadrant = 0;
    for (auto [x, y] : pixels) {
      const int nx = x + tx, ny = y + ty;
      if (nx < 0 || ny < 0 || nx >= w || ny >= h || salient.at(nx, ny)) {
        ok = false;
        break;
      }
      if (in_quadrant(anchor, nx, ny, w, h)) ++inside_quadrant;
    }
    if (!ok) continue;
    if (static_cast<double>(inside_quadrant) <
        opt.min_quadrant_share * static_cast<double>(pixels.size()))
      continue;
    VariantRecord v;
    v.item_id = s.item_id;
    v.spec = PerturbationSpec::reposition(anchor);
    v.image = composite(s.image, ms, tx, ty, opt);
    v.mask = shift_mask(ms, tx, ty);
    v.salient = salient;
    v.tries = k + 1;
    Diagnostics d;
    d.bg_delta = bg_delta(s.image, v.image, ms, v.mask);
    try {
      d.seam_ratio = seam_ratio(s.image, v.image, ms, v.mask);
    } catch (const DegenerateRegion&) {
      d.seam_ratio = std::numeric_limits<double>::quiet_NaN();
    }
    v.diagnostics = d;
    return v;
  }
  throw PlacementFailure("item " + s.item_id + " anchor " + anchor_name(anchor) + " after " +
                         std::to_string(opt.max_tries) + " tries");
}

// ---------------------------------------------------------------------------

inline VariantRecord apply(const Scene& s, const PerturbationSpec& spec,
                           const RepositionOptions& opt = {}) {
  switch (spec.family) {
    case Family::kVerticalFlip: return flip(s, Axis::kVertical);
    case Family::kHorizontalFlip: return flip(s, Axis::kHorizontal);
    case Family::kRotation: return rotate(s, spec.angle_deg, true);
    case Family::kReposition: return reposition(s, spec.anchor, opt);
    case Family::kBlur: return gaussian_blur(s, spec.sigma);
  }
  throw ConfigError("unreachable");
}

// ---------------------------------------------------------------------------
// Artifact filtering

enum class FilterMode { kBgDelta, kSeam, kEither };

inline FilterMode parse_filter_mode(std::string_view s) {
  if (s == "bg") return FilterMode::kBgDelta;
  if (s == "seam") return FilterMode::kSeam;
  if (s == "either") return FilterMode::kEither;
  throw ConfigError("filter mode must be bg, seam or either");
}

namespace detail {

// Indices of the `k` largest values; NaN never ranks, ties keep input order.
inline std::vector<std::size_t> top_k(const std::vector<double>& v, std::size_t k) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!std::isnan(v[i])) idx.push_back(i);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] > v[b]; });
  if (idx.size() > k) idx.resize(k);
  return idx;
}

}  // namespace detail

// Returns the indices kept after dropping the top q percent (q in [0, 100])
// by the chosen diagnostic. Each criterion drops floor(q n / 100) entries,
// so a single criterion keeps ceil((1 - q/100) n).
inline std::vector<std::size_t> artifact_keep(const std::vector<Diagnostics>& diags, double q,
                                              FilterMode mode) {
  if (q < 0 || q > 100) throw DomainError("filter quantile must lie in [0, 100]");
  const std::size_t n = diags.size();
  const auto k = static_cast<std::size_t>(std::floor(q * static_cast<double>(n) / 100.0 + 1e-9));
  std::vector<bool> drop(n, false);
  std::vector<double> bg(n), seam(n);
  for (std::size_t i = 0; i < n; ++i) {
    bg[i] = diags[i].bg_delta;
    seam[i] = diags[i].seam_ratio;
  }
  if (mode != FilterMode::kSeam)
    for (auto i : detail::top_k(bg, k)) drop[i] = true;
  if (mode != FilterMode::kBgDelta)
    for (auto i : detail::top_k(seam, k)) drop[i] = true;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < n; ++i)
    if (!drop[i]) keep.push_back(i);
  return keep;
}

// Variants without diagnostics (everything but repositioning) pass through.
inline std::vector<VariantRecord> filter_by_artifacts(std::vector<VariantRecord> variants,
                                                      double q, FilterMode mode) {
  std::vector<std::size_t> ranked;
  std::vector<Diagnostics> diags;
  for (std::size_t i = 0; i < variants.size(); ++i)
    if (variants[i].diagnostics) {
      ranked.push_back(i);
      diags.push_back(*variants[i].diagnostics);
    }
  std::vector<bool> keep(variants.size(), true);
  for (auto i : ranked) keep[i] = false;
  for (auto j : artifact_keep(diags, q, mode)) keep[ranked[j]] = true;
  std::vector<VariantRecord> out;
  for (std::size_t i = 0; i < variants.size(); ++i)
    if (keep[i]) out.push_back(std::move(variants[i]));
  return out;
}

}  // namespace capaudit::perturb

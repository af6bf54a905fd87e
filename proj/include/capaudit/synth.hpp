#pragma once

// Synthetic detection corpus: small PNG scenes with one dominant object
// (exact elliptical mask), optional small distractor boxes, and a
// detections manifest in the curation input format.

#include <cmath>
#include <string>
#include <vector>

#include "capaudit/catalog.hpp"
#include "capaudit/image.hpp"
#include "capaudit/rng.hpp"
#include "capaudit/util.hpp"

namespace capaudit::synth {

struct SynthOptions {
  int n_items = 100;
  int width = 64;
  int height = 64;
  std::uint64_t seed = 2025;
  std::string dataset = "synthetic";
  double distractor_rate = 0.5;
  int n_rejects = 0;  // extra scenes whose two largest boxes overlap
  std::vector<std::string> labels = {"dog", "car", "chair", "person", "cat",
                                     "bus", "bed", "horse", "bicycle", "sofa"};
};

inline Image background(int w, int h, Rng& rng) {
  const double fx = rng.uniform(0.05, 0.2), fy = rng.uniform(0.05, 0.2);
  const double base[3] = {rng.uniform(0.2, 0.5), rng.uniform(0.2, 0.5), rng.uniform(0.2, 0.5)};
  Image img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(x, y, c) = base[c] + 0.08 * std::sin(fx * x + c) * std::cos(fy * y) +
                          0.1 * (x + y) / double(w + h);
  return img;
}

struct SynthScene {
  std::string item_id;
  Image image;
  catalog::RawDetection detection;
};

inline void paint_box(Image& img, const Box& b, const double* col) {
  for (int y = static_cast<int>(b.y0); y < static_cast<int>(b.y1); ++y)
    for (int x = static_cast<int>(b.x0); x < static_cast<int>(b.x1); ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = col[c];
}

inline SynthScene make_scene(const std::string& id, const std::string& label,
                             const SynthOptions& opt, Rng& rng, bool reject) {
  const int w = opt.width, h = opt.height;
  SynthScene s;
  s.item_id = id;
  s.image = background(w, h, rng);
  auto& d = s.detection;
  d.image_id = id;
  d.dataset = opt.dataset;
  d.width = w;
  d.height = h;

  // Dominant object: ellipse inside one half of the frame, small enough to
  // fit any quadrant.
  const double rx = rng.uniform(4.0, 7.0), ry = rng.uniform(4.0, 7.0);
  const double cx = rng.uniform(rx + 2, w - rx - 3), cy = rng.uniform(ry + 2, h - ry - 3);
  Mask mask(w, h);
  const double col[3] = {rng.uniform(0.6, 0.95), rng.uniform(0.0, 0.3), rng.uniform(0.5, 0.9)};
  int x0 = w, y0 = h, x1 = 0, y1 = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double u = (x + 0.5 - cx) / rx, v = (y + 0.5 - cy) / ry;
      if (u * u + v * v <= 1.0) {
        mask.set(x, y);
        for (int c = 0; c < 3; ++c) s.image.at(x, y, c) = col[c] - 0.05 * u;
        x0 = std::min(x0, x), y0 = std::min(y0, y), x1 = std::max(x1, x + 1), y1 = std::max(y1, y + 1);
      }
    }
  const Box obj{double(x0), double(y0), double(x1), double(y1)};
  d.boxes.push_back(obj);
  d.labels.push_back(label);
  d.masks.push_back(catalog::rle_encode(mask));

  if (reject) {
    // A second box of the same size that overlaps the object heavily.
    const Box twin{obj.x0 + 1, obj.y0, std::min<double>(w, obj.x1 + 1), obj.y1};
    d.boxes.push_back(twin);
    d.labels.push_back(label);
    d.masks.push_back(std::nullopt);
  } else if (rng.uniform() < opt.distractor_rate) {
    // Small distractor far from the object.
    for (int attempt = 0; attempt < 50; ++attempt) {
      const double side = rng.uniform(3.0, 5.0);
      const double bx = std::floor(rng.uniform(0, w - side - 1));
      const double by = std::floor(rng.uniform(0, h - side - 1));
      const Box b{bx, by, bx + std::ceil(side), by + std::ceil(side)};
      const bool apart = b.x1 + 2 < obj.x0 || b.x0 > obj.x1 + 2 || b.y1 + 2 < obj.y0 || b.y0 > obj.y1 + 2;
      if (!apart) continue;
      const double dcol[3] = {rng.uniform(0.0, 0.3), rng.uniform(0.5, 0.9), rng.uniform(0.0, 0.3)};
      paint_box(s.image, b, dcol);
      d.boxes.push_back(b);
      d.labels.push_back("cup");
      d.masks.push_back(std::nullopt);
      break;
    }
  }
  return s;
}

// Writes images/<id>.png and detections.jsonl (image paths relative to the
// manifest) under `dir`. Returns the manifest path.
inline fs::path write_corpus(const fs::path& dir, const SynthOptions& opt = {}) {
  if (opt.n_items < 0 || opt.n_rejects < 0) throw ConfigError("synth: counts must be nonnegative");
  if (opt.labels.empty()) throw ConfigError("synth: labels must be nonempty");
  if (opt.width < 32 || opt.height < 32) throw ConfigError("synth: images must be at least 32x32");
  fs::create_directories(dir / "images");
  std::vector<json> rows;
  const int total = opt.n_items + opt.n_rejects;
  for (int i = 0; i < total; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "syn%05d", i);
    Rng rng(derive_seed(opt.seed, std::string("scene|") + id));
    const bool reject = i >= opt.n_items;
    auto s = make_scene(id, opt.labels[i % opt.labels.size()], opt, rng, reject);
    const std::string rel = std::string("images/") + id + ".png";
    write_png((dir / rel).string(), s.image);
    s.detection.image_path = rel;
    rows.push_back(s.detection.to_json());
  }
  const auto manifest = dir / "detections.jsonl";
  write_file(manifest, to_jsonl(rows));
  return manifest;
}

}  // namespace capaudit::synth

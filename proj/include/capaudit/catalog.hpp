#pragma once

// Curation of detection manifests into audit items: single-object filter,
// coverage bins, taxonomy harmonization, mask run-length coding.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "capaudit/error.hpp"
#include "capaudit/image.hpp"
#include "capaudit/util.hpp"

namespace capaudit::catalog {

inline constexpr double kMaxIou = 0.1;

// ---------------------------------------------------------------------------
// Categories

enum class Category {
  kPerson,
  kAnimal,
  kVehicle,
  kFurniture,
  kKitchen,
  kSports,
  kElectronics,
  kIndoor,
  kOutdoor,
  kAppliance,
  kAccessory,
  kUnmapped,
};

inline constexpr std::array<std::string_view, 12> kCategoryNames = {
    "person", "animal",    "vehicle",   "furniture", "kitchen",   "sports",
    "electronics", "indoor", "outdoor", "appliance", "accessory", "unmapped"};

inline std::string category_name(Category c) {
  return std::string(kCategoryNames[static_cast<std::size_t>(c)]);
}

inline std::optional<Category> parse_category(std::string_view s) {
  for (std::size_t i = 0; i < kCategoryNames.size(); ++i)
    if (kCategoryNames[i] == s) return static_cast<Category>(i);
  return std::nullopt;
}

inline std::string lowercase(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Source-label to category table plus the hash of the file it came from, so
// harmonized outputs can be traced to an exact mapping version.
struct CategoryMap {
  std::map<std::string, Category> table;
  std::string source_hash;

  static CategoryMap from_json(const json& j, std::string hash = {}) {
    CategoryMap m;
    m.source_hash = std::move(hash);
    if (!j.is_object()) throw ConfigError("category map must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (it.key().rfind('_', 0) == 0) continue;  // metadata keys such as "_version"
      const auto cat = parse_category(it.value().get<std::string>());
      if (!cat)
        throw ConfigError("category map: unknown category '" + it.value().get<std::string>() +
                          "' for label '" + it.key() + "'");
      m.table[lowercase(it.key())] = *cat;
    }
    return m;
  }

  static CategoryMap load(const fs::path& path) {
    const std::string text = read_file(path);
    return from_json(json::parse(text), sha256_hex(text));
  }
};

// Case-insensitive exact lookup; anything else lands in the unmapped bucket.
inline Category harmonize_category(std::string_view label, const CategoryMap& map) {
  const auto it = map.table.find(lowercase(label));
  return it == map.table.end() ? Category::kUnmapped : it->second;
}

// ---------------------------------------------------------------------------
// Coverage bins: [lo, hi) percent, last bin closed.

struct SizeBin {
  int lo, hi;
  std::string name() const { return std::to_string(lo) + "-" + std::to_string(hi); }
};

inline constexpr std::array<SizeBin, 7> kSizeBins = {
    SizeBin{0, 10}, {10, 20}, {20, 35}, {35, 50}, {50, 70}, {70, 90}, {90, 100}};

inline std::string coverage_bin(double coverage) {
  if (!(coverage > 0.0) || coverage > 1.0)
    throw DomainError("coverage must lie in (0, 1], got " + fmt(coverage));
  for (std::size_t i = kSizeBins.size(); i-- > 0;)
    if (coverage >= kSizeBins[i].lo / 100.0) return kSizeBins[i].name();
  return kSizeBins.front().name();
}

// ---------------------------------------------------------------------------
// Run-length coded masks: {"size": [h, w], "counts": [...]}, row-major,
// alternating runs starting with background.

inline json rle_encode(const Mask& m) {
  json counts = json::array();
  std::uint8_t current = 0;
  std::size_t run = 0;
  for (auto b : m.bits) {
    if (b != current) {
      counts.push_back(run);
      run = 0;
      current = b;
    }
    ++run;
  }
  counts.push_back(run);
  return {{"size", {m.height, m.width}}, {"counts", counts}};
}

inline Mask rle_decode(const json& j) {
  try {
    const int h = j.at("size").at(0).get<int>();
    const int w = j.at("size").at(1).get<int>();
    if (h <= 0 || w <= 0) throw InputError("RLE size must be positive");
    Mask m(w, h);
    std::size_t pos = 0;
    std::uint8_t value = 0;
    for (const auto& c : j.at("counts")) {
      const auto run = c.get<std::size_t>();
      if (pos + run > m.bits.size()) throw InputError("RLE counts exceed mask size");
      std::fill_n(m.bits.begin() + static_cast<std::ptrdiff_t>(pos), run, value);
      pos += run;
      value ^= 1;
    }
    if (pos != m.bits.size()) throw InputError("RLE counts do not cover the mask");
    return m;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed RLE mask: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

struct RawDetection {
  std::string image_id;
  std::string image_path;
  std::string dataset = "default";
  int width = 0;   // 0: read from the PNG header
  int height = 0;
  std::vector<Box> boxes;
  std::vector<std::string> labels;
  std::vector<std::optional<json>> masks;  // per-box RLE, may be empty

  static RawDetection from_json(const json& j) {
    RawDetection d;
    try {
      d.image_id = j.at("image_id").get<std::string>();
      d.image_path = j.at("image_path").get<std::string>();
      d.dataset = j.value("dataset", std::string("default"));
      d.width = j.value("width", 0);
      d.height = j.value("height", 0);
      for (const auto& b : j.at("boxes")) {
        if (!b.is_array() || b.size() != 4)
          throw InputError("item " + d.image_id + ": box must have 4 coordinates");
        d.boxes.push_back({b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                           b[3].get<double>()});
      }
      d.labels = j.at("labels").get<std::vector<std::string>>();
      if (j.contains("masks") && !j.at("masks").is_null()) {
        for (const auto& m : j.at("masks"))
          d.masks.push_back(m.is_null() ? std::nullopt : std::optional<json>(m));
      }
    } catch (const json::exception& e) {
      throw InputError("detection " + d.image_id + ": " + e.what());
    }
    return d;
  }

  json to_json() const {
    json boxes_j = json::array();
    for (const auto& b : boxes) boxes_j.push_back({b.x0, b.y0, b.x1, b.y1});
    json j = {{"image_id", image_id}, {"image_path", image_path}, {"dataset", dataset},
              {"width", width},       {"height", height},         {"boxes", boxes_j},
              {"labels", labels}};
    if (!masks.empty()) {
      json ms = json::array();
      for (const auto& m : masks) ms.push_back(m ? *m : json(nullptr));
      j["masks"] = ms;
    }
    return j;
  }
};

struct ItemRecord {
  std::string item_id;
  std::string image_path;
  std::string dataset;
  int width = 0, height = 0;
  Box bbox;
  std::string label;  // source label, used as the caption noun
  Category category = Category::kUnmapped;
  double coverage = 0;
  std::string size_bin;
  Mask object_mask;
  bool mask_from_bbox = false;
  std::vector<Box> salient_boxes;
  std::map<std::string, std::string> captions;

  json to_json() const {
    json sal = json::array();
    for (const auto& b : salient_boxes) sal.push_back({b.x0, b.y0, b.x1, b.y1});
    return {{"item_id", item_id},
            {"image_path", image_path},
            {"dataset", dataset},
            {"width", width},
            {"height", height},
            {"bbox", {bbox.x0, bbox.y0, bbox.x1, bbox.y1}},
            {"label", label},
            {"category", category_name(category)},
            {"coverage", coverage},
            {"size_bin", size_bin},
            {"object_mask", rle_encode(object_mask)},
            {"mask_from_bbox", mask_from_bbox},
            {"salient_boxes", sal},
            {"captions", captions}};
  }

  static ItemRecord from_json(const json& j) {
    ItemRecord r;
    try {
      r.item_id = j.at("item_id").get<std::string>();
      r.image_path = j.at("image_path").get<std::string>();
      r.dataset = j.at("dataset").get<std::string>();
      r.width = j.at("width").get<int>();
      r.height = j.at("height").get<int>();
      const auto& b = j.at("bbox");
      r.bbox = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
      r.label = j.at("label").get<std::string>();
      r.category = parse_category(j.at("category").get<std::string>()).value_or(Category::kUnmapped);
      r.coverage = j.at("coverage").get<double>();
      r.size_bin = j.at("size_bin").get<std::string>();
      r.object_mask = rle_decode(j.at("object_mask"));
      r.mask_from_bbox = j.value("mask_from_bbox", false);
      for (const auto& s : j.value("salient_boxes", json::array()))
        r.salient_boxes.push_back(
            {s[0].get<double>(), s[1].get<double>(), s[2].get<double>(), s[3].get<double>()});
      r.captions = j.value("captions", std::map<std::string, std::string>{});
    } catch (const json::exception& e) {
      throw InputError("item record: " + std::string(e.what()));
    }
    return r;
  }

  Mask salient_mask() const {
    Mask m(width, height);
    for (const auto& b : salient_boxes) m = mask_union(m, box_mask(b, width, height));
    return m;
  }
};

struct Rejection {
  std::string item_id;
  std::string rule;
  std::string detail;
  json to_json() const { return {{"item_id", item_id}, {"rule", rule}, {"detail", detail}}; }
};

struct FilterOutcome {
  std::optional<ItemRecord> item;
  std::optional<Rejection> rejection;
};

inline void validate(const RawDetection& d, int width, int height) {
  if (d.boxes.empty()) throw InputError("item " + d.image_id + ": no boxes");
  if (d.labels.size() != d.boxes.size())
    throw InputError("item " + d.image_id + ": labels not aligned with boxes");
  if (!d.masks.empty() && d.masks.size() != d.boxes.size())
    throw InputError("item " + d.image_id + ": masks not aligned with boxes");
  for (const auto& b : d.boxes) {
    if (!(b.x0 < b.x1) || !(b.y0 < b.y1))
      throw InputError("item " + d.image_id + ": degenerate box coordinates");
    if (b.x0 < 0 || b.y0 < 0 || b.x1 > width || b.y1 > height)
      throw InputError("item " + d.image_id + ": box outside image bounds");
  }
}

// Keeps the detection iff one box is isolated (IoU < 0.1 with every other
// box) and strictly largest among isolated boxes.
inline FilterOutcome filter_single_object(const RawDetection& d, const CategoryMap& map) {
  int width = d.width, height = d.height;
  if (width <= 0 || height <= 0) std::tie(width, height) = png_size(d.image_path);
  validate(d, width, height);
  const std::size_t n = d.boxes.size();
  std::vector<std::size_t> isolated;
  for (std::size_t i = 0; i < n; ++i) {
    bool ok = true;
    for (std::size_t j = 0; j < n && ok; ++j)
      if (i != j && iou(d.boxes[i], d.boxes[j]) >= kMaxIou) ok = false;
    if (ok) isolated.push_back(i);
  }
  auto reject = [&](std::string rule, std::string detail) {
    return FilterOutcome{std::nullopt, Rejection{d.image_id, std::move(rule), std::move(detail)}};
  };
  if (isolated.empty())
    return reject("overlap", "every box overlaps another with IoU >= " + fmt(kMaxIou));
  std::sort(isolated.begin(), isolated.end(),
            [&](auto a, auto b) { return d.boxes[a].area() > d.boxes[b].area(); });
  if (isolated.size() > 1 && d.boxes[isolated[0]].area() == d.boxes[isolated[1]].area())
    return reject("ambiguous_dominant", "two isolated boxes share the largest area");
  const std::size_t k = isolated.front();
  const Box& box = d.boxes[k];
  const double coverage = box.area() / (static_cast<double>(width) * height);
  if (!(coverage > 0.0)) return reject("coverage", "dominant box has zero area");

  ItemRecord r;
  r.item_id = d.image_id;
  r.image_path = d.image_path;
  r.dataset = d.dataset;
  r.width = width;
  r.height = height;
  r.bbox = box;
  r.label = d.labels[k];
  r.category = harmonize_category(d.labels[k], map);
  r.coverage = std::min(1.0, coverage);
  r.size_bin = coverage_bin(r.coverage);
  if (!d.masks.empty() && d.masks[k]) {
    r.object_mask = rle_decode(*d.masks[k]);
    if (r.object_mask.width != width || r.object_mask.height != height)
      throw InputError("item " + d.image_id + ": mask size differs from image size");
  } else {
    r.object_mask = box_mask(box, width, height);
    r.mask_from_bbox = true;
  }
  for (std::size_t i = 0; i < n; ++i)
    if (i != k) r.salient_boxes.push_back(d.boxes[i]);
  return {std::move(r), std::nullopt};
}

struct CurationResult {
  std::vector<ItemRecord> items;
  std::vector<Rejection> rejections;
};

// Curates a whole manifest. Malformed detections become rejections with
// rule "input" instead of aborting; outputs are ordered by item id.
inline CurationResult curate(const std::vector<RawDetection>& dets, const CategoryMap& map) {
  CurationResult out;
  for (const auto& d : dets) {
    try {
      auto o = filter_single_object(d, map);
      if (o.item) {
        out.items.push_back(std::move(*o.item));
      } else {
        out.rejections.push_back(std::move(*o.rejection));
      }
    } catch (const Error& e) {
      out.rejections.push_back({d.image_id, "input", e.what()});
    }
  }
  std::sort(out.items.begin(), out.items.end(),
            [](const auto& a, const auto& b) { return a.item_id < b.item_id; });
  std::sort(out.rejections.begin(), out.rejections.end(),
            [](const auto& a, const auto& b) { return a.item_id < b.item_id; });
  return out;
}

}  // namespace capaudit::catalog

#pragma once

// Feature-map files, dataset manifests, random region sampling and
// average pooling of regions into the descriptor matrix X (D x R).
//
// DPFM layout (little-endian):
//   "DPFM" | u32 version=1 | u32 H | u32 W | u32 D | u32 img_h | u32 img_w |
//   u32 id_len | id bytes | H*W*D float32 in (h, w, d) order

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpnet/errors.hpp"
#include "dpnet/numerics.hpp"
#include "dpnet/rng.hpp"

namespace dpnet {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

struct FeatureMap {
  std::string image_id;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t depth = 0;
  std::uint32_t image_h = 0;
  std::uint32_t image_w = 0;
  std::vector<double> data;  // (h, w, d) order

  std::span<const double> cell(std::size_t h, std::size_t w) const {
    return {data.data() + (h * width + w) * depth, depth};
  }
  std::span<double> cell(std::size_t h, std::size_t w) {
    return {data.data() + (h * width + w) * depth, depth};
  }

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;
};

inline void validate(const FeatureMap& fm) {
  if (fm.height < 1 || fm.width < 1 || fm.depth < 1) {
    throw ContractError("feature map '" + fm.image_id + "': empty grid");
  }
  const std::size_t expected = std::size_t{fm.height} * fm.width * fm.depth;
  if (fm.data.size() != expected) {
    throw ContractError("feature map '" + fm.image_id + "': data length " +
                        std::to_string(fm.data.size()) + " != " + std::to_string(expected));
  }
  if (!all_finite(fm.data)) {
    throw ContractError("feature map '" + fm.image_id + "': non-finite value");
  }
}

namespace detail {

inline constexpr char kFeatureMagic[4] = {'D', 'P', 'F', 'M'};
inline constexpr std::uint32_t kFeatureVersion = 1;

template <typename T>
void put(std::string& out, T value) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  out.append(bytes, sizeof(T));
}

/// Bounds-checked little-endian reader over an in-memory file.
class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  template <typename T>
  T get(const char* what) {
    if (remaining() < sizeof(T)) {
      throw ParseError(ParseErrorKind::kTruncated, source_ + ": missing " + what);
    }
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string_view take(std::size_t n, const char* what) {
    if (remaining() < n) {
      throw ParseError(ParseErrorKind::kTruncated, source_ + ": missing " + what);
    }
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }
  const std::string& source() const { return source_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
  std::string source_;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(ParseErrorKind::kIo, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

}  // namespace detail

/// Serializes to the DPFM byte layout. Values are stored as float32.
inline std::string encode_feature_map(const FeatureMap& fm) {
  validate(fm);
  std::string out;
  out.reserve(36 + fm.image_id.size() + fm.data.size() * 4);
  out.append(detail::kFeatureMagic, 4);
  detail::put<std::uint32_t>(out, detail::kFeatureVersion);
  detail::put<std::uint32_t>(out, fm.height);
  detail::put<std::uint32_t>(out, fm.width);
  detail::put<std::uint32_t>(out, fm.depth);
  detail::put<std::uint32_t>(out, fm.image_h);
  detail::put<std::uint32_t>(out, fm.image_w);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(fm.image_id.size()));
  out.append(fm.image_id);
  for (double v : fm.data) detail::put<float>(out, static_cast<float>(v));
  return out;
}

inline FeatureMap decode_feature_map(std::string_view bytes, const std::string& source = "<memory>") {
  detail::ByteReader in(bytes, source);
  auto magic = in.take(4, "magic");
  if (std::memcmp(magic.data(), detail::kFeatureMagic, 4) != 0) {
    throw ParseError(ParseErrorKind::kBadMagic, source + ": not a DPFM file");
  }
  const auto version = in.get<std::uint32_t>("version");
  if (version != detail::kFeatureVersion) {
    throw ParseError(ParseErrorKind::kVersionMismatch,
                     source + ": version " + std::to_string(version) + ", expected 1");
  }
  FeatureMap fm;
  fm.height = in.get<std::uint32_t>("height");
  fm.width = in.get<std::uint32_t>("width");
  fm.depth = in.get<std::uint32_t>("depth");
  fm.image_h = in.get<std::uint32_t>("image height");
  fm.image_w = in.get<std::uint32_t>("image width");
  const auto id_len = in.get<std::uint32_t>("id length");
  fm.image_id = std::string(in.take(id_len, "image id"));
  if (fm.height < 1 || fm.width < 1 || fm.depth < 1) {
    throw ParseError(ParseErrorKind::kMalformed, source + ": empty grid");
  }
  const std::uint64_t count = std::uint64_t{fm.height} * fm.width * fm.depth;
  if (in.remaining() / sizeof(float) < count) {
    throw ParseError(ParseErrorKind::kTruncated,
                     source + ": payload has " + std::to_string(in.remaining()) + " bytes, need " +
                         std::to_string(count * sizeof(float)));
  }
  if (in.remaining() != count * sizeof(float)) {
    throw ParseError(ParseErrorKind::kMalformed, source + ": trailing bytes after payload");
  }
  fm.data.resize(count);
  for (auto& v : fm.data) {
    v = static_cast<double>(in.get<float>("payload"));
    if (!std::isfinite(v)) {
      throw ParseError(ParseErrorKind::kNonFinite, source + ": non-finite activation");
    }
  }
  return fm;
}

inline void write_feature_map(const FeatureMap& fm, const std::filesystem::path& path) {
  detail::write_file(path, encode_feature_map(fm));
}

inline FeatureMap read_feature_map(const std::filesystem::path& path) {
  return decode_feature_map(detail::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Regions

struct Region {
  std::uint32_t h0 = 0, w0 = 0;  // inclusive
  std::uint32_t h1 = 0, w1 = 0;  // exclusive

  std::uint32_t area() const { return (h1 - h0) * (w1 - w0); }
  bool valid_for(std::uint32_t height, std::uint32_t width) const {
    return h0 < h1 && h1 <= height && w0 < w1 && w1 <= width;
  }
  std::string str() const {
    return "(" + std::to_string(h0) + "," + std::to_string(w0) + "," + std::to_string(h1) + "," +
           std::to_string(w1) + ")";
  }
  friend bool operator==(const Region&, const Region&) = default;
};

struct SamplerConfig {
  double min_frac = 0.25;
  double max_frac = 1.0;
};

inline void validate(const SamplerConfig& cfg) {
  auto in_range = [](double f) { return f > 0.0 && f <= 1.0; };
  if (!in_range(cfg.min_frac) || !in_range(cfg.max_frac)) {
    throw ConfigError("sampler: fractions must lie in (0, 1]");
  }
  if (cfg.min_frac > cfg.max_frac) throw ConfigError("sampler: min_frac > max_frac");
}

/// Inclusive range of side lengths the sampler draws from for a grid side of length n.
inline std::pair<std::uint32_t, std::uint32_t> side_range(std::uint32_t n, const SamplerConfig& cfg) {
  auto lo = static_cast<std::uint32_t>(std::ceil(cfg.min_frac * n));
  auto hi = static_cast<std::uint32_t>(std::floor(cfg.max_frac * n));
  lo = std::clamp<std::uint32_t>(lo, 1, n);
  hi = std::clamp<std::uint32_t>(hi, lo, n);
  return {lo, hi};
}

/// Draws R regions: side lengths uniform over side_range, placement uniform.
inline std::vector<Region> sample_regions(std::uint32_t height, std::uint32_t width, std::uint32_t count,
                                          std::uint64_t seed, const SamplerConfig& cfg = {}) {
  validate(cfg);
  if (height < 1 || width < 1 || count < 1) {
    throw ContractError("sample_regions: H, W and R must be >= 1");
  }
  const auto [hlo, hhi] = side_range(height, cfg);
  const auto [wlo, whi] = side_range(width, cfg);
  Rng rng(seed);
  std::vector<Region> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto h = static_cast<std::uint32_t>(rng.between(hlo, hhi));
    const auto w = static_cast<std::uint32_t>(rng.between(wlo, whi));
    const auto h0 = static_cast<std::uint32_t>(rng.below(height - h + 1));
    const auto w0 = static_cast<std::uint32_t>(rng.below(width - w + 1));
    out.push_back({h0, w0, h0 + h, w0 + w});
  }
  return out;
}

struct RegionSet {
  std::vector<Region> regions;
  Mat x;  // D x R
  std::uint64_t seed = 0;
};

/// Average-pools each region (row-major cell order), then optionally L2-normalizes each column.
inline RegionSet pool_regions(const FeatureMap& fm, std::span<const Region> regions,
                              bool normalize_descriptors = true) {
  const std::size_t depth = fm.depth;
  RegionSet out;
  out.regions.assign(regions.begin(), regions.end());
  out.x = Mat(depth, regions.size());
  Vec acc(depth);
  for (std::size_t r = 0; r < regions.size(); ++r) {
    const Region& reg = regions[r];
    if (!reg.valid_for(fm.height, fm.width)) {
      throw ContractError("pool_regions: region " + std::to_string(r) + " " + reg.str() +
                          " out of bounds for " + std::to_string(fm.height) + "x" +
                          std::to_string(fm.width) + " grid");
    }
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::uint32_t h = reg.h0; h < reg.h1; ++h) {
      for (std::uint32_t w = reg.w0; w < reg.w1; ++w) {
        auto cell = fm.cell(h, w);
        for (std::size_t d = 0; d < depth; ++d) acc[d] += cell[d];
      }
    }
    const double area = reg.area();
    for (double& v : acc) v /= area;
    if (normalize_descriptors) acc = l2_normalize(acc);
    for (std::size_t d = 0; d < depth; ++d) out.x(d, r) = acc[d];
  }
  return out;
}

struct PixelRect {
  std::uint32_t y0 = 0, x0 = 0, y1 = 0, x1 = 0;
  friend bool operator==(const PixelRect&, const PixelRect&) = default;
};

/// Grid rectangle to pixel rectangle, rounding outward and clamping to the image.
inline PixelRect region_to_pixels(const Region& region, const FeatureMap& fm) {
  auto lo = [](std::uint64_t g, std::uint64_t px, std::uint64_t n) {
    return static_cast<std::uint32_t>(std::min<std::uint64_t>(g * px / n, px));
  };
  auto hi = [](std::uint64_t g, std::uint64_t px, std::uint64_t n) {
    return static_cast<std::uint32_t>(std::min<std::uint64_t>((g * px + n - 1) / n, px));
  };
  return {lo(region.h0, fm.image_h, fm.height), lo(region.w0, fm.image_w, fm.width),
          hi(region.h1, fm.image_h, fm.height), hi(region.w1, fm.image_w, fm.width)};
}

// ---------------------------------------------------------------------------
// Manifests

struct ManifestEntry {
  std::string image_id;
  std::filesystem::path path;  // resolved against the manifest directory on load
  std::uint32_t label = 0;
  std::string class_name;
  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::uint32_t num_classes = 0;

  /// Class names indexed by label; empty strings for labels absent from the manifest.
  std::vector<std::string> class_names() const {
    std::vector<std::string> names(num_classes);
    for (const auto& e : entries) names[e.label] = e.class_name;
    return names;
  }
};

/// Cross-checks labels against class names and fills num_classes = max(label) + 1.
/// With require_all_classes, every label in [0, C) must have at least one entry.
inline void finalize_manifest(DatasetManifest& m, bool require_all_classes) {
  if (m.entries.empty()) throw DataError("manifest: no entries");
  std::map<std::uint32_t, std::string> label_to_name;
  std::map<std::string, std::uint32_t> name_to_label;
  std::set<std::string> ids;
  std::uint32_t max_label = 0;
  for (const auto& e : m.entries) {
    if (!ids.insert(e.image_id).second) throw DataError("manifest: duplicate id '" + e.image_id + "'");
    max_label = std::max(max_label, e.label);
    auto [lit, lnew] = label_to_name.emplace(e.label, e.class_name);
    if (!lnew && lit->second != e.class_name) {
      throw DataError("manifest: label " + std::to_string(e.label) + " has names '" + lit->second +
                      "' and '" + e.class_name + "'");
    }
    auto [nit, nnew] = name_to_label.emplace(e.class_name, e.label);
    if (!nnew && nit->second != e.label) {
      throw DataError("manifest: class name '" + e.class_name + "' used for labels " +
                      std::to_string(nit->second) + " and " + std::to_string(e.label));
    }
  }
  m.num_classes = max_label + 1;
  if (require_all_classes && label_to_name.size() != m.num_classes) {
    throw DataError("manifest: " + std::to_string(name_to_label.size()) + " distinct class names but " +
                    std::to_string(m.num_classes) + " classes implied by max label");
  }
}

inline DatasetManifest parse_manifest(const nlohmann::json& doc, const std::filesystem::path& base_dir,
                                      bool require_all_classes = true) {
  if (!doc.is_array()) throw DataError("manifest: expected a JSON array");
  DatasetManifest m;
  for (const auto& item : doc) {
    try {
      ManifestEntry e;
      e.image_id = item.at("id").get<std::string>();
      std::filesystem::path p = item.at("path").get<std::string>();
      e.path = p.is_absolute() ? p : base_dir / p;
      const auto label = item.at("label").get<std::int64_t>();
      if (label < 0) throw DataError("manifest: negative label for '" + e.image_id + "'");
      e.label = static_cast<std::uint32_t>(label);
      e.class_name = item.at("class_name").get<std::string>();
      m.entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw DataError(std::string("manifest: bad entry: ") + ex.what());
    }
  }
  finalize_manifest(m, require_all_classes);
  return m;
}

inline DatasetManifest read_manifest(const std::filesystem::path& path, bool require_all_classes = true) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::parse_error& ex) {
    throw DataError("manifest " + path.string() + ": " + ex.what());
  }
  return parse_manifest(doc, path.parent_path(), require_all_classes);
}

/// Writes entries with paths relative to the manifest's directory where possible.
inline void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  nlohmann::json doc = nlohmann::json::array();
  const auto base = path.parent_path();
  for (const auto& e : m.entries) {
    auto rel = e.path;
    if (!base.empty()) {
      auto candidate = e.path.lexically_relative(base);
      if (!candidate.empty() && *candidate.begin() != "..") rel = candidate;
    }
    doc.push_back({{"id", e.image_id}, {"path", rel.generic_string()}, {"label", e.label},
                   {"class_name", e.class_name}});
  }
  detail::write_file(path, doc.dump(2) + "\n");
}

}  // namespace dpnet

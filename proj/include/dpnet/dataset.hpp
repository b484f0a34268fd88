#pragma once

// Loading manifest entries into pooled region descriptors.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dpnet/feature_store.hpp"
#include "dpnet/rng.hpp"
#include "dpnet/thread_pool.hpp"

namespace dpnet {

struct RegionSampling {
  std::uint64_t seed = 0;
  std::uint32_t regions = 500;
  SamplerConfig sampler;
  bool normalize_descriptors = true;
};

/// Per-image sampling seed. A resample pass number mixes in a fresh stream.
inline std::uint64_t region_seed(std::uint64_t dataset_seed, std::string_view image_id,
                                 std::optional<std::uint64_t> pass = std::nullopt) {
  const std::uint64_t base = pass ? mix_seed(dataset_seed, *pass + 1) : dataset_seed;
  return hash64(base, image_id);
}

struct EncodedImage {
  std::string image_id;
  std::uint32_t label = 0;
  std::uint32_t grid_h = 0;
  std::uint32_t grid_w = 0;
  RegionSet regions;
};

inline EncodedImage encode_image(const FeatureMap& fm, std::uint32_t label, const RegionSampling& cfg,
                                 std::optional<std::uint64_t> pass = std::nullopt) {
  EncodedImage out;
  out.image_id = fm.image_id;
  out.label = label;
  out.grid_h = fm.height;
  out.grid_w = fm.width;
  const auto seed = region_seed(cfg.seed, fm.image_id, pass);
  auto regions = sample_regions(fm.height, fm.width, cfg.regions, seed, cfg.sampler);
  out.regions = pool_regions(fm, regions, cfg.normalize_descriptors);
  out.regions.seed = seed;
  return out;
}

/// Reads and encodes the given entries in parallel; output order follows the input.
/// Every file must share one descriptor depth (and match expected_depth when given).
inline std::vector<EncodedImage> encode_entries(std::span<const ManifestEntry> entries, const RegionSampling& cfg,
                                                ThreadPool& pool, std::optional<std::uint64_t> pass = std::nullopt,
                                                std::optional<std::size_t> expected_depth = std::nullopt) {
  std::vector<EncodedImage> out(entries.size());
  std::vector<std::uint32_t> depths(entries.size());
  pool.parallel_for(entries.size(), [&](std::size_t i) {
    const auto& e = entries[i];
    FeatureMap fm = read_feature_map(e.path);
    if (fm.image_id != e.image_id) {
      throw DataError(e.path.string() + ": file holds image '" + fm.image_id + "', manifest says '" +
                      e.image_id + "'");
    }
    depths[i] = fm.depth;
    out[i] = encode_image(fm, e.label, cfg, pass);
  });
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const std::size_t want = expected_depth ? *expected_depth : depths[0];
    if (depths[i] != want) {
      throw DataError("inconsistent descriptor depth: " + entries[i].path.string() + " has D=" +
                      std::to_string(depths[i]) + ", expected " + std::to_string(want));
    }
  }
  return out;
}

inline const ManifestEntry& find_entry(const DatasetManifest& m, std::string_view image_id) {
  for (const auto& e : m.entries) {
    if (e.image_id == image_id) return e;
  }
  throw DataError("image '" + std::string(image_id) + "' not found in manifest");
}

}  // namespace dpnet

#pragma once

// Interpretability statistics over a trained model: per-image part
// importance v[c][p] * b[p], class popularity f(p) of each part, the
// frequency-discounted discriminative power d(p, c), the regions that best
// match a part over a dataset, and per-image heatmaps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpnet/dataset.hpp"
#include "dpnet/errors.hpp"
#include "dpnet/feature_store.hpp"
#include "dpnet/numerics.hpp"
#include "dpnet/part_model.hpp"
#include "dpnet/thread_pool.hpp"

namespace dpnet {

/// An encoded image together with its forward trace under some model.
struct TracedImage {
  const EncodedImage* image = nullptr;
  ForwardTrace trace;
};

inline std::vector<TracedImage> trace_images(const PartModel& model, std::span<const EncodedImage> images,
                                             ThreadPool& pool) {
  std::vector<TracedImage> out(images.size());
  pool.parallel_for(images.size(), [&](std::size_t i) {
    out[i].image = &images[i];
    out[i].trace = forward(model, images[i].regions.x);
  });
  return out;
}

inline double part_importance(const ForwardTrace& trace, const PartModel& model, std::size_t c, std::size_t p) {
  if (c >= model.num_classes() || p >= model.num_parts() || p >= trace.b.size()) {
    throw ContractError("part_importance: class " + std::to_string(c) + " / part " + std::to_string(p) +
                        " out of range");
  }
  return model.v(c, p) * trace.b[p];
}

struct PartStats {
  std::vector<std::uint32_t> freq;  // f(p), in [1, C]
  Mat dpc;                          // C x P, d(p, c) at (c, p)
  std::uint32_t top_k_per_class = 0;
};

/// Indices of the k largest values, descending, lowest index first on ties.
inline std::vector<std::size_t> top_indices(std::span<const double> values, std::size_t k) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return values[a] > values[b] || (values[a] == values[b] && a < b); });
  idx.resize(k);
  return idx;
}

/// Mean importance v[c][p] * b[p](I) over the images of class c (C x P).
inline Mat class_mean_importance(const PartModel& model, std::span<const TracedImage> traced) {
  const std::size_t classes = model.num_classes();
  const std::size_t parts = model.num_parts();
  Mat mean(classes, parts);
  std::vector<std::size_t> count(classes, 0);
  for (const auto& t : traced) {
    const std::size_t c = t.image->label;
    if (c >= classes) throw ContractError("label " + std::to_string(c) + " exceeds model classes");
    ++count[c];
    for (std::size_t p = 0; p < parts; ++p) mean(c, p) += model.v(c, p) * t.trace.b[p];
  }
  for (std::size_t c = 0; c < classes; ++c) {
    if (count[c] == 0) throw DataError("part_frequency: class " + std::to_string(c) + " has no images");
    for (std::size_t p = 0; p < parts; ++p) mean(c, p) /= static_cast<double>(count[c]);
  }
  return mean;
}

/// f(p): number of classes whose top-K mean-importance parts include p, floored at 1.
inline std::vector<std::uint32_t> part_frequency(const PartModel& model, std::span<const TracedImage> traced,
                                                 std::uint32_t top_k) {
  if (top_k < 1) throw ContractError("part_frequency: top_k must be >= 1");
  const Mat mean = class_mean_importance(model, traced);
  std::vector<std::uint32_t> freq(model.num_parts(), 0);
  for (std::size_t c = 0; c < model.num_classes(); ++c) {
    for (auto p : top_indices(mean.row(c), top_k)) ++freq[p];
  }
  for (auto& f : freq) f = std::max<std::uint32_t>(f, 1);
  return freq;
}

/// Denominator of d(p, c). ln(1 + f) by default. With plain_log, ln f is used
/// and f == 1 leaves the numerator unscaled.
inline double frequency_discount(std::uint32_t f, bool plain_log) {
  if (plain_log) return f <= 1 ? 1.0 : std::log(static_cast<double>(f));
  return std::log1p(static_cast<double>(f));
}

/// d(p, c) = sum over images of class c of v[c][p] * b[p](I), divided by the frequency discount.
inline Mat discriminative_power(const PartModel& model, std::span<const TracedImage> traced,
                                std::span<const std::uint32_t> freq, bool plain_log = false) {
  const std::size_t parts = model.num_parts();
  if (freq.size() != parts) throw ContractError("discriminative_power: freq has wrong length");
  Mat d(model.num_classes(), parts);
  for (const auto& t : traced) {
    const std::size_t c = t.image->label;
    for (std::size_t p = 0; p < parts; ++p) d(c, p) += model.v(c, p) * t.trace.b[p];
  }
  for (std::size_t c = 0; c < d.rows(); ++c) {
    for (std::size_t p = 0; p < parts; ++p) d(c, p) /= frequency_discount(freq[p], plain_log);
  }
  return d;
}

inline PartStats compute_part_stats(const PartModel& model, std::span<const TracedImage> traced,
                                    std::uint32_t top_k, bool plain_log = false) {
  PartStats s;
  s.top_k_per_class = top_k;
  s.freq = part_frequency(model, traced, top_k);
  s.dpc = discriminative_power(model, traced, s.freq, plain_log);
  return s;
}

inline nlohmann::json to_json(const PartStats& s) {
  return {{"freq", s.freq},
          {"dpc", std::vector<double>(s.dpc.data().begin(), s.dpc.data().end())},
          {"num_classes", s.dpc.rows()},
          {"num_parts", s.dpc.cols()},
          {"top_k_per_class", s.top_k_per_class}};
}

inline PartStats part_stats_from_json(const nlohmann::json& j) {
  try {
    PartStats s;
    s.freq = j.at("freq").get<std::vector<std::uint32_t>>();
    auto flat = j.at("dpc").get<std::vector<double>>();
    s.top_k_per_class = j.at("top_k_per_class").get<std::uint32_t>();
    const std::size_t parts = s.freq.size();
    if (parts == 0 || flat.size() % parts != 0) throw DataError("stats: dpc size is not a multiple of P");
    const std::size_t classes = flat.size() / parts;
    s.dpc = Mat(classes, parts, std::move(flat));
    return s;
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(std::string("stats: ") + ex.what());
  }
}

/// Parts of class c ranked by d(p, c), descending.
inline std::vector<std::size_t> top_parts(const PartStats& stats, std::size_t c, std::size_t n) {
  if (c >= stats.dpc.rows()) throw ContractError("top_parts: class " + std::to_string(c) + " out of range");
  return top_indices(stats.dpc.row(c), n);
}

struct RegionHit {
  std::string image_id;
  std::uint32_t region_index = 0;
  Region region;
  double score = 0.0;
};

/// The k highest s[p][r] over every region of every image; ties by (image_id, region index).
inline std::vector<RegionHit> top_regions_for_part(const PartModel& model, std::span<const EncodedImage> images,
                                                   std::size_t p, std::size_t k) {
  if (p >= model.num_parts()) throw ContractError("top_regions_for_part: part " + std::to_string(p) + " out of range");
  if (k < 1) throw ContractError("top_regions_for_part: k must be >= 1");
  std::vector<RegionHit> hits;
  const auto part = model.u.row(p);
  for (const auto& img : images) {
    const Mat& x = img.regions.x;
    if (x.rows() != part.size()) throw ContractError("top_regions_for_part: descriptor depth mismatch");
    for (std::uint32_t r = 0; r < x.cols(); ++r) {
      double s = 0.0;
      for (std::size_t d = 0; d < part.size(); ++d) s += part[d] * x(d, r);
      hits.push_back({img.image_id, r, img.regions.regions[r], s});
    }
  }
  auto before = [](const RegionHit& a, const RegionHit& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    return a.region_index < b.region_index;
  };
  k = std::min(k, hits.size());
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(), before);
  hits.resize(k);
  return hits;
}

// ---------------------------------------------------------------------------
// Explanations

struct ChosenPart {
  std::uint32_t part = 0;
  double d = 0.0;
};

struct ChosenRegion {
  std::uint32_t part = 0;
  std::uint32_t region_index = 0;
  Region region;
  double score = 0.0;
};

struct Explanation {
  std::string image_id;
  std::uint32_t class_index = 0;
  std::vector<ChosenPart> parts;
  std::vector<ChosenRegion> regions;
  Mat heat;  // H x W, in [0, 1]; zero on cells no chosen region covers
};

/// Heat over an H x W grid: chosen region scores summed per cell, then
/// min-max normalized over covered cells. Equal covered values map to 1.
inline Mat accumulate_heat(std::uint32_t grid_h, std::uint32_t grid_w, std::span<const ChosenRegion> chosen) {
  Mat heat(grid_h, grid_w);
  std::vector<bool> covered(std::size_t{grid_h} * grid_w, false);
  for (const auto& c : chosen) {
    for (std::uint32_t h = c.region.h0; h < c.region.h1; ++h) {
      for (std::uint32_t w = c.region.w0; w < c.region.w1; ++w) {
        heat(h, w) += c.score;
        covered[std::size_t{h} * grid_w + w] = true;
      }
    }
  }
  double lo = 0.0, hi = 0.0;
  bool any = false;
  for (std::size_t i = 0; i < covered.size(); ++i) {
    if (!covered[i]) continue;
    const double v = heat.data()[i];
    lo = any ? std::min(lo, v) : v;
    hi = any ? std::max(hi, v) : v;
    any = true;
  }
  for (std::size_t i = 0; i < covered.size(); ++i) {
    double& v = heat.data()[i];
    if (!covered[i]) v = 0.0;
    else v = hi > lo ? (v - lo) / (hi - lo) : 1.0;
  }
  return heat;
}

/// Top-N parts of class c by d(p, c), then the top-M (part, region) scores
/// among them in this image, accumulated into a heat grid.
inline Explanation explain(const PartModel& model, const PartStats& stats, const EncodedImage& image, std::size_t c,
                           std::size_t n_parts, std::size_t m_regions) {
  if (n_parts < 1 || m_regions < 1) throw ContractError("explain: N and M must be >= 1");
  if (c >= model.num_classes()) throw ContractError("explain: class " + std::to_string(c) + " out of range");
  if (stats.dpc.rows() != model.num_classes() || stats.dpc.cols() != model.num_parts()) {
    throw ContractError("explain: stats are " + stats.dpc.shape() + " but model has " +
                        std::to_string(model.num_classes()) + " classes and " + std::to_string(model.num_parts()) +
                        " parts");
  }
  Explanation ex;
  ex.image_id = image.image_id;
  ex.class_index = static_cast<std::uint32_t>(c);
  const ForwardTrace trace = forward(model, image.regions.x);

  for (auto p : top_parts(stats, c, n_parts)) ex.parts.push_back({static_cast<std::uint32_t>(p), stats.dpc(c, p)});

  std::vector<ChosenRegion> candidates;
  for (const auto& cp : ex.parts) {
    for (std::uint32_t r = 0; r < trace.s.cols(); ++r) {
      candidates.push_back({cp.part, r, image.regions.regions[r], trace.s(cp.part, r)});
    }
  }
  auto before = [](const ChosenRegion& a, const ChosenRegion& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.part != b.part) return a.part < b.part;
    return a.region_index < b.region_index;
  };
  const std::size_t m = std::min(m_regions, candidates.size());
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(m), candidates.end(), before);
  candidates.resize(m);
  ex.regions = std::move(candidates);
  ex.heat = accumulate_heat(image.grid_h, image.grid_w, ex.regions);
  return ex;
}

inline nlohmann::json to_json(const Explanation& ex, const FeatureMap& fm) {
  nlohmann::json parts = nlohmann::json::array();
  for (const auto& p : ex.parts) parts.push_back({{"part", p.part}, {"d", p.d}});
  nlohmann::json regions = nlohmann::json::array();
  for (const auto& r : ex.regions) {
    const PixelRect px = region_to_pixels(r.region, fm);
    regions.push_back({{"part", r.part},
                       {"region_index", r.region_index},
                       {"score", r.score},
                       {"grid", {{"h0", r.region.h0}, {"w0", r.region.w0}, {"h1", r.region.h1}, {"w1", r.region.w1}}},
                       {"pixels", {{"y0", px.y0}, {"x0", px.x0}, {"y1", px.y1}, {"x1", px.x1}}}});
  }
  return {{"image_id", ex.image_id},
          {"class", ex.class_index},
          {"parts", parts},
          {"regions", regions},
          {"grid", {{"height", ex.heat.rows()}, {"width", ex.heat.cols()}}},
          {"heat", std::vector<double>(ex.heat.data().begin(), ex.heat.data().end())}};
}

/// Binary PGM (P5, maxval 255) of the heat grid, nearest-neighbor upsampled to out_h x out_w.
inline std::string heat_to_pgm(const Mat& heat, std::uint32_t out_h, std::uint32_t out_w) {
  if (heat.empty() || out_h == 0 || out_w == 0) throw ContractError("heat_to_pgm: empty image");
  std::string out = "P5\n" + std::to_string(out_w) + " " + std::to_string(out_h) + "\n255\n";
  out.reserve(out.size() + std::size_t{out_h} * out_w);
  for (std::uint32_t y = 0; y < out_h; ++y) {
    const std::size_t h = std::size_t{y} * heat.rows() / out_h;
    for (std::uint32_t x = 0; x < out_w; ++x) {
      const std::size_t w = std::size_t{x} * heat.cols() / out_w;
      const double v = std::clamp(heat(h, w), 0.0, 1.0);
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
  }
  return out;
}

}  // namespace dpnet

#pragma once

// Synthetic feature maps with planted parts. Each class owns q_true rows of
// a random orthonormal set; an image of class c carries `planted` random
// cells holding one of its class's parts plus Gaussian noise, every other
// cell is pure noise.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpnet/errors.hpp"
#include "dpnet/feature_store.hpp"
#include "dpnet/numerics.hpp"
#include "dpnet/rng.hpp"

namespace dpnet {

struct SynthSpec {
  std::uint32_t classes = 5;
  std::uint32_t q_true = 3;
  std::uint32_t depth = 16;
  std::uint32_t grid_h = 8;
  std::uint32_t grid_w = 8;
  std::uint32_t train_per_class = 40;
  std::uint32_t test_per_class = 20;
  std::uint32_t planted = 6;
  double sigma = 0.15;
  std::uint64_t seed = 7;
  std::uint32_t cell_px = 32;  // pixels per grid cell in the recorded image size
};

inline void validate(const SynthSpec& s) {
  if (s.classes < 1 || s.q_true < 1 || s.depth < 1 || s.grid_h < 1 || s.grid_w < 1 || s.cell_px < 1) {
    throw ConfigError("synth: classes, q_true, depth, grid and cell_px must be >= 1");
  }
  if (std::uint64_t{s.classes} * s.q_true > s.depth) {
    throw ConfigError("synth: classes * q_true = " + std::to_string(s.classes * s.q_true) + " exceeds depth " +
                      std::to_string(s.depth));
  }
  if (s.planted > s.grid_h * s.grid_w) throw ConfigError("synth: planted cells exceed grid size");
  if (!(s.sigma >= 0.0) || !std::isfinite(s.sigma)) throw ConfigError("synth: sigma must be >= 0");
  if (s.train_per_class < 1) throw ConfigError("synth: train_per_class must be >= 1");
}

inline nlohmann::json to_json(const SynthSpec& s) {
  return {{"classes", s.classes},   {"q_true", s.q_true},
          {"depth", s.depth},       {"grid_h", s.grid_h},
          {"grid_w", s.grid_w},     {"train_per_class", s.train_per_class},
          {"test_per_class", s.test_per_class}, {"planted", s.planted},
          {"sigma", s.sigma},       {"seed", s.seed},
          {"cell_px", s.cell_px}};
}

inline SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  SynthSpec s;
  if (!j.is_object()) throw ConfigError("synth spec: expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    const auto& v = it.value();
    try {
      if (k == "classes") v.get_to(s.classes);
      else if (k == "q_true") v.get_to(s.q_true);
      else if (k == "depth") v.get_to(s.depth);
      else if (k == "grid_h") v.get_to(s.grid_h);
      else if (k == "grid_w") v.get_to(s.grid_w);
      else if (k == "train_per_class") v.get_to(s.train_per_class);
      else if (k == "test_per_class") v.get_to(s.test_per_class);
      else if (k == "planted") v.get_to(s.planted);
      else if (k == "sigma") v.get_to(s.sigma);
      else if (k == "seed") v.get_to(s.seed);
      else if (k == "cell_px") v.get_to(s.cell_px);
      else throw ConfigError("synth spec: unknown key '" + k + "'");
    } catch (const nlohmann::json::exception& ex) {
      throw ConfigError("synth spec." + k + ": " + ex.what());
    }
  }
  return s;
}

struct SynthImage {
  FeatureMap map;
  std::uint32_t label = 0;
  std::vector<std::uint32_t> planted_cells;  // h * W + w
  std::vector<std::uint32_t> planted_parts;  // index into SynthData::parts rows
};

struct SynthData {
  SynthSpec spec;
  Mat parts;  // (classes * q_true) x depth, orthonormal rows; class c owns rows [c q, (c+1) q)
  std::vector<SynthImage> train;
  std::vector<SynthImage> test;
};

/// Gram-Schmidt on Gaussian draws (re-orthogonalized twice for accuracy).
inline Mat random_orthonormal_rows(std::size_t rows, std::size_t dim, Rng& rng) {
  if (rows > dim) throw ContractError("random_orthonormal_rows: more rows than dimensions");
  Mat out(rows, dim);
  for (std::size_t i = 0; i < rows; ++i) {
    for (;;) {
      Vec v(dim);
      for (double& x : v) x = rng.normal();
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t j = 0; j < i; ++j) {
          const double proj = dot(v, out.row(j));
          for (std::size_t k = 0; k < dim; ++k) v[k] -= proj * out(j, k);
        }
      }
      const double n = norm2(v);
      if (n < 1e-6) continue;
      for (std::size_t k = 0; k < dim; ++k) out(i, k) = v[k] / n;
      break;
    }
  }
  return out;
}

namespace detail {

inline SynthImage synth_image(const SynthSpec& s, const Mat& parts, std::uint32_t label, const std::string& id) {
  Rng rng(hash64(s.seed, id));
  SynthImage img;
  img.label = label;
  FeatureMap& fm = img.map;
  fm.image_id = id;
  fm.height = s.grid_h;
  fm.width = s.grid_w;
  fm.depth = s.depth;
  fm.image_h = s.grid_h * s.cell_px;
  fm.image_w = s.grid_w * s.cell_px;
  fm.data.resize(std::size_t{s.grid_h} * s.grid_w * s.depth);
  for (double& v : fm.data) v = s.sigma * rng.normal();

  std::vector<std::uint32_t> cells(s.grid_h * s.grid_w);
  std::iota(cells.begin(), cells.end(), 0u);
  for (std::uint32_t n = 0; n < s.planted; ++n) {
    const std::size_t j = n + rng.below(cells.size() - n);
    std::swap(cells[n], cells[j]);
    const std::uint32_t part = label * s.q_true + static_cast<std::uint32_t>(rng.below(s.q_true));
    auto cell = fm.cell(cells[n] / s.grid_w, cells[n] % s.grid_w);
    for (std::size_t d = 0; d < s.depth; ++d) cell[d] += parts(part, d);
    img.planted_cells.push_back(cells[n]);
    img.planted_parts.push_back(part);
  }
  // Stored as float32 on disk; keep the in-memory copy identical.
  for (double& v : fm.data) v = static_cast<double>(static_cast<float>(v));
  return img;
}

}  // namespace detail

inline std::string synth_image_id(bool train, std::uint32_t label, std::uint32_t index) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%s_c%u_%04u", train ? "train" : "test", label, index);
  return buf;
}

inline SynthData generate(const SynthSpec& spec) {
  validate(spec);
  SynthData data;
  data.spec = spec;
  Rng rng(mix_seed(spec.seed, 0x7061727473ULL));
  data.parts = random_orthonormal_rows(std::size_t{spec.classes} * spec.q_true, spec.depth, rng);
  for (std::uint32_t c = 0; c < spec.classes; ++c) {
    for (std::uint32_t i = 0; i < spec.train_per_class; ++i) {
      data.train.push_back(detail::synth_image(spec, data.parts, c, synth_image_id(true, c, i)));
    }
    for (std::uint32_t i = 0; i < spec.test_per_class; ++i) {
      data.test.push_back(detail::synth_image(spec, data.parts, c, synth_image_id(false, c, i)));
    }
  }
  return data;
}

inline std::string synth_class_name(std::uint32_t c) { return "class_" + std::to_string(c); }

struct SynthPaths {
  std::filesystem::path train_manifest;
  std::filesystem::path test_manifest;
  std::filesystem::path ground_truth;
};

/// Writes DIR/features/<id>.dpfm, DIR/train.json, DIR/test.json and DIR/ground_truth.json.
inline SynthPaths write_synth(const SynthData& data, const std::filesystem::path& dir) {
  SynthPaths paths{dir / "train.json", dir / "test.json", dir / "ground_truth.json"};
  auto emit = [&](const std::vector<SynthImage>& images, const std::filesystem::path& manifest_path) {
    DatasetManifest m;
    for (const auto& img : images) {
      const auto path = dir / "features" / (img.map.image_id + ".dpfm");
      write_feature_map(img.map, path);
      m.entries.push_back({img.map.image_id, path, img.label, synth_class_name(img.label)});
    }
    m.num_classes = data.spec.classes;
    write_manifest(m, manifest_path);
  };
  emit(data.train, paths.train_manifest);
  if (!data.test.empty()) emit(data.test, paths.test_manifest);

  nlohmann::json parts = nlohmann::json::array();
  for (std::size_t p = 0; p < data.parts.rows(); ++p) {
    auto row = data.parts.row(p);
    parts.push_back(std::vector<double>(row.begin(), row.end()));
  }
  nlohmann::json gt = {{"spec", to_json(data.spec)}, {"parts", parts}};
  detail::write_file(paths.ground_truth, gt.dump(2) + "\n");
  return paths;
}

}  // namespace dpnet

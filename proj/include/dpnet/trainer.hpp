#pragma once

// Mini-batch Adam training over mega-batches of pooled region descriptors.
//
// Each outer epoch walks the dataset in mega-batches. A mega-batch is loaded
// once (features read, regions sampled and pooled) and then swept
// `batch_level_epochs` times in shuffled mini-batches. Per-image gradients
// are computed in parallel against a frozen model and summed in mini-batch
// order, so results do not depend on the worker count.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpnet/dataset.hpp"
#include "dpnet/errors.hpp"
#include "dpnet/feature_store.hpp"
#include "dpnet/numerics.hpp"
#include "dpnet/objective.hpp"
#include "dpnet/part_model.hpp"
#include "dpnet/rng.hpp"
#include "dpnet/thread_pool.hpp"

namespace dpnet {

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  std::uint32_t epochs = 40;
  double base_lr = 1e-3;
  std::uint32_t lr_decay_every = 10;
  std::uint32_t batch_level_epochs = 32;
  std::uint32_t mini_batch_size = 32;
  std::uint32_t mega_batch_images = 2048;
  std::uint64_t seed = 0;
  LossWeights weights;
  std::uint32_t q = 20;
  std::uint32_t R = 500;
  bool resample_each_epoch = false;
  bool normalize_descriptors = true;
  SamplerConfig sampler;
  std::uint32_t checkpoint_every = 10;
  AdamParams adam;

  /// "small": 20 parts per class, 500 regions. "large": 10 parts per class, 100 regions.
  static TrainConfig profile(const std::string& name) {
    TrainConfig cfg;
    if (name == "small") return cfg;
    if (name == "large") {
      cfg.q = 10;
      cfg.R = 100;
      return cfg;
    }
    throw ConfigError("unknown profile '" + name + "' (expected 'small' or 'large')");
  }

  RegionSampling sampling() const { return {seed, R, sampler, normalize_descriptors}; }
};

inline void validate(const TrainConfig& cfg) {
  if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(cfg.base_lr > 0.0) || !std::isfinite(cfg.base_lr)) throw ConfigError("base_lr must be > 0");
  if (cfg.lr_decay_every < 1) throw ConfigError("lr_decay_every must be >= 1");
  if (cfg.batch_level_epochs < 1) throw ConfigError("batch_level_epochs must be >= 1");
  if (cfg.mini_batch_size < 1) throw ConfigError("mini_batch_size must be >= 1");
  if (cfg.mega_batch_images < 1) throw ConfigError("mega_batch_images must be >= 1");
  if (cfg.q < 1) throw ConfigError("q must be >= 1");
  if (cfg.R < 1) throw ConfigError("R must be >= 1");
  if (!(cfg.adam.beta1 >= 0.0 && cfg.adam.beta1 < 1.0 && cfg.adam.beta2 >= 0.0 && cfg.adam.beta2 < 1.0 &&
        cfg.adam.eps > 0.0)) {
    throw ConfigError("adam: need 0 <= beta < 1 and eps > 0");
  }
  validate(cfg.weights);
  validate(cfg.sampler);
}

// JSON mirrors the field names above.

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"lambda1", w.lambda1},
       {"lambda2", w.lambda2},
       {"lambda3", w.lambda3},
       {"enable_orth", w.enable_orth},
       {"enable_assign", w.enable_assign},
       {"enable_cs", w.enable_cs},
       {"cs_mode", to_string(w.cs_mode)},
       {"assign_normalized_by_R", w.assign_normalized_by_R}};
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"base_lr", c.base_lr},
       {"lr_decay_every", c.lr_decay_every},
       {"batch_level_epochs", c.batch_level_epochs},
       {"mini_batch_size", c.mini_batch_size},
       {"mega_batch_images", c.mega_batch_images},
       {"seed", c.seed},
       {"weights", c.weights},
       {"q", c.q},
       {"R", c.R},
       {"resample_each_epoch", c.resample_each_epoch},
       {"normalize_descriptors", c.normalize_descriptors},
       {"sampler", {{"min_frac", c.sampler.min_frac}, {"max_frac", c.sampler.max_frac}}},
       {"checkpoint_every", c.checkpoint_every},
       {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}}};
}

namespace detail {

/// Copies known keys from j into the fields; unknown keys are rejected.
template <typename Fn>
void read_object(const nlohmann::json& j, const std::string& where, Fn&& on_key) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    try {
      if (!on_key(it.key(), it.value())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
    } catch (const nlohmann::json::exception& ex) {
      throw ConfigError(where + "." + it.key() + ": " + ex.what());
    }
  }
}

}  // namespace detail

inline void from_json(const nlohmann::json& j, LossWeights& w) {
  detail::read_object(j, "weights", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "lambda1") v.get_to(w.lambda1);
    else if (k == "lambda2") v.get_to(w.lambda2);
    else if (k == "lambda3") v.get_to(w.lambda3);
    else if (k == "enable_orth") v.get_to(w.enable_orth);
    else if (k == "enable_assign") v.get_to(w.enable_assign);
    else if (k == "enable_cs") v.get_to(w.enable_cs);
    else if (k == "cs_mode") w.cs_mode = parse_cs_mode(v.get<std::string>());
    else if (k == "assign_normalized_by_R") v.get_to(w.assign_normalized_by_R);
    else return false;
    return true;
  });
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  detail::read_object(j, "config", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "epochs") v.get_to(c.epochs);
    else if (k == "base_lr") v.get_to(c.base_lr);
    else if (k == "lr_decay_every") v.get_to(c.lr_decay_every);
    else if (k == "batch_level_epochs") v.get_to(c.batch_level_epochs);
    else if (k == "mini_batch_size") v.get_to(c.mini_batch_size);
    else if (k == "mega_batch_images") v.get_to(c.mega_batch_images);
    else if (k == "seed") v.get_to(c.seed);
    else if (k == "weights") from_json(v, c.weights);
    else if (k == "q") v.get_to(c.q);
    else if (k == "R") v.get_to(c.R);
    else if (k == "resample_each_epoch") v.get_to(c.resample_each_epoch);
    else if (k == "normalize_descriptors") v.get_to(c.normalize_descriptors);
    else if (k == "sampler") {
      detail::read_object(v, "sampler", [&](const std::string& sk, const nlohmann::json& sv) {
        if (sk == "min_frac") sv.get_to(c.sampler.min_frac);
        else if (sk == "max_frac") sv.get_to(c.sampler.max_frac);
        else return false;
        return true;
      });
    } else if (k == "checkpoint_every") v.get_to(c.checkpoint_every);
    else if (k == "adam") {
      detail::read_object(v, "adam", [&](const std::string& ak, const nlohmann::json& av) {
        if (ak == "beta1") av.get_to(c.adam.beta1);
        else if (ak == "beta2") av.get_to(c.adam.beta2);
        else if (ak == "eps") av.get_to(c.adam.eps);
        else return false;
        return true;
      });
    } else return false;
    return true;
  });
}

/// base_lr * 10^-floor(epoch / lr_decay_every)
inline double lr_at(std::uint32_t epoch, const TrainConfig& cfg) {
  if (epoch >= cfg.epochs) {
    throw ContractError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) +
                        ")");
  }
  // One division by an exact power of ten, so 1e-3 decays to exactly 1e-6.
  double divisor = 1.0;
  for (std::uint32_t k = epoch / cfg.lr_decay_every; k > 0; --k) divisor *= 10.0;
  return cfg.base_lr / divisor;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  Mat m_u, v_u;  // first / second moments for U
  Mat m_v, v_v;  // first / second moments for V
  std::uint64_t t = 0;
  AdamParams hp;

  static AdamState for_model(const PartModel& model, AdamParams hp = {}) {
    AdamState s;
    s.m_u = s.v_u = Mat(model.u.rows(), model.u.cols());
    s.m_v = s.v_v = Mat(model.v.rows(), model.v.cols());
    s.hp = hp;
    return s;
  }
};

/// One bias-corrected Adam update of a flat parameter block.
inline void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m,
                        std::span<double> v, std::uint64_t t, double lr, const AdamParams& hp) {
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * grad[i];
    v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * grad[i] * grad[i];
    param[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + hp.eps);
  }
}

inline void adam_step(PartModel& model, const Mat& du, const Mat& dv, AdamState& state, double lr) {
  if (du.rows() != model.u.rows() || du.cols() != model.u.cols() || dv.rows() != model.v.rows() ||
      dv.cols() != model.v.cols() || state.m_u.size() != model.u.size() || state.m_v.size() != model.v.size()) {
    throw ContractError("adam_step: gradient or state shape does not match the model");
  }
  if (!all_finite(du.data())) throw TrainingError("non-finite gradient for U");
  if (!all_finite(dv.data())) throw TrainingError("non-finite gradient for V");
  ++state.t;
  adam_update(model.u.data(), du.data(), state.m_u.data(), state.v_u.data(), state.t, lr, state.hp);
  adam_update(model.v.data(), dv.data(), state.m_v.data(), state.v_v.data(), state.t, lr, state.hp);
}

// ---------------------------------------------------------------------------
// Metrics

struct EpochMetrics {
  std::uint32_t epoch = 0;
  double lr = 0.0;
  double cce = 0.0;
  double orth = 0.0;
  double assign = 0.0;
  double cs = 0.0;
  double total = 0.0;
  double train_acc = 0.0;
};

/// Shortest representation that parses back to the same double.
inline std::string format_double(double x) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, end);
}

inline std::string metrics_csv(std::span<const EpochMetrics> log) {
  std::string out = "epoch,lr,cce,orth,assign,cs,total,train_acc\n";
  for (const auto& m : log) {
    out += std::to_string(m.epoch);
    for (double v : {m.lr, m.cce, m.orth, m.assign, m.cs, m.total, m.train_acc}) {
      out += ',';
      out += format_double(v);
    }
    out += '\n';
  }
  return out;
}

inline nlohmann::json to_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch}, {"lr", m.lr},         {"cce", m.cce},     {"orth", m.orth},
          {"assign", m.assign}, {"cs", m.cs}, {"total", m.total}, {"train_acc", m.train_acc}};
}

// ---------------------------------------------------------------------------
// Training

struct TrainHooks {
  std::function<void(const EpochMetrics&)> on_epoch;
  /// Called after epochs whose 1-based index is a multiple of checkpoint_every.
  std::function<void(std::uint32_t epoch, const PartModel&)> on_checkpoint;
};

struct TrainResult {
  PartModel model;
  std::vector<EpochMetrics> log;
};

namespace detail {

/// Overwrites rows of U with normalized region descriptors drawn without
/// replacement. With class blocks, block c draws from images of class c when
/// it has enough regions. Leaves U untouched if there are fewer regions than parts.
inline void init_parts_from_regions(PartModel& model, std::span<const EncodedImage> images, bool class_blocks,
                                    Rng& rng) {
  using Pick = std::pair<std::uint32_t, std::uint32_t>;  // (image, region)
  std::vector<Pick> all;
  std::vector<std::vector<Pick>> by_class(model.num_classes());
  for (std::uint32_t i = 0; i < images.size(); ++i) {
    for (std::uint32_t r = 0; r < images[i].regions.x.cols(); ++r) {
      all.emplace_back(i, r);
      if (images[i].label < by_class.size()) by_class[images[i].label].emplace_back(i, r);
    }
  }
  if (all.size() < model.num_parts()) return;

  auto draw = [&](std::vector<Pick>& pool, std::size_t k) {
    std::vector<Pick> out;
    for (std::size_t n = 0; n < k; ++n) {
      const std::size_t j = n + rng.below(pool.size() - n);
      std::swap(pool[n], pool[j]);
      out.push_back(pool[n]);
    }
    return out;
  };

  std::vector<Pick> picks;
  if (class_blocks) {
    const std::size_t q = model.parts_per_class;
    for (std::size_t c = 0; c < model.num_classes(); ++c) {
      auto& source = by_class[c].size() >= q ? by_class[c] : all;
      auto got = draw(source, q);
      picks.insert(picks.end(), got.begin(), got.end());
    }
  } else {
    picks = draw(all, model.num_parts());
  }
  for (std::size_t p = 0; p < picks.size(); ++p) {
    const auto& x = images[picks[p].first].regions.x;
    Vec col = x.column(picks[p].second);
    if (norm2(col) <= kNormEps) continue;
    col = l2_normalize(col);
    std::copy(col.begin(), col.end(), model.u.row(p).begin());
  }
}

inline void add_into(Mat& acc, const Mat& m) {
  auto a = acc.data();
  auto b = m.data();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

inline void scale(Mat& m, double s) {
  for (double& x : m.data()) x *= s;
}

inline void check_finite(const Mat& g, const char* term) {
  if (!all_finite(g.data())) throw TrainingError(std::string("non-finite gradient in term '") + term + "'");
}

}  // namespace detail

/// Average loss terms and accuracy for one mini-batch step.
struct StepStats {
  double cce = 0.0;
  double assign = 0.0;
  double orth = 0.0;
  double cs = 0.0;
  std::size_t correct = 0;
};

/// One Adam step on the mean objective over the given images.
inline StepStats train_step(PartModel& model, AdamState& adam, std::span<const EncodedImage* const> batch,
                            const LossWeights& weights, double lr, ThreadPool& pool) {
  std::vector<ImageTerms> terms(batch.size());
  pool.parallel_for(batch.size(), [&](std::size_t i) {
    terms[i] = image_terms(model, batch[i]->regions.x, batch[i]->label, weights);
  });

  const double inv = 1.0 / static_cast<double>(batch.size());
  StepStats stats;
  Mat cce_du(model.num_parts(), model.descriptor_dim());
  Mat cce_dv(model.num_classes(), model.num_parts());
  Mat assign_du(model.num_parts(), model.descriptor_dim());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    stats.cce += terms[i].cce;
    stats.assign += terms[i].assign;
    if (predicted_class(terms[i].trace.o) == batch[i]->label) ++stats.correct;
    detail::add_into(cce_du, terms[i].cce_du);
    detail::add_into(cce_dv, terms[i].cce_dv);
    detail::add_into(assign_du, terms[i].assign_du);
  }
  stats.cce *= inv;
  stats.assign *= inv;
  detail::scale(cce_du, inv);
  detail::scale(cce_dv, inv);
  detail::scale(assign_du, inv);

  const ModelTerms mt = model_terms(model, weights);
  stats.orth = mt.orth;
  stats.cs = mt.cs;
  detail::check_finite(cce_du, "cce");
  detail::check_finite(cce_dv, "cce");
  detail::check_finite(assign_du, "assign");
  detail::check_finite(mt.orth_du, "orth");
  detail::check_finite(mt.cs_dv, "cs");

  const auto total = combine(weights, stats.cce, stats.assign, std::move(cce_du), std::move(cce_dv),
                             std::move(assign_du), mt);
  adam_step(model, total.du, total.dv, adam, lr);
  return stats;
}

inline TrainResult train(const DatasetManifest& train_set, const TrainConfig& cfg, ThreadPool& pool,
                         const TrainHooks& hooks = {}) {
  validate(cfg);
  if (train_set.entries.empty()) throw DataError("train: empty dataset");
  if (train_set.num_classes == 0) throw DataError("train: manifest has no classes");

  const std::size_t n = train_set.entries.size();
  const bool single_chunk = n <= cfg.mega_batch_images;
  const bool class_blocks = cfg.weights.enable_cs;
  const RegionSampling sampling = cfg.sampling();
  Rng root(cfg.seed);
  Rng init_rng = root.split(1);

  auto load = [&](std::span<const std::size_t> idx, std::uint32_t epoch, std::optional<std::size_t> depth) {
    std::vector<ManifestEntry> entries;
    entries.reserve(idx.size());
    for (auto i : idx) entries.push_back(train_set.entries[i]);
    std::optional<std::uint64_t> pass;
    if (cfg.resample_each_epoch) pass = epoch;
    return encode_entries(entries, sampling, pool, pass, depth);
  };

  auto epoch_order = [&](std::uint32_t epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (!single_chunk) Rng(mix_seed(cfg.seed, 0x6D656761ULL + epoch)).shuffle(std::span(order));
    return order;
  };

  TrainResult result;
  std::vector<EncodedImage> cached;
  std::vector<std::size_t> first_order = epoch_order(0);
  const std::size_t first_len = std::min<std::size_t>(n, cfg.mega_batch_images);
  cached = load(std::span(first_order).first(first_len), 0, std::nullopt);
  const std::size_t depth = cached.front().regions.x.rows();

  result.model = make_model(depth, train_set.num_classes, cfg.q, class_blocks, init_rng);
  detail::init_parts_from_regions(result.model, cached, class_blocks, init_rng);
  AdamState adam = AdamState::for_model(result.model, cfg.adam);

  for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    const auto order = epoch == 0 ? first_order : epoch_order(epoch);
    double sum_cce = 0, sum_orth = 0, sum_assign = 0, sum_cs = 0;
    std::size_t visits = 0, correct = 0;

    for (std::size_t start = 0, chunk = 0; start < n; start += cfg.mega_batch_images, ++chunk) {
      const std::size_t len = std::min<std::size_t>(cfg.mega_batch_images, n - start);
      const bool reuse = (epoch == 0 && chunk == 0) || (single_chunk && !cfg.resample_each_epoch);
      if (!reuse) cached = load(std::span(order).subspan(start, len), epoch, depth);

      std::vector<const EncodedImage*> images(cached.size());
      for (std::size_t i = 0; i < cached.size(); ++i) images[i] = &cached[i];
      Rng pass_rng(mix_seed(mix_seed(cfg.seed, 0x70617373ULL + epoch), chunk));
      for (std::uint32_t pass = 0; pass < cfg.batch_level_epochs; ++pass) {
        pass_rng.shuffle(std::span(images));
        for (std::size_t b = 0; b < images.size(); b += cfg.mini_batch_size) {
          const std::size_t bl = std::min<std::size_t>(cfg.mini_batch_size, images.size() - b);
          auto batch = std::span<const EncodedImage* const>(images).subspan(b, bl);
          const auto st = train_step(result.model, adam, batch, cfg.weights, lr, pool);
          sum_cce += st.cce * static_cast<double>(bl);
          sum_assign += st.assign * static_cast<double>(bl);
          sum_orth += st.orth * static_cast<double>(bl);
          sum_cs += st.cs * static_cast<double>(bl);
          correct += st.correct;
          visits += bl;
        }
      }
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    const double inv = 1.0 / static_cast<double>(visits);
    m.cce = sum_cce * inv;
    m.orth = sum_orth * inv;
    m.assign = sum_assign * inv;
    m.cs = sum_cs * inv;
    const auto& w = cfg.weights;
    m.total = m.cce + (w.enable_orth ? w.lambda1 * m.orth : 0.0) + (w.enable_assign ? w.lambda2 * m.assign : 0.0) +
              (w.enable_cs ? w.lambda3 * m.cs : 0.0);
    m.train_acc = static_cast<double>(correct) * inv;
    result.log.push_back(m);
    if (hooks.on_epoch) hooks.on_epoch(m);
    if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
      hooks.on_checkpoint(epoch, result.model);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double accuracy = 0.0;
  std::vector<std::size_t> per_class_count;
  std::vector<std::size_t> per_class_correct;
  std::vector<std::uint32_t> predictions;  // manifest order

  double class_accuracy(std::size_t c) const {
    return per_class_count[c] == 0 ? 0.0
                                   : static_cast<double>(per_class_correct[c]) /
                                         static_cast<double>(per_class_count[c]);
  }
};

/// Top-1 accuracy from predicted and true labels.
inline EvalResult score_predictions(std::span<const std::uint32_t> predicted, std::span<const std::uint32_t> labels,
                                    std::size_t num_classes) {
  if (predicted.size() != labels.size() || labels.empty()) {
    throw ContractError("score_predictions: need equally sized, nonempty prediction and label lists");
  }
  EvalResult r;
  r.per_class_count.assign(num_classes, 0);
  r.per_class_correct.assign(num_classes, 0);
  r.predictions.assign(predicted.begin(), predicted.end());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ++r.per_class_count[labels[i]];
    if (predicted[i] == labels[i]) {
      ++correct;
      ++r.per_class_correct[labels[i]];
    }
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  return r;
}

inline EvalResult evaluate(const PartModel& model, const DatasetManifest& test_set, const RegionSampling& sampling,
                           ThreadPool& pool) {
  validate(model);
  if (test_set.entries.empty()) throw DataError("evaluate: empty dataset");
  for (const auto& e : test_set.entries) {
    if (e.label >= model.num_classes()) {
      throw DataError("evaluate: label " + std::to_string(e.label) + " of '" + e.image_id + "' exceeds model's " +
                      std::to_string(model.num_classes()) + " classes");
    }
  }
  const std::size_t chunk = 1024;
  std::vector<std::uint32_t> predicted(test_set.entries.size());
  std::vector<std::uint32_t> labels(test_set.entries.size());
  for (std::size_t start = 0; start < test_set.entries.size(); start += chunk) {
    const std::size_t len = std::min(chunk, test_set.entries.size() - start);
    auto images = encode_entries(std::span(test_set.entries).subspan(start, len), sampling, pool, std::nullopt,
                                 model.descriptor_dim());
    pool.parallel_for(len, [&](std::size_t i) {
      predicted[start + i] = static_cast<std::uint32_t>(predicted_class(forward(model, images[i].regions.x).o));
      labels[start + i] = images[i].label;
    });
  }
  return score_predictions(predicted, labels, model.num_classes());
}

}  // namespace dpnet

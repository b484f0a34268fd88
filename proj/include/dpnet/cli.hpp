#pragma once

// Command-line front end: synth, train, eval, stats, top-parts,
// top-regions and explain. Exit codes: 0 success, 1 usage or config
// error, 2 data or contract error.

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dpnet/dataset.hpp"
#include "dpnet/errors.hpp"
#include "dpnet/feature_store.hpp"
#include "dpnet/interpret.hpp"
#include "dpnet/part_model.hpp"
#include "dpnet/synth.hpp"
#include "dpnet/thread_pool.hpp"
#include "dpnet/trainer.hpp"

namespace dpnet::cli {

namespace fs = std::filesystem;

inline nlohmann::json read_json_file(const fs::path& path) {
  try {
    return nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::parse_error& ex) {
    throw DataError(path.string() + ": " + ex.what());
  }
}

/// Training config recorded in a checkpoint trailer.
inline TrainConfig checkpoint_config(const Checkpoint& ck) {
  if (!ck.trailer.contains("config")) throw DataError("checkpoint has no config in its trailer");
  TrainConfig cfg;
  from_json(ck.trailer.at("config"), cfg);
  return cfg;
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  Checkpoint ck = read_checkpoint(path);
  validate(ck.model);
  return ck;
}

/// Train-time flags. Each mirrors the config key of the same name.
struct TrainOverrides {
  std::uint32_t epochs = 0, lr_decay_every = 0, batch_level_epochs = 0, mini_batch_size = 0, mega_batch_images = 0,
                q = 0, R = 0, checkpoint_every = 0;
  double base_lr = 0, lambda1 = 0, lambda2 = 0, lambda3 = 0, min_frac = 0, max_frac = 0, beta1 = 0, beta2 = 0,
         adam_eps = 0;
  std::uint64_t seed = 0;
  bool resample_each_epoch = false, normalize_descriptors = true, enable_orth = true, enable_assign = true,
       enable_cs = true, assign_normalized_by_R = false;
  std::string cs_mode;
  std::vector<std::pair<CLI::Option*, std::function<void(TrainConfig&)>>> bindings;

  void attach(CLI::App& app) {
    auto bind = [&](CLI::Option* opt, std::function<void(TrainConfig&)> apply) { bindings.emplace_back(opt, apply); };
    bind(app.add_option("--epochs", epochs, "Outer epochs"), [this](TrainConfig& c) { c.epochs = epochs; });
    bind(app.add_option("--base_lr", base_lr, "Initial learning rate"), [this](TrainConfig& c) { c.base_lr = base_lr; });
    bind(app.add_option("--lr_decay_every", lr_decay_every, "Epochs between /10 learning-rate drops"),
         [this](TrainConfig& c) { c.lr_decay_every = lr_decay_every; });
    bind(app.add_option("--batch_level_epochs", batch_level_epochs, "Passes over each loaded mega-batch"),
         [this](TrainConfig& c) { c.batch_level_epochs = batch_level_epochs; });
    bind(app.add_option("--mini_batch_size", mini_batch_size, "Images per Adam step"),
         [this](TrainConfig& c) { c.mini_batch_size = mini_batch_size; });
    bind(app.add_option("--mega_batch_images", mega_batch_images, "Images loaded per mega-batch"),
         [this](TrainConfig& c) { c.mega_batch_images = mega_batch_images; });
    bind(app.add_option("--seed", seed, "Seed for region sampling, init and shuffling"),
         [this](TrainConfig& c) { c.seed = seed; });
    bind(app.add_option("--q", q, "Parts per class"), [this](TrainConfig& c) { c.q = q; });
    bind(app.add_option("--R", R, "Regions per image"), [this](TrainConfig& c) { c.R = R; });
    bind(app.add_option("--resample_each_epoch", resample_each_epoch, "Draw new regions every epoch"),
         [this](TrainConfig& c) { c.resample_each_epoch = resample_each_epoch; });
    bind(app.add_option("--normalize_descriptors", normalize_descriptors, "L2-normalize pooled region descriptors"),
         [this](TrainConfig& c) { c.normalize_descriptors = normalize_descriptors; });
    bind(app.add_option("--min_frac", min_frac, "Smallest region side as a fraction of the grid"),
         [this](TrainConfig& c) { c.sampler.min_frac = min_frac; });
    bind(app.add_option("--max_frac", max_frac, "Largest region side as a fraction of the grid"),
         [this](TrainConfig& c) { c.sampler.max_frac = max_frac; });
    bind(app.add_option("--checkpoint_every", checkpoint_every, "Epochs between intermediate checkpoints (0: off)"),
         [this](TrainConfig& c) { c.checkpoint_every = checkpoint_every; });
    bind(app.add_option("--lambda1", lambda1, "Orthogonality weight"),
         [this](TrainConfig& c) { c.weights.lambda1 = lambda1; });
    bind(app.add_option("--lambda2", lambda2, "Assignment-entropy weight"),
         [this](TrainConfig& c) { c.weights.lambda2 = lambda2; });
    bind(app.add_option("--lambda3", lambda3, "Class-specific weight"),
         [this](TrainConfig& c) { c.weights.lambda3 = lambda3; });
    bind(app.add_option("--enable_orth", enable_orth, "Use the orthogonality term"),
         [this](TrainConfig& c) { c.weights.enable_orth = enable_orth; });
    bind(app.add_option("--enable_assign", enable_assign, "Use the assignment-entropy term"),
         [this](TrainConfig& c) { c.weights.enable_assign = enable_assign; });
    bind(app.add_option("--enable_cs", enable_cs, "Use the class-specific term and block initialization"),
         [this](TrainConfig& c) { c.weights.enable_cs = enable_cs; });
    bind(app.add_option("--cs_mode", cs_mode, "l1_abs or raw_sum"),
         [this](TrainConfig& c) { c.weights.cs_mode = parse_cs_mode(cs_mode); });
    bind(app.add_option("--assign_normalized_by_R", assign_normalized_by_R, "Divide assignment entropy by R"),
         [this](TrainConfig& c) { c.weights.assign_normalized_by_R = assign_normalized_by_R; });
    bind(app.add_option("--beta1", beta1, "Adam beta1"), [this](TrainConfig& c) { c.adam.beta1 = beta1; });
    bind(app.add_option("--beta2", beta2, "Adam beta2"), [this](TrainConfig& c) { c.adam.beta2 = beta2; });
    bind(app.add_option("--adam_eps", adam_eps, "Adam epsilon"), [this](TrainConfig& c) { c.adam.eps = adam_eps; });
  }

  void apply(TrainConfig& cfg) const {
    for (const auto& [opt, fn] : bindings) {
      if (opt->count() > 0) fn(cfg);
    }
  }
};

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Part-based recognition head over precomputed CNN feature maps", "dpnet"};
  app.require_subcommand(1);
  unsigned threads = std::max(1u, std::thread::hardware_concurrency());

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset with planted parts");
  std::string synth_spec = "default";
  std::optional<std::uint64_t> synth_seed;
  std::string synth_out;
  synth->add_option("--spec", synth_spec, "'default' or a JSON spec file")->capture_default_str();
  auto* synth_seed_opt = synth->add_option("--seed", synth_seed, "Overrides the spec's seed");
  synth->add_option("--out", synth_out, "Output directory")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "Learn parts and classifier");
  std::string config_path, train_manifest, ckpt_out, metrics_out, profile, dump_config;
  train_cmd->add_option("--config", config_path, "JSON config (keys mirror the flags below)");
  train_cmd->add_option("--train", train_manifest, "Training manifest")->required();
  train_cmd->add_option("--out", ckpt_out, "Checkpoint path")->required();
  train_cmd->add_option("--metrics", metrics_out, "Metrics CSV (default: <out>.metrics.csv)");
  train_cmd->add_option("--profile", profile, "Defaults profile: small (q=20, R=500) or large (q=10, R=100)");
  train_cmd->add_option("--dump-config", dump_config, "Write the effective config as JSON");
  train_cmd->add_option("--threads", threads, "Worker threads")->capture_default_str();
  TrainOverrides overrides;
  overrides.attach(*train_cmd);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Top-1 accuracy on a manifest");
  std::string eval_ckpt, eval_manifest, per_class_out;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--test", eval_manifest, "Test manifest")->required();
  eval_cmd->add_option("--per-class", per_class_out, "Per-class accuracy CSV");
  eval_cmd->add_option("--threads", threads, "Worker threads")->capture_default_str();

  // stats
  auto* stats_cmd = app.add_subcommand("stats", "Part frequency f(p) and discriminative power d(p,c)");
  std::string stats_ckpt, stats_manifest, stats_out;
  std::uint32_t top_k = 0;
  bool plain_log = false;
  stats_cmd->add_option("--checkpoint", stats_ckpt, "Checkpoint")->required();
  stats_cmd->add_option("--train", stats_manifest, "Training manifest")->required();
  stats_cmd->add_option("--out", stats_out, "Output JSON")->required();
  stats_cmd->add_option("--top-k", top_k, "Most activated parts per class (default: q)");
  stats_cmd->add_flag("--plain-log", plain_log, "Divide by ln f instead of ln(1 + f)");
  stats_cmd->add_option("--threads", threads, "Worker threads")->capture_default_str();

  // top-parts
  auto* tp_cmd = app.add_subcommand("top-parts", "Most discriminative parts of a class");
  std::string tp_stats;
  std::uint32_t tp_class = 0, tp_n = 3;
  tp_cmd->add_option("--stats", tp_stats, "Stats JSON")->required();
  tp_cmd->add_option("--class", tp_class, "Class index")->required();
  tp_cmd->add_option("--n", tp_n, "Number of parts")->capture_default_str();

  // top-regions
  auto* tr_cmd = app.add_subcommand("top-regions", "Regions that best match a part over a dataset");
  std::string tr_ckpt, tr_manifest;
  std::uint32_t tr_part = 0, tr_k = 5;
  tr_cmd->add_option("--checkpoint", tr_ckpt, "Checkpoint")->required();
  tr_cmd->add_option("--train", tr_manifest, "Manifest to search")->required();
  tr_cmd->add_option("--part", tr_part, "Part index")->required();
  tr_cmd->add_option("--k", tr_k, "Number of regions")->capture_default_str();
  tr_cmd->add_option("--threads", threads, "Worker threads")->capture_default_str();

  // explain
  auto* ex_cmd = app.add_subcommand("explain", "Heatmap of the regions behind a class decision");
  std::string ex_ckpt, ex_stats, ex_manifest, ex_image, ex_out;
  std::uint32_t ex_class = 0, ex_n = 3, ex_m = 10, ex_top_k = 0;
  ex_cmd->add_option("--checkpoint", ex_ckpt, "Checkpoint")->required();
  ex_cmd->add_option("--stats", ex_stats, "Stats JSON (default: computed from the training manifest)");
  ex_cmd->add_option("--manifest", ex_manifest,
                     "Manifest holding the image (default: the training manifest recorded in the checkpoint)");
  ex_cmd->add_option("--image", ex_image, "Image id")->required();
  ex_cmd->add_option("--class", ex_class, "Class index")->required();
  ex_cmd->add_option("--N", ex_n, "Top discriminative parts")->capture_default_str();
  ex_cmd->add_option("--M", ex_m, "Top regions")->capture_default_str();
  ex_cmd->add_option("--top-k", ex_top_k, "Top-K for stats computed on the fly (default: q)");
  ex_cmd->add_option("--out", ex_out, "Output directory")->required();
  ex_cmd->add_option("--threads", threads, "Worker threads")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    ThreadPool pool(threads);

    if (*synth) {
      SynthSpec spec;
      if (synth_spec != "default") spec = synth_spec_from_json(read_json_file(synth_spec));
      if (synth_seed_opt->count() > 0) spec.seed = *synth_seed;
      const auto data = generate(spec);
      const auto paths = write_synth(data, synth_out);
      out << "train=" << paths.train_manifest.string() << "\n";
      if (!data.test.empty()) out << "test=" << paths.test_manifest.string() << "\n";
      out << "ground_truth=" << paths.ground_truth.string() << "\n";
      return 0;
    }

    if (*train_cmd) {
      TrainConfig cfg = profile.empty() ? TrainConfig{} : TrainConfig::profile(profile);
      if (!config_path.empty()) from_json(read_json_file(config_path), cfg);
      overrides.apply(cfg);
      validate(cfg);
      if (!dump_config.empty()) detail::write_file(dump_config, nlohmann::json(cfg).dump(2) + "\n");
      const auto manifest = read_manifest(train_manifest, true);
      const fs::path metrics_path = metrics_out.empty() ? fs::path(ckpt_out + ".metrics.csv") : fs::path(metrics_out);

      auto trailer = [&](const PartModel&, const std::vector<EpochMetrics>& log) {
        nlohmann::json t;
        t["class_names"] = manifest.class_names();
        t["config"] = cfg;
        t["train_manifest"] = fs::absolute(train_manifest).lexically_normal().generic_string();
        t["num_train_images"] = manifest.entries.size();
        t["epochs_completed"] = log.size();
        if (!log.empty()) t["final_metrics"] = to_json(log.back());
        return t;
      };
      std::vector<EpochMetrics> progress;
      TrainHooks hooks;
      hooks.on_epoch = [&](const EpochMetrics& m) {
        progress.push_back(m);
        err << "epoch " << m.epoch << " lr=" << format_double(m.lr) << " total=" << format_double(m.total)
            << " train_acc=" << format_double(m.train_acc) << "\n";
      };
      hooks.on_checkpoint = [&](std::uint32_t, const PartModel& model) {
        write_checkpoint({model, trailer(model, progress)}, ckpt_out);
      };
      auto result = train(manifest, cfg, pool, hooks);
      write_checkpoint({result.model, trailer(result.model, result.log)}, ckpt_out);
      detail::write_file(metrics_path, metrics_csv(result.log));
      return 0;
    }

    if (*eval_cmd) {
      const auto ck = load_checkpoint(eval_ckpt);
      const auto cfg = checkpoint_config(ck);
      const auto manifest = read_manifest(eval_manifest, false);
      const auto r = evaluate(ck.model, manifest, cfg.sampling(), pool);
      out << "accuracy=" << format_double(r.accuracy) << "\n";
      if (!per_class_out.empty()) {
        std::vector<std::string> names = ck.trailer.value("class_names", std::vector<std::string>{});
        std::string csv = "class,name,count,correct,accuracy\n";
        for (std::size_t c = 0; c < r.per_class_count.size(); ++c) {
          csv += std::to_string(c) + "," + (c < names.size() ? names[c] : std::string()) + "," +
                 std::to_string(r.per_class_count[c]) + "," + std::to_string(r.per_class_correct[c]) + "," +
                 (r.per_class_count[c] ? format_double(r.class_accuracy(c)) : std::string()) + "\n";
        }
        detail::write_file(per_class_out, csv);
      }
      return 0;
    }

    auto encode_manifest = [&](const DatasetManifest& m, const Checkpoint& ck) {
      return encode_entries(m.entries, checkpoint_config(ck).sampling(), pool, std::nullopt,
                            ck.model.descriptor_dim());
    };

    if (*stats_cmd) {
      const auto ck = load_checkpoint(stats_ckpt);
      const auto manifest = read_manifest(stats_manifest, true);
      const auto images = encode_manifest(manifest, ck);
      const auto traced = trace_images(ck.model, images, pool);
      const std::uint32_t k = top_k ? top_k : std::max<std::uint32_t>(ck.model.parts_per_class, 1);
      const auto stats = compute_part_stats(ck.model, traced, k, plain_log);
      detail::write_file(stats_out, to_json(stats).dump(2) + "\n");
      return 0;
    }

    if (*tp_cmd) {
      const auto stats = part_stats_from_json(read_json_file(tp_stats));
      out << "rank,part,d\n";
      std::size_t rank = 0;
      for (auto p : top_parts(stats, tp_class, tp_n)) {
        out << rank++ << "," << p << "," << format_double(stats.dpc(tp_class, p)) << "\n";
      }
      return 0;
    }

    if (*tr_cmd) {
      const auto ck = load_checkpoint(tr_ckpt);
      const auto manifest = read_manifest(tr_manifest, false);
      const auto images = encode_manifest(manifest, ck);
      out << "rank,image_id,region_index,h0,w0,h1,w1,score\n";
      std::size_t rank = 0;
      for (const auto& h : top_regions_for_part(ck.model, images, tr_part, tr_k)) {
        out << rank++ << "," << h.image_id << "," << h.region_index << "," << h.region.h0 << "," << h.region.w0
            << "," << h.region.h1 << "," << h.region.w1 << "," << format_double(h.score) << "\n";
      }
      return 0;
    }

    if (*ex_cmd) {
      const auto ck = load_checkpoint(ex_ckpt);
      const auto cfg = checkpoint_config(ck);
      const std::string recorded = ck.trailer.value("train_manifest", std::string());
      auto need_train_manifest = [&]() -> std::string {
        if (recorded.empty()) throw DataError("checkpoint records no training manifest; pass --manifest/--stats");
        return recorded;
      };
      const auto image_manifest = read_manifest(ex_manifest.empty() ? need_train_manifest() : ex_manifest, false);
      PartStats stats;
      if (!ex_stats.empty()) {
        stats = part_stats_from_json(read_json_file(ex_stats));
      } else {
        const auto train_set = read_manifest(need_train_manifest(), true);
        const auto images = encode_manifest(train_set, ck);
        const auto traced = trace_images(ck.model, images, pool);
        const std::uint32_t k = ex_top_k ? ex_top_k : std::max<std::uint32_t>(ck.model.parts_per_class, 1);
        stats = compute_part_stats(ck.model, traced, k);
      }
      const auto& entry = find_entry(image_manifest, ex_image);
      const FeatureMap fm = read_feature_map(entry.path);
      if (fm.depth != ck.model.descriptor_dim()) {
        throw DataError(entry.path.string() + ": D=" + std::to_string(fm.depth) + " but model expects " +
                        std::to_string(ck.model.descriptor_dim()));
      }
      const auto encoded = encode_image(fm, entry.label, cfg.sampling());
      const auto ex = explain(ck.model, stats, encoded, ex_class, ex_n, ex_m);
      const fs::path dir = ex_out;
      detail::write_file(dir / (ex_image + ".json"), to_json(ex, fm).dump(2) + "\n");
      detail::write_file(dir / (ex_image + ".pgm"), heat_to_pgm(ex.heat, fm.image_h ? fm.image_h : fm.height, fm.image_w ? fm.image_w : fm.width));
      out << "json=" << (dir / (ex_image + ".json")).string() << "\n";
      out << "pgm=" << (dir / (ex_image + ".pgm")).string() << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace dpnet::cli

// Acceptance checks: prints one PASS/FAIL line per criterion and exits
// nonzero if any fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "dpnet/dpnet.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace dpnet;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const Outcome& o) {
  std::printf("CRITERION %d [%s] %s: %s\n", id, o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

template <typename Fn>
Outcome guarded(Fn fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    return {false, std::string("exception: ") + e.what()};
  }
}

std::string fmt(double x, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << x;
  return s.str();
}

Outcome gradient_oracle() {
  const auto t0 = Clock::now();
  std::size_t used = 0, skipped = 0;
  testing::GradReport report;
  for (std::uint64_t seed = 0; used < 20; ++seed) {
    auto g = testing::make_grad_instance(seed);
    if (g.near_tie || g.near_kink) {
      ++skipped;
      continue;
    }
    testing::fd_check_all_terms(g, report);
    ++used;
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = report.ok() && secs < 5.0;
  o.detail = std::to_string(used) + " instances (" + std::to_string(skipped) + " near ties skipped), " +
             std::to_string(report.entries) + " entries, " + std::to_string(report.failures) +
             " outside 1e-5 rel / 1e-8 abs, worst rel " + fmt(report.worst_rel, 3) + ", " + fmt(secs, 3) + " s";
  if (!report.first_failure.empty()) o.detail += "; first: " + report.first_failure;
  return o;
}

Outcome closed_forms() {
  const double orth = orth_penalty(Mat(2, 3, {0.3, -1, 2, 0.3, -1, 2})).value;
  Rng rng(1);
  const std::size_t parts = 4, regions = 9;
  Mat same(parts, 5);
  for (std::size_t p = 0; p < parts; ++p) {
    for (std::size_t d = 0; d < 5; ++d) same(p, d) = 0.1 * static_cast<double>(d + 1);
  }
  const double assign = assign_penalty(same, testing::random_mat(5, regions, rng)).value;
  const double assign_expected = static_cast<double>(regions) * std::log(static_cast<double>(parts));
  const double cs = cs_penalty(Mat(2, 2, 1.0), 1).value;
  const double ce = cce(Vec(7, 1.0 / 7.0), 3).value;
  Outcome o;
  o.pass = orth == 0.5 && std::abs(assign - assign_expected) <= 1e-10 && cs == 1.0 &&
           std::abs(ce - std::log(7.0)) <= 1e-12;
  o.detail = "orth=" + fmt(orth, 17) + " assign-R*lnP=" + fmt(assign - assign_expected, 3) + " cs=" + fmt(cs, 17) +
             " cce-lnC=" + fmt(ce - std::log(7.0), 3);
  return o;
}

Outcome forward_invariants() {
  Rng rng(2);
  double worst_sum = 0, worst_norm = 0, worst_logit = 0;
  std::size_t perm_mismatch = 0, dup_mismatch = 0;
  const std::size_t trials = 200;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t d = 1 + rng.below(12), c = 1 + rng.below(6), r = 1 + rng.below(15);
    const auto q = static_cast<std::uint32_t>(1 + rng.below(4));
    PartModel m{testing::random_mat(std::size_t{q} * c, d, rng), testing::random_mat(c, std::size_t{q} * c, rng), q};
    Mat x = testing::random_mat(d, r, rng);
    auto tr = forward(m, x);
    double sum = 0;
    for (double o : tr.o) sum += o;
    worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
    worst_norm = std::max(worst_norm, std::abs(norm2(tr.b) - 1.0));
    for (std::size_t k = 0; k < c; ++k) {
      double logit = 0;
      for (std::size_t p = 0; p < m.num_parts(); ++p) logit += m.v(k, p) * tr.b[p];
      worst_logit = std::max(worst_logit, std::abs(logit - tr.logits[k]));
    }
    std::vector<std::size_t> perm(r);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(std::span(perm));
    Mat permuted(d, r), duplicated(d, 2 * r);
    for (std::size_t j = 0; j < r; ++j) {
      for (std::size_t i = 0; i < d; ++i) {
        permuted(i, j) = x(i, perm[j]);
        duplicated(i, 2 * j) = duplicated(i, 2 * j + 1) = x(i, j);
      }
    }
    perm_mismatch += forward(m, permuted).b != tr.b;
    dup_mismatch += forward(m, duplicated).b != tr.b;
  }
  Outcome o;
  o.pass = worst_sum <= 1e-12 && worst_norm <= 1e-12 && worst_logit <= 1e-12 && perm_mismatch == 0 &&
           dup_mismatch == 0;
  o.detail = std::to_string(trials) + " instances; max |sum o - 1|=" + fmt(worst_sum, 3) + " max | |b| - 1 |=" +
             fmt(worst_norm, 3) + " max logit err=" + fmt(worst_logit, 3) + " permutation mismatches=" +
             std::to_string(perm_mismatch) + " duplication mismatches=" + std::to_string(dup_mismatch);
  return o;
}

struct Synthetic {
  SynthData data;
  SynthPaths paths;
  DatasetManifest train, test;
};

Synthetic make_synthetic(const fs::path& dir) {
  Synthetic s;
  s.data = generate(SynthSpec{});
  s.paths = write_synth(s.data, dir);
  s.train = read_manifest(s.paths.train_manifest);
  s.test = read_manifest(s.paths.test_manifest, false);
  return s;
}

TrainConfig synthetic_config() {
  TrainConfig cfg;
  cfg.q = 3;
  cfg.R = 40;
  return cfg;
}

struct EndToEnd {
  double accuracy = 0;
  double seconds = 0;
  PartModel model;
};

EndToEnd train_and_eval(const Synthetic& s, const TrainConfig& cfg) {
  ThreadPool pool(1);
  const auto t0 = Clock::now();
  auto result = train(s.train, cfg, pool);
  EndToEnd e;
  e.seconds = seconds_since(t0);
  e.accuracy = evaluate(result.model, s.test, cfg.sampling(), pool).accuracy;
  e.model = std::move(result.model);
  return e;
}

Outcome determinism_and_formats(const Synthetic& s, const fs::path& dir) {
  const std::string cli = DPNET_CLI_PATH;
  auto run = [&](const std::string& name, unsigned threads) {
    const auto out = dir / (name + ".dpck");
    const std::string cmd = cli + " train --train " + s.paths.train_manifest.string() + " --out " + out.string() +
                            " --q 3 --R 40 --epochs 3 --seed 11 --threads " + std::to_string(threads) +
                            " 2>/dev/null";
    if (std::system(cmd.c_str()) != 0) throw std::runtime_error("cli train failed: " + cmd);
    return std::make_pair(detail::read_file(out), detail::read_file(out.string() + ".metrics.csv"));
  };
  const auto a = run("det_a", 1);
  const auto b = run("det_b", 1);
  const auto c = run("det_c", 8);
  const bool runs_equal = a == b;
  const bool threads_equal = a == c;

  Rng rng(3);
  auto fm = testing::random_feature_map(17, 17, 64, rng, "roundtrip");
  const bool dpfm = decode_feature_map(encode_feature_map(fm)) == fm;
  const auto ck_bytes = a.first;
  const bool dpck = encode_checkpoint(decode_checkpoint(ck_bytes)) == ck_bytes;

  Outcome o;
  o.pass = runs_equal && threads_equal && dpfm && dpck;
  o.detail = std::string("repeat run identical=") + (runs_equal ? "yes" : "no") +
             ", threads 1 vs 8 identical=" + (threads_equal ? "yes" : "no") + ", DPFM round trip=" +
             (dpfm ? "exact" : "differs") + ", DPCK round trip=" + (dpck ? "exact" : "differs") + " (checkpoint " +
             std::to_string(ck_bytes.size()) + " bytes)";
  return o;
}

}  // namespace

int main() {
  const fs::path dir = fs::temp_directory_path() / "dpnet_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);

  report(1, "gradient oracle", guarded(gradient_oracle));
  report(2, "closed-form loss values", guarded(closed_forms));
  report(3, "forward invariants", guarded(forward_invariants));

  std::optional<Synthetic> synthetic;
  std::optional<EndToEnd> full;
  report(4, "synthetic end-to-end", guarded([&] {
           synthetic = make_synthetic(dir / "synth");
           std::size_t oracle_correct = 0;
           for (const auto& img : synthetic->data.test) {
             oracle_correct += testing::nearest_true_part_class(img.map, synthetic->data.parts, 3) == img.label;
           }
           const double oracle = static_cast<double>(oracle_correct) / static_cast<double>(synthetic->data.test.size());
           full = train_and_eval(*synthetic, synthetic_config());
           Outcome o;
           o.pass = oracle >= 0.99 && full->accuracy >= 0.95 && full->seconds < 60.0;
           o.detail = "oracle separability " + fmt(oracle) + " (need >= 0.99), test accuracy " + fmt(full->accuracy) +
                      " (need >= 0.95), training " + fmt(full->seconds, 3) + " s single-threaded (need < 60)";
           return o;
         }));

  report(5, "constraint ablation", guarded([&] {
           if (!full) throw std::runtime_error("criterion 4 did not produce a model");
           auto cfg = synthetic_config();
           cfg.weights = LossWeights::none();
           const auto plain = train_and_eval(*synthetic, cfg);
           const double gap = full->accuracy - plain.accuracy;
           Outcome o;
           o.pass = std::abs(gap) <= 0.05 + 1e-12;
           o.detail = "all constraints " + fmt(full->accuracy) + " vs unconstrained " + fmt(plain.accuracy) +
                      ", difference " + fmt(100.0 * gap, 3) + " pp (need within +/-5)";
           return o;
         }));

  report(6, "interpretability oracle", guarded([&] {
           if (!full) throw std::runtime_error("criterion 4 did not produce a model");
           ThreadPool pool(1);
           const auto cfg = synthetic_config();
           auto images = encode_entries(synthetic->train.entries, cfg.sampling(), pool);
           auto traced = trace_images(full->model, images, pool);
           auto stats = compute_part_stats(full->model, traced, cfg.q);
           auto brute = testing::brute_force_stats(full->model, images, cfg.q);
           double worst = 0;
           for (std::size_t c = 0; c < stats.dpc.rows(); ++c) {
             for (std::size_t p = 0; p < stats.dpc.cols(); ++p) {
               worst = std::max(worst, std::abs(stats.dpc(c, p) - brute.dpc[c][p]));
             }
           }
           bool freq_ok = stats.freq == brute.freq;
           for (auto f : stats.freq) freq_ok = freq_ok && f >= 1 && f <= full->model.num_classes();
           std::size_t region_mismatch = 0;
           for (std::size_t p = 0; p < full->model.num_parts(); ++p) {
             auto expected = testing::full_sort_regions(full->model, images, p);
             auto got = top_regions_for_part(full->model, images, p, 50);
             for (std::size_t i = 0; i < got.size(); ++i) {
               region_mismatch += got[i].score != std::get<0>(expected[i]) ||
                                  got[i].image_id != std::get<1>(expected[i]) ||
                                  got[i].region_index != std::get<2>(expected[i]);
             }
           }
           Outcome o;
           o.pass = worst <= 1e-12 && freq_ok && region_mismatch == 0;
           o.detail = "max |d - brute force| " + fmt(worst, 3) + ", freq in [1,C] and matching=" +
                      (freq_ok ? "yes" : "no") + ", top-50 region mismatches over all parts=" +
                      std::to_string(region_mismatch);
           return o;
         }));

  report(7, "determinism and formats", guarded([&] {
           if (!synthetic) throw std::runtime_error("no synthetic dataset");
           return determinism_and_formats(*synthetic, dir);
         }));

  report(8, "learning-rate schedule", guarded([] {
           TrainConfig cfg;
           const double got[] = {lr_at(0, cfg), lr_at(10, cfg), lr_at(20, cfg), lr_at(30, cfg)};
           const double want[] = {1e-3, 1e-4, 1e-5, 1e-6};
           Outcome o;
           o.pass = std::equal(std::begin(got), std::end(got), std::begin(want));
           o.detail = "epochs 0/10/20/30 -> " + fmt(got[0], 17) + "/" + fmt(got[1], 17) + "/" + fmt(got[2], 17) + "/" +
                      fmt(got[3], 17);
           return o;
         }));

  std::printf("%d of 8 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}

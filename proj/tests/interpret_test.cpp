#include <cmath>

#include <gtest/gtest.h>

#include "dpnet/interpret.hpp"
#include "dpnet/synth.hpp"
#include "oracles.hpp"

namespace dpnet {
namespace {

using testing::random_mat;

// Images with random region descriptors; region geometry is a fixed 1x1 tiling of a 2x3 grid.
std::vector<EncodedImage> random_images(Rng& rng, std::size_t n, std::size_t classes, std::size_t d) {
  std::vector<EncodedImage> out;
  for (std::size_t i = 0; i < n; ++i) {
    EncodedImage img;
    img.image_id = "img_" + std::to_string(100 + i);
    img.label = static_cast<std::uint32_t>(i % classes);
    img.grid_h = 2;
    img.grid_w = 3;
    for (std::uint32_t h = 0; h < 2; ++h) {
      for (std::uint32_t w = 0; w < 3; ++w) img.regions.regions.push_back({h, w, h + 1, w + 1});
    }
    img.regions.x = random_mat(d, 6, rng);
    out.push_back(std::move(img));
  }
  return out;
}

PartModel random_model(Rng& rng, std::size_t d, std::size_t c, std::uint32_t q) {
  return {random_mat(std::size_t{q} * c, d, rng), random_mat(c, std::size_t{q} * c, rng), q};
}

TEST(PartImportance, SumsToLogits) {
  Rng rng(1);
  auto model = random_model(rng, 5, 3, 2);
  auto images = random_images(rng, 4, 3, 5);
  for (const auto& img : images) {
    auto t = forward(model, img.regions.x);
    for (std::size_t c = 0; c < 3; ++c) {
      double sum = 0.0;
      for (std::size_t p = 0; p < 6; ++p) {
        const double imp = part_importance(t, model, c, p);
        EXPECT_EQ(imp, model.v(c, p) * t.b[p]);
        sum += imp;
      }
      EXPECT_NEAR(sum, t.logits[c], 1e-12);
    }
  }
  model.v(1, 2) = 0.0;
  EXPECT_EQ(part_importance(forward(model, images[0].regions.x), model, 1, 2), 0.0);
  EXPECT_THROW(part_importance(forward(model, images[0].regions.x), model, 3, 0), ContractError);
}

TEST(TopIndices, DescendingWithLowIndexTies) {
  EXPECT_EQ(top_indices(Vec{1, 3, 3, 2}, 3), (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(top_indices(Vec{1, 2}, 5), (std::vector<std::size_t>{1, 0}));
}

TEST(PartFrequency, SingleClassIsOne) {
  Rng rng(2);
  auto model = random_model(rng, 4, 1, 3);
  auto images = random_images(rng, 3, 1, 4);
  ThreadPool pool(1);
  auto traced = trace_images(model, images, pool);
  EXPECT_EQ(part_frequency(model, traced, 2), (std::vector<std::uint32_t>{1, 1, 1}));
}

TEST(PartFrequency, DisjointBlocksAreOne) {
  // Class c's images fire only part c; V is the identity block.
  const std::size_t classes = 3;
  PartModel model{Mat::identity(3), Mat::identity(3), 1};
  std::vector<EncodedImage> images;
  for (std::uint32_t c = 0; c < classes; ++c) {
    EncodedImage img{"i" + std::to_string(c), c, 1, 1, {{{0, 0, 1, 1}}, Mat(3, 1), 0}};
    img.regions.x(c, 0) = 1.0;
    images.push_back(img);
  }
  ThreadPool pool(1);
  auto traced = trace_images(model, images, pool);
  EXPECT_EQ(part_frequency(model, traced, 1), (std::vector<std::uint32_t>{1, 1, 1}));
}

TEST(PartFrequency, SharedPartCountsEveryClass) {
  // Part 0 has the largest weight in every class.
  Rng rng(3);
  auto model = random_model(rng, 4, 3, 1);
  for (std::size_t c = 0; c < 3; ++c) {
    model.v(c, 0) = 100.0;
    model.v(c, 1) = model.v(c, 2) = 0.0;
  }
  model.u = Mat(3, 4, 1.0);
  auto images = random_images(rng, 6, 3, 4);
  for (auto& img : images) {
    for (double& x : img.regions.x.data()) x = std::abs(x);
  }
  ThreadPool pool(1);
  auto traced = trace_images(model, images, pool);
  auto f = part_frequency(model, traced, 1);
  EXPECT_EQ(f[0], 3u);
  EXPECT_EQ(f[1], 1u);
  EXPECT_EQ(f[2], 1u);
}

TEST(PartFrequency, ClassWithoutImagesRejected) {
  Rng rng(4);
  auto model = random_model(rng, 4, 3, 1);
  auto images = random_images(rng, 4, 2, 4);
  ThreadPool pool(1);
  auto traced = trace_images(model, images, pool);
  EXPECT_THROW(part_frequency(model, traced, 1), DataError);
  // With frequencies given, the empty class simply has a zero row.
  auto d = discriminative_power(model, traced, std::vector<std::uint32_t>{1, 1, 1});
  for (std::size_t p = 0; p < 3; ++p) EXPECT_EQ(d(2, p), 0.0);
}

TEST(DiscriminativePower, SingleImageHandComputed) {
  Rng rng(5);
  auto model = random_model(rng, 4, 2, 2);
  auto images = random_images(rng, 1, 2, 4);
  ThreadPool pool(1);
  auto traced = trace_images(model, images, pool);
  auto d = discriminative_power(model, traced, std::vector<std::uint32_t>{1, 1, 1, 1});
  for (std::size_t p = 0; p < 4; ++p) {
    EXPECT_NEAR(d(0, p), model.v(0, p) * traced[0].trace.b[p] / std::log(2.0), 1e-15);
    EXPECT_EQ(d(1, p), 0.0);
  }
  auto literal = discriminative_power(model, traced, std::vector<std::uint32_t>{1, 2, 1, 1}, true);
  EXPECT_EQ(literal(0, 0), model.v(0, 0) * traced[0].trace.b[0]);
  EXPECT_NEAR(literal(0, 1), model.v(0, 1) * traced[0].trace.b[1] / std::log(2.0), 1e-15);
}

TEST(DiscriminativePower, MatchesBruteForceOnSyntheticData) {
  SynthSpec spec;
  spec.train_per_class = 8;
  auto data = generate(spec);
  std::vector<EncodedImage> images;
  for (const auto& s : data.train) images.push_back(encode_image(s.map, s.label, {3, 20, {}, true}));
  Rng rng(6);
  auto model = make_model(spec.depth, spec.classes, 3, true, rng);
  for (double& v : model.v.data()) v += 0.3 * rng.normal();
  ThreadPool pool(3);
  auto traced = trace_images(model, images, pool);
  for (std::uint32_t k : {1u, 3u, 7u}) {
    auto stats = compute_part_stats(model, traced, k);
    auto brute = testing::brute_force_stats(model, images, k);
    EXPECT_EQ(stats.freq, brute.freq);
    for (auto f : stats.freq) {
      EXPECT_GE(f, 1u);
      EXPECT_LE(f, spec.classes);
    }
    for (std::size_t c = 0; c < spec.classes; ++c) {
      for (std::size_t p = 0; p < model.num_parts(); ++p) EXPECT_NEAR(stats.dpc(c, p), brute.dpc[c][p], 1e-12);
    }
  }
}

TEST(PartStatsJson, RoundTrips) {
  PartStats s{{1, 2, 1}, Mat(2, 3, {0.5, -1.0 / 3.0, 0, 1, 2, 3}), 2};
  auto back = part_stats_from_json(to_json(s));
  EXPECT_EQ(back.freq, s.freq);
  EXPECT_EQ(back.dpc, s.dpc);
  EXPECT_EQ(back.top_k_per_class, 2u);
  EXPECT_EQ(top_parts(back, 1, 2), (std::vector<std::size_t>{2, 1}));
  EXPECT_THROW(part_stats_from_json(nlohmann::json::object()), DataError);
}

TEST(TopRegions, UniqueMaximumAndSaturation) {
  Rng rng(7);
  auto model = random_model(rng, 3, 2, 1);
  auto images = random_images(rng, 3, 2, 3);
  images[1].regions.x(0, 4) = 100.0;
  model.u = Mat(2, 3, {1, 0, 0, 0, 1, 0});
  auto top = top_regions_for_part(model, images, 0, 1);
  ASSERT_EQ(top.size(), 1u);
  EXPECT_EQ(top[0].image_id, images[1].image_id);
  EXPECT_EQ(top[0].region_index, 4u);
  EXPECT_EQ(top[0].region, images[1].regions.regions[4]);

  auto all = top_regions_for_part(model, images, 1, 1000);
  ASSERT_EQ(all.size(), 18u);
  for (std::size_t i = 1; i < all.size(); ++i) EXPECT_GE(all[i - 1].score, all[i].score);
}

TEST(TopRegions, AgreesWithFullSortIncludingTies) {
  Rng rng(8);
  auto model = random_model(rng, 4, 2, 2);
  auto images = random_images(rng, 5, 2, 4);
  // Copy region columns across images to force exact ties.
  for (std::size_t d = 0; d < 4; ++d) {
    images[3].regions.x(d, 0) = images[0].regions.x(d, 2);
    images[4].regions.x(d, 5) = images[0].regions.x(d, 2);
  }
  for (std::size_t p = 0; p < 4; ++p) {
    auto expected = testing::full_sort_regions(model, images, p);
    for (std::size_t k : {1u, 5u, 30u}) {
      auto got = top_regions_for_part(model, images, p, k);
      ASSERT_EQ(got.size(), k);
      for (std::size_t i = 0; i < k; ++i) {
        EXPECT_EQ(got[i].score, std::get<0>(expected[i]));
        EXPECT_EQ(got[i].image_id, std::get<1>(expected[i]));
        EXPECT_EQ(got[i].region_index, std::get<2>(expected[i]));
      }
    }
  }
}

TEST(Heat, SingleRegionAndUniformCases) {
  ChosenRegion one{0, 0, {1, 0, 2, 2}, 0.7};
  auto heat = accumulate_heat(3, 3, std::span(&one, 1));
  for (std::uint32_t h = 0; h < 3; ++h) {
    for (std::uint32_t w = 0; w < 3; ++w) EXPECT_EQ(heat(h, w), (h == 1 && w < 2) ? 1.0 : 0.0);
  }
  std::vector<ChosenRegion> overlap{{0, 0, {0, 0, 1, 2}, 1.0}, {1, 0, {0, 1, 1, 3}, 3.0}};
  heat = accumulate_heat(1, 3, overlap);
  EXPECT_EQ(heat(0, 0), 0.0);
  EXPECT_EQ(heat(0, 1), 1.0);
  EXPECT_NEAR(heat(0, 2), 2.0 / 3.0, 1e-15);
}

TEST(Explain, SelectsBestRegionsOfTopParts) {
  Rng rng(9);
  auto model = random_model(rng, 4, 2, 2);
  auto images = random_images(rng, 4, 2, 4);
  ThreadPool pool(1);
  auto traced = trace_images(model, images, pool);
  auto stats = compute_part_stats(model, traced, 2);

  auto ex = explain(model, stats, images[0], 0, 1, 1);
  ASSERT_EQ(ex.parts.size(), 1u);
  EXPECT_EQ(ex.parts[0].part, top_parts(stats, 0, 1)[0]);
  ASSERT_EQ(ex.regions.size(), 1u);
  const auto p = ex.parts[0].part;
  const auto trace = forward(model, images[0].regions.x);
  EXPECT_EQ(ex.regions[0].region_index, trace.argmax_r[p]);
  const Region best = images[0].regions.regions[trace.argmax_r[p]];
  for (std::uint32_t h = 0; h < 2; ++h) {
    for (std::uint32_t w = 0; w < 3; ++w) {
      const bool inside = h >= best.h0 && h < best.h1 && w >= best.w0 && w < best.w1;
      EXPECT_EQ(ex.heat(h, w) > 0.0, inside);
    }
  }

  auto wide = explain(model, stats, images[1], 1, 3, 100);
  EXPECT_EQ(wide.regions.size(), 18u);
  for (const auto& r : wide.regions) EXPECT_EQ(r.region, images[1].regions.regions[r.region_index]);
  for (std::size_t i = 1; i < wide.regions.size(); ++i) EXPECT_GE(wide.regions[i - 1].score, wide.regions[i].score);
  EXPECT_THROW(explain(model, stats, images[0], 0, 0, 1), ContractError);
}

TEST(Explain, JsonCarriesPixelRectangles) {
  Rng rng(10);
  auto model = random_model(rng, 4, 2, 1);
  auto images = random_images(rng, 2, 2, 4);
  ThreadPool pool(1);
  auto traced = trace_images(model, images, pool);
  auto stats = compute_part_stats(model, traced, 1);
  auto ex = explain(model, stats, images[0], 0, 1, 2);
  FeatureMap fm{images[0].image_id, 2, 3, 4, 64, 96, std::vector<double>(24, 0.0)};
  auto j = to_json(ex, fm);
  EXPECT_EQ(j["regions"].size(), 2u);
  const auto& r0 = j["regions"][0];
  EXPECT_EQ(r0["pixels"]["y0"], r0["grid"]["h0"].get<int>() * 32);
  EXPECT_EQ(r0["pixels"]["x1"], r0["grid"]["w1"].get<int>() * 32);
  EXPECT_EQ(j["heat"].size(), 6u);
}

TEST(Pgm, HeaderAndUpsampling) {
  Mat heat(1, 2, {0.0, 1.0});
  auto pgm = heat_to_pgm(heat, 2, 4);
  const std::string header = "P5\n4 2\n255\n";
  ASSERT_EQ(pgm.substr(0, header.size()), header);
  const std::string pixels = pgm.substr(header.size());
  EXPECT_EQ(pixels, std::string("\x00\x00\xff\xff\x00\x00\xff\xff", 8));
  EXPECT_THROW(heat_to_pgm(heat, 0, 1), ContractError);
}

}  // namespace
}  // namespace dpnet

#include <algorithm>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "mqe_align/error.hpp"
#include "mqe_align/model.hpp"
#include "support.hpp"

using namespace mqe;
using testing::random_tensor;

namespace {

PointCloud random_cloud(std::size_t n, Rng& rng) {
  std::vector<float> v(n * kPointDims);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) v[i * kPointDims + c] = static_cast<float>(rng.uniform(-1, 1));
    for (std::size_t c = 3; c < 6; ++c) v[i * kPointDims + c] = static_cast<float>(rng.uniform());
  }
  return PointCloud(n, std::move(v));
}

/// Exhaustive grouping reference: canonical order, farthest-point sampling
/// recomputing every distance to every chosen center, and a full sort for
/// the neighbours.
struct ReferenceGroups {
  std::vector<std::size_t> centers;
  std::vector<std::vector<std::size_t>> members;
};

ReferenceGroups reference_groups(const PointCloud& c, std::size_t m, std::size_t k) {
  const std::size_t n = c.n;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    for (std::size_t d = 0; d < kPointDims; ++d) {
      if (c.at(a, d) != c.at(b, d)) return c.at(a, d) < c.at(b, d);
    }
    return a < b;
  });
  auto dist = [&](std::size_t a, std::size_t b) {
    double s = 0;
    for (std::size_t d = 0; d < 3; ++d) {
      const double x = static_cast<double>(c.at(a, d)) - c.at(b, d);
      s += x * x;
    }
    return s;
  };
  ReferenceGroups ref;
  std::vector<std::size_t> chosen{0};  // canonical ranks
  while (chosen.size() < m) {
    std::size_t best = 0;
    double best_d = -1;
    for (std::size_t r = 0; r < n; ++r) {
      double nearest = std::numeric_limits<double>::infinity();
      for (std::size_t q : chosen) nearest = std::min(nearest, dist(order[r], order[q]));
      if (nearest > best_d) {
        best_d = nearest;
        best = r;
      }
    }
    chosen.push_back(best);
  }
  for (std::size_t q : chosen) {
    const std::size_t center = order[q];
    ref.centers.push_back(center);
    std::vector<std::size_t> ranks(n);
    std::iota(ranks.begin(), ranks.end(), 0);
    std::sort(ranks.begin(), ranks.end(), [&](std::size_t a, std::size_t b) {
      const double da = dist(order[a], center), db = dist(order[b], center);
      return da != db ? da < db : a < b;
    });
    std::vector<std::size_t> mem;
    for (std::size_t i = 0; i < k; ++i) mem.push_back(order[ranks[i]]);
    ref.members.push_back(mem);
  }
  return ref;
}

}  // namespace

TEST_SUITE("point_encoder") {

TEST_CASE("colinear points: farthest-point centers are the two endpoints") {
  std::vector<float> v;
  for (int x = 0; x < 4; ++x) v.insert(v.end(), {static_cast<float>(x), 0, 0, 0, 0, 0});
  const auto g = group_points(PointCloud(4, v), 2, 1);
  CHECK(g.center_index == std::vector<std::size_t>{0, 3});
}

TEST_CASE("one patch of every point is centred on point zero") {
  Rng rng(1);
  auto cloud = random_cloud(16, rng);
  // Make point 0 the canonical first point.
  cloud.at(0, 0) = -5;
  const auto g = group_points(cloud, 1, 16);
  CHECK(g.center_index == std::vector<std::size_t>{0});
  auto members = g.member_index;
  std::sort(members.begin(), members.end());
  std::vector<std::size_t> all(16);
  std::iota(all.begin(), all.end(), 0);
  CHECK(members == all);
}

TEST_CASE("grouping matches the exhaustive reference on a random cloud") {
  Rng rng(2);
  const auto cloud = random_cloud(64, rng);
  const auto g = group_points(cloud, 4, 8);
  const auto ref = reference_groups(cloud, 4, 8);
  CHECK(g.center_index == ref.centers);
  for (std::size_t p = 0; p < 4; ++p) {
    std::vector<std::size_t> got(g.member_index.begin() + static_cast<std::ptrdiff_t>(p * 8),
                                 g.member_index.begin() + static_cast<std::ptrdiff_t>(p * 8 + 8));
    CHECK(got == ref.members[p]);
    // Coordinates are re-centred; colours are passed through.
    for (std::size_t i = 0; i < 8; ++i) {
      const std::size_t src = ref.members[p][i];
      const float* row = &g.groups[(p * 8 + i) * kPointDims];
      for (std::size_t d = 0; d < 3; ++d) {
        CHECK(row[d] == cloud.at(src, d) - cloud.at(ref.centers[p], d));
      }
      for (std::size_t d = 3; d < 6; ++d) CHECK(row[d] == cloud.at(src, d));
    }
  }
}

TEST_CASE("too few points is a size error") {
  Rng rng(3);
  CHECK_THROWS_AS(group_points(random_cloud(4, rng), 2, 8), DimensionError);
}

TEST_CASE("encoding is invariant to point order") {
  const auto cfg = ModelConfig::from_config(testing::tiny_config());
  AlignmentModel<double> model(cfg);
  Rng rng(4);
  const auto cloud = random_cloud(128, rng);
  std::vector<std::size_t> perm(128);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm.begin(), perm.end());
  std::vector<float> shuffled(cloud.points.size());
  for (std::size_t i = 0; i < 128; ++i) {
    std::copy_n(&cloud.points[perm[i] * kPointDims], kPointDims, &shuffled[i * kPointDims]);
  }
  const auto a = model.encode(cloud);
  const auto b = model.encode(PointCloud(128, shuffled));
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  CHECK(a.rows() == cfg.encoder.num_patches);
  CHECK(a.cols() == cfg.encoder.hidden);
}

TEST_CASE("paper encoder maps 8192 points to 512 x 384 features") {
  const auto mc = ModelConfig::from_config(Config::profile("paper"));
  ParameterManifest manifest;
  PointEncoder<float>::describe(manifest, mc.encoder);
  // Informational count: within 10% of the reported 21.9M.
  CHECK(std::abs(static_cast<double>(manifest.total()) - 21.9e6) < 0.1 * 21.9e6);
  ParameterStore<float> store(manifest);
  store.initialize(7, 0.02, 0.02);
  PointEncoder<float> encoder(mc.encoder, store);
  Rng rng(5);
  NoGradGuard guard;
  const auto x = encoder.encode(random_cloud(8192, rng));
  CHECK(x.rows() == 512);
  CHECK(x.cols() == 384);
}

TEST_CASE("mismatched groups are a dimension error") {
  const auto mc = ModelConfig::from_config(testing::tiny_config());
  AlignmentModel<double> model(mc);
  Rng rng(6);
  const auto groups = group_points(random_cloud(64, rng), 2, 8);
  CHECK_THROWS_AS(model.encoder().encode(groups), DimensionError);
}

}  // TEST_SUITE

TEST_SUITE("projectors") {

TEST_CASE("paper projection: shapes and closed-form count") {
  ProjectionConfig pc;  // 384 -> 768 -> 1408
  ParameterManifest manifest;
  PcProjection<float>::describe(manifest, pc);
  CHECK(manifest.total() == (384 * 768 + 768) + (768 * 1408 + 1408));
  CHECK(manifest.total() == 1378432);
  ParameterStore<float> store(manifest);
  store.initialize(7, 0.02, 0.02);
  PcProjection<float> proj(pc, store);
  Rng rng(7);
  NoGradGuard guard;
  const auto out = proj(random_tensor<float>({512, 384}, rng));
  CHECK(out.y.rows() == 512);
  CHECK(out.y.cols() == 1408);
  CHECK(out.hidden.rows() == 512);
  CHECK(out.hidden.cols() == 768);
}

TEST_CASE("paper modality projector: shape and closed-form count") {
  ProjectorConfig cfg;  // 768 -> 4096 -> 2560
  ParameterManifest manifest;
  ModalityProjector<float>::describe(manifest, cfg);
  CHECK(manifest.total() == (768 * 4096 + 4096) + (4096 * 2560 + 2560));
  CHECK(manifest.total() == 13638144);
  ParameterStore<float> store(manifest);
  store.initialize(7, 0.02, 0.02);
  ModalityProjector<float> proj(cfg, store);
  Rng rng(8);
  NoGradGuard guard;
  const auto tokens = proj(random_tensor<float>({32, 768}, rng));
  CHECK(tokens.rows() == 32);
  CHECK(tokens.cols() == 2560);
  CHECK_THROWS_AS(proj(random_tensor<float>({32, 700}, rng)), DimensionError);
}

TEST_CASE("zero input with zero biases gives zero outputs") {
  ProjectionConfig pc{16, 24, 20, 2};
  ProjectorConfig mc{20, 32, 12};
  ParameterManifest manifest;
  PcProjection<double>::describe(manifest, pc);
  ModalityProjector<double>::describe(manifest, mc);
  ParameterStore<double> store(manifest);
  store.initialize(9, 0.5, 0.02);
  PcProjection<double> proj(pc, store);
  ModalityProjector<double> modal(mc, store);
  const auto out = proj(Tensor<double>(Shape{5, 16}, 0.0));
  for (double v : out.y.data()) CHECK(v == 0.0);
  for (double v : out.hidden.data()) CHECK(v == 0.0);
  const auto tokens = modal(Tensor<double>(Shape{3, 20}, 0.0));
  for (double v : tokens.data()) CHECK(v == 0.0);
}

TEST_CASE("with identity activation the projectors are linear") {
  ProjectionConfig pc{8, 12, 10, 3};
  ProjectorConfig mc{10, 16, 6};
  ParameterManifest manifest;
  PcProjection<double>::describe(manifest, pc);
  ModalityProjector<double>::describe(manifest, mc);
  ParameterStore<double> store(manifest);
  store.initialize(10, 0.5, 0.02);
  PcProjection<double> proj(pc, store);
  ModalityProjector<double> modal(mc, store);
  proj.set_activation(ops::Activation::identity);
  modal.set_activation(ops::Activation::identity);
  Rng rng(11);
  const auto a = random_tensor<double>({4, 8}, rng), b = random_tensor<double>({4, 8}, rng);
  const auto fab = proj(ops::add(a, b)).y, fa = proj(a).y, fb = proj(b).y;
  for (std::size_t i = 0; i < fab.numel(); ++i) CHECK(std::abs(fab[i] - fa[i] - fb[i]) < 1e-12);
  const auto c = random_tensor<double>({3, 10}, rng), d = random_tensor<double>({3, 10}, rng);
  const auto gcd = modal(ops::add(c, d)), gc = modal(c), gd = modal(d);
  for (std::size_t i = 0; i < gcd.numel(); ++i) CHECK(std::abs(gcd[i] - gc[i] - gd[i]) < 1e-12);
}

TEST_CASE("projection depth variants") {
  for (std::size_t depth : {1u, 2u, 3u}) {
    ProjectionConfig pc{8, 12, 10, depth};
    ParameterManifest manifest;
    PcProjection<double>::describe(manifest, pc);
    const std::size_t expect = depth == 1   ? 8 * 10 + 10
                               : depth == 2 ? (8 * 12 + 12) + (12 * 10 + 10)
                                            : (8 * 12 + 12) + (12 * 12 + 12) + (12 * 10 + 10);
    CHECK(manifest.total() == expect);
    ParameterStore<double> store(manifest);
    store.initialize(12, 0.3, 0.02);
    PcProjection<double> proj(pc, store);
    Rng rng(13);
    const auto x = random_tensor<double>({3, 8}, rng);
    const auto out = proj(x);
    CHECK(out.y.cols() == 10);
    CHECK(out.hidden.cols() == (depth == 1 ? 8u : 12u));
    if (depth == 1) CHECK(out.hidden.same_storage(x));
  }
  auto cfg = testing::tiny_config();
  cfg.set("projection.depth", "4");
  CHECK_THROWS_AS(ModelConfig::from_config(cfg), ConfigError);
  CHECK_THROWS_AS((ProjectionConfig{8, 12, 10, 0}.validate()), ConfigError);
}

TEST_CASE("wrong input width is a dimension error") {
  ProjectionConfig pc{8, 12, 10, 2};
  ParameterManifest manifest;
  PcProjection<double>::describe(manifest, pc);
  ParameterStore<double> store(manifest);
  store.initialize(1, 0.1, 0.02);
  PcProjection<double> proj(pc, store);
  CHECK_THROWS_AS(proj(Tensor<double>(Shape{2, 9}, 0.0)), DimensionError);
}

}  // TEST_SUITE

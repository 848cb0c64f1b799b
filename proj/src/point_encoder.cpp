#include "mqe_align/point_encoder.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "mqe_align/error.hpp"

namespace mqe {

PointCloud::PointCloud(std::size_t count, std::vector<float> values)
    : n(count), points(std::move(values)) {
  if (points.size() != n * kPointDims) {
    throw DimensionError("point cloud: " + std::to_string(n) + " points need " +
                         std::to_string(n * kPointDims) + " values, got " +
                         std::to_string(points.size()));
  }
}

namespace {

double sq_dist_xyz(const PointCloud& c, std::size_t a, std::size_t b) {
  double s = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    const double d = static_cast<double>(c.at(a, k)) - static_cast<double>(c.at(b, k));
    s += d * d;
  }
  return s;
}

}  // namespace

PointGroups group_points(const PointCloud& cloud, std::size_t num_patches, std::size_t group_size) {
  const std::size_t n = cloud.n;
  if (group_size == 0 || num_patches == 0) {
    throw DimensionError("group_points: patch count and group size must be positive");
  }
  if (n < group_size || n < num_patches) {
    throw DimensionError("group_points: " + std::to_string(n) + " points are too few for " +
                         std::to_string(num_patches) + " patches of " +
                         std::to_string(group_size));
  }

  // canon[r] = original index of the r-th point in canonical order.
  std::vector<std::size_t> canon(n);
  std::iota(canon.begin(), canon.end(), 0);
  std::stable_sort(canon.begin(), canon.end(), [&](std::size_t a, std::size_t b) {
    for (std::size_t c = 0; c < kPointDims; ++c) {
      if (cloud.at(a, c) != cloud.at(b, c)) return cloud.at(a, c) < cloud.at(b, c);
    }
    return false;
  });

  // Farthest-point sampling over canonical ranks.
  std::vector<std::size_t> centers_rank{0};
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  while (centers_rank.size() < num_patches) {
    const std::size_t last = canon[centers_rank.back()];
    std::size_t best = 0;
    double best_d = -1;
    for (std::size_t r = 0; r < n; ++r) {
      nearest[r] = std::min(nearest[r], sq_dist_xyz(cloud, canon[r], last));
      if (nearest[r] > best_d) {
        best_d = nearest[r];
        best = r;
      }
    }
    centers_rank.push_back(best);
  }

  PointGroups out;
  out.center_index.reserve(num_patches);
  out.centers.reserve(num_patches * 3);
  out.member_index.reserve(num_patches * group_size);
  out.groups.reserve(num_patches * group_size * kPointDims);
  std::vector<std::size_t> ranks(n);
  std::vector<double> dist(n);
  for (std::size_t rc : centers_rank) {
    const std::size_t ci = canon[rc];
    out.center_index.push_back(ci);
    for (std::size_t k = 0; k < 3; ++k) out.centers.push_back(cloud.at(ci, k));
    for (std::size_t r = 0; r < n; ++r) dist[r] = sq_dist_xyz(cloud, canon[r], ci);
    std::iota(ranks.begin(), ranks.end(), 0);
    std::partial_sort(ranks.begin(), ranks.begin() + static_cast<std::ptrdiff_t>(group_size),
                      ranks.end(), [&](std::size_t a, std::size_t b) {
                        return dist[a] != dist[b] ? dist[a] < dist[b] : a < b;
                      });
    for (std::size_t g = 0; g < group_size; ++g) {
      const std::size_t pi = canon[ranks[g]];
      out.member_index.push_back(pi);
      for (std::size_t k = 0; k < 3; ++k) out.groups.push_back(cloud.at(pi, k) - cloud.at(ci, k));
      for (std::size_t k = 3; k < kPointDims; ++k) out.groups.push_back(cloud.at(pi, k));
    }
  }
  return out;
}

template <typename Real>
void PointEncoder<Real>::describe(ParameterManifest& m, const EncoderConfig& cfg) {
  const auto tag = ModuleTag::point_encoder;
  m.add_linear("encoder.pointnet.fc1", kPointDims, cfg.pointnet_hidden, tag);
  m.add_linear("encoder.pointnet.fc2", cfg.pointnet_hidden, cfg.hidden, tag);
  m.add_linear("encoder.pos.fc1", 3, cfg.pos_hidden, tag);
  m.add_linear("encoder.pos.fc2", cfg.pos_hidden, cfg.hidden, tag);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "encoder.layers." + std::to_string(l);
    m.add_norm(p + ".ln1", cfg.hidden, tag);
    for (const char* name : {".attn.q", ".attn.k", ".attn.v", ".attn.o"}) {
      m.add_linear(p + name, cfg.hidden, cfg.hidden, tag);
    }
    m.add_norm(p + ".ln2", cfg.hidden, tag);
    m.add_linear(p + ".mlp.fc1", cfg.hidden, cfg.ffn, tag);
    m.add_linear(p + ".mlp.fc2", cfg.ffn, cfg.hidden, tag);
  }
  m.add_norm("encoder.final_ln", cfg.hidden, tag);
}

template <typename Real>
PointEncoder<Real>::PointEncoder(const EncoderConfig& cfg, const ParameterStore<Real>& store)
    : cfg_(cfg) {
  cfg_.validate();
  point_fc1_ = bind_linear(store, "encoder.pointnet.fc1");
  point_fc2_ = bind_linear(store, "encoder.pointnet.fc2");
  pos_fc1_ = bind_linear(store, "encoder.pos.fc1");
  pos_fc2_ = bind_linear(store, "encoder.pos.fc2");
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "encoder.layers." + std::to_string(l);
    blocks_.push_back({bind_norm(store, p + ".ln1"), bind_norm(store, p + ".ln2"),
                       bind_linear(store, p + ".attn.q"), bind_linear(store, p + ".attn.k"),
                       bind_linear(store, p + ".attn.v"), bind_linear(store, p + ".attn.o"),
                       bind_linear(store, p + ".mlp.fc1"), bind_linear(store, p + ".mlp.fc2")});
  }
  final_ln_ = bind_norm(store, "encoder.final_ln");
}

template <typename Real>
Tensor<Real> PointEncoder<Real>::encode(const PointCloud& cloud) const {
  return encode(group_points(cloud, cfg_.num_patches, cfg_.group_size));
}

template <typename Real>
Tensor<Real> PointEncoder<Real>::encode(const PointGroups& groups) const {
  const std::size_t m = groups.count();
  if (m != cfg_.num_patches || groups.member_index.size() != m * cfg_.group_size) {
    throw DimensionError("encode: groups are " + std::to_string(m) + "x" +
                         std::to_string(m ? groups.member_index.size() / m : 0) +
                         ", encoder expects " + std::to_string(cfg_.num_patches) + "x" +
                         std::to_string(cfg_.group_size));
  }
  Tensor<Real> pts(Shape{m * cfg_.group_size, kPointDims},
                   std::vector<Real>(groups.groups.begin(), groups.groups.end()));
  Tensor<Real> centers(Shape{m, 3}, std::vector<Real>(groups.centers.begin(), groups.centers.end()));

  auto h = ops::gelu(point_fc1_(pts));
  h = ops::gelu(point_fc2_(h));
  auto x = ops::max_pool_rows(h, cfg_.group_size);
  x = ops::add(x, pos_fc2_(ops::gelu(pos_fc1_(centers))));

  for (const auto& b : blocks_) {
    auto n1 = b.ln1(x);
    x = ops::add(x, b.o(ops::attention(b.q(n1), b.k(n1), b.v(n1), cfg_.heads, false)));
    auto n2 = b.ln2(x);
    x = ops::add(x, b.fc2(ops::gelu(b.fc1(n2))));
  }
  return final_ln_(x);
}

template class PointEncoder<float>;
template class PointEncoder<double>;

}  // namespace mqe

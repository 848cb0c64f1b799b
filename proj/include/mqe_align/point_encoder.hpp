#pragma once

#include <cstddef>
#include <vector>

#include "mqe_align/layers.hpp"
#include "mqe_align/model_config.hpp"

namespace mqe {

/// n × 6 point array (x, y, z, r, g, b), row-major float32. Clouds without
/// colour carry rgb = (0, 0, 0).
struct PointCloud {
  std::size_t n = 0;
  std::vector<float> points;

  PointCloud() = default;
  PointCloud(std::size_t count, std::vector<float> values);

  float at(std::size_t i, std::size_t c) const { return points[i * kPointDims + c]; }
  float& at(std::size_t i, std::size_t c) { return points[i * kPointDims + c]; }
};

struct PointGroups {
  std::vector<std::size_t> center_index;   // original point index of each center
  std::vector<float> centers;              // m × 3
  std::vector<std::size_t> member_index;   // m × group_size original indices
  std::vector<float> groups;               // m × group_size × 6, xyz re-centred

  std::size_t count() const { return center_index.size(); }
};

/// Points are first put in canonical (lexicographic x,y,z,r,g,b) order. Patch
/// centers come from farthest-point sampling seeded at the first canonical
/// point; each patch is the group_size nearest points (xyz distance, ties by
/// canonical order) of its center.
PointGroups group_points(const PointCloud& cloud, std::size_t num_patches, std::size_t group_size);

/// Frozen patch encoder: mini-PointNet per patch, center positional MLP, then
/// a pre-norm transformer. Output X is num_patches × hidden.
template <typename Real>
class PointEncoder {
 public:
  static void describe(ParameterManifest& manifest, const EncoderConfig& cfg);

  PointEncoder() = default;
  PointEncoder(const EncoderConfig& cfg, const ParameterStore<Real>& store);

  Tensor<Real> encode(const PointCloud& cloud) const;
  Tensor<Real> encode(const PointGroups& groups) const;

  const EncoderConfig& config() const { return cfg_; }

 private:
  struct Block {
    NormLayer<Real> ln1, ln2;
    LinearLayer<Real> q, k, v, o, fc1, fc2;
  };
  EncoderConfig cfg_;
  LinearLayer<Real> point_fc1_, point_fc2_, pos_fc1_, pos_fc2_;
  std::vector<Block> blocks_;
  NormLayer<Real> final_ln_;
};

extern template class PointEncoder<float>;
extern template class PointEncoder<double>;

}  // namespace mqe

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rise/cloud.hpp"
#include "rise/core/nn.hpp"
#include "rise/core/tensor.hpp"

namespace rise {

// Sparse voxel tensors and the generalized convolution/pooling operators that
// evaluate only on occupied coordinates.

struct VoxelCoord {
  std::int32_t b = 0;  // batch element
  std::int32_t i = 0, j = 0, k = 0;

  bool operator==(const VoxelCoord&) const = default;
};

struct VoxelCoordHash {
  std::size_t operator()(const VoxelCoord& c) const {
    std::uint64_t h = detail::splitmix64(static_cast<std::uint32_t>(c.b));
    h = detail::splitmix64(h ^ static_cast<std::uint32_t>(c.i));
    h = detail::splitmix64(h ^ static_cast<std::uint32_t>(c.j));
    h = detail::splitmix64(h ^ static_cast<std::uint32_t>(c.k));
    return static_cast<std::size_t>(h);
  }
};

using CoordIndex = std::unordered_map<VoxelCoord, int, VoxelCoordHash>;

inline CoordIndex build_coord_index(const std::vector<VoxelCoord>& coords) {
  CoordIndex index;
  index.reserve(coords.size() * 2);
  for (std::size_t r = 0; r < coords.size(); ++r) index.emplace(coords[r], static_cast<int>(r));
  return index;
}

// Batch of (voxel coordinate, feature row) pairs. Coordinates are unique per
// batch element and are multiples of `stride`.
template <class F>
struct SparsePointTensorT {
  std::vector<VoxelCoord> coords;
  TensorT<F> features;  // [N x C]
  int stride = 1;
  double voxel_size = 0.005;

  int size() const { return static_cast<int>(coords.size()); }
  int channels() const { return features.defined() && features.rank() == 2 ? features.dim(1) : 0; }
  bool empty() const { return coords.empty(); }
};

using SparsePointTensor = SparsePointTensorT<float>;

namespace detail {
inline std::int32_t floor_div(std::int32_t a, std::int32_t m) {
  return a >= 0 ? a / m : -((-a + m - 1) / m);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Voxelization
// ---------------------------------------------------------------------------

// Quantizes points to floor(position / voxel_size) and averages the feature
// rows of points landing in the same voxel. `point_features` rows align with
// `points`; the mean is differentiable back to them. Output stride is 1 and
// voxels appear in first-hit order.
template <class F>
SparsePointTensorT<F> voxelize(const PointCloud& points, TensorT<F> point_features,
                               double voxel_size, int batch = 0) {
  if (voxel_size <= 0) throw UsageError("voxelize: voxel_size must be positive");
  if (point_features.rank() != 2 ||
      point_features.dim(0) != static_cast<int>(points.size()))
    throw DimensionError("voxelize: feature rows must match point count");
  const int C = point_features.dim(1);

  SparsePointTensorT<F> out;
  out.stride = 1;
  out.voxel_size = voxel_size;

  CoordIndex index;
  index.reserve(points.size());
  std::vector<std::vector<int>> members;  // voxel row -> contributing points
  for (std::size_t p = 0; p < points.size(); ++p) {
    VoxelCoord c{batch,
                 static_cast<std::int32_t>(std::floor(points[p].x / voxel_size)),
                 static_cast<std::int32_t>(std::floor(points[p].y / voxel_size)),
                 static_cast<std::int32_t>(std::floor(points[p].z / voxel_size))};
    auto [it, inserted] = index.emplace(c, static_cast<int>(out.coords.size()));
    if (inserted) {
      out.coords.push_back(c);
      members.emplace_back();
    }
    members[static_cast<std::size_t>(it->second)].push_back(static_cast<int>(p));
  }

  const int n = static_cast<int>(out.coords.size());
  std::vector<F> data(static_cast<std::size_t>(n) * C, F(0));
  const F* src = point_features.data();
  for (int v = 0; v < n; ++v) {
    const F inv = F(1) / static_cast<F>(members[v].size());
    for (int p : members[v])
      for (int c = 0; c < C; ++c)
        data[static_cast<std::size_t>(v) * C + c] += src[static_cast<std::size_t>(p) * C + c] * inv;
  }
  auto members_p = std::make_shared<std::vector<std::vector<int>>>(std::move(members));
  out.features = rise::detail::make_op<F>(
      {n, C}, std::move(data), {point_features},
      [point_features, members_p, C](rise::detail::Node<F>& node) mutable {
        if (!point_features.requires_grad()) return;
        auto& g = point_features.raw_grad();
        for (std::size_t v = 0; v < members_p->size(); ++v) {
          const F inv = F(1) / static_cast<F>((*members_p)[v].size());
          for (int p : (*members_p)[v])
            for (int c = 0; c < C; ++c)
              g[static_cast<std::size_t>(p) * C + c] += node.grad[v * C + c] * inv;
        }
      });
  return out;
}

// Convenience overload: features are the point colors.
template <class F = float>
SparsePointTensorT<F> voxelize(const PointCloud& points, double voxel_size, int batch = 0) {
  std::vector<F> colors(points.size() * 3);
  for (std::size_t p = 0; p < points.size(); ++p) {
    colors[p * 3 + 0] = static_cast<F>(points[p].r);
    colors[p * 3 + 1] = static_cast<F>(points[p].g);
    colors[p * 3 + 2] = static_cast<F>(points[p].b);
  }
  auto feat = TensorT<F>::from_data({static_cast<int>(points.size()), 3}, std::move(colors));
  return voxelize(points, feat, voxel_size, batch);
}

// Concatenates per-sample sparse tensors into one batch, assigning batch ids
// by position.
template <class F>
SparsePointTensorT<F> merge_batch(const std::vector<SparsePointTensorT<F>>& items) {
  if (items.empty()) throw UsageError("merge_batch: no items");
  SparsePointTensorT<F> out;
  out.stride = items[0].stride;
  out.voxel_size = items[0].voxel_size;
  std::vector<TensorT<F>> feats;
  for (std::size_t b = 0; b < items.size(); ++b) {
    if (items[b].stride != out.stride) throw UsageError("merge_batch: stride mismatch");
    for (VoxelCoord c : items[b].coords) {
      c.b = static_cast<std::int32_t>(b);
      out.coords.push_back(c);
    }
    if (!items[b].empty()) feats.push_back(items[b].features);
  }
  if (feats.empty())
    out.features = TensorT<F>::zeros({0, items[0].channels()});
  else
    out.features = concat_rows(feats);
  return out;
}

// ---------------------------------------------------------------------------
// Kernel maps
// ---------------------------------------------------------------------------

// For each kernel offset, the (input row, output row) pairs the convolution
// gathers and scatters. Offsets run lexicographically over
// [-K/2, K/2]^3 scaled by the input tensor stride.
struct KernelMap {
  int kernel_size = 1;
  int out_stride = 1;
  std::vector<VoxelCoord> out_coords;
  std::vector<std::vector<std::pair<int, int>>> pairs;  // [kernel_size^3]

  int offsets() const { return kernel_size * kernel_size * kernel_size; }
  std::size_t total_pairs() const {
    std::size_t n = 0;
    for (const auto& p : pairs) n += p.size();
    return n;
  }
};

// Pair (i, o) is present at offset d iff in[i] == out[o] + d * in_stride.
// With `transposed`, the roles flip: (i, o) present iff out[o] == in[i] + d *
// out_stride (a scatter from coarse to fine lattices).
inline KernelMap build_kernel_map(const std::vector<VoxelCoord>& in_coords, int in_stride,
                                  std::vector<VoxelCoord> out_coords, int out_stride,
                                  int kernel_size, bool transposed = false) {
  if (kernel_size < 1 || kernel_size % 2 == 0)
    throw UsageError("build_kernel_map: kernel size must be odd and positive");
  KernelMap map;
  map.kernel_size = kernel_size;
  map.out_stride = out_stride;
  map.out_coords = std::move(out_coords);
  map.pairs.assign(static_cast<std::size_t>(map.offsets()), {});

  const int r = kernel_size / 2;
  const int step = transposed ? out_stride : in_stride;
  if (!transposed) {
    CoordIndex in_index = build_coord_index(in_coords);
    int oi = 0;
    for (const VoxelCoord& o : map.out_coords) {
      int off = 0;
      for (int di = -r; di <= r; ++di)
        for (int dj = -r; dj <= r; ++dj)
          for (int dk = -r; dk <= r; ++dk, ++off) {
            VoxelCoord probe{o.b, o.i + di * step, o.j + dj * step, o.k + dk * step};
            auto it = in_index.find(probe);
            if (it != in_index.end()) map.pairs[off].emplace_back(it->second, oi);
          }
      ++oi;
    }
  } else {
    CoordIndex out_index = build_coord_index(map.out_coords);
    for (std::size_t ii = 0; ii < in_coords.size(); ++ii) {
      const VoxelCoord& c = in_coords[ii];
      int off = 0;
      for (int di = -r; di <= r; ++di)
        for (int dj = -r; dj <= r; ++dj)
          for (int dk = -r; dk <= r; ++dk, ++off) {
            VoxelCoord probe{c.b, c.i + di * step, c.j + dj * step, c.k + dk * step};
            auto it = out_index.find(probe);
            if (it != out_index.end())
              map.pairs[off].emplace_back(static_cast<int>(ii), it->second);
          }
    }
    // keep scatter order deterministic per output row
    for (auto& p : map.pairs)
      std::sort(p.begin(), p.end(),
                [](const auto& a, const auto& b) { return a.second != b.second ? a.second < b.second : a.first < b.first; });
  }
  return map;
}

// Kernel map for a stride-preserving convolution on the tensor's own lattice.
template <class F>
KernelMap same_coords_map(const SparsePointTensorT<F>& x, int kernel_size) {
  return build_kernel_map(x.coords, x.stride, x.coords, x.stride, kernel_size);
}

// ---------------------------------------------------------------------------
// Sparse convolution
// ---------------------------------------------------------------------------

// out[o] = sum over offsets d, pairs (i, o) of x[i] * W[d]. W is
// [K^3 x Cin x Cout]; no bias term (normalization layers follow each conv).
template <class F>
SparsePointTensorT<F> sparse_conv(const SparsePointTensorT<F>& x, TensorT<F> weights,
                                  const KernelMap& map) {
  if (weights.rank() != 3) throw DimensionError("sparse_conv: weights must be [K^3 x Cin x Cout]");
  if (weights.dim(0) != map.offsets())
    throw DimensionError("sparse_conv: weight offset count does not match kernel map");
  const int cin = weights.dim(1), cout = weights.dim(2);
  if (x.channels() != cin)
    throw DimensionError("sparse_conv: input channels " + std::to_string(x.channels()) +
                         " do not match weights " + std::to_string(cin));

  const int n_out = static_cast<int>(map.out_coords.size());
  std::vector<F> out(static_cast<std::size_t>(n_out) * cout, F(0));
  using CMap = typename TensorT<F>::ConstMatMap;
  using MMap = typename TensorT<F>::MatMap;
  using Mat = Eigen::Matrix<F, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  auto features = x.features;
  CMap fin(features.data(), x.size(), cin);
  for (int off = 0; off < map.offsets(); ++off) {
    const auto& pairs = map.pairs[static_cast<std::size_t>(off)];
    if (pairs.empty()) continue;
    const int p = static_cast<int>(pairs.size());
    Mat gathered(p, cin);
    for (int t = 0; t < p; ++t) gathered.row(t) = fin.row(pairs[t].first);
    CMap w(weights.data() + static_cast<std::size_t>(off) * cin * cout, cin, cout);
    Mat partial = gathered * w;
    MMap mo(out.data(), n_out, cout);
    for (int t = 0; t < p; ++t) mo.row(pairs[t].second) += partial.row(t);
  }

  SparsePointTensorT<F> result;
  result.coords = map.out_coords;
  result.stride = map.out_stride;
  result.voxel_size = x.voxel_size;
  // The map is copied into the closure; it is small relative to features.
  auto map_p = std::make_shared<KernelMap>(map);
  const int n_in = x.size();
  result.features = rise::detail::make_op<F>(
      {n_out, cout}, std::move(out), {features, weights},
      [features, weights, map_p, n_in, n_out, cin, cout](rise::detail::Node<F>& node) mutable {
        for (int off = 0; off < map_p->offsets(); ++off) {
          const auto& pairs = map_p->pairs[static_cast<std::size_t>(off)];
          if (pairs.empty()) continue;
          const int p = static_cast<int>(pairs.size());
          Mat gy(p, cout);
          CMap gout(node.grad.data(), n_out, cout);
          for (int t = 0; t < p; ++t) gy.row(t) = gout.row(pairs[t].second);
          CMap w(weights.data() + static_cast<std::size_t>(off) * cin * cout, cin, cout);
          if (features.requires_grad()) {
            Mat gx = gy * w.transpose();  // [p x cin]
            MMap gin(rise::detail::grad_mat(*features.node(), n_in, cin).data(), n_in, cin);
            for (int t = 0; t < p; ++t) gin.row(pairs[t].first) += gx.row(t);
          }
          if (weights.requires_grad()) {
            Mat gathered(p, cin);
            CMap fin(features.data(), n_in, cin);
            for (int t = 0; t < p; ++t) gathered.row(t) = fin.row(pairs[t].first);
            weights.raw_grad();
            MMap gw(weights.raw_grad().data() + static_cast<std::size_t>(off) * cin * cout, cin,
                    cout);
            gw.noalias() += gathered.transpose() * gy;
          }
        }
      });
  return result;
}

// ---------------------------------------------------------------------------
// Sparse max pooling (2x)
// ---------------------------------------------------------------------------

// Children sharing a parent cell at double the stride reduce by per-channel
// max; output stride doubles. Gradient routes to the argmax child, first
// child winning ties.
template <class F>
SparsePointTensorT<F> sparse_pool(const SparsePointTensorT<F>& x) {
  const int C = x.channels();
  const int parent_stride = x.stride * 2;

  SparsePointTensorT<F> out;
  out.stride = parent_stride;
  out.voxel_size = x.voxel_size;

  CoordIndex parent_index;
  std::vector<std::vector<int>> members;
  for (int row = 0; row < x.size(); ++row) {
    const VoxelCoord& c = x.coords[static_cast<std::size_t>(row)];
    VoxelCoord parent{c.b, detail::floor_div(c.i, parent_stride) * parent_stride,
                      detail::floor_div(c.j, parent_stride) * parent_stride,
                      detail::floor_div(c.k, parent_stride) * parent_stride};
    auto [it, inserted] = parent_index.emplace(parent, static_cast<int>(out.coords.size()));
    if (inserted) {
      out.coords.push_back(parent);
      members.emplace_back();
    }
    members[static_cast<std::size_t>(it->second)].push_back(row);
  }

  const int n = static_cast<int>(out.coords.size());
  std::vector<F> data(static_cast<std::size_t>(n) * C);
  auto argmax = std::make_shared<std::vector<int>>(static_cast<std::size_t>(n) * C);
  auto features = x.features;
  const F* src = features.data();
  for (int v = 0; v < n; ++v)
    for (int c = 0; c < C; ++c) {
      int best = members[static_cast<std::size_t>(v)][0];
      F best_val = src[static_cast<std::size_t>(best) * C + c];
      for (std::size_t m = 1; m < members[static_cast<std::size_t>(v)].size(); ++m) {
        int row = members[static_cast<std::size_t>(v)][m];
        F val = src[static_cast<std::size_t>(row) * C + c];
        if (val > best_val) {
          best_val = val;
          best = row;
        }
      }
      data[static_cast<std::size_t>(v) * C + c] = best_val;
      (*argmax)[static_cast<std::size_t>(v) * C + c] = best;
    }

  out.features = rise::detail::make_op<F>(
      {n, C}, std::move(data), {features}, [features, argmax, C](rise::detail::Node<F>& node) mutable {
        if (!features.requires_grad()) return;
        auto& g = features.raw_grad();
        for (std::size_t i = 0; i < node.grad.size(); ++i)
          g[static_cast<std::size_t>((*argmax)[i]) * C + i % C] += node.grad[i];
      });
  return out;
}

// ---------------------------------------------------------------------------
// Residual block
// ---------------------------------------------------------------------------

// x + Conv(Norm(ReLU(Conv(Norm(ReLU(x)))))) on shared coordinates. Width is
// preserved; the norm is per-feature-row layer normalization.
template <class F>
struct SparseResidualBlockT {
  LayerNormT<F> norm1, norm2;
  TensorT<F> w1, w2;
  int kernel = 3;

  SparseResidualBlockT() = default;
  SparseResidualBlockT(ParamStore<F>& store, const std::string& prefix, int channels, int kernel_size,
                       Rng& rng)
      : kernel(kernel_size) {
    norm1 = LayerNormT<F>(store, prefix + ".norm1", channels);
    norm2 = LayerNormT<F>(store, prefix + ".norm2", channels);
    const int k3 = kernel_size * kernel_size * kernel_size;
    const double stddev = std::sqrt(2.0 / (k3 * channels));
    w1 = store.create_randn(prefix + ".conv1.w", {k3, channels, channels}, rng, stddev);
    w2 = store.create_randn(prefix + ".conv2.w", {k3, channels, channels}, rng, stddev);
  }

  SparsePointTensorT<F> operator()(const SparsePointTensorT<F>& x) const {
    if (x.empty()) return x;
    KernelMap map = same_coords_map(x, kernel);
    return apply(x, map);
  }

  SparsePointTensorT<F> apply(const SparsePointTensorT<F>& x, const KernelMap& map) const {
    if (x.channels() != w1.dim(1))
      throw DimensionError("residual block: channel width mismatch");
    SparsePointTensorT<F> h = x;
    h.features = norm1(relu(x.features));
    h = sparse_conv(h, w1, map);
    h.features = norm2(relu(h.features));
    h = sparse_conv(h, w2, map);
    h.features = add(x.features, h.features);
    return h;
  }
};

}  // namespace rise

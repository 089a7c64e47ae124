// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#include "plaindet/boxrpb.hpp"

#include <vector>

namespace plaindet {

RpbMlp RpbMlp::create(ParamStore& store, const std::string& prefix,
                      int in_width, int hidden, int heads, Rng& rng) {
  if (hidden < 1) throw ConfigError("RpbMlp hidden width must be >= 1");
  RpbMlp m;
  m.w1 = store.create_xavier(prefix + "/w1", {in_width, hidden}, rng);
  m.b1 = store.create(prefix + "/b1", {hidden});
  m.w2 = store.create_xavier(prefix + "/w2", {hidden, heads}, rng);
  m.b2 = store.create(prefix + "/b2", {heads});
  return m;
}

RpbMlp RpbMlp::zero(int in_width, int hidden, int heads) {
  RpbMlp m;
  m.w1 = Tensor::zeros({in_width, hidden});
  m.b1 = Tensor::zeros({hidden});
  m.w2 = Tensor::zeros({hidden, heads});
  m.b2 = Tensor::zeros({heads});
  return m;
}

Tensor RpbMlp::forward(const Tensor& x) const {
  if (x.shape().back() != in_width()) {
    throw ShapeError("RpbMlp: input width " + std::to_string(x.shape().back()) +
                     " does not match mlp width " + std::to_string(in_width()));
  }
  return affine(relu(affine(x, w1, b1)), w2, b2);
}

BiasTerm BiasTerm::from_full(Tensor full) {
  if (full.rank() != 4) {
    throw ShapeError("BiasTerm: full form must be (K,H,W,M), got " +
                     shape_str(full.shape()));
  }
  BiasTerm b;
  b.K_ = full.extent(0);
  b.H_ = full.extent(1);
  b.W_ = full.extent(2);
  b.M_ = full.extent(3);
  b.full_ = std::move(full);
  return b;
}

BiasTerm BiasTerm::from_axial(Tensor bx, Tensor by) {
  if (bx.rank() != 3 || by.rank() != 3 || bx.extent(0) != by.extent(0) ||
      bx.extent(2) != by.extent(2)) {
    throw ShapeError("BiasTerm: axial pair must be (K,W,M) and (K,H,M)");
  }
  BiasTerm b;
  b.K_ = bx.extent(0);
  b.H_ = by.extent(1);
  b.W_ = bx.extent(1);
  b.M_ = bx.extent(2);
  b.bx_ = std::move(bx);
  b.by_ = std::move(by);
  return b;
}

const Tensor& BiasTerm::bx() const {
  if (!bx_.defined()) throw DomainError("BiasTerm: no axial form");
  return bx_;
}

const Tensor& BiasTerm::by() const {
  if (!by_.defined()) throw DomainError("BiasTerm: no axial form");
  return by_;
}

Tensor BiasTerm::full() const {
  if (full_.defined()) return full_;
  return broadcast_add(bx_, by_);
}

Tensor position_feature_slab(
    std::span<const std::pair<Tensor, char>> channels, int k, int grid_h,
    int grid_w) {
  const int C = static_cast<int>(channels.size());
  if (C == 0) throw ShapeError("position_feature_slab: no channels");
  std::vector<Tensor> inputs;
  for (const auto& [rows, axis] : channels) {
    if (axis != 'x' && axis != 'y') {
      throw DomainError("position_feature_slab: axis must be 'x' or 'y'");
    }
    const int want = axis == 'x' ? grid_w : grid_h;
    if (rows.rank() != 2 || rows.extent(1) != want) {
      throw ShapeError("position_feature_slab: rows shape " +
                       shape_str(rows.shape()) + " does not match grid axis");
    }
    if (k < 0 || k >= rows.extent(0)) {
      throw ShapeError("position_feature_slab: query index out of range");
    }
    inputs.push_back(rows);
  }

  Tensor slab = Tensor::zeros({grid_h * grid_w, C});
  {
    auto out = slab.values_mut();
    for (int c = 0; c < C; ++c) {
      const auto& [rows, axis] = channels[static_cast<std::size_t>(c)];
      const auto rv = rows.values();
      const int stride = rows.extent(1);
      for (int i = 0; i < grid_h; ++i) {
        for (int j = 0; j < grid_w; ++j) {
          const int src = axis == 'x' ? j : i;
          out[(static_cast<std::int64_t>(i) * grid_w + j) * C + c] =
              rv[static_cast<std::int64_t>(k) * stride + src];
        }
      }
    }
  }

  std::vector<std::pair<Tensor, char>> held(channels.begin(), channels.end());
  record_op("position_feature_slab", inputs, slab,
            [held, slab, k, grid_h, grid_w, C]() {
    const auto gs = slab.node()->grad.data();
    for (int c = 0; c < C; ++c) {
      const auto& [rows, axis] = held[static_cast<std::size_t>(c)];
      if (!rows.tracked()) continue;
      auto gr = rows.node()->grad.data();
      const int stride = axis == 'x' ? grid_w : grid_h;
      for (int i = 0; i < grid_h; ++i) {
        for (int j = 0; j < grid_w; ++j) {
          const int src = axis == 'x' ? j : i;
          gr[static_cast<std::int64_t>(k) * stride + src] +=
              gs[(static_cast<std::int64_t>(i) * grid_w + j) * C + c];
        }
      }
    }
  });
  return slab;
}

BiasTerm naive_boxrpb(const OffsetGrid& offsets, const RpbMlp& mlp) {
  if (mlp.in_width() != 4) {
    throw ShapeError("naive_boxrpb: mlp input width must be 4, got " +
                     std::to_string(mlp.in_width()));
  }
  const int K = offsets.dx1.extent(0);
  const int H = offsets.grid_h, W = offsets.grid_w, M = mlp.heads();
  if (K == 0) return BiasTerm::from_full(Tensor::zeros({0, H, W, M}));

  const std::pair<Tensor, char> channels[] = {
      {offsets.dx1, 'x'}, {offsets.dy1, 'y'}, {offsets.dx2, 'x'},
      {offsets.dy2, 'y'}};
  // One query slab at a time; the full (K,H,W,4) input is never materialized.
  std::vector<Tensor> per_query;
  per_query.reserve(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    Tensor slab = position_feature_slab(channels, k, H, W);
    per_query.push_back(reshape(mlp.forward(slab), {1, H, W, M}));
  }
  return BiasTerm::from_full(concat(per_query, 0));
}

BiasTerm decomposed_boxrpb(const OffsetGrid& offsets, const RpbMlp& mlp_x,
                           const RpbMlp& mlp_y) {
  if (mlp_x.in_width() != 2 || mlp_y.in_width() != 2) {
    throw ShapeError("decomposed_boxrpb: mlp input widths must be 2");
  }
  const int K = offsets.dx1.extent(0);
  const int H = offsets.grid_h, W = offsets.grid_w;

  const Tensor xin_parts[] = {reshape(offsets.dx1, {K, W, 1}),
                              reshape(offsets.dx2, {K, W, 1})};
  const Tensor yin_parts[] = {reshape(offsets.dy1, {K, H, 1}),
                              reshape(offsets.dy2, {K, H, 1})};
  Tensor bx = mlp_x.forward(concat(xin_parts, 2));
  Tensor by = mlp_y.forward(concat(yin_parts, 2));
  return BiasTerm::from_axial(bx, by);
}

BiasTerm center_rpb(const Tensor& boxes, int grid_h, int grid_w,
                    const RpbMlp& mlp, bool normalized) {
  if (mlp.in_width() != 2) {
    throw ShapeError("center_rpb: mlp input width must be 2, got " +
                     std::to_string(mlp.in_width()));
  }
  OffsetGrid og = corner_offsets(boxes, grid_h, grid_w, normalized);
  // (px - cx)/W is the mean of the two corner offsets; same for y.
  Tensor cx_off = scale(add(og.dx1, og.dx2), 0.5);
  Tensor cy_off = scale(add(og.dy1, og.dy2), 0.5);

  const int K = boxes.extent(0);
  const int M = mlp.heads();
  if (K == 0) return BiasTerm::from_full(Tensor::zeros({0, grid_h, grid_w, M}));

  const std::pair<Tensor, char> channels[] = {{cx_off, 'x'}, {cy_off, 'y'}};
  std::vector<Tensor> per_query;
  per_query.reserve(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    Tensor slab = position_feature_slab(channels, k, grid_h, grid_w);
    per_query.push_back(reshape(mlp.forward(slab), {1, grid_h, grid_w, M}));
  }
  return BiasTerm::from_full(concat(per_query, 0));
}

}  // namespace plaindet

// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#include "plaindet/attention.hpp"

#include <algorithm>
#include <cmath>

namespace plaindet {

MhaParams MhaParams::create(ParamStore& store, const std::string& prefix,
                            int d, Rng& rng) {
  MhaParams p;
  p.wq = store.create_xavier(prefix + "/wq", {d, d}, rng);
  p.bq = store.create(prefix + "/bq", {d});
  p.wk = store.create_xavier(prefix + "/wk", {d, d}, rng);
  p.bk = store.create(prefix + "/bk", {d});
  p.wv = store.create_xavier(prefix + "/wv", {d, d}, rng);
  p.bv = store.create(prefix + "/bv", {d});
  p.wo = store.create_xavier(prefix + "/wo", {d, d}, rng);
  p.bo = store.create(prefix + "/bo", {d});
  return p;
}

namespace {

void copy_weights(const Tensor& attn, int head, int queries, int positions,
                  std::vector<double>& out) {
  const auto av = attn.values();
  std::copy(av.begin(), av.end(),
            out.begin() + static_cast<std::size_t>(head) * queries * positions);
}

}  // namespace

AttentionOutput cross_attention(const Tensor& x, const Tensor& memory,
                                const std::optional<BiasTerm>& bias,
                                const Tensor& memory_pos, const MhaParams& p,
                                const AttentionConfig& cfg,
                                bool retain_weights) {
  cfg.validate();
  if (x.rank() != 2 || x.extent(1) != cfg.d) {
    throw ShapeError("cross_attention: queries must be (K," +
                     std::to_string(cfg.d) + "), got " + shape_str(x.shape()));
  }
  if (memory.rank() != 2 || memory.extent(1) != cfg.d) {
    throw ShapeError("cross_attention: memory must be (S," +
                     std::to_string(cfg.d) + "), got " +
                     shape_str(memory.shape()));
  }
  const int K = x.extent(0);
  const int S = memory.extent(0);
  if (bias) {
    if (bias->queries() != K || bias->heads() != cfg.heads ||
        bias->grid_h() * bias->grid_w() != S) {
      throw ShapeError("cross_attention: bias grid (" +
                       std::to_string(bias->grid_h()) + "x" +
                       std::to_string(bias->grid_w()) +
                       ") does not match memory length " + std::to_string(S));
    }
  }

  const Tensor keys_in = memory_pos.defined() ? add(memory, memory_pos) : memory;
  const Tensor q = affine(x, p.wq, p.bq);
  const Tensor k = affine(keys_in, p.wk, p.bk);
  const Tensor v = affine(memory, p.wv, p.bv);

  Tensor bias_full;
  if (bias) bias_full = bias->full();

  AttentionOutput result;
  result.heads = cfg.heads;
  result.queries = K;
  result.positions = S;
  if (retain_weights) {
    result.weights.assign(
        static_cast<std::size_t>(cfg.heads) * K * S, 0.0);
  }

  const int dh = cfg.head_width();
  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<std::size_t>(cfg.heads));
  for (int m = 0; m < cfg.heads; ++m) {
    const Tensor qm = slice_last(q, m * dh, dh);
    const Tensor km = slice_last(k, m * dh, dh);
    const Tensor vm = slice_last(v, m * dh, dh);
    Tensor scores = scale(matmul(qm, transpose_last2(km)), cfg.scale());
    if (bias) {
      const Tensor bm = reshape(slice_last(bias_full, m, 1), {K, S});
      scores = add(scores, bm);
    }
    const Tensor attn = softmax_last(scores);
    if (retain_weights) copy_weights(attn, m, K, S, result.weights);
    head_outs.push_back(matmul(attn, vm));
  }
  const Tensor merged = concat(head_outs, 1);
  result.out = add(affine(merged, p.wo, p.bo), x);
  return result;
}

Tensor self_attention(const Tensor& x, const Tensor& pos, const MhaParams& p,
                      const AttentionConfig& cfg) {
  cfg.validate();
  if (x.shape() != pos.shape()) {
    throw ShapeError("self_attention: pos shape " + shape_str(pos.shape()) +
                     " must match queries " + shape_str(x.shape()));
  }
  const int K = x.extent(0);
  const Tensor qk_in = add(x, pos);
  const Tensor q = affine(qk_in, p.wq, p.bq);
  const Tensor k = affine(qk_in, p.wk, p.bk);
  const Tensor v = affine(x, p.wv, p.bv);
  const int dh = cfg.head_width();
  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<std::size_t>(cfg.heads));
  for (int m = 0; m < cfg.heads; ++m) {
    const Tensor qm = slice_last(q, m * dh, dh);
    const Tensor km = slice_last(k, m * dh, dh);
    const Tensor vm = slice_last(v, m * dh, dh);
    const Tensor attn =
        softmax_last(scale(matmul(qm, transpose_last2(km)), cfg.scale()));
    head_outs.push_back(matmul(attn, vm));
  }
  (void)K;
  return add(affine(concat(head_outs, 1), p.wo, p.bo), x);
}

BiasTerm box_mask_bias(const Tensor& boxes, int grid_h, int grid_w,
                       int heads) {
  if (boxes.rank() != 2 || boxes.extent(1) != 4) {
    throw ShapeError("box_mask_bias: expected (K,4) boxes");
  }
  const int K = boxes.extent(0);
  Tensor full = Tensor::full({K, grid_h, grid_w, heads}, kMaskNegative);
  auto fv = full.values_mut();
  const auto bv = boxes.values();
  for (int k = 0; k < K; ++k) {
    const double cx = bv[k * 4 + 0], cy = bv[k * 4 + 1];
    const double w = bv[k * 4 + 2], h = bv[k * 4 + 3];
    const double x1 = cx - 0.5 * w, x2 = cx + 0.5 * w;
    const double y1 = cy - 0.5 * h, y2 = cy + 0.5 * h;
    bool any_inside = false;
    for (int i = 0; i < grid_h; ++i) {
      const double py = i + 0.5;
      if (py < y1 || py > y2) continue;
      for (int j = 0; j < grid_w; ++j) {
        const double px = j + 0.5;
        if (px < x1 || px > x2) continue;
        any_inside = true;
        for (int m = 0; m < heads; ++m) {
          fv[((static_cast<std::int64_t>(k) * grid_h + i) * grid_w + j) * heads +
             m] = 0.0;
        }
      }
    }
    if (!any_inside) {
      // Degenerate box between cell centers: open the nearest cell.
      const int jc = std::clamp(static_cast<int>(std::floor(cx)), 0, grid_w - 1);
      const int ic = std::clamp(static_cast<int>(std::floor(cy)), 0, grid_h - 1);
      for (int m = 0; m < heads; ++m) {
        fv[((static_cast<std::int64_t>(k) * grid_h + ic) * grid_w + jc) * heads +
           m] = 0.0;
      }
    }
  }
  return BiasTerm::from_full(full);
}

std::vector<int> roi_sample_cells(double cx, double cy, double w, double h,
                                  int grid_h, int grid_w,
                                  int samples_per_axis) {
  if (samples_per_axis < 1) {
    throw ConfigError("roi_sample_cells: samples per axis must be >= 1");
  }
  const int n = samples_per_axis;
  std::vector<int> cells;
  cells.reserve(static_cast<std::size_t>(n) * n);
  const double x1 = cx - 0.5 * w, y1 = cy - 0.5 * h;
  for (int sy = 0; sy < n; ++sy) {
    const double py = y1 + (sy + 1.0) / (n + 1.0) * h;
    const int i =
        std::clamp(static_cast<int>(std::lround(py - 0.5)), 0, grid_h - 1);
    for (int sx = 0; sx < n; ++sx) {
      const double px = x1 + (sx + 1.0) / (n + 1.0) * w;
      const int j =
          std::clamp(static_cast<int>(std::lround(px - 0.5)), 0, grid_w - 1);
      cells.push_back(i * grid_w + j);
    }
  }
  return cells;
}

AttentionOutput roi_sampling_attention(const Tensor& x, const Tensor& memory,
                                       const Tensor& boxes, int grid_h,
                                       int grid_w, int samples_per_axis,
                                       const Tensor& memory_pos,
                                       const MhaParams& p,
                                       const AttentionConfig& cfg,
                                       bool retain_weights) {
  cfg.validate();
  const int K = x.extent(0);
  const int S = memory.extent(0);
  if (grid_h * grid_w != S) {
    throw ShapeError("roi_sampling_attention: grid does not match memory");
  }
  if (boxes.extent(0) != K) {
    throw ShapeError("roi_sampling_attention: one box per query required");
  }

  const Tensor keys_in = memory_pos.defined() ? add(memory, memory_pos) : memory;
  const Tensor q = affine(x, p.wq, p.bq);
  const Tensor k = affine(keys_in, p.wk, p.bk);
  const Tensor v = affine(memory, p.wv, p.bv);

  AttentionOutput result;
  result.heads = cfg.heads;
  result.queries = K;
  result.positions = S;
  if (retain_weights) {
    result.weights.assign(static_cast<std::size_t>(cfg.heads) * K * S, 0.0);
  }

  const int dh = cfg.head_width();
  const auto bv = boxes.values();
  std::vector<Tensor> per_query;
  per_query.reserve(static_cast<std::size_t>(K));
  for (int qi = 0; qi < K; ++qi) {
    const std::vector<int> cells =
        roi_sample_cells(bv[qi * 4], bv[qi * 4 + 1], bv[qi * 4 + 2],
                         bv[qi * 4 + 3], grid_h, grid_w, samples_per_axis);
    const int qrow[] = {qi};
    const Tensor qk = gather_rows(q, qrow);           // (1, d)
    const Tensor ks = gather_rows(k, cells);          // (n^2, d)
    const Tensor vs = gather_rows(v, cells);
    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<std::size_t>(cfg.heads));
    for (int m = 0; m < cfg.heads; ++m) {
      const Tensor qm = slice_last(qk, m * dh, dh);
      const Tensor km = slice_last(ks, m * dh, dh);
      const Tensor vm = slice_last(vs, m * dh, dh);
      const Tensor attn =
          softmax_last(scale(matmul(qm, transpose_last2(km)), cfg.scale()));
      if (retain_weights) {
        const auto av = attn.values();
        for (std::size_t c = 0; c < cells.size(); ++c) {
          result.weights[(static_cast<std::size_t>(m) * K + qi) * S +
                         cells[c]] += av[c];
        }
      }
      head_outs.push_back(matmul(attn, vm));
    }
    per_query.push_back(concat(head_outs, 1));  // (1, d)
  }
  const Tensor merged = concat(per_query, 0);  // (K, d)
  result.out = add(affine(merged, p.wo, p.bo), x);
  return result;
}

}  // namespace plaindet

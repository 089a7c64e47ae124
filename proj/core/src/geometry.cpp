// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#include "plaindet/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace plaindet {

void validate_box(const Box& b) {
  if (!(b.w > 0.0) || !(b.h > 0.0)) {
    throw DomainError("box has non-positive size (w=" + std::to_string(b.w) +
                      ", h=" + std::to_string(b.h) + ")");
  }
  if (!std::isfinite(b.cx) || !std::isfinite(b.cy) || !std::isfinite(b.w) ||
      !std::isfinite(b.h)) {
    throw DomainError("box has non-finite coordinates");
  }
}

double iou(const Box& a, const Box& b) {
  validate_box(a);
  validate_box(b);
  const double iw =
      std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const double ih =
      std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return inter / uni;
}

double giou(const Box& a, const Box& b) {
  validate_box(a);
  validate_box(b);
  const double iw =
      std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const double ih =
      std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  const double ew = std::max(a.x2(), b.x2()) - std::min(a.x1(), b.x1());
  const double eh = std::max(a.y2(), b.y2()) - std::min(a.y1(), b.y1());
  const double enc = ew * eh;
  return inter / uni - (enc - uni) / enc;
}

BoxDeltas reparam_deltas(const Box& g, const Box& p) {
  validate_box(g);
  validate_box(p);
  return {(g.cx - p.cx) / p.w, (g.cy - p.cy) / p.h, std::log(g.w / p.w),
          std::log(g.h / p.h)};
}

Box apply_deltas(const Box& p, const BoxDeltas& t, double grid_w,
                 double grid_h) {
  validate_box(p);
  if (!std::isfinite(t.tx) || !std::isfinite(t.ty) || !std::isfinite(t.tw) ||
      !std::isfinite(t.th)) {
    throw DomainError("apply_deltas: non-finite delta");
  }
  if (std::fabs(t.tw) > kMaxLogScale) {
    throw DomainError("apply_deltas: exp overflow in tw=" +
                      std::to_string(t.tw));
  }
  if (std::fabs(t.th) > kMaxLogScale) {
    throw DomainError("apply_deltas: exp overflow in th=" +
                      std::to_string(t.th));
  }
  Box out;
  out.cx = std::clamp(p.cx + t.tx * p.w, 0.0, grid_w);
  out.cy = std::clamp(p.cy + t.ty * p.h, 0.0, grid_h);
  out.w = std::clamp(p.w * std::exp(t.tw), kMinBoxSize, grid_w);
  out.h = std::clamp(p.h * std::exp(t.th), kMinBoxSize, grid_h);
  return out;
}

Tensor apply_deltas(const Tensor& boxes, const Tensor& deltas, double grid_w,
                    double grid_h) {
  if (boxes.rank() != 2 || boxes.extent(1) != 4 ||
      boxes.shape() != deltas.shape()) {
    throw ShapeError("apply_deltas: expected matching (K,4) tensors, got " +
                     shape_str(boxes.shape()) + " and " +
                     shape_str(deltas.shape()));
  }
  const Tensor tx = slice_last(deltas, 0, 1);
  const Tensor ty = slice_last(deltas, 1, 1);
  const Tensor tw = slice_last(deltas, 2, 1);
  const Tensor th = slice_last(deltas, 3, 1);
  for (double v : tw.values()) {
    if (std::fabs(v) > kMaxLogScale) {
      throw DomainError("apply_deltas: exp overflow in tw=" + std::to_string(v));
    }
  }
  for (double v : th.values()) {
    if (std::fabs(v) > kMaxLogScale) {
      throw DomainError("apply_deltas: exp overflow in th=" + std::to_string(v));
    }
  }
  const Tensor cx = slice_last(boxes, 0, 1);
  const Tensor cy = slice_last(boxes, 1, 1);
  const Tensor w = slice_last(boxes, 2, 1);
  const Tensor h = slice_last(boxes, 3, 1);

  const Tensor ncx = clamp(add(cx, mul(tx, w)), 0.0, grid_w);
  const Tensor ncy = clamp(add(cy, mul(ty, h)), 0.0, grid_h);
  const Tensor nw = clamp(mul(w, exp(tw)), kMinBoxSize, grid_w);
  const Tensor nh = clamp(mul(h, exp(th)), kMinBoxSize, grid_h);
  const Tensor parts[] = {ncx, ncy, nw, nh};
  return concat(parts, 1);
}

Tensor giou_pairwise(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || a.extent(1) != 4 || a.shape() != b.shape()) {
    throw ShapeError("giou_pairwise: expected matching (N,4) tensors");
  }
  auto split = [](const Tensor& t) {
    struct Cols {
      Tensor x1, y1, x2, y2, area;
    };
    const Tensor cx = slice_last(t, 0, 1);
    const Tensor cy = slice_last(t, 1, 1);
    const Tensor w = slice_last(t, 2, 1);
    const Tensor h = slice_last(t, 3, 1);
    Cols c;
    c.x1 = sub(cx, scale(w, 0.5));
    c.x2 = add(cx, scale(w, 0.5));
    c.y1 = sub(cy, scale(h, 0.5));
    c.y2 = add(cy, scale(h, 0.5));
    c.area = mul(w, h);
    return c;
  };
  const auto ca = split(a);
  const auto cb = split(b);
  const Tensor iw = relu(sub(minimum(ca.x2, cb.x2), maximum(ca.x1, cb.x1)));
  const Tensor ih = relu(sub(minimum(ca.y2, cb.y2), maximum(ca.y1, cb.y1)));
  const Tensor inter = mul(iw, ih);
  const Tensor uni = sub(add(ca.area, cb.area), inter);
  const Tensor ew = sub(maximum(ca.x2, cb.x2), minimum(ca.x1, cb.x1));
  const Tensor eh = sub(maximum(ca.y2, cb.y2), minimum(ca.y1, cb.y1));
  const Tensor enc = mul(ew, eh);
  const Tensor out = sub(div(inter, uni), div(sub(enc, uni), enc));
  return reshape(out, {a.extent(0)});
}

OffsetGrid corner_offsets(const Tensor& boxes, int grid_h, int grid_w,
                          bool normalized) {
  if (boxes.rank() != 2 || boxes.extent(1) != 4) {
    throw ShapeError("corner_offsets: expected (K,4) boxes, got " +
                     shape_str(boxes.shape()));
  }
  if (grid_h < 1 || grid_w < 1) {
    throw ShapeError("corner_offsets: grid extents must be >= 1");
  }
  const int K = boxes.extent(0);
  const double nx = normalized ? static_cast<double>(grid_w) : 1.0;
  const double ny = normalized ? static_cast<double>(grid_h) : 1.0;

  OffsetGrid og;
  og.normalized = normalized;
  og.grid_h = grid_h;
  og.grid_w = grid_w;
  og.dx1 = Tensor::zeros({K, grid_w});
  og.dx2 = Tensor::zeros({K, grid_w});
  og.dy1 = Tensor::zeros({K, grid_h});
  og.dy2 = Tensor::zeros({K, grid_h});

  const auto bv = boxes.values();
  for (int k = 0; k < K; ++k) {
    const double cx = bv[k * 4 + 0], cy = bv[k * 4 + 1];
    const double w = bv[k * 4 + 2], h = bv[k * 4 + 3];
    for (int j = 0; j < grid_w; ++j) {
      const double px = j + 0.5;
      og.dx1.values_mut()[k * grid_w + j] = (px - (cx - 0.5 * w)) / nx;
      og.dx2.values_mut()[k * grid_w + j] = (px - (cx + 0.5 * w)) / nx;
    }
    for (int i = 0; i < grid_h; ++i) {
      const double py = i + 0.5;
      og.dy1.values_mut()[k * grid_h + i] = (py - (cy - 0.5 * h)) / ny;
      og.dy2.values_mut()[k * grid_h + i] = (py - (cy + 0.5 * h)) / ny;
    }
  }

  // Offsets are affine in the box coordinates: d(dx1)/d(cx) = -1/nx,
  // d(dx1)/d(w) = +1/(2 nx); dx2 flips the size sign; dy likewise.
  const Tensor in[] = {boxes};
  auto backward_x = [boxes, K, grid_w, nx](const Tensor& out, double wsign) {
    return [boxes, out, K, grid_w, nx, wsign]() {
      if (!boxes.tracked()) return;
      auto gb = boxes.node()->grad.data();
      const auto go = out.node()->grad.data();
      for (int k = 0; k < K; ++k) {
        double s = 0.0;
        for (int j = 0; j < grid_w; ++j) s += go[k * grid_w + j];
        gb[k * 4 + 0] += -s / nx;
        gb[k * 4 + 2] += wsign * 0.5 * s / nx;
      }
    };
  };
  auto backward_y = [boxes, K, grid_h, ny](const Tensor& out, double hsign) {
    return [boxes, out, K, grid_h, ny, hsign]() {
      if (!boxes.tracked()) return;
      auto gb = boxes.node()->grad.data();
      const auto go = out.node()->grad.data();
      for (int k = 0; k < K; ++k) {
        double s = 0.0;
        for (int i = 0; i < grid_h; ++i) s += go[k * grid_h + i];
        gb[k * 4 + 1] += -s / ny;
        gb[k * 4 + 3] += hsign * 0.5 * s / ny;
      }
    };
  };
  record_op("corner_offsets_dx1", in, og.dx1, backward_x(og.dx1, +1.0));
  record_op("corner_offsets_dx2", in, og.dx2, backward_x(og.dx2, -1.0));
  record_op("corner_offsets_dy1", in, og.dy1, backward_y(og.dy1, +1.0));
  record_op("corner_offsets_dy2", in, og.dy2, backward_y(og.dy2, -1.0));
  return og;
}

}  // namespace plaindet

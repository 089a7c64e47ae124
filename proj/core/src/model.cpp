// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#include "plaindet/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "plaindet/embed.hpp"

namespace plaindet {

BiasVariant bias_variant_from_string(const std::string& s) {
  if (s == "none") return BiasVariant::kNone;
  if (s == "naive") return BiasVariant::kNaive;
  if (s == "decomposed") return BiasVariant::kDecomposed;
  if (s == "center") return BiasVariant::kCenter;
  if (s == "boxmask") return BiasVariant::kBoxMask;
  if (s == "roisample") return BiasVariant::kRoiSample;
  throw ConfigError("unknown bias variant '" + s + "'");
}

std::string to_string(BiasVariant v) {
  switch (v) {
    case BiasVariant::kNone: return "none";
    case BiasVariant::kNaive: return "naive";
    case BiasVariant::kDecomposed: return "decomposed";
    case BiasVariant::kCenter: return "center";
    case BiasVariant::kBoxMask: return "boxmask";
    case BiasVariant::kRoiSample: return "roisample";
  }
  throw ConfigError("bad bias variant enum");
}

void PipelineConfig::validate() const {
  if (patch_size < 1 || image_size < 1 || image_size % patch_size != 0) {
    throw ConfigError("pipeline: patch size must divide image size");
  }
  if (d < 8 || d % 8 != 0) {
    throw ConfigError("pipeline: model width must be a positive multiple of 8");
  }
  if (heads < 1 || d % heads != 0) {
    throw ConfigError("pipeline: head count must divide model width");
  }
  if (enc_depth < 0 || dec_depth < 1) {
    throw ConfigError("pipeline: need decoder depth >= 1");
  }
  if (queries < 1) throw ConfigError("pipeline: need at least one query");
  if (queries > tokens() || aux() > tokens()) {
    throw ConfigError("pipeline: query count exceeds number of grid cells");
  }
  if (num_classes < 1) throw ConfigError("pipeline: need at least one class");
  if (rpb_hidden < 1) throw ConfigError("pipeline: rpb hidden width >= 1");
  if (roi_samples < 1) throw ConfigError("pipeline: roi samples >= 1");
  if (key_pos != "sine" && key_pos != "none") {
    throw ConfigError("pipeline: key_pos must be 'sine' or 'none'");
  }
  bias_variant_from_string(bias);
}

void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},
                     {"patch_size", c.patch_size},
                     {"d", c.d},
                     {"heads", c.heads},
                     {"enc_depth", c.enc_depth},
                     {"dec_depth", c.dec_depth},
                     {"queries", c.queries},
                     {"num_classes", c.num_classes},
                     {"bias", c.bias},
                     {"reparam", c.reparam},
                     {"lft", c.lft},
                     {"mqs", c.mqs},
                     {"hybrid", c.hybrid},
                     {"rpb_hidden", c.rpb_hidden},
                     {"ffn_width", c.ffn_width},
                     {"key_pos", c.key_pos},
                     {"normalized_offsets", c.normalized_offsets},
                     {"roi_samples", c.roi_samples},
                     {"aux_queries", c.aux_queries}};
}

void from_json(const nlohmann::json& j, PipelineConfig& c) {
  c.image_size = j.value("image_size", c.image_size);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.d = j.value("d", c.d);
  c.heads = j.value("heads", c.heads);
  c.enc_depth = j.value("enc_depth", c.enc_depth);
  c.dec_depth = j.value("dec_depth", c.dec_depth);
  c.queries = j.value("queries", c.queries);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.bias = j.value("bias", c.bias);
  c.reparam = j.value("reparam", c.reparam);
  c.lft = j.value("lft", c.lft);
  c.mqs = j.value("mqs", c.mqs);
  c.hybrid = j.value("hybrid", c.hybrid);
  c.rpb_hidden = j.value("rpb_hidden", c.rpb_hidden);
  c.ffn_width = j.value("ffn_width", c.ffn_width);
  c.key_pos = j.value("key_pos", c.key_pos);
  c.normalized_offsets = j.value("normalized_offsets", c.normalized_offsets);
  c.roi_samples = j.value("roi_samples", c.roi_samples);
  c.aux_queries = j.value("aux_queries", c.aux_queries);
}

namespace {

// Focal-style prior: initial class probabilities near 0.01 keep the
// all-negative loss from swamping early updates.
constexpr double kClsBiasInit = -4.59511985013459;  // -log((1-0.01)/0.01)

}  // namespace

Tensor PlainDetector::BoxHead::forward(const Tensor& x) const {
  return affine(relu(affine(relu(affine(x, w1, b1)), w2, b2)), w3, b3);
}

PlainDetector::PlainDetector(PipelineConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)) {
  cfg_.validate();
  attn_cfg_ = AttentionConfig{cfg_.d, cfg_.heads};
  Rng rng(seed);
  const int d = cfg_.d;
  const int g = cfg_.grid();
  const int pvec = cfg_.patch_size * cfg_.patch_size;

  stem_w_ = store_.create_xavier("stem/w", {pvec, d}, rng);
  stem_b_ = store_.create("stem/b", {d});

  auto make_box_head = [&](const std::string& prefix) {
    BoxHead h;
    h.w1 = store_.create_xavier(prefix + "/w1", {d, d}, rng);
    h.b1 = store_.create(prefix + "/b1", {d});
    h.w2 = store_.create_xavier(prefix + "/w2", {d, d}, rng);
    h.b2 = store_.create(prefix + "/b2", {d});
    // Zero-init final layer: refinement starts from the identity delta.
    h.w3 = store_.create(prefix + "/w3", {d, 4});
    h.b3 = store_.create(prefix + "/b3", {4});
    return h;
  };

  for (int e = 0; e < cfg_.enc_depth; ++e) {
    const std::string p = "enc" + std::to_string(e);
    EncoderBlock blk;
    blk.attn = MhaParams::create(store_, p + "/attn", d, rng);
    blk.ln1_g = store_.create_const(p + "/ln1/g", {d}, 1.0);
    blk.ln1_b = store_.create(p + "/ln1/b", {d});
    blk.ffn_w1 = store_.create_xavier(p + "/ffn/w1", {d, cfg_.ffn()}, rng);
    blk.ffn_b1 = store_.create(p + "/ffn/b1", {cfg_.ffn()});
    blk.ffn_w2 = store_.create_xavier(p + "/ffn/w2", {cfg_.ffn(), d}, rng);
    blk.ffn_b2 = store_.create(p + "/ffn/b2", {d});
    blk.ln2_g = store_.create_const(p + "/ln2/g", {d}, 1.0);
    blk.ln2_b = store_.create(p + "/ln2/b", {d});
    encoder_.push_back(std::move(blk));
  }

  prop_cls_w_ = store_.create_xavier("prop/cls/w", {d, cfg_.num_classes}, rng);
  prop_cls_b_ = store_.create_const("prop/cls/b", {cfg_.num_classes},
                                    kClsBiasInit);
  prop_box_ = make_box_head("prop/box");

  content_ = store_.create_normal("query/content", {cfg_.queries, d}, 1.0, rng);
  if (cfg_.hybrid) {
    aux_content_ =
        store_.create_normal("query/aux_content", {cfg_.aux(), d}, 1.0, rng);
  }

  const BiasVariant variant = cfg_.variant();
  for (int l = 0; l < cfg_.dec_depth; ++l) {
    const std::string p = "dec" + std::to_string(l);
    DecoderLayer layer;
    layer.self_attn = MhaParams::create(store_, p + "/self", d, rng);
    layer.ln1_g = store_.create_const(p + "/ln1/g", {d}, 1.0);
    layer.ln1_b = store_.create(p + "/ln1/b", {d});
    layer.cross_attn = MhaParams::create(store_, p + "/cross", d, rng);
    layer.ln2_g = store_.create_const(p + "/ln2/g", {d}, 1.0);
    layer.ln2_b = store_.create(p + "/ln2/b", {d});
    layer.ffn_w1 = store_.create_xavier(p + "/ffn/w1", {d, cfg_.ffn()}, rng);
    layer.ffn_b1 = store_.create(p + "/ffn/b1", {cfg_.ffn()});
    layer.ffn_w2 = store_.create_xavier(p + "/ffn/w2", {cfg_.ffn(), d}, rng);
    layer.ffn_b2 = store_.create(p + "/ffn/b2", {d});
    layer.ln3_g = store_.create_const(p + "/ln3/g", {d}, 1.0);
    layer.ln3_b = store_.create(p + "/ln3/b", {d});
    layer.cls_w = store_.create_xavier(p + "/cls/w", {d, cfg_.num_classes}, rng);
    layer.cls_b = store_.create_const(p + "/cls/b", {cfg_.num_classes},
                                      kClsBiasInit);
    layer.box_head = make_box_head(p + "/box");
    // Per-layer bias meta-network parameters (not shared across layers).
    if (variant == BiasVariant::kNaive) {
      layer.rpb4 =
          RpbMlp::create(store_, p + "/rpb4", 4, cfg_.rpb_hidden, cfg_.heads, rng);
    } else if (variant == BiasVariant::kDecomposed) {
      layer.rpb_x = RpbMlp::create(store_, p + "/rpb_x", 2, cfg_.rpb_hidden,
                                   cfg_.heads, rng);
      layer.rpb_y = RpbMlp::create(store_, p + "/rpb_y", 2, cfg_.rpb_hidden,
                                   cfg_.heads, rng);
    } else if (variant == BiasVariant::kCenter) {
      layer.rpb_c = RpbMlp::create(store_, p + "/rpb_c", 2, cfg_.rpb_hidden,
                                   cfg_.heads, rng);
    }
    decoder_.push_back(std::move(layer));
  }

  grid_pos_ = grid_sine_embedding(g, g, d);
  std::vector<double> anchor_vals;
  anchor_vals.reserve(static_cast<std::size_t>(cfg_.tokens()) * 4);
  for (int i = 0; i < g; ++i) {
    for (int j = 0; j < g; ++j) {
      anchor_vals.insert(anchor_vals.end(), {j + 0.5, i + 0.5, 1.0, 1.0});
    }
  }
  anchors_ = Tensor::from_data({cfg_.tokens(), 4}, std::move(anchor_vals));
}

Tensor PlainDetector::encode(std::span<const double> image) const {
  const int S = cfg_.image_size;
  if (static_cast<std::int64_t>(image.size()) !=
      static_cast<std::int64_t>(S) * S) {
    throw ConfigError("encode: image size does not match config");
  }
  const int g = cfg_.grid();
  const int ps = cfg_.patch_size;
  Tensor patches = Tensor::zeros({cfg_.tokens(), ps * ps});
  {
    auto pv = patches.values_mut();
    for (int pi = 0; pi < g; ++pi) {
      for (int pj = 0; pj < g; ++pj) {
        double* row = pv.data() +
                      (static_cast<std::int64_t>(pi) * g + pj) * ps * ps;
        for (int y = 0; y < ps; ++y) {
          for (int x = 0; x < ps; ++x) {
            row[y * ps + x] =
                image[static_cast<std::size_t>(pi * ps + y) * S + pj * ps + x];
          }
        }
      }
    }
  }
  Tensor x = add(affine(patches, stem_w_, stem_b_), grid_pos_);
  for (const EncoderBlock& blk : encoder_) {
    x = layer_norm(self_attention(x, Tensor::zeros(x.shape()), blk.attn,
                                  attn_cfg_),
                   blk.ln1_g, blk.ln1_b);
    Tensor f = affine(relu(affine(x, blk.ffn_w1, blk.ffn_b1)), blk.ffn_w2,
                      blk.ffn_b2);
    x = layer_norm(add(x, f), blk.ln2_g, blk.ln2_b);
  }
  return x;
}

StagePrediction PlainDetector::generate_proposals(
    const Tensor& memory, int top_k, std::vector<int>* indices_out) const {
  const int S = cfg_.tokens();
  if (top_k > S) {
    throw ConfigError("generate_proposals: top_k exceeds grid cells");
  }
  const Tensor logits = affine(memory, prop_cls_w_, prop_cls_b_);
  const Tensor deltas = prop_box_.forward(memory);
  const Tensor boxes =
      apply_deltas(anchors_, deltas, cfg_.grid(), cfg_.grid());

  // Per-cell confidence = max class sigmoid; ties by lower flat index.
  std::vector<int> order(static_cast<std::size_t>(S));
  std::iota(order.begin(), order.end(), 0);
  const auto lv = logits.values();
  const int C = cfg_.num_classes;
  std::vector<double> conf(static_cast<std::size_t>(S), 0.0);
  for (int s = 0; s < S; ++s) {
    double best = -1e300;
    for (int c = 0; c < C; ++c) {
      best = std::max(best, lv[static_cast<std::size_t>(s) * C + c]);
    }
    conf[static_cast<std::size_t>(s)] = best;  // sigmoid is monotone
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return conf[a] > conf[b]; });
  order.resize(static_cast<std::size_t>(top_k));
  if (indices_out) *indices_out = order;

  return {gather_rows(logits, order), gather_rows(boxes, order)};
}

QuerySet PlainDetector::mixed_query_init(const StagePrediction& proposals,
                                         const Tensor& memory,
                                         const std::vector<int>& idx,
                                         bool aux_group) const {
  QuerySet qs;
  qs.boxes = detach(proposals.boxes);
  qs.pos = box_sine_embedding(qs.boxes, cfg_.d, cfg_.grid(), cfg_.grid());
  if (cfg_.mqs) {
    qs.content = aux_group ? aux_content_ : content_;
  } else {
    // Pure two-stage: content comes from the selected proposal features.
    qs.content = gather_rows(memory, idx);
  }
  return qs;
}

Tensor PlainDetector::decoder_cross(const DecoderLayer& layer, const Tensor& x,
                                    const Tensor& memory,
                                    const Tensor& boxes_in,
                                    std::vector<double>* weights_out) const {
  const int g = cfg_.grid();
  const Tensor mem_pos = cfg_.key_pos == "sine" ? grid_pos_ : Tensor();
  const bool retain = weights_out != nullptr;
  const BiasVariant variant = cfg_.variant();

  AttentionOutput out;
  switch (variant) {
    case BiasVariant::kNone:
      out = cross_attention(x, memory, std::nullopt, mem_pos, layer.cross_attn,
                            attn_cfg_, retain);
      break;
    case BiasVariant::kNaive: {
      OffsetGrid og = corner_offsets(boxes_in, g, g, cfg_.normalized_offsets);
      out = cross_attention(x, memory, naive_boxrpb(og, *layer.rpb4), mem_pos,
                            layer.cross_attn, attn_cfg_, retain);
      break;
    }
    case BiasVariant::kDecomposed: {
      OffsetGrid og = corner_offsets(boxes_in, g, g, cfg_.normalized_offsets);
      out = cross_attention(x, memory,
                            decomposed_boxrpb(og, *layer.rpb_x, *layer.rpb_y),
                            mem_pos, layer.cross_attn, attn_cfg_, retain);
      break;
    }
    case BiasVariant::kCenter:
      out = cross_attention(
          x, memory,
          center_rpb(boxes_in, g, g, *layer.rpb_c, cfg_.normalized_offsets),
          mem_pos, layer.cross_attn, attn_cfg_, retain);
      break;
    case BiasVariant::kBoxMask:
      out = cross_attention(x, memory, box_mask_bias(boxes_in, g, g, cfg_.heads),
                            mem_pos, layer.cross_attn, attn_cfg_, retain);
      break;
    case BiasVariant::kRoiSample:
      out = roi_sampling_attention(x, memory, boxes_in, g, g, cfg_.roi_samples,
                                   mem_pos, layer.cross_attn, attn_cfg_, retain);
      break;
  }
  if (retain) *weights_out = std::move(out.weights);
  return out.out;
}

std::vector<StagePrediction> PlainDetector::run_decoder(
    const QuerySet& queries, const Tensor& memory, AttentionDump* dump) const {
  const int g = cfg_.grid();
  Tensor x = queries.content;
  // chain: the refinement chain; its entry into each layer is detached.
  // With look-forward-twice the trace box re-applies the current delta on
  // the previous layer's undetached chain, so each layer's box loss reaches
  // one delta head further back and no further.
  Tensor chain = queries.boxes;

  if (dump) {
    dump->heads = cfg_.heads;
    dump->queries = x.extent(0);
    dump->positions = cfg_.tokens();
    dump->layers.clear();
  }

  std::vector<StagePrediction> stages;
  for (const DecoderLayer& layer : decoder_) {
    const Tensor boxes_in = detach(chain);

    x = layer_norm(self_attention(x, queries.pos, layer.self_attn, attn_cfg_),
                   layer.ln1_g, layer.ln1_b);
    std::vector<double> weights;
    Tensor cross = decoder_cross(layer, x, memory, boxes_in,
                                 dump ? &weights : nullptr);
    if (dump) dump->layers.push_back(std::move(weights));
    x = layer_norm(cross, layer.ln2_g, layer.ln2_b);
    Tensor f = affine(relu(affine(x, layer.ffn_w1, layer.ffn_b1)),
                      layer.ffn_w2, layer.ffn_b2);
    x = layer_norm(add(x, f), layer.ln3_g, layer.ln3_b);

    const Tensor logits = affine(x, layer.cls_w, layer.cls_b);
    const Tensor deltas = layer.box_head.forward(x);

    Tensor trace_box;
    if (cfg_.reparam) {
      const Tensor next_chain = apply_deltas(boxes_in, deltas, g, g);
      trace_box =
          cfg_.lft ? apply_deltas(chain, deltas, g, g) : next_chain;
      chain = next_chain;
    } else {
      // Baseline: deltas read as absolute normalized boxes via a sigmoid.
      const Tensor cx = scale(sigmoid(slice_last(deltas, 0, 1)), g);
      const Tensor cy = scale(sigmoid(slice_last(deltas, 1, 1)), g);
      const Tensor w = clamp(scale(sigmoid(slice_last(deltas, 2, 1)), g),
                             kMinBoxSize, g);
      const Tensor h = clamp(scale(sigmoid(slice_last(deltas, 3, 1)), g),
                             kMinBoxSize, g);
      const Tensor parts[] = {cx, cy, w, h};
      trace_box = concat(parts, 1);
      chain = trace_box;
    }
    stages.push_back({logits, trace_box});
  }
  return stages;
}

ForwardResult PlainDetector::forward(const Sample& sample, bool train_mode,
                                     bool retain_attn) const {
  if (sample.image_size != cfg_.image_size) {
    throw ConfigError("forward: sample size does not match config");
  }
  ForwardResult result;
  result.memory = encode(sample.image);

  std::vector<int> idx;
  result.trace.proposal = generate_proposals(result.memory, cfg_.queries, &idx);
  QuerySet qs = mixed_query_init(result.trace.proposal, result.memory, idx,
                                 /*aux_group=*/false);
  if (retain_attn) {
    result.dump.emplace();
    result.trace.layers = run_decoder(qs, result.memory, &*result.dump);
  } else {
    result.trace.layers = run_decoder(qs, result.memory);
  }

  if (train_mode && cfg_.hybrid) {
    std::vector<int> aux_idx;
    StagePrediction aux_props =
        generate_proposals(result.memory, cfg_.aux(), &aux_idx);
    QuerySet aux_qs = mixed_query_init(aux_props, result.memory, aux_idx,
                                       /*aux_group=*/true);
    result.aux_layers = run_decoder(aux_qs, result.memory);
  }
  return result;
}

std::vector<GtObject> PlainDetector::grid_gts(const Sample& sample) const {
  const double s = 1.0 / cfg_.patch_size;
  std::vector<GtObject> out;
  out.reserve(sample.gts.size());
  for (const GtObject& g : sample.gts) {
    out.push_back({g.class_id, Box{g.box.cx * s, g.box.cy * s, g.box.w * s,
                                   g.box.h * s}});
  }
  return out;
}

std::vector<Detection> PlainDetector::detections(const ForwardResult& fwd,
                                                 int image_id) const {
  const StagePrediction& last = fwd.trace.layers.back();
  const auto lv = last.logits.values();
  const auto bv = last.boxes.values();
  const int K = last.logits.extent(0);
  const int C = cfg_.num_classes;
  const double ps = cfg_.patch_size;
  std::vector<Detection> dets;
  dets.reserve(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    int best_c = 0;
    double best_logit = lv[static_cast<std::size_t>(k) * C];
    for (int c = 1; c < C; ++c) {
      const double v = lv[static_cast<std::size_t>(k) * C + c];
      if (v > best_logit) {
        best_logit = v;
        best_c = c;
      }
    }
    const double conf = 1.0 / (1.0 + std::exp(-best_logit));
    dets.push_back({image_id, best_c,
                    Box{bv[k * 4] * ps, bv[k * 4 + 1] * ps, bv[k * 4 + 2] * ps,
                        bv[k * 4 + 3] * ps},
                    conf});
  }
  return dets;
}

}  // namespace plaindet

// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "plaindet/attention.hpp"
#include "plaindet/boxrpb.hpp"
#include "plaindet/matching.hpp"
#include "plaindet/metrics.hpp"
#include "plaindet/synth.hpp"

namespace plaindet {

enum class BiasVariant { kNone, kNaive, kDecomposed, kCenter, kBoxMask, kRoiSample };

BiasVariant bias_variant_from_string(const std::string& s);
std::string to_string(BiasVariant v);

struct PipelineConfig {
  int image_size = 64;
  int patch_size = 8;
  int d = 32;
  int heads = 4;
  int enc_depth = 2;
  int dec_depth = 2;
  int queries = 16;
  int num_classes = 3;
  std::string bias = "decomposed";
  bool reparam = true;
  bool lft = true;
  bool mqs = true;
  bool hybrid = true;
  int rpb_hidden = 64;
  int ffn_width = 0;       // 0 -> 4*d
  std::string key_pos = "sine";  // sine | none
  bool normalized_offsets = true;
  int roi_samples = 2;     // per axis
  int aux_queries = 0;     // 0 -> 2*queries

  int grid() const { return image_size / patch_size; }
  int tokens() const { return grid() * grid(); }
  int ffn() const { return ffn_width > 0 ? ffn_width : 4 * d; }
  int aux() const { return aux_queries > 0 ? aux_queries : 2 * queries; }
  BiasVariant variant() const { return bias_variant_from_string(bias); }
  void validate() const;
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
void from_json(const nlohmann::json& j, PipelineConfig& c);

struct QuerySet {
  Tensor content;  // (K, d)
  Tensor pos;      // (K, d), sine embedding of the proposal boxes
  Tensor boxes;    // (K, 4), detached proposal boxes
};

struct DecoderTrace {
  StagePrediction proposal;
  std::vector<StagePrediction> layers;
};

struct AttentionDump {
  // Cross-attention weights per decoder layer, (heads, K, S) row-major.
  std::vector<std::vector<double>> layers;
  int heads = 0, queries = 0, positions = 0;

  double weight(int layer, int head, int query, int pos) const {
    return layers[static_cast<std::size_t>(layer)]
                 [(static_cast<std::size_t>(head) * queries + query) *
                      positions +
                  pos];
  }
};

struct ForwardResult {
  DecoderTrace trace;
  std::vector<StagePrediction> aux_layers;  // one-to-many group, training only
  Tensor memory;
  std::optional<AttentionDump> dump;
};

/// The plain single-scale pipeline: patch stem, dense proposal heads over the
/// encoder output, mixed query selection, and L decoder layers with biased
/// global cross-attention and iterative box refinement.
class PlainDetector {
 public:
  PlainDetector(PipelineConfig cfg, std::uint64_t seed);

  const PipelineConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  /// Patch embedding + fixed sine positions + enc_depth plain blocks.
  Tensor encode(std::span<const double> image) const;

  /// Dense per-cell class/box heads over unit anchors; top_k most confident
  /// cells selected, ties broken by lower flat index. Returns the selected
  /// stage; `indices_out` receives the chosen flat cell indices.
  StagePrediction generate_proposals(const Tensor& memory, int top_k,
                                     std::vector<int>* indices_out = nullptr) const;

  /// Static learned content (mqs) or gathered proposal features, sine
  /// position embeddings of the detached proposal boxes.
  QuerySet mixed_query_init(const StagePrediction& proposals,
                            const Tensor& memory, const std::vector<int>& idx,
                            bool aux_group) const;

  /// L decoder layers with per-layer bias recomputation and the
  /// look-forward-twice gradient contract on the box chain.
  std::vector<StagePrediction> run_decoder(const QuerySet& queries,
                                           const Tensor& memory,
                                           AttentionDump* dump = nullptr) const;

  /// Full pass. With train_mode and cfg.hybrid, also runs the auxiliary
  /// one-to-many query group through the shared decoder weights.
  ForwardResult forward(const Sample& sample, bool train_mode,
                        bool retain_attn = false) const;

  /// Ground truths of a sample converted from pixel to feature-grid units.
  std::vector<GtObject> grid_gts(const Sample& sample) const;

  /// Per-query detections (argmax class, max sigmoid confidence) from the
  /// last decoder layer, boxes scaled back to pixel units.
  std::vector<Detection> detections(const ForwardResult& fwd,
                                    int image_id) const;

 private:
  struct EncoderBlock {
    MhaParams attn;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  };
  struct BoxHead {
    Tensor w1, b1, w2, b2, w3, b3;
    Tensor forward(const Tensor& x) const;
  };
  struct DecoderLayer {
    MhaParams self_attn, cross_attn;
    Tensor ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    Tensor cls_w, cls_b;
    BoxHead box_head;
    std::optional<RpbMlp> rpb4;        // naive
    std::optional<RpbMlp> rpb_x, rpb_y;  // decomposed
    std::optional<RpbMlp> rpb_c;       // center
  };

  Tensor decoder_cross(const DecoderLayer& layer, const Tensor& x,
                       const Tensor& memory, const Tensor& boxes_in,
                       std::vector<double>* weights_out) const;

  PipelineConfig cfg_;
  ParamStore store_;
  AttentionConfig attn_cfg_;
  Tensor stem_w_, stem_b_;
  std::vector<EncoderBlock> encoder_;
  Tensor prop_cls_w_, prop_cls_b_;
  BoxHead prop_box_;
  Tensor content_, aux_content_;  // static query embeddings
  std::vector<DecoderLayer> decoder_;
  Tensor grid_pos_;    // (S, d) sine embedding of grid cells
  Tensor anchors_;     // (S, 4) unit boxes centered on cells
};

// Detection metrics over a list of (sample, forward) pairs live in train.hpp.

}  // namespace plaindet

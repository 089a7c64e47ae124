// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "plaindet/metrics.hpp"
#include "plaindet/model.hpp"
#include "plaindet/optim.hpp"
#include "plaindet/synth.hpp"

namespace plaindet {

struct OptimSettings {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double grad_clip = 0.1;  // max global gradient norm
  int epochs = 30;
  int batch_size = 8;
  double lr_drop_frac = 0.8;  // step decay x0.1 at this fraction of epochs
};

void to_json(nlohmann::json& j, const OptimSettings& s);
void from_json(const nlohmann::json& j, OptimSettings& s);
void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);
void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

/// Everything one run needs. Serializes to/from JSON losslessly; every run
/// writes its resolved config next to its outputs.
struct RunConfig {
  PipelineConfig pipeline;
  SyntheticSpec data;
  OptimSettings optim;
  LossWeights loss;
  std::uint64_t seed = 0;
  int train_samples = 512;
  int eval_samples = 128;
  std::string out_dir;  // empty: keep everything in memory

  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
  double eval_ap50 = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct TrainOutput {
  std::unique_ptr<PlainDetector> model;
  OptimState optim;
  MapResult metrics;
  std::vector<EpochLog> log;
};

/// Deterministic training run. With resume_prefix, parameters and optimizer
/// state are restored first and the step counter continues monotonically.
/// Writes checkpoint/metrics/config/loss-log into cfg.out_dir when set.
/// Aborts with NumericError naming epoch and step if the loss goes non-finite.
TrainOutput train_run(const RunConfig& cfg,
                      const std::string& resume_prefix = "");

/// Detection metrics of a model over eval samples [first, first+count) of the
/// synthetic stream.
MapResult evaluate_model(const PlainDetector& model, const SyntheticSpec& data,
                         int first_index, int count);

/// Mean cross-attention mass (last decoder layer, averaged over heads) that
/// matched queries place inside their matched ground-truth box; averaged over
/// all matched pairs of the given eval range.
double attention_focus(const PlainDetector& model, const SyntheticSpec& data,
                       int first_index, int count, const LossWeights& w);

/// Checkpoints bundle parameters, optimizer moments and the resolved config.
void save_run_checkpoint(const std::string& prefix, const PlainDetector& model,
                         const OptimState& optim, const RunConfig& cfg);
/// Restores into a model built from the same pipeline config.
void load_run_checkpoint(const std::string& prefix, PlainDetector& model,
                         OptimState& optim);

// --- attention-map dumping ---------------------------------------------------

struct AttnDumpResult {
  std::vector<std::string> files;
  nlohmann::json index;
  /// Mean over (head, query) of attention mass inside the query's own final
  /// predicted box, last decoder layer.
  double mean_inside_final_box = 0.0;
};

/// One PGM (max-normalized) plus one CSV of raw weights per
/// (layer, head, query): attn_l{layer}_h{head}_q{query}.{pgm,csv}, plus a
/// JSON index of the files.
AttnDumpResult dump_attention_maps(const PlainDetector& model,
                                   const Sample& sample,
                                   const std::string& out_dir);

// --- ablation grids ----------------------------------------------------------

struct AblationArm {
  std::string name;
  std::string bias = "decomposed";
  bool reparam = true, lft = true, mqs = true, hybrid = true;

  bool same_toggles(const AblationArm& o) const {
    return bias == o.bias && reparam == o.reparam && lft == o.lft &&
           mqs == o.mqs && hybrid == o.hybrid;
  }
};

void to_json(nlohmann::json& j, const AblationArm& a);
void from_json(const nlohmann::json& j, AblationArm& a);

/// The six-arm recipe ladder, each step enabling one more ingredient.
std::vector<AblationArm> ladder_arms();

struct ArmResult {
  AblationArm arm;
  bool ok = false;
  std::string error;
  double ap_mean = 0, ap50_mean = 0, ap75_mean = 0;
  double ap50_min = 0, ap50_max = 0;
  double wall_seconds = 0;
  std::vector<MapResult> per_seed;
};

/// Runs every arm with the shared seed set (duplicated toggle combinations
/// are dropped with a warning). Arm/seed jobs run on `parallel` worker
/// threads; each run owns its own output subdirectory under out_dir.
/// A failing arm is recorded and the table is still produced.
std::vector<ArmResult> run_ablation(const RunConfig& base,
                                    std::vector<AblationArm> arms,
                                    std::span<const std::uint64_t> seeds,
                                    const std::string& out_dir,
                                    int parallel = 2);

std::string ablation_markdown(std::span<const ArmResult> rows);
std::string ablation_csv(std::span<const ArmResult> rows);

}  // namespace plaindet

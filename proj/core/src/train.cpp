// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#include "plaindet/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <thread>

#include "plaindet/checkpoint.hpp"

namespace plaindet {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Training turns per-op NaN scanning off for throughput and checks the loss
// scalar instead; this restores the previous mode on scope exit.
struct FiniteChecksOff {
  bool prev = finite_checks_enabled();
  FiniteChecksOff() { set_finite_checks(false); }
  ~FiniteChecksOff() { set_finite_checks(prev); }
};

}  // namespace

void to_json(nlohmann::json& j, const OptimSettings& s) {
  j = nlohmann::json{{"lr", s.lr},
                     {"weight_decay", s.weight_decay},
                     {"grad_clip", s.grad_clip},
                     {"epochs", s.epochs},
                     {"batch_size", s.batch_size},
                     {"lr_drop_frac", s.lr_drop_frac}};
}

void from_json(const nlohmann::json& j, OptimSettings& s) {
  s.lr = j.value("lr", s.lr);
  s.weight_decay = j.value("weight_decay", s.weight_decay);
  s.grad_clip = j.value("grad_clip", s.grad_clip);
  s.epochs = j.value("epochs", s.epochs);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.lr_drop_frac = j.value("lr_drop_frac", s.lr_drop_frac);
}

void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = nlohmann::json{{"image_size", s.image_size},
                     {"min_objects", s.min_objects},
                     {"max_objects", s.max_objects},
                     {"min_size_frac", s.min_size_frac},
                     {"max_size_frac", s.max_size_frac},
                     {"num_classes", s.num_classes},
                     {"noise_amplitude", s.noise_amplitude},
                     {"overlap_cap", s.overlap_cap},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  s.image_size = j.value("image_size", s.image_size);
  s.min_objects = j.value("min_objects", s.min_objects);
  s.max_objects = j.value("max_objects", s.max_objects);
  s.min_size_frac = j.value("min_size_frac", s.min_size_frac);
  s.max_size_frac = j.value("max_size_frac", s.max_size_frac);
  s.num_classes = j.value("num_classes", s.num_classes);
  s.noise_amplitude = j.value("noise_amplitude", s.noise_amplitude);
  s.overlap_cap = j.value("overlap_cap", s.overlap_cap);
  s.seed = j.value("seed", s.seed);
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"cls", w.cls},
                     {"l1", w.l1},
                     {"giou", w.giou},
                     {"focal_alpha", w.focal_alpha},
                     {"focal_gamma", w.focal_gamma},
                     {"o2m_replication", w.o2m_replication},
                     {"o2m_weight", w.o2m_weight}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  w.cls = j.value("cls", w.cls);
  w.l1 = j.value("l1", w.l1);
  w.giou = j.value("giou", w.giou);
  w.focal_alpha = j.value("focal_alpha", w.focal_alpha);
  w.focal_gamma = j.value("focal_gamma", w.focal_gamma);
  w.o2m_replication = j.value("o2m_replication", w.o2m_replication);
  w.o2m_weight = j.value("o2m_weight", w.o2m_weight);
}

void RunConfig::validate() const {
  pipeline.validate();
  data.validate();
  if (pipeline.image_size != data.image_size) {
    throw ConfigError("run: pipeline and data image sizes differ");
  }
  if (pipeline.num_classes != data.num_classes) {
    throw ConfigError("run: pipeline and data class counts differ");
  }
  if (optim.epochs < 0 || optim.batch_size < 1) {
    throw ConfigError("run: invalid optimizer settings");
  }
  if (train_samples < 1 || eval_samples < 1) {
    throw ConfigError("run: need at least one train and eval sample");
  }
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"pipeline", c.pipeline}, {"data", c.data},
                     {"optim", c.optim},       {"loss", c.loss},
                     {"seed", c.seed},         {"train_samples", c.train_samples},
                     {"eval_samples", c.eval_samples}, {"out_dir", c.out_dir}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  if (j.contains("pipeline")) j.at("pipeline").get_to(c.pipeline);
  if (j.contains("data")) j.at("data").get_to(c.data);
  if (j.contains("optim")) j.at("optim").get_to(c.optim);
  if (j.contains("loss")) j.at("loss").get_to(c.loss);
  c.seed = j.value("seed", c.seed);
  c.train_samples = j.value("train_samples", c.train_samples);
  c.eval_samples = j.value("eval_samples", c.eval_samples);
  c.out_dir = j.value("out_dir", c.out_dir);
}

void save_run_checkpoint(const std::string& prefix, const PlainDetector& model,
                         const OptimState& optim, const RunConfig& cfg) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (const auto& [name, t] : model.params().entries()) {
    tensors.emplace_back("param/" + name, t);
  }
  for (const auto& [name, m] : optim.m) {
    tensors.emplace_back(
        "optim/m/" + name,
        Tensor::from_data({static_cast<int>(m.size())}, m));
  }
  for (const auto& [name, v] : optim.v) {
    tensors.emplace_back(
        "optim/v/" + name,
        Tensor::from_data({static_cast<int>(v.size())}, v));
  }
  nlohmann::json meta = {{"step", optim.step}, {"config", cfg}};
  save_checkpoint(prefix, tensors, meta);
}

void load_run_checkpoint(const std::string& prefix, PlainDetector& model,
                         OptimState& optim) {
  Checkpoint ckpt = load_checkpoint(prefix);
  optim.step = ckpt.meta.value("step", std::int64_t{0});
  for (auto& [name, t] : ckpt.tensors) {
    if (name.rfind("param/", 0) == 0) {
      const std::string pname = name.substr(6);
      if (!model.params().contains(pname)) {
        throw IoError("checkpoint parameter " + pname +
                      " unknown to this model");
      }
      Tensor dst = model.params().get(pname);
      if (dst.shape() != t.shape()) {
        throw IoError("checkpoint shape mismatch for " + pname);
      }
      std::copy(t.values().begin(), t.values().end(),
                dst.values_mut().begin());
    } else if (name.rfind("optim/m/", 0) == 0) {
      optim.m[name.substr(8)] =
          std::vector<double>(t.values().begin(), t.values().end());
    } else if (name.rfind("optim/v/", 0) == 0) {
      optim.v[name.substr(8)] =
          std::vector<double>(t.values().begin(), t.values().end());
    }
  }
}

MapResult evaluate_model(const PlainDetector& model, const SyntheticSpec& data,
                         int first_index, int count) {
  std::vector<Detection> dets;
  std::vector<GtBox> gts;
  for (int i = 0; i < count; ++i) {
    const int id = first_index + i;
    Sample s = generate(data, static_cast<std::uint64_t>(id));
    ForwardResult fwd = model.forward(s, false);
    for (Detection& d : model.detections(fwd, id)) dets.push_back(d);
    for (const GtObject& g : s.gts) gts.push_back({id, g.class_id, g.box});
  }
  return map_range(dets, gts);
}

double attention_focus(const PlainDetector& model, const SyntheticSpec& data,
                       int first_index, int count, const LossWeights& w) {
  const int g = model.config().grid();
  double total = 0.0;
  std::int64_t pairs = 0;
  for (int i = 0; i < count; ++i) {
    Sample s = generate(data, static_cast<std::uint64_t>(first_index + i));
    ForwardResult fwd = model.forward(s, false, /*retain_attn=*/true);
    const auto gts = model.grid_gts(s);
    if (gts.empty()) continue;
    const StagePrediction& last = fwd.trace.layers.back();
    const MatchResult match = hungarian(
        match_cost_matrix(last.logits, last.boxes, gts, w, g, g));
    const int last_layer = static_cast<int>(fwd.trace.layers.size()) - 1;
    for (const auto& [k, j] : match.pairs) {
      const Box& gt = gts[static_cast<std::size_t>(j)].box;
      double mass = 0.0;
      for (int m = 0; m < model.config().heads; ++m) {
        for (int gi = 0; gi < g; ++gi) {
          const double py = gi + 0.5;
          if (py < gt.y1() || py > gt.y2()) continue;
          for (int gj = 0; gj < g; ++gj) {
            const double px = gj + 0.5;
            if (px < gt.x1() || px > gt.x2()) continue;
            mass += fwd.dump->weight(last_layer, m, k, gi * g + gj);
          }
        }
      }
      total += mass / model.config().heads;
      ++pairs;
    }
  }
  return pairs == 0 ? 0.0 : total / static_cast<double>(pairs);
}

TrainOutput train_run(const RunConfig& cfg, const std::string& resume_prefix) {
  cfg.validate();
  TrainOutput out;
  out.model = std::make_unique<PlainDetector>(cfg.pipeline, cfg.seed);
  out.optim.lr = cfg.optim.lr;
  out.optim.weight_decay = cfg.optim.weight_decay;
  if (!resume_prefix.empty()) {
    load_run_checkpoint(resume_prefix, *out.model, out.optim);
  }
  PlainDetector& model = *out.model;

  std::vector<Sample> train_set;
  train_set.reserve(static_cast<std::size_t>(cfg.train_samples));
  for (int i = 0; i < cfg.train_samples; ++i) {
    train_set.push_back(generate(cfg.data, static_cast<std::uint64_t>(i)));
  }

  FiniteChecksOff guard;
  const int lr_drop_epoch =
      static_cast<int>(std::floor(cfg.optim.lr_drop_frac * cfg.optim.epochs));
  std::vector<int> order(static_cast<std::size_t>(cfg.train_samples));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    const auto t0 = Clock::now();
    out.optim.lr =
        cfg.optim.lr * (epoch >= lr_drop_epoch && cfg.optim.epochs > 0 ? 0.1 : 1.0);

    // Deterministic shuffle from a per-epoch stream.
    Rng shuffle_rng = Rng::for_index(cfg.seed ^ 0x5157AB1Eu, epoch);
    for (int i = cfg.train_samples - 1; i > 0; --i) {
      const int j = static_cast<int>(shuffle_rng.below(i + 1));
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(j)]);
    }

    double loss_sum = 0.0;
    int in_batch = 0;
    model.params().zero_grad();
    for (int n = 0; n < cfg.train_samples; ++n) {
      const Sample& sample = train_set[static_cast<std::size_t>(order[n])];
      const auto gts = model.grid_gts(sample);
      Tape tape;
      {
        TapeScope scope(tape);
        ForwardResult fwd = model.forward(sample, /*train_mode=*/true);
        std::vector<StagePrediction> stages;
        stages.push_back(fwd.trace.proposal);
        for (auto& st : fwd.trace.layers) stages.push_back(st);
        auto [loss, breakdown] = hybrid_loss(stages, fwd.aux_layers, gts,
                                             cfg.loss, model.config().grid(),
                                             model.config().grid());
        if (!std::isfinite(breakdown.total)) {
          throw NumericError("non-finite loss at epoch " +
                             std::to_string(epoch) + ", step " +
                             std::to_string(out.optim.step) + ", sample " +
                             std::to_string(order[n]));
        }
        loss_sum += breakdown.total;
        tape.backward(scale(loss, 1.0 / cfg.optim.batch_size));
      }
      if (++in_batch == cfg.optim.batch_size || n + 1 == cfg.train_samples) {
        model.params().clip_grad_norm(cfg.optim.grad_clip);
        adamw_step(out.optim, model.params());
        model.params().zero_grad();
        in_batch = 0;
      }
    }

    EpochLog log;
    log.epoch = epoch;
    log.mean_loss = loss_sum / cfg.train_samples;
    log.lr = out.optim.lr;
    log.eval_ap50 =
        evaluate_model(model, cfg.data, cfg.train_samples, cfg.eval_samples)
            .ap50;
    log.seconds = seconds_since(t0);
    out.log.push_back(log);
  }

  out.metrics =
      evaluate_model(model, cfg.data, cfg.train_samples, cfg.eval_samples);

  if (!cfg.out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(cfg.out_dir, ec);
    {
      std::ofstream f(cfg.out_dir + "/config.json", std::ios::binary);
      if (!f) throw IoError("cannot write " + cfg.out_dir + "/config.json");
      f << nlohmann::json(cfg).dump(2) << '\n';
    }
    save_run_checkpoint(cfg.out_dir + "/checkpoint", model, out.optim, cfg);
    {
      std::ofstream f(cfg.out_dir + "/metrics.json", std::ios::binary);
      f << metrics_json(out.metrics).dump(2) << '\n';
    }
    {
      std::ofstream f(cfg.out_dir + "/train_log.csv", std::ios::binary);
      f << "epoch,mean_loss,eval_ap50,lr,seconds\n";
      char line[160];
      for (const EpochLog& l : out.log) {
        std::snprintf(line, sizeof(line), "%d,%.17g,%.17g,%.17g,%.3f\n",
                      l.epoch, l.mean_loss, l.eval_ap50, l.lr, l.seconds);
        f << line;
      }
    }
  }
  return out;
}

AttnDumpResult dump_attention_maps(const PlainDetector& model,
                                   const Sample& sample,
                                   const std::string& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  ForwardResult fwd = model.forward(sample, false, /*retain_attn=*/true);
  const AttentionDump& dump = *fwd.dump;
  const int g = model.config().grid();
  const int L = static_cast<int>(dump.layers.size());

  AttnDumpResult result;
  nlohmann::json files = nlohmann::json::array();
  std::vector<double> grid(static_cast<std::size_t>(g) * g);
  for (int l = 0; l < L; ++l) {
    for (int m = 0; m < dump.heads; ++m) {
      for (int q = 0; q < dump.queries; ++q) {
        for (int p = 0; p < dump.positions; ++p) {
          grid[static_cast<std::size_t>(p)] = dump.weight(l, m, q, p);
        }
        char stem[64];
        std::snprintf(stem, sizeof(stem), "attn_l%d_h%d_q%d", l, m, q);
        const std::string pgm = out_dir + "/" + stem + ".pgm";
        const std::string csv = out_dir + "/" + stem + ".csv";
        write_pgm(pgm, grid, g, g, /*normalize_max=*/true);
        {
          std::ofstream f(csv, std::ios::binary);
          if (!f) throw IoError("cannot write " + csv);
          char num[32];
          for (int i = 0; i < g; ++i) {
            for (int j = 0; j < g; ++j) {
              std::snprintf(num, sizeof(num), "%.17g",
                            grid[static_cast<std::size_t>(i) * g + j]);
              f << num << (j + 1 == g ? '\n' : ',');
            }
          }
        }
        result.files.push_back(pgm);
        result.files.push_back(csv);
        files.push_back({{"layer", l},
                         {"head", m},
                         {"query", q},
                         {"pgm", std::string(stem) + ".pgm"},
                         {"csv", std::string(stem) + ".csv"}});
      }
    }
  }

  // Attention mass inside each query's own final box, last layer.
  const StagePrediction& last = fwd.trace.layers.back();
  const auto bv = last.boxes.values();
  nlohmann::json masses = nlohmann::json::array();
  double mean_mass = 0.0;
  for (int q = 0; q < dump.queries; ++q) {
    const Box box{bv[q * 4], bv[q * 4 + 1], bv[q * 4 + 2], bv[q * 4 + 3]};
    double mass = 0.0;
    for (int m = 0; m < dump.heads; ++m) {
      for (int i = 0; i < g; ++i) {
        const double py = i + 0.5;
        if (py < box.y1() || py > box.y2()) continue;
        for (int j = 0; j < g; ++j) {
          const double px = j + 0.5;
          if (px < box.x1() || px > box.x2()) continue;
          mass += dump.weight(L - 1, m, q, i * g + j);
        }
      }
    }
    mass /= dump.heads;
    mean_mass += mass;
    masses.push_back(mass);
  }
  mean_mass /= dump.queries;
  result.mean_inside_final_box = mean_mass;

  result.index = nlohmann::json{{"grid", g},
                                {"layers", L},
                                {"heads", dump.heads},
                                {"queries", dump.queries},
                                {"files", files},
                                {"inside_final_box_mass", masses},
                                {"mean_inside_final_box_mass", mean_mass}};
  std::ofstream f(out_dir + "/index.json", std::ios::binary);
  if (!f) throw IoError("cannot write " + out_dir + "/index.json");
  f << result.index.dump(2) << '\n';
  return result;
}

void to_json(nlohmann::json& j, const AblationArm& a) {
  j = nlohmann::json{{"name", a.name},     {"bias", a.bias},
                     {"reparam", a.reparam}, {"lft", a.lft},
                     {"mqs", a.mqs},       {"hybrid", a.hybrid}};
}

void from_json(const nlohmann::json& j, AblationArm& a) {
  a.name = j.value("name", a.name);
  a.bias = j.value("bias", a.bias);
  a.reparam = j.value("reparam", a.reparam);
  a.lft = j.value("lft", a.lft);
  a.mqs = j.value("mqs", a.mqs);
  a.hybrid = j.value("hybrid", a.hybrid);
}

std::vector<AblationArm> ladder_arms() {
  return {
      {"plain", "none", false, false, false, false},
      {"+boxrpb", "decomposed", false, false, false, false},
      {"+reparam", "decomposed", true, false, false, false},
      {"+lft", "decomposed", true, true, false, false},
      {"+mqs", "decomposed", true, true, true, false},
      {"+hybrid", "decomposed", true, true, true, true},
  };
}

std::vector<ArmResult> run_ablation(const RunConfig& base,
                                    std::vector<AblationArm> arms,
                                    std::span<const std::uint64_t> seeds,
                                    const std::string& out_dir, int parallel) {
  // Drop duplicated toggle combinations, keeping the first occurrence.
  std::vector<AblationArm> unique_arms;
  for (const AblationArm& a : arms) {
    const bool dup = std::any_of(
        unique_arms.begin(), unique_arms.end(),
        [&](const AblationArm& u) { return u.same_toggles(a); });
    if (dup) {
      std::fprintf(stderr, "warning: duplicate ablation arm '%s' dropped\n",
                   a.name.c_str());
      continue;
    }
    unique_arms.push_back(a);
  }

  struct Job {
    std::size_t arm;
    std::size_t seed_idx;
  };
  std::vector<Job> jobs;
  for (std::size_t a = 0; a < unique_arms.size(); ++a) {
    for (std::size_t s = 0; s < seeds.size(); ++s) jobs.push_back({a, s});
  }

  std::vector<ArmResult> results(unique_arms.size());
  for (std::size_t a = 0; a < unique_arms.size(); ++a) {
    results[a].arm = unique_arms[a];
    results[a].per_seed.resize(seeds.size());
  }
  std::vector<std::string> errors(jobs.size());
  std::vector<double> job_seconds(jobs.size(), 0.0);

  std::mutex next_mutex;
  std::size_t next_job = 0;
  auto worker = [&]() {
    for (;;) {
      std::size_t j;
      {
        std::lock_guard<std::mutex> lock(next_mutex);
        if (next_job >= jobs.size()) return;
        j = next_job++;
      }
      const Job& job = jobs[j];
      const AblationArm& arm = unique_arms[job.arm];
      RunConfig cfg = base;
      cfg.pipeline.bias = arm.bias;
      cfg.pipeline.reparam = arm.reparam;
      cfg.pipeline.lft = arm.lft;
      cfg.pipeline.mqs = arm.mqs;
      cfg.pipeline.hybrid = arm.hybrid;
      cfg.seed = seeds[job.seed_idx];
      cfg.data.seed = seeds[job.seed_idx];
      if (!out_dir.empty()) {
        cfg.out_dir = out_dir + "/" + arm.name + "/seed_" +
                      std::to_string(seeds[job.seed_idx]);
      } else {
        cfg.out_dir.clear();
      }
      const auto t0 = Clock::now();
      try {
        TrainOutput run = train_run(cfg);
        results[job.arm].per_seed[job.seed_idx] = run.metrics;
      } catch (const std::exception& e) {
        errors[j] = e.what();
      }
      job_seconds[j] = seconds_since(t0);
    }
  };
  std::vector<std::thread> pool;
  const int n_threads = std::max(1, parallel);
  for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  for (std::size_t j = 0; j < jobs.size(); ++j) {
    ArmResult& r = results[jobs[j].arm];
    r.wall_seconds += job_seconds[j];
    if (!errors[j].empty() && r.error.empty()) r.error = errors[j];
  }
  for (ArmResult& r : results) {
    if (!r.error.empty()) continue;
    r.ok = true;
    r.ap50_min = 1.0;
    for (const MapResult& m : r.per_seed) {
      r.ap_mean += m.ap;
      r.ap50_mean += m.ap50;
      r.ap75_mean += m.ap75;
      r.ap50_min = std::min(r.ap50_min, m.ap50);
      r.ap50_max = std::max(r.ap50_max, m.ap50);
    }
    const double n = static_cast<double>(r.per_seed.size());
    r.ap_mean /= n;
    r.ap50_mean /= n;
    r.ap75_mean /= n;
  }
  return results;
}

std::string ablation_markdown(std::span<const ArmResult> rows) {
  std::string out;
  out += "| arm | bias | reparam | lft | mqs | hybrid | AP | AP50 (min..max) "
         "| AP75 | wall s |\n";
  out += "|---|---|---|---|---|---|---|---|---|---|\n";
  char line[320];
  for (const ArmResult& r : rows) {
    if (r.ok) {
      std::snprintf(line, sizeof(line),
                    "| %s | %s | %d | %d | %d | %d | %.4f | %.4f (%.4f..%.4f) "
                    "| %.4f | %.1f |\n",
                    r.arm.name.c_str(), r.arm.bias.c_str(), r.arm.reparam,
                    r.arm.lft, r.arm.mqs, r.arm.hybrid, r.ap_mean, r.ap50_mean,
                    r.ap50_min, r.ap50_max, r.ap75_mean, r.wall_seconds);
    } else {
      std::snprintf(line, sizeof(line), "| %s | %s | %d | %d | %d | %d | "
                    "failed: %s | | | %.1f |\n",
                    r.arm.name.c_str(), r.arm.bias.c_str(), r.arm.reparam,
                    r.arm.lft, r.arm.mqs, r.arm.hybrid, r.error.c_str(),
                    r.wall_seconds);
    }
    out += line;
  }
  // Reported, not enforced.
  int up = 0, steps = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (!rows[i - 1].ok || !rows[i].ok) continue;
    ++steps;
    if (rows[i].ap50_mean >= rows[i - 1].ap50_mean) ++up;
  }
  if (steps > 0) {
    std::snprintf(line, sizeof(line),
                  "\nAP50 trend: %d/%d consecutive steps non-decreasing "
                  "(reported only).\n",
                  up, steps);
    out += line;
  }
  return out;
}

std::string ablation_csv(std::span<const ArmResult> rows) {
  std::string out =
      "arm,bias,reparam,lft,mqs,hybrid,ok,AP,AP50,AP50_min,AP50_max,AP75,"
      "wall_seconds,error\n";
  char line[320];
  for (const ArmResult& r : rows) {
    std::snprintf(line, sizeof(line),
                  "%s,%s,%d,%d,%d,%d,%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.2f,%s\n",
                  r.arm.name.c_str(), r.arm.bias.c_str(), r.arm.reparam,
                  r.arm.lft, r.arm.mqs, r.arm.hybrid, r.ok, r.ap_mean,
                  r.ap50_mean, r.ap50_min, r.ap50_max, r.ap75_mean,
                  r.wall_seconds, r.error.c_str());
    out += line;
  }
  return out;
}

}  // namespace plaindet

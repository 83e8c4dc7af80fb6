// SPDX-License-Identifier: Apache-2.0
//
// The training loop: shuffled batches, one optimizer step and one EMA update
// per batch, and per-epoch validation snapshots, metric rows and checkpoints.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "oddetr/checkpoint.hpp"
#include "oddetr/config.hpp"
#include "oddetr/ema.hpp"
#include "oddetr/metrics.hpp"
#include "oddetr/step.hpp"
#include "oddetr/synthdata.hpp"

namespace oddetr {

struct EpochRow {
  int epoch = 0;
  long step = 0;
  double loss_total = 0, loss_mqf = 0, loss_r = 0, loss_pd = 0, loss_aux = 0;
  double instability_online = 0, instability_ema = 0, consistency = 0;
  double ap50 = 0, ap = 0;
  std::uint64_t seed = 0;
};

struct DistillRow {
  int epoch = 0;
  DistillStats stats;
  double ema_ap = 0;
};

struct RunRecord {
  TrainConfig config;
  std::vector<EpochRow> rows;
  std::vector<DistillRow> distill_rows;
  ModelParams student;
  ModelParams ema;
  double wall_seconds = 0;
  /// Distillation entry points hit during the run (0 for a plain baseline).
  std::uint64_t distill_invocations = 0;
};

struct Evaluation {
  MatchSnapshot snapshot;
  ApResult ap;
};

/// Final-stage predictions on `samples`: a match snapshot over the first
/// `snapshot_scenes` and AP over all of them.
inline Evaluation evaluate_model(const ModelParams& m, std::span<const Sample> samples, const CostWeights& cost,
                                 int snapshot_scenes) {
  std::vector<PredictionSet> preds;
  std::vector<std::vector<GroundTruth>> gts;
  std::vector<MatchResult> matches;
  std::vector<std::size_t> counts;
  preds.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    preds.push_back(predict(m, samples[i].features));
    gts.push_back(samples[i].scene.objects);
    if (static_cast<int>(i) < snapshot_scenes) {
      matches.push_back(match(preds.back(), gts.back(), cost));
      counts.push_back(gts.back().size());
    }
  }
  return Evaluation{snapshot_from_matches(matches, counts), average_precision(preds, gts)};
}

inline const char* kMetricsHeader =
    "epoch,step,loss_total,loss_mqf,loss_r,loss_pd,loss_aux,instability_online,instability_ema,consistency,ap50,ap,"
    "seed";

inline std::string metrics_csv_line(const EpochRow& r) {
  std::ostringstream out;
  using detail::fmt_double;
  out << r.epoch << ',' << r.step << ',' << fmt_double(r.loss_total) << ',' << fmt_double(r.loss_mqf) << ','
      << fmt_double(r.loss_r) << ',' << fmt_double(r.loss_pd) << ',' << fmt_double(r.loss_aux) << ','
      << fmt_double(r.instability_online) << ',' << fmt_double(r.instability_ema) << ',' << fmt_double(r.consistency)
      << ',' << fmt_double(r.ap50) << ',' << fmt_double(r.ap) << ',' << r.seed;
  return out.str();
}

inline std::string metrics_csv(std::span<const EpochRow> rows) {
  std::string s = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) s += metrics_csv_line(r) + "\n";
  return s;
}

inline const char* kDistillHeader =
    "epoch,two_class_queries,higher_cost_assignments,gated_off_pd_pairs,pd_matched_pairs,aux_group_queries,ema_ap";

inline std::string distill_csv_line(const DistillRow& r) {
  std::ostringstream out;
  out << r.epoch << ',' << r.stats.two_class_queries << ',' << r.stats.higher_cost_assignments << ','
      << r.stats.gated_off_pd_pairs << ',' << r.stats.pd_matched_pairs << ',' << r.stats.aux_group_queries << ','
      << detail::fmt_double(r.ema_ap);
  return out.str();
}

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;
  bool write_checkpoints = true;
  bool verbose = false;
};

namespace detail {

inline void dump_failure(const std::optional<std::filesystem::path>& dir, const TrainConfig& cfg, int epoch, long step,
                         std::span<const Sample* const> batch, const std::string& what) {
  if (!dir) return;
  nlohmann::json j;
  j["epoch"] = epoch;
  j["step"] = step;
  j["error"] = what;
  j["config"] = to_ini(cfg);
  auto& scenes = j["scenes"] = nlohmann::json::array();
  for (const Sample* s : batch) scenes.push_back(scene_to_json(s->scene));
  std::ofstream(*dir / "failure.json") << j.dump(2) << '\n';
}

}  // namespace detail

inline RunRecord train(const TrainConfig& cfg, const Dataset& data, const TrainOptions& opts = {}) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t calls0 = detail::distill_invocations();
  RunRecord rec;
  rec.config = cfg;
  const ModelConfig mcfg = cfg.resolved_model();
  rec.student = ModelParams::init(mcfg, derive_seed(cfg.seed, 0x1417));
  EmaState ema = ema_init(rec.student, cfg.ema_decay, cfg.resolved_stop_epoch());
  MomentumSgd sgd(rec.student.size(), cfg.momentum);
  Adam adam(rec.student.size());
  std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, 0x5417F));

  std::ofstream metrics, distill_log;
  std::filesystem::path ckdir;
  if (opts.out_dir) {
    std::filesystem::create_directories(*opts.out_dir);
    std::ofstream(*opts.out_dir / "config.ini") << to_ini(cfg);
    metrics.open(*opts.out_dir / "metrics.csv");
    metrics << kMetricsHeader << '\n';
    distill_log.open(*opts.out_dir / "distill_log.csv");
    distill_log << kDistillHeader << '\n';
    ckdir = *opts.out_dir / "checkpoints";
    if (opts.write_checkpoints) std::filesystem::create_directories(ckdir);
  }

  const int snap = std::min<int>(cfg.snapshot_scenes, static_cast<int>(data.val.size()));
  Evaluation prev_online = evaluate_model(rec.student, data.val, cfg.cost, snap);
  Evaluation prev_ema = prev_online;

  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const double lr = learning_rate(cfg, epoch);
    StepLosses sum;
    DistillStats dstats;
    int steps_this_epoch = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const Sample*> batch;
      for (std::size_t k = begin; k < end; ++k) batch.push_back(&data.train[order[k]]);
      StepEvaluation ev;
      try {
        ev = evaluate_step(rec.student, cfg.distill_enabled() ? &ema.teacher : nullptr, cfg, batch);
      } catch (const NumericalError& e) {
        detail::dump_failure(opts.out_dir, cfg, epoch + 1, step, batch, e.what());
        throw;
      }
      if (cfg.optimizer == OptimizerKind::adam)
        adam.step(rec.student.data(), ev.grad, lr, cfg.grad_clip);
      else
        sgd.step(rec.student.data(), ev.grad, lr, cfg.grad_clip);
      ema_update(ema, rec.student, epoch);
      sum.total += ev.losses.total;
      sum.mqf += ev.losses.mqf;
      sum.r += ev.losses.r;
      sum.pd += ev.losses.pd;
      sum.aux += ev.losses.aux;
      dstats += ev.stats;
      ++steps_this_epoch;
      ++step;
    }

    Evaluation online = evaluate_model(rec.student, data.val, cfg.cost, snap);
    Evaluation teacher = evaluate_model(ema.teacher, data.val, cfg.cost, snap);
    EpochRow row;
    row.epoch = epoch + 1;
    row.step = step;
    const double inv = 1.0 / std::max(1, steps_this_epoch);
    row.loss_total = sum.total * inv;
    row.loss_mqf = sum.mqf * inv;
    row.loss_r = sum.r * inv;
    row.loss_pd = sum.pd * inv;
    row.loss_aux = sum.aux * inv;
    row.instability_online = instability(prev_online.snapshot, online.snapshot);
    row.instability_ema = instability(prev_ema.snapshot, teacher.snapshot);
    row.consistency = consistency(online.snapshot, teacher.snapshot);
    row.ap50 = online.ap.ap50;
    row.ap = online.ap.ap;
    row.seed = cfg.seed;
    rec.rows.push_back(row);
    rec.distill_rows.push_back({epoch + 1, dstats, teacher.ap.ap});
    prev_online = std::move(online);
    prev_ema = std::move(teacher);

    if (opts.out_dir) {
      metrics << metrics_csv_line(row) << '\n' << std::flush;
      distill_log << distill_csv_line(rec.distill_rows.back()) << '\n' << std::flush;
      const bool last = epoch + 1 == cfg.epochs;
      if (opts.write_checkpoints && ((epoch + 1) % cfg.checkpoint_every == 0 || last)) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%03d", epoch + 1);
        save_checkpoint((ckdir / (std::string("student_") + name + ".ckpt")).string(), rec.student, cfg, "student");
        save_checkpoint((ckdir / (std::string("ema_") + name + ".ckpt")).string(), ema.teacher, cfg, "ema");
      }
    }
    if (opts.verbose)
      std::fprintf(stderr, "epoch %d  loss %.4f  ap50 %.4f  ap %.4f  inst %.3f/%.3f  cons %.3f\n", row.epoch,
                   row.loss_total, row.ap50, row.ap, row.instability_online, row.instability_ema, row.consistency);
  }
  rec.ema = ema.teacher;
  rec.distill_invocations = detail::distill_invocations() - calls0;
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

inline RunRecord train(const TrainConfig& cfg, const TrainOptions& opts = {}) {
  return train(cfg, generate_dataset(cfg.data), opts);
}

}  // namespace oddetr

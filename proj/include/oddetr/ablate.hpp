// SPDX-License-Identifier: Apache-2.0
//
// Ablation presets: named configuration grids run over several seeds, and a
// comparison table built from their final metrics.

#pragma once

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "oddetr/config.hpp"
#include "oddetr/train.hpp"

namespace oddetr {

using Overrides = std::vector<std::pair<std::string, std::string>>;

struct AblationRow {
  std::string name;
  Overrides overrides;
};

struct Preset {
  std::string name;
  std::vector<AblationRow> rows;
};

inline std::vector<std::string> preset_names() {
  return {"components", "md_variants", "downweight", "pd_variants", "aux_variants", "share_decoder"};
}

inline Preset make_preset(const std::string& name) {
  const Overrides md{{"distill.md", "true"}};
  auto with = [](Overrides base, Overrides more) {
    base.insert(base.end(), more.begin(), more.end());
    return base;
  };
  const Overrides pd_su = with(md, {{"distill.pd", "true"}, {"ema.stop_update", "true"}});
  const Overrides full = with(pd_su, {{"distill.aux", "true"}});
  if (name == "components")
    return {name,
            {{"baseline", {}},
             {"md", md},
             {"md_pd", pd_su},
             {"md_ag", with(md, {{"distill.aux", "true"}})},
             {"md_pd_ag", full}}};
  if (name == "md_variants")
    return {name,
            {{"qfl_without_md", {}},
             {"conditional_md", with(md, {{"distill.md_variant", "conditional"}})},
             {"qfl_md", md}}};
  if (name == "downweight")
    return {name,
            {{"cls_only", with(md, {{"distill.md_variant", "cls_only"}})},
             {"no_wd", with(md, {{"loss.downweight_reg", "false"}})},
             {"wd_reg", md},
             {"wd_cls_reg", with(md, {{"loss.downweight_cls", "true"}})}}};
  if (name == "pd_variants") {
    const Overrides pd = with(md, {{"distill.pd", "true"}});
    return {name,
            {{"no_pd", md},
             {"naive", with(pd, {{"distill.pd_variant", "naive"}})},
             {"tood_weight", with(pd, {{"distill.pd_variant", "tood_weight"}})},
             {"tood_listen2stu", with(pd, {{"distill.pd_variant", "tood_listen2stu"}})},
             {"tood_listen2stu_stop_update", with(pd, {{"distill.pd_variant", "tood_listen2stu"}, {"ema.stop_update", "true"}})},
             {"query_prior", with(pd, {{"distill.pd_variant", "query_prior"}})}}};
  }
  if (name == "aux_variants") {
    const Overrides ag = with(md, {{"distill.aux", "true"}});
    return {name,
            {{"original_matching", with(ag, {{"distill.aux_variant", "original_matching"}})},
             {"re_matching", with(ag, {{"distill.aux_variant", "re_matching"}})},
             {"md", with(ag, {{"distill.aux_variant", "md"}})}}};
  }
  if (name == "share_decoder")
    return {name,
            {{"baseline", {{"model.share_decoder", "false"}}},
             {"baseline_shared", {{"model.share_decoder", "true"}}},
             {"od", with(full, {{"model.share_decoder", "false"}})},
             {"od_shared", with(full, {{"model.share_decoder", "true"}})}}};
  throw ConfigError("unknown preset '" + name + "'");
}

inline TrainConfig row_config(const TrainConfig& base, const AblationRow& row, std::uint64_t seed) {
  TrainConfig cfg = base;
  for (const auto& [k, v] : row.overrides) apply_override(cfg, k, v);
  cfg.seed = seed;
  cfg.validate();
  return cfg;
}

/// Final-epoch summary of one run.
struct RunSummary {
  std::string row;
  std::uint64_t seed = 0;
  double ap = 0, ap50 = 0;
  double mean_instability_online = 0, mean_instability_ema = 0;
  double final_consistency = 0, mean_consistency = 0;
  double ema_ap = 0;
};

inline RunSummary summarize(const std::string& row, const RunRecord& r) {
  RunSummary s;
  s.row = row;
  s.seed = r.config.seed;
  if (r.rows.empty()) return s;
  for (const auto& e : r.rows) {
    s.mean_instability_online += e.instability_online;
    s.mean_instability_ema += e.instability_ema;
    s.mean_consistency += e.consistency;
  }
  const double n = static_cast<double>(r.rows.size());
  s.mean_instability_online /= n;
  s.mean_instability_ema /= n;
  s.mean_consistency /= n;
  s.ap = r.rows.back().ap;
  s.ap50 = r.rows.back().ap50;
  s.final_consistency = r.rows.back().consistency;
  if (!r.distill_rows.empty()) s.ema_ap = r.distill_rows.back().ema_ap;
  return s;
}

struct AblationOptions {
  int seeds = 4;
  std::uint64_t first_seed = 0;
  int jobs = 1;  ///< ignored (forced to 1) in reference mode
  std::optional<std::filesystem::path> out_root;
  bool verbose = false;
};

/// Runs every row of a preset over the seeds. The dataset is generated once
/// and shared; runs are independent and may execute in parallel.
inline std::vector<RunSummary> ablate(const Preset& preset, const TrainConfig& base, const AblationOptions& opts) {
  struct Job {
    const AblationRow* row;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& row : preset.rows)
    for (int k = 0; k < opts.seeds; ++k) jobs.push_back({&row, opts.first_seed + static_cast<std::uint64_t>(k)});
  for (const auto& j : jobs) (void)row_config(base, *j.row, j.seed);  // fail fast on bad grids

  const Dataset data = generate_dataset(base.data);
  std::vector<RunSummary> out(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const auto& j = jobs[i];
      const TrainConfig cfg = row_config(base, *j.row, j.seed);
      TrainOptions topts;
      if (opts.out_root)
        topts.out_dir = *opts.out_root / preset.name / j.row->name / ("seed_" + std::to_string(j.seed));
      const RunRecord rec = train(cfg, data, topts);
      out[i] = summarize(j.row->name, rec);
      if (opts.verbose) {
        std::lock_guard<std::mutex> lock(log_mutex);
        std::fprintf(stderr, "[%s] %s seed %llu  ap %.4f  ap50 %.4f  (%.1f s)\n", preset.name.c_str(),
                     j.row->name.c_str(), static_cast<unsigned long long>(j.seed), out[i].ap, out[i].ap50,
                     rec.wall_seconds);
      }
    }
  };
  const int n = base.reference_mode ? 1 : std::max(1, std::min<int>(opts.jobs, static_cast<int>(jobs.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return out;
}

struct RowStats {
  std::string row;
  int runs = 0;
  double mean = 0, min = 0, max = 0;
};

/// mean/min/max of one summary field per row, in first-seen row order.
template <class F>
std::vector<RowStats> row_stats(const std::vector<RunSummary>& runs, F field) {
  std::vector<RowStats> out;
  for (const auto& r : runs) {
    auto it = std::find_if(out.begin(), out.end(), [&](const RowStats& s) { return s.row == r.row; });
    const double v = field(r);
    if (it == out.end()) {
      out.push_back({r.row, 1, v, v, v});
    } else {
      it->mean += v;
      it->min = std::min(it->min, v);
      it->max = std::max(it->max, v);
      ++it->runs;
    }
  }
  for (auto& s : out) s.mean /= s.runs;
  return out;
}

/// Markdown table: one line per row, mean [min, max] over seeds.
inline std::string comparison_table(const std::vector<RunSummary>& runs) {
  const auto ap = row_stats(runs, [](const RunSummary& r) { return r.ap; });
  const auto ap50 = row_stats(runs, [](const RunSummary& r) { return r.ap50; });
  const auto io = row_stats(runs, [](const RunSummary& r) { return r.mean_instability_online; });
  const auto ie = row_stats(runs, [](const RunSummary& r) { return r.mean_instability_ema; });
  const auto co = row_stats(runs, [](const RunSummary& r) { return r.final_consistency; });
  std::ostringstream out;
  char buf[160];
  out << "| row | seeds | AP | AP50 | instability (online) | instability (EMA) | consistency |\n";
  out << "|---|---|---|---|---|---|---|\n";
  auto cell = [&](const RowStats& s) {
    std::snprintf(buf, sizeof buf, "%.4f [%.4f, %.4f]", s.mean, s.min, s.max);
    return std::string(buf);
  };
  for (std::size_t i = 0; i < ap.size(); ++i)
    out << "| " << ap[i].row << " | " << ap[i].runs << " | " << cell(ap[i]) << " | " << cell(ap50[i]) << " | "
        << cell(io[i]) << " | " << cell(ie[i]) << " | " << cell(co[i]) << " |\n";
  return out.str();
}

inline std::string summaries_csv(const std::vector<RunSummary>& runs) {
  std::ostringstream out;
  out << "row,seed,ap,ap50,mean_instability_online,mean_instability_ema,final_consistency,mean_consistency,ema_ap\n";
  using detail::fmt_double;
  for (const auto& r : runs)
    out << r.row << ',' << r.seed << ',' << fmt_double(r.ap) << ',' << fmt_double(r.ap50) << ','
        << fmt_double(r.mean_instability_online) << ',' << fmt_double(r.mean_instability_ema) << ','
        << fmt_double(r.final_consistency) << ',' << fmt_double(r.mean_consistency) << ',' << fmt_double(r.ema_ap)
        << '\n';
  return out.str();
}

}  // namespace oddetr

// SPDX-License-Identifier: Apache-2.0
//
// Rebuilds comparison tables from run directories on disk. A run directory is
// any directory holding a metrics.csv; its row label is the path of its
// parent relative to the scanned root (".../<preset>/<row>/seed_<n>").

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "oddetr/ablate.hpp"
#include "oddetr/train.hpp"

namespace oddetr {

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

}  // namespace detail

inline std::vector<EpochRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kMetricsHeader) throw std::runtime_error(path.string() + ": unexpected metrics header");
  std::vector<EpochRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto c = detail::split_csv(line);
    if (c.size() != 13) throw std::runtime_error(path.string() + ": malformed row");
    EpochRow r;
    r.epoch = std::stoi(c[0]);
    r.step = std::stol(c[1]);
    r.loss_total = std::stod(c[2]);
    r.loss_mqf = std::stod(c[3]);
    r.loss_r = std::stod(c[4]);
    r.loss_pd = std::stod(c[5]);
    r.loss_aux = std::stod(c[6]);
    r.instability_online = std::stod(c[7]);
    r.instability_ema = std::stod(c[8]);
    r.consistency = std::stod(c[9]);
    r.ap50 = std::stod(c[10]);
    r.ap = std::stod(c[11]);
    r.seed = std::stoull(c[12]);
    rows.push_back(r);
  }
  return rows;
}

struct RunOnDisk {
  std::string row;
  std::filesystem::path dir;
  RunRecord record;  ///< metric rows only
};

inline std::vector<RunOnDisk> scan_runs(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw std::runtime_error(root.string() + " is not a directory");
  std::vector<RunOnDisk> runs;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.path().filename() != "metrics.csv") continue;
    RunOnDisk r;
    r.dir = e.path().parent_path();
    const fs::path parent = r.dir.parent_path();
    r.row = parent == root ? r.dir.filename().string() : fs::relative(parent, root).generic_string();
    r.record.rows = read_metrics_csv(e.path());
    const fs::path dlog = r.dir / "distill_log.csv";
    if (fs::exists(dlog)) {
      std::ifstream in(dlog);
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line))
        if (!line.empty()) {
          const auto c = detail::split_csv(line);
          DistillRow d;
          d.epoch = std::stoi(c.at(0));
          d.ema_ap = std::stod(c.at(6));
          r.record.distill_rows.push_back(d);
        }
    }
    if (!r.record.rows.empty()) r.record.config.seed = r.record.rows.front().seed;
    runs.push_back(std::move(r));
  }
  std::sort(runs.begin(), runs.end(), [](const RunOnDisk& a, const RunOnDisk& b) { return a.dir < b.dir; });
  return runs;
}

/// Plot-ready long-format CSV: one line per (run, epoch).
inline std::string curves_csv(const std::vector<RunOnDisk>& runs) {
  std::ostringstream out;
  out << "row," << kMetricsHeader << '\n';
  for (const auto& r : runs)
    for (const auto& e : r.record.rows) out << r.row << ',' << metrics_csv_line(e) << '\n';
  return out.str();
}

inline std::vector<RunSummary> summarize_runs(const std::vector<RunOnDisk>& runs) {
  std::vector<RunSummary> out;
  for (const auto& r : runs) out.push_back(summarize(r.row, r.record));
  return out;
}

}  // namespace oddetr

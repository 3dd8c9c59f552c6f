// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "qatlab/qc.hpp"

namespace qatlab {

struct ReportRow {
  std::string bits;    // "w3a3"
  std::string method;  // plain | dampening | ema | ema+qc | ...
  std::size_t n = 0;   // 0 marks an absent cell
  double acc_mean = 0.0;
  double acc_std = 0.0;  // sample standard deviation, 0 for n == 1
  double loss_mean = 0.0;
  double loss_std = 0.0;
};

struct ReportTable {
  std::vector<ReportRow> rows;
};

/// Collects "results" from every successful manifest.json found under the
/// given directories and groups them by (bits, method). Bit groups run from
/// wide to narrow; methods follow plain, dampening, ema, ema+qc, then any
/// others. A method seen in one bit group but not another yields an absent
/// row there. Missing directories are skipped.
ReportTable build_report(const std::vector<std::string>& run_dirs);

void write_report_csv(const std::string& path, const ReportTable& t);

/// Rows per-tensor / per-channel, columns scale-only, shift-only, both
/// (eval accuracy and loss), plus the uncorrected baseline.
void write_ablation_csv(const std::string& path, const AblationTable& t);

}  // namespace qatlab

// SPDX-License-Identifier: Apache-2.0
#include "qatlab/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

#include "qatlab/error.hpp"
#include "qatlab/experiment.hpp"

namespace qatlab {

namespace fs = std::filesystem;

namespace {

struct Samples {
  std::vector<double> acc, loss;
};

int method_rank(const std::string& m) {
  static const char* order[] = {"plain", "dampening", "ema", "ema+qc"};
  for (int i = 0; i < 4; ++i)
    if (m == order[i]) return i;
  return 4;
}

// "w3a4" -> (3, 4); unknown labels sort last.
std::pair<int, int> bits_key(const std::string& b) {
  int w = -1, a = -1;
  if (std::sscanf(b.c_str(), "w%da%d", &w, &a) != 2) return {-1, -1};
  return {w, a};
}

void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  sd = 0.0;
  if (v.size() < 2) return;
  for (double x : v) sd += (x - mean) * (x - mean);
  sd = std::sqrt(sd / static_cast<double>(v.size() - 1));
}

void collect(const fs::path& manifest, std::map<std::pair<std::string, std::string>, Samples>& groups) {
  std::ifstream in(manifest);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(manifest.string() + ": " + e.what());
  }
  if (j.value("status", "") != "ok" || !j.contains("summary")) return;
  const auto& s = j.at("summary");
  if (!s.contains("results")) return;
  for (const auto& r : s.at("results")) {
    auto& g = groups[{r.at("bits").get<std::string>(), r.at("method").get<std::string>()}];
    g.acc.push_back(r.at("eval_acc").get<double>());
    g.loss.push_back(r.at("eval_loss").get<double>());
  }
}

}  // namespace

ReportTable build_report(const std::vector<std::string>& run_dirs) {
  std::map<std::pair<std::string, std::string>, Samples> groups;
  std::vector<fs::path> manifests;
  for (const auto& d : run_dirs) {
    const fs::path p(d);
    if (!fs::exists(p)) continue;
    if (fs::is_regular_file(p)) {
      manifests.push_back(p);
      continue;
    }
    for (const auto& e : fs::recursive_directory_iterator(p)) {
      if (e.is_regular_file() && e.path().filename() == "manifest.json") manifests.push_back(e.path());
    }
  }
  std::sort(manifests.begin(), manifests.end());
  manifests.erase(std::unique(manifests.begin(), manifests.end()), manifests.end());
  for (const auto& m : manifests) collect(m, groups);

  std::vector<std::string> bits, methods;
  for (const auto& [k, v] : groups) {
    if (std::find(bits.begin(), bits.end(), k.first) == bits.end()) bits.push_back(k.first);
    if (std::find(methods.begin(), methods.end(), k.second) == methods.end()) methods.push_back(k.second);
  }
  std::sort(bits.begin(), bits.end(), [](const std::string& a, const std::string& b) {
    const auto ka = bits_key(a), kb = bits_key(b);
    return ka != kb ? ka > kb : a < b;
  });
  std::sort(methods.begin(), methods.end(), [](const std::string& a, const std::string& b) {
    const int ra = method_rank(a), rb = method_rank(b);
    return ra != rb ? ra < rb : a < b;
  });

  ReportTable t;
  for (const auto& b : bits) {
    for (const auto& m : methods) {
      ReportRow row;
      row.bits = b;
      row.method = m;
      const auto it = groups.find({b, m});
      if (it != groups.end()) {
        row.n = it->second.acc.size();
        mean_std(it->second.acc, row.acc_mean, row.acc_std);
        mean_std(it->second.loss, row.loss_mean, row.loss_std);
      }
      t.rows.push_back(row);
    }
  }
  return t;
}

void write_report_csv(const std::string& path, const ReportTable& t) {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write '" + path + "'");
  out << "bits,method,n,eval_acc_mean,eval_acc_std,eval_loss_mean,eval_loss_std\n";
  for (const auto& r : t.rows) {
    out << r.bits << ',' << r.method << ',' << r.n;
    if (r.n == 0) {
      out << ",,,,\n";
    } else {
      out << ',' << fmt_num(r.acc_mean) << ',' << fmt_num(r.acc_std) << ',' << fmt_num(r.loss_mean) << ','
          << fmt_num(r.loss_std) << '\n';
    }
  }
}

void write_ablation_csv(const std::string& path, const AblationTable& t) {
  std::ofstream out(path);
  if (!out) throw ArgumentError("cannot write '" + path + "'");
  out << "granularity,scale_acc,shift_acc,both_acc,scale_loss,shift_loss,both_loss\n";
  out << "none," << fmt_num(t.baseline.accuracy) << ',' << fmt_num(t.baseline.accuracy) << ','
      << fmt_num(t.baseline.accuracy) << ',' << fmt_num(t.baseline.loss) << ',' << fmt_num(t.baseline.loss) << ','
      << fmt_num(t.baseline.loss) << '\n';
  for (Granularity g : {Granularity::PerTensor, Granularity::PerChannel}) {
    std::vector<const AblationCell*> row;
    for (QCVariant v : {QCVariant::ScaleOnly, QCVariant::ShiftOnly, QCVariant::Both}) {
      const AblationCell* c = nullptr;
      for (const auto& cell : t.cells)
        if (cell.granularity == g && cell.variant == v) c = &cell;
      row.push_back(c);
    }
    if (std::all_of(row.begin(), row.end(), [](auto* c) { return c == nullptr; })) continue;
    out << to_string(g);
    for (auto* c : row) out << ',' << (c ? fmt_num(c->eval.accuracy) : "");
    for (auto* c : row) out << ',' << (c ? fmt_num(c->eval.loss) : "");
    out << '\n';
  }
}

}  // namespace qatlab

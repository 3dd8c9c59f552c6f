// SPDX-License-Identifier: Apache-2.0
#include "qatlab/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "qatlab/error.hpp"

namespace qatlab {

using nlohmann::ordered_json;

namespace {

// Reads typed fields from one JSON object, collecting problems instead of
// throwing, and reports keys nobody asked for.
class Reader {
 public:
  Reader(const ordered_json& j, std::string path, std::vector<std::string>& issues)
      : j_(j), path_(std::move(path)), issues_(issues) {
    if (!j_.is_object()) issues_.push_back(where("") + "expected an object");
  }

  template <typename T>
  void field(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      issues_.push_back(where(key) + "has the wrong type (got " + std::string(j_.at(key).type_name()) + ")");
    }
  }

  const ordered_json* object(const char* key) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return nullptr;
    return &j_.at(key);
  }

  std::string child(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() {
    if (!j_.is_object()) return;
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) issues_.push_back(where(it.key()) + "unknown key");
    }
  }

 private:
  std::string where(const std::string& key) const {
    const std::string p = key.empty() ? path_ : child(key.c_str());
    return (p.empty() ? std::string("<root>") : p) + ": ";
  }

  const ordered_json& j_;
  std::string path_;
  std::vector<std::string>& issues_;
  std::set<std::string> seen_;
};

void read_dataset(const ordered_json& j, DatasetConfig& d, std::vector<std::string>& issues) {
  Reader r(j, "dataset", issues);
  r.field("kind", d.kind);
  r.field("n", d.n);
  r.field("classes", d.classes);
  r.field("dim", d.dim);
  r.field("teacher_hidden", d.teacher_hidden);
  r.field("teacher_out", d.teacher_out);
  r.field("noise", d.noise);
  r.field("separation", d.separation);
  r.field("image_size", d.image_size);
  r.field("eval_fraction", d.eval_fraction);
  r.field("calib_fraction", d.calib_fraction);
  r.field("path", d.path);
  r.field("labels_path", d.labels_path);
  r.field("target", d.target);
  r.finish();
}

void read_network(const ordered_json& j, NetworkConfig& n, std::vector<std::string>& issues) {
  Reader r(j, "network", issues);
  r.field("name", n.name);
  r.field("activation", n.activation);
  r.field("width", n.width);
  r.field("hidden", n.hidden);
  r.field("batch_norm", n.batch_norm);
  r.finish();
}

void read_ema(const ordered_json& j, EmaConfig& e, std::vector<std::string>& issues) {
  Reader r(j, "ema", issues);
  r.field("on", e.on);
  r.field("alpha", e.alpha);
  r.field("warmup", e.warmup);
  r.finish();
}

void read_qc(const ordered_json& j, QCOptions& q, std::vector<std::string>& issues) {
  Reader r(j, "qc", issues);
  r.field("lr", q.lr);
  r.field("granularity", q.granularity);
  r.field("use_scale", q.use_scale);
  r.field("use_shift", q.use_shift);
  r.field("epochs", q.epochs);
  r.field("batch", q.batch);
  r.field("source", q.source);
  r.finish();
}

void read_toy(const ordered_json& j, ToyConfig& t, std::vector<std::string>& issues) {
  Reader r(j, "toy", issues);
  r.field("steps", t.steps);
  r.field("lr", t.lr);
  r.field("bits_w", t.bits_w);
  r.field("bits_x", t.bits_x);
  r.field("signed_w", t.signed_w);
  r.field("batch", t.batch);
  r.field("ema_alpha", t.ema_alpha);
  r.field("tail_steps", t.tail_steps);
  r.field("ema", t.ema);
  r.finish();
}

bool one_of(const std::string& v, std::initializer_list<const char*> opts) {
  for (const char* o : opts)
    if (v == o) return true;
  return false;
}

}  // namespace

ExperimentConfig config_from_json(const ordered_json& j) {
  ExperimentConfig c;
  std::vector<std::string> issues;
  Reader r(j, "", issues);
  r.field("task", c.task);
  if (const auto* s = r.object("dataset")) read_dataset(*s, c.dataset, issues);
  if (const auto* s = r.object("network")) read_network(*s, c.network, issues);
  r.field("bits_w", c.bits_w);
  r.field("bits_a", c.bits_a);
  r.field("first_last_bits", c.first_last_bits);
  r.field("granularity", c.granularity);
  r.field("pretrain_epochs", c.pretrain_epochs);
  r.field("pretrain_lr", c.pretrain_lr);
  r.field("epochs", c.epochs);
  r.field("batch", c.batch);
  r.field("lr", c.lr);
  if (const auto* s = r.object("ema")) read_ema(*s, c.ema, issues);
  r.field("dampening", c.dampening);
  if (const auto* s = r.object("qc")) read_qc(*s, c.qc, issues);
  if (const auto* s = r.object("toy")) read_toy(*s, c.toy, issues);
  r.field("soft_k", c.soft_k);
  r.field("flip_window", c.flip_window);
  r.field("seeds", c.seeds);
  r.field("output_dir", c.output_dir);
  r.field("checkpoint", c.checkpoint);
  r.field("runs", c.runs);
  r.field("label", c.label);
  r.finish();
  if (!issues.empty()) throw ConfigError(issues);
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  std::vector<std::string> e;
  if (!one_of(task, {"toy", "train", "qc", "fold", "ablate", "eval", "report"})) {
    e.push_back("task: must be one of toy, train, qc, fold, ablate, eval, report (got '" + task + "')");
  }
  if (!one_of(dataset.kind, {"patterns", "blobs", "spirals", "regression", "csv", "idx"})) {
    e.push_back("dataset.kind: unknown kind '" + dataset.kind + "'");
  }
  if (dataset.n == 0) e.push_back("dataset.n: must be positive");
  if (dataset.classes < 2) e.push_back("dataset.classes: must be >= 2");
  if (!(dataset.eval_fraction >= 0.0 && dataset.eval_fraction < 1.0)) e.push_back("dataset.eval_fraction: must be in [0, 1)");
  if (!(dataset.calib_fraction > 0.0 && dataset.calib_fraction <= 1.0)) e.push_back("dataset.calib_fraction: must be in (0, 1]");
  if (!(dataset.noise >= 0.0)) e.push_back("dataset.noise: must be >= 0");
  if (dataset.kind == "csv" && dataset.path.empty()) e.push_back("dataset.path: required for csv datasets");
  if (dataset.kind == "idx" && (dataset.path.empty() || dataset.labels_path.empty())) {
    e.push_back("dataset.path / dataset.labels_path: required for idx datasets");
  }
  if (!one_of(network.name, {"cnn", "mlp"})) e.push_back("network.name: must be cnn or mlp");
  if (!one_of(network.activation, {"relu", "silu", "none"})) e.push_back("network.activation: must be relu, silu or none");
  if (network.width == 0) e.push_back("network.width: must be positive");
  if (bits_w < 1 || bits_w > 16) e.push_back("bits_w: must be in [1, 16]");
  if (bits_a < 1 || bits_a > 16) e.push_back("bits_a: must be in [1, 16]");
  if (first_last_bits < 0 || first_last_bits > 16) e.push_back("first_last_bits: must be 0 (off) or in [1, 16]");
  if (!one_of(granularity, {"per_tensor", "per_channel"})) e.push_back("granularity: must be per_tensor or per_channel");
  if (batch == 0) e.push_back("batch: must be positive");
  if (!(lr > 0.0)) e.push_back("lr: must be positive");
  if (!(pretrain_lr > 0.0)) e.push_back("pretrain_lr: must be positive");
  if (!(ema.alpha >= 0.0 && ema.alpha < 1.0)) e.push_back("ema.alpha: must be in [0, 1)");
  if (!(ema.warmup >= 0.0 && ema.warmup <= 1.0)) e.push_back("ema.warmup: must be in [0, 1]");
  if (!(dampening >= 0.0)) e.push_back("dampening: must be >= 0");
  if (!(qc.lr > 0.0)) e.push_back("qc.lr: must be positive");
  if (!one_of(qc.granularity, {"per_tensor", "per_channel"})) e.push_back("qc.granularity: must be per_tensor or per_channel");
  if (qc.epochs == 0) e.push_back("qc.epochs: must be positive");
  if (qc.batch == 0) e.push_back("qc.batch: must be positive");
  if (!one_of(qc.source, {"ema", "live"})) e.push_back("qc.source: must be ema or live");
  if (toy.steps == 0) e.push_back("toy.steps: must be positive");
  if (!(toy.lr > 0.0)) e.push_back("toy.lr: must be positive");
  if (toy.bits_w < 1 || toy.bits_x < 1) e.push_back("toy.bits_w / toy.bits_x: must be >= 1");
  if (toy.batch == 0) e.push_back("toy.batch: must be positive");
  if (!(toy.ema_alpha >= 0.0 && toy.ema_alpha < 1.0)) e.push_back("toy.ema_alpha: must be in [0, 1)");
  if (toy.tail_steps < 2) e.push_back("toy.tail_steps: must be >= 2");
  if (!(soft_k > 0.0 && soft_k <= 0.5)) e.push_back("soft_k: must be in (0, 0.5]");
  if (flip_window == 1) e.push_back("flip_window: must be 0 (whole run) or >= 2");
  if (seeds.empty()) e.push_back("seeds: at least one seed is required");
  if (one_of(task, {"qc", "fold", "eval", "ablate"}) && checkpoint.empty()) {
    e.push_back("checkpoint: required for task '" + task + "'");
  }
  if (!e.empty()) throw ConfigError(e);
}

Granularity ExperimentConfig::weight_granularity() const { return granularity_from_string(granularity); }

std::string ExperimentConfig::method() const {
  if (!label.empty()) return label;
  if (dampening > 0.0) return "dampening";
  if (ema.on) return "ema";
  return "plain";
}

ordered_json config_to_json(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  const auto& n = c.network;
  return ordered_json{
      {"task", c.task},
      {"dataset",
       {{"kind", d.kind}, {"n", d.n}, {"classes", d.classes}, {"dim", d.dim},
        {"teacher_hidden", d.teacher_hidden}, {"teacher_out", d.teacher_out}, {"noise", d.noise},
        {"separation", d.separation}, {"image_size", d.image_size}, {"eval_fraction", d.eval_fraction},
        {"calib_fraction", d.calib_fraction}, {"path", d.path}, {"labels_path", d.labels_path},
        {"target", d.target}}},
      {"network",
       {{"name", n.name}, {"activation", n.activation}, {"width", n.width}, {"hidden", n.hidden},
        {"batch_norm", n.batch_norm}}},
      {"bits_w", c.bits_w},
      {"bits_a", c.bits_a},
      {"first_last_bits", c.first_last_bits},
      {"granularity", c.granularity},
      {"pretrain_epochs", c.pretrain_epochs},
      {"pretrain_lr", c.pretrain_lr},
      {"epochs", c.epochs},
      {"batch", c.batch},
      {"lr", c.lr},
      {"ema", {{"on", c.ema.on}, {"alpha", c.ema.alpha}, {"warmup", c.ema.warmup}}},
      {"dampening", c.dampening},
      {"qc",
       {{"lr", c.qc.lr}, {"granularity", c.qc.granularity}, {"use_scale", c.qc.use_scale},
        {"use_shift", c.qc.use_shift}, {"epochs", c.qc.epochs}, {"batch", c.qc.batch},
        {"source", c.qc.source}}},
      {"toy",
       {{"steps", c.toy.steps}, {"lr", c.toy.lr}, {"bits_w", c.toy.bits_w}, {"bits_x", c.toy.bits_x},
        {"signed_w", c.toy.signed_w}, {"batch", c.toy.batch}, {"ema_alpha", c.toy.ema_alpha},
        {"tail_steps", c.toy.tail_steps}, {"ema", c.toy.ema}}},
      {"soft_k", c.soft_k},
      {"flip_window", c.flip_window},
      {"seeds", c.seeds},
      {"output_dir", c.output_dir},
      {"checkpoint", c.checkpoint},
      {"runs", c.runs},
      {"label", c.label}};
}

ordered_json read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"config: cannot open '" + path + "'"});
  ordered_json j;
  try {
    j = ordered_json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError({"config: " + path + " is not valid JSON: " + e.what()});
  }
  if (j.is_object() && j.contains("manifest_version") && j.contains("config")) return j.at("config");
  return j;
}

void apply_overrides(ordered_json& j, const std::vector<std::string>& overrides) {
  std::vector<std::string> issues;
  if (!j.is_object()) j = ordered_json::object();
  for (std::string o : overrides) {
    if (o.starts_with("--")) o = o.substr(2);
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) {
      issues.push_back("override '" + o + "': expected key=value");
      continue;
    }
    const std::string key = o.substr(0, eq), raw = o.substr(eq + 1);
    ordered_json value;
    try {
      value = ordered_json::parse(raw);
    } catch (const nlohmann::json::parse_error&) {
      value = raw;
    }
    ordered_json* node = &j;
    std::stringstream ks(key);
    std::string part, last;
    std::vector<std::string> parts;
    while (std::getline(ks, part, '.')) parts.push_back(part);
    bool ok = true;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      ordered_json& next = (*node)[parts[i]];
      if (next.is_null()) next = ordered_json::object();
      if (!next.is_object()) {
        issues.push_back("override '" + key + "': '" + parts[i] + "' is not an object");
        ok = false;
        break;
      }
      node = &next;
    }
    if (ok) (*node)[parts.back()] = value;
  }
  if (!issues.empty()) throw ConfigError(issues);
}

std::string config_hash(const ExperimentConfig& c) {
  const std::string s = config_to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace qatlab

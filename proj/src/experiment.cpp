// SPDX-License-Identifier: Apache-2.0
#include "qatlab/experiment.hpp"

#include <charconv>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "qatlab/checkpoint.hpp"
#include "qatlab/error.hpp"
#include "qatlab/models.hpp"
#include "qatlab/oscillation.hpp"
#include "qatlab/qc.hpp"
#include "qatlab/report.hpp"

namespace qatlab {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::string fmt_num(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

namespace {

// Stream ids forked from the run seed.
constexpr std::uint64_t kStreamInit = 11;

class Csv {
 public:
  Csv(const fs::path& p, const std::vector<std::string>& header) : out_(p) {
    if (!out_) throw ArgumentError("cannot write '" + p.string() + "'");
    row(header);
  }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

void write_json(const fs::path& p, const ordered_json& j) {
  std::ofstream out(p);
  if (!out) throw ArgumentError("cannot write '" + p.string() + "'");
  out << j.dump(2) << '\n';
}

std::string bits_label(const ExperimentConfig& c) {
  return "w" + std::to_string(c.bits_w) + "a" + std::to_string(c.bits_a);
}

ordered_json result_entry(const std::string& method, const ExperimentConfig& c, const EvalResult& e) {
  return ordered_json{{"method", method},
                      {"bits", bits_label(c)},
                      {"eval_loss", e.loss},
                      {"eval_acc", e.accuracy}};
}

struct LoadedModel {
  NetworkSpec net;
  std::optional<EMAState> ema;
  ExperimentConfig train_cfg;
  std::uint64_t seed = 0;
};

LoadedModel load_model(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  LoadedModel m;
  m.net = network_from_checkpoint(ck);
  m.ema = ema_from_checkpoint(ck);
  m.train_cfg = config_from_json(ck.config);
  m.seed = m.train_cfg.seeds.at(0);
  return m;
}

std::string checkpoint_for_seed(const std::string& pattern, std::uint64_t seed) {
  // "{seed}" in the checkpoint path selects one file per seed.
  std::string p = pattern;
  const auto pos = p.find("{seed}");
  if (pos != std::string::npos) p.replace(pos, 6, std::to_string(seed));
  return p;
}

ordered_json task_toy(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  ToyProblem p = ToyProblem::paper_like();
  p.steps = cfg.toy.steps;
  p.lr = cfg.toy.lr;
  p.bits_w = cfg.toy.bits_w;
  p.bits_x = cfg.toy.bits_x;
  p.signed_w = cfg.toy.signed_w;
  p.batch_size = cfg.toy.batch;
  p.ema_alpha = cfg.toy.ema_alpha;
  p.tail_steps = cfg.toy.tail_steps;
  Rng rng(seed);
  const ToyResult r = run_toy(p, cfg.toy.ema, rng);
  {
    Csv csv(dir / "metrics.csv", {"iter", "w_0", "w_1", "w_2", "q_w_0", "q_w_1", "q_w_2", "s_w", "s_x", "loss", "flips"});
    for (const auto& s : r.trace) {
      csv.row({std::to_string(s.iter), fmt_num(s.w[0]), fmt_num(s.w[1]), fmt_num(s.w[2]), fmt_num(s.q_w[0]),
               fmt_num(s.q_w[1]), fmt_num(s.q_w[2]), fmt_num(s.s_w), fmt_num(s.s_x), fmt_num(s.loss),
               std::to_string(s.flips)});
    }
  }
  ordered_json summary{{"final_loss", r.final_loss}, {"live_tail_loss", r.live_tail_loss}};
  const auto tail = std::min(p.tail_steps, r.trace.size());
  summary["tail_flip_frequency"] = toy_tail_flip_frequency(r.trace, tail, false);
  if (cfg.toy.ema) {
    Csv csv(dir / "ema_trace.csv", {"iter", "ema_w_0", "ema_w_1", "ema_w_2", "ema_code_0", "ema_code_1", "ema_code_2", "ema_s_w", "ema_s_x"});
    for (const auto& s : r.trace) {
      csv.row({std::to_string(s.iter), fmt_num(s.ema_w[0]), fmt_num(s.ema_w[1]), fmt_num(s.ema_w[2]),
               std::to_string(s.ema_code[0]), std::to_string(s.ema_code[1]), std::to_string(s.ema_code[2]),
               fmt_num(s.ema_s_w), fmt_num(s.ema_s_x)});
    }
    summary["final_ema_loss"] = r.final_ema_loss;
    summary["ema_tail_flip_frequency"] = toy_tail_flip_frequency(r.trace, tail, true);
  }
  return summary;
}

ordered_json task_train(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  const PipelineResult pr = train_pipeline(cfg, seed);
  {
    Csv csv(dir / "metrics.csv", {"epoch", "iterations", "train_loss", "penalty", "eval_loss", "eval_acc",
                                  "ema_eval_loss", "ema_eval_acc", "mean_flip_frequency"});
    for (const auto& m : pr.qat.history) {
      csv.row({std::to_string(m.epoch), std::to_string(m.iterations), fmt_num(m.train_loss), fmt_num(m.penalty),
               fmt_num(m.eval.loss), fmt_num(m.eval.accuracy), fmt_num(m.ema_eval.loss),
               fmt_num(m.ema_eval.accuracy), fmt_num(m.mean_flip_frequency)});
    }
  }
  const ordered_json snap = config_to_json(cfg);
  save_checkpoint((dir / "model.ckpt").string(), make_checkpoint(pr.qat.net, cfg.ema.on ? &pr.qat.ema : nullptr, snap));

  ordered_json results = ordered_json::array();
  if (!pr.qat.history.empty()) {
    const auto& last = pr.qat.history.back();
    // EMA never feeds back into training, so the live weights of an EMA run
    // are exactly those of the plain run with the same seed.
    results.push_back(result_entry(cfg.dampening > 0.0 ? "dampening" : "plain", cfg, last.eval));
    if (cfg.ema.on) results.push_back(result_entry(cfg.dampening > 0.0 ? "dampening+ema" : "ema", cfg, last.ema_eval));
  }
  return ordered_json{{"results", results},
                      {"iterations", pr.qat.iterations},
                      {"pretrain_eval_loss", pr.pretrain_eval.loss},
                      {"pretrain_eval_acc", pr.pretrain_eval.accuracy}};
}

ordered_json task_eval(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  const LoadedModel m = load_model(checkpoint_for_seed(cfg.checkpoint, seed));
  const Dataset d = build_dataset(m.train_cfg, m.seed);
  ForwardOptions q;
  const EvalResult live = evaluate(m.net, d, d.eval_idx, q);
  ForwardOptions s;
  s.mode = QuantMode::SoftRound;
  s.soft_k = cfg.soft_k;
  const EvalResult soft = evaluate(m.net, d, d.eval_idx, s);
  std::optional<EvalResult> ema;
  if (m.ema) ema = evaluate(materialize_ema(m.net, *m.ema), d, d.eval_idx, q);
  Csv csv(dir / "metrics.csv", {"model", "eval_loss", "eval_acc"});
  csv.row({"live", fmt_num(live.loss), fmt_num(live.accuracy)});
  csv.row({"live_soft_round", fmt_num(soft.loss), fmt_num(soft.accuracy)});
  if (ema) csv.row({"ema", fmt_num(ema->loss), fmt_num(ema->accuracy)});
  return ordered_json{{"eval_loss", live.loss}, {"eval_acc", live.accuracy}, {"soft_round_eval_loss", soft.loss}};
}

QCConfig qc_config(const ExperimentConfig& cfg, std::uint64_t seed) {
  QCConfig q;
  q.lr = cfg.qc.lr;
  q.granularity = granularity_from_string(cfg.qc.granularity);
  q.use_scale = cfg.qc.use_scale;
  q.use_shift = cfg.qc.use_shift;
  q.epochs = cfg.qc.epochs;
  q.batch = cfg.qc.batch;
  q.seed = seed;
  return q;
}

ordered_json task_qc(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  const LoadedModel m = load_model(checkpoint_for_seed(cfg.checkpoint, seed));
  const Dataset d = build_dataset(m.train_cfg, m.seed);
  const NetworkSpec src = qc_source_network(m.net, m.ema ? &*m.ema : nullptr, cfg.qc.source);
  const QCResult r = fit_qc(src, d, qc_config(cfg, m.seed));
  const EvalResult e = evaluate(r.net, d, d.eval_idx, {});
  Csv csv(dir / "metrics.csv", {"calib_loss_before", "calib_loss_after", "eval_loss", "eval_acc"});
  csv.row({fmt_num(r.calib_loss_before), fmt_num(r.calib_loss_after), fmt_num(e.loss), fmt_num(e.accuracy)});
  ordered_json snap = config_to_json(m.train_cfg);
  save_checkpoint((dir / "model.ckpt").string(), make_checkpoint(r.net, nullptr, snap));
  const std::string method = (cfg.qc.source == "ema" && m.ema ? "ema" : "plain") + std::string("+qc");
  return ordered_json{{"results", ordered_json::array({result_entry(method, m.train_cfg, e)})},
                      {"calib_loss_before", r.calib_loss_before},
                      {"calib_loss_after", r.calib_loss_after}};
}

ordered_json task_fold(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  const LoadedModel m = load_model(checkpoint_for_seed(cfg.checkpoint, seed));
  const Dataset d = build_dataset(m.train_cfg, m.seed);
  NetworkSpec before = m.net;
  before.set_bn_mode(BNMode::Eval);
  const NetworkFoldResult f = fold_network(before);
  const Tensor x = d.gather_inputs(d.eval_idx);
  const double diff = max_abs_diff(forward(before, x).output, forward(f.net, x).output);
  const EvalResult e0 = evaluate(before, d, d.eval_idx, {});
  const EvalResult e1 = evaluate(f.net, d, d.eval_idx, {});
  save_checkpoint((dir / "model.ckpt").string(), make_checkpoint(f.net, nullptr, config_to_json(m.train_cfg)));
  Csv csv(dir / "metrics.csv", {"eval_loss_before", "eval_loss_after", "eval_acc_before", "eval_acc_after",
                                "max_abs_output_diff", "recoded"});
  csv.row({fmt_num(e0.loss), fmt_num(e1.loss), fmt_num(e0.accuracy), fmt_num(e1.accuracy), fmt_num(diff),
           std::to_string(f.recoded)});
  return ordered_json{{"max_abs_output_diff", diff}, {"recoded", f.recoded}};
}

ordered_json task_ablate(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  const LoadedModel m = load_model(checkpoint_for_seed(cfg.checkpoint, seed));
  const Dataset d = build_dataset(m.train_cfg, m.seed);
  const NetworkSpec src = qc_source_network(m.net, m.ema ? &*m.ema : nullptr, cfg.qc.source);
  const AblationTable t = qc_ablation(src, d, qc_config(cfg, m.seed));
  write_ablation_csv((dir / "ablation.csv").string(), t);
  Csv csv(dir / "metrics.csv", {"granularity", "variant", "eval_loss", "eval_acc", "calib_loss_before", "calib_loss_after"});
  csv.row({"none", "baseline", fmt_num(t.baseline.loss), fmt_num(t.baseline.accuracy), "", ""});
  for (const auto& c : t.cells) {
    csv.row({to_string(c.granularity), to_string(c.variant), fmt_num(c.eval.loss), fmt_num(c.eval.accuracy),
             fmt_num(c.calib_loss_before), fmt_num(c.calib_loss_after)});
  }
  return ordered_json{{"baseline_eval_acc", t.baseline.accuracy}};
}

}  // namespace

Dataset build_dataset(const ExperimentConfig& cfg, std::uint64_t seed) {
  const DatasetConfig& dc = cfg.dataset;
  Dataset d;
  if (dc.kind == "regression") {
    d = gen_regression(seed, dc.n, dc.dim, TeacherSpec{dc.teacher_hidden, dc.teacher_out}, dc.noise, dc.eval_fraction);
  } else if (dc.kind == "csv" || dc.kind == "idx") {
    d = dc.kind == "csv" ? load_csv(dc.path, CsvSchema{dc.target, TaskKind::Classification})
                         : load_idx(dc.path, dc.labels_path);
    assign_splits(d, dc.eval_fraction, seed);
    d.seed = seed;
  } else {
    ClassificationOptions o;
    o.separation = dc.separation;
    o.noise = dc.noise;
    o.image_size = dc.image_size;
    o.eval_fraction = dc.eval_fraction;
    d = gen_classification(seed, dc.n, dc.classes, class_mode_from_string(dc.kind), o);
  }
  return make_calibration(d, dc.calib_fraction, seed);
}

NetworkSpec build_network(const ExperimentConfig& cfg, const Dataset& data, std::uint64_t seed) {
  Rng rng = Rng(seed).fork(kStreamInit);
  const Nonlinearity act = nonlinearity_from_string(cfg.network.activation);
  if (cfg.network.name == "cnn") {
    if (data.task != TaskKind::Classification) throw ArgumentError("the CNN needs a classification dataset");
    if (data.sample_shape().size() != 3) {
      throw ArgumentError("the CNN needs image samples [C, H, W], got " + shape_str(data.sample_shape()));
    }
    return make_cnn(data.sample_shape(), data.num_classes, rng, cfg.network.width, act);
  }
  const std::size_t in = shape_numel(data.sample_shape());
  if (data.task == TaskKind::Classification) {
    return make_mlp(in, cfg.network.hidden, data.num_classes, LossKind::SoftmaxCrossEntropy, rng, act,
                    cfg.network.batch_norm);
  }
  NetworkSpec net = make_mlp(in, cfg.network.hidden, shape_numel(data.target_shape()), LossKind::Mse, rng, act,
                             cfg.network.batch_norm);
  return net;
}

QuantPlan quant_plan(const ExperimentConfig& cfg) {
  QuantPlan p;
  p.bits_w = cfg.bits_w;
  p.bits_a = cfg.bits_a;
  p.first_last_bits = cfg.first_last_bits;
  p.granularity = cfg.weight_granularity();
  return p;
}

PipelineResult train_pipeline(const ExperimentConfig& cfg, std::uint64_t seed) {
  PipelineResult r;
  r.data = build_dataset(cfg, seed);
  NetworkSpec net = build_network(cfg, r.data, seed);

  TrainConfig fp;
  fp.epochs = cfg.pretrain_epochs;
  fp.batch = cfg.batch;
  fp.lr = cfg.pretrain_lr;
  fp.mode = QuantMode::Latent;
  fp.seed = seed;
  r.pretrained = train_qat(net, r.data, fp).net;
  if (!r.data.eval_idx.empty()) {
    ForwardOptions latent;
    latent.mode = QuantMode::Latent;
    r.pretrain_eval = evaluate(r.pretrained, r.data, r.data.eval_idx, latent);
  }

  NetworkSpec q = r.pretrained;
  const std::size_t nc = std::min<std::size_t>(r.data.calib_idx.size(), 256);
  const Tensor calib_x = r.data.gather_inputs(std::span(r.data.calib_idx.data(), nc));
  attach_quantizers(q, quant_plan(cfg), calib_x);

  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.batch = cfg.batch;
  tc.lr = cfg.lr;
  tc.ema = cfg.ema.on;
  tc.ema_alpha = cfg.ema.alpha;
  tc.ema_warmup_fraction = cfg.ema.warmup;
  tc.dampening_lambda = cfg.dampening;
  tc.seed = seed;
  tc.flip_window = cfg.flip_window;
  r.qat = train_qat(std::move(q), r.data, tc);
  return r;
}

NetworkSpec qc_source_network(const NetworkSpec& live, const EMAState* ema, const std::string& source) {
  if (source == "ema" && ema && !ema->shadows.empty()) return materialize_ema(live, *ema);
  return live;
}

std::string resolve_run_dir(const ExperimentConfig& cfg) {
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  const char* root = std::getenv(kOutputRootEnv);
  const fs::path base = root && *root ? fs::path(root) : fs::path("runs");
  return (base / (cfg.task + "-" + config_hash(cfg).substr(0, 8))).string();
}

int run_experiment(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  const fs::path run_dir = resolve_run_dir(cfg);
  fs::create_directories(run_dir);

  if (cfg.task == "report") {
    try {
      const ReportTable t = build_report(cfg.runs);
      write_report_csv((run_dir / "report.csv").string(), t);
      log << "report: " << t.rows.size() << " rows -> " << (run_dir / "report.csv").string() << '\n';
      return kExitOk;
    } catch (const Error& e) {
      log << "report failed: " << e.what() << '\n';
      return kExitRuntime;
    }
  }

  int code = kExitOk;
  for (const std::uint64_t seed : cfg.seeds) {
    ExperimentConfig one = cfg;
    one.seeds = {seed};
    const fs::path dir = run_dir / ("seed-" + std::to_string(seed));
    fs::create_directories(dir);
    ordered_json manifest{{"manifest_version", 1},
                          {"task", cfg.task},
                          {"seed", seed},
                          {"config_hash", config_hash(one)},
                          {"config", config_to_json(one)},
                          {"status", "running"}};
    const auto t0 = std::chrono::steady_clock::now();
    try {
      ordered_json summary;
      if (cfg.task == "toy") summary = task_toy(one, seed, dir);
      else if (cfg.task == "train") summary = task_train(one, seed, dir);
      else if (cfg.task == "eval") summary = task_eval(one, seed, dir);
      else if (cfg.task == "qc") summary = task_qc(one, seed, dir);
      else if (cfg.task == "fold") summary = task_fold(one, seed, dir);
      else if (cfg.task == "ablate") summary = task_ablate(one, seed, dir);
      manifest["status"] = "ok";
      manifest["summary"] = summary;
      log << cfg.task << " seed " << seed << ": ok -> " << dir.string() << '\n';
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      manifest["status"] = "failed";
      manifest["error"] = e.what();
      log << cfg.task << " seed " << seed << ": FAILED: " << e.what() << '\n';
      code = kExitRuntime;
    }
    manifest["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_json(dir / "manifest.json", manifest);
  }
  return code;
}

}  // namespace qatlab

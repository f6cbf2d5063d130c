// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "slicevoco/commands.hpp"
#include "slicevoco/errors.hpp"
#include "slicevoco/rvol.hpp"

namespace fs = std::filesystem;
using namespace slicevoco;

namespace {

struct ShapeArg {
  std::vector<std::size_t> dims;
  Shape3 get() const { return {dims.at(0), dims.at(1), dims.at(2)}; }
};

struct PreprocessArgs {
  ShapeArg target;
  double center = 50.0;
  double width = 400.0;
  bool no_crop = false;
  double threshold = -500.0;
  std::size_t margin = 2;

  PreprocessSpec get() const {
    PreprocessSpec s;
    s.window_center = center;
    s.window_width = width;
    s.target_shape = target.get();
    s.foreground_crop = !no_crop;
    s.foreground_threshold = threshold;
    s.foreground_margin = margin;
    return s;
  }
};

void add_preprocess(CLI::App* cmd, PreprocessArgs& a, const Shape3& def) {
  a.target.dims = {def.z, def.y, def.x};
  cmd->add_option("--target", a.target.dims, "Resampled stack shape T,H,W")->delimiter(',')->expected(3)
      ->capture_default_str();
  cmd->add_option("--window-center", a.center, "HU window centre")->capture_default_str();
  cmd->add_option("--window-width", a.width, "HU window width")->capture_default_str();
  cmd->add_flag("--no-foreground-crop", a.no_crop, "Skip the body bounding-box crop");
  cmd->add_option("--foreground-threshold", a.threshold, "HU threshold for the body crop")->capture_default_str();
  cmd->add_option("--foreground-margin", a.margin, "Voxel margin around the body crop")->capture_default_str();
}

struct EncoderArgs {
  std::size_t dim = 128;
  std::string projection = "linear";

  EncoderConfig get() const {
    EncoderConfig c;
    c.embedding_dim = dim;
    if (projection == "linear") c.projection = Projection::linear;
    else if (projection == "two_layer_mlp") c.projection = Projection::two_layer_mlp;
    else if (projection == "none") c.projection = Projection::none;
    else throw ConfigError("unknown projection '" + projection + "' (linear|two_layer_mlp|none)");
    return c;
  }
};

void add_encoder(CLI::App* cmd, EncoderArgs& a) {
  cmd->add_option("--embedding-dim", a.dim, "Projection output size d")->capture_default_str();
  cmd->add_option("--projection", a.projection, "linear|two_layer_mlp|none")->capture_default_str();
}

struct PretrainArgs {
  std::int64_t steps = 500;
  std::size_t patients = 4;
  std::string optimizer = "sgd";
  double lr = 1e-2;
  double clip = 0.0;
  double momentum = 0.99;
  double w_intra = 1.0, w_inter = 1.0, w_reg = 1.0;
  std::int64_t every = 0;
  std::string measure = "iou";
  std::size_t rows = 4, cols = 4;
  std::size_t crop = 48;
  EncoderArgs encoder;
};

void add_pretrain(CLI::App* cmd, PretrainArgs& a) {
  cmd->add_option("--steps", a.steps, "Optimizer steps")->capture_default_str();
  cmd->add_option("--batch-patients", a.patients, "Patients per batch P")->capture_default_str();
  cmd->add_option("--optimizer", a.optimizer, "sgd|adam")->capture_default_str();
  cmd->add_option("--lr", a.lr, "Learning rate")->capture_default_str();
  cmd->add_option("--clip-norm", a.clip, "Global gradient-norm clip, 0 = off")->capture_default_str();
  cmd->add_option("--momentum", a.momentum, "Teacher EMA momentum m")->capture_default_str();
  cmd->add_option("--w-intra", a.w_intra, "Intra loss weight")->capture_default_str();
  cmd->add_option("--w-inter", a.w_inter, "Inter loss weight")->capture_default_str();
  cmd->add_option("--w-reg", a.w_reg, "Regularization loss weight")->capture_default_str();
  cmd->add_option("--checkpoint-every", a.every, "Intermediate checkpoint cadence, 0 = final only")
      ->capture_default_str();
  cmd->add_option("--overlap-measure", a.measure, "iou|overlap_fraction")->capture_default_str();
  cmd->add_option("--grid-rows", a.rows, "Base grid rows")->capture_default_str();
  cmd->add_option("--grid-cols", a.cols, "Base grid columns")->capture_default_str();
  cmd->add_option("--crop", a.crop, "Square crop side in pixels")->capture_default_str();
  add_encoder(cmd, a.encoder);
}

PretrainConfig make_pretrain_config(const PretrainArgs& a, const Shape3& target, std::uint64_t seed) {
  PretrainConfig c;
  c.steps = a.steps;
  c.batch_patients = a.patients;
  c.optimizer.kind = parse_optimizer_kind(a.optimizer);
  c.optimizer.learning_rate = a.lr;
  c.optimizer.clip_norm = a.clip;
  c.momentum = a.momentum;
  c.weights = {a.w_intra, a.w_inter, a.w_reg};
  c.seed = seed;
  c.checkpoint_every = a.every;
  if (a.measure == "iou") c.overlap_measure = OverlapMeasure::iou;
  else if (a.measure == "overlap_fraction") c.overlap_measure = OverlapMeasure::overlap_fraction;
  else throw ConfigError("unknown overlap measure '" + a.measure + "' (iou|overlap_fraction)");
  c.grid = {a.rows, a.cols, a.crop, a.crop, target.x, target.y};
  c.encoder = a.encoder.get();
  return c;
}

std::vector<std::pair<std::string, std::vector<fs::path>>> parse_named_lists(const std::vector<std::string>& items,
                                                                              const char* flag) {
  std::vector<std::pair<std::string, std::vector<fs::path>>> out;
  for (const auto& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(std::string(flag) + " expects NAME=path[,path...]");
    std::vector<fs::path> paths;
    std::string rest = item.substr(eq + 1);
    std::size_t start = 0;
    while (start <= rest.size()) {
      const auto comma = rest.find(',', start);
      const std::string p = rest.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      if (!p.empty()) paths.emplace_back(p);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    out.emplace_back(item.substr(0, eq), std::move(paths));
  }
  return out;
}

void write_run_config(const CLI::App* sub, const fs::path& dir) {
  fs::create_directories(dir);
  const std::string ini = "[" + sub->get_name() + "]\n" + sub->config_to_str(true, false);
  write_file_atomic(dir / "run.ini", ini);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"slicevoco: slice-level contrastive pretraining and CNN/Bi-LSTM injury classification"};
  app.set_version_flag("--version", std::string(kVersion));
  app.set_config("--config", "", "INI file with one [section] per subcommand");
  app.require_subcommand(1);
  bool single_thread = false;
  app.add_flag("--single-thread", single_thread, "Disable prefetch and pin math to one thread");

  // synth
  SynthOptions synth;
  ShapeArg synth_shape{{32, 64, 64}};
  auto* synth_cmd = app.add_subcommand("synth", "Write N synthetic RVOL volumes and labels.csv");
  synth_cmd->add_option("--out", synth.out, "Output dataset directory")->required();
  synth_cmd->add_option("--count,-n", synth.count, "Number of studies")->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();
  synth_cmd->add_option("--shape", synth_shape.dims, "Volume shape Z,Y,X")->delimiter(',')->expected(3)
      ->capture_default_str();
  synth_cmd->add_option("--blobs", synth.num_blobs, "Distractor blobs per volume")->capture_default_str();
  std::vector<double> synth_prior(synth.class_prior.begin(), synth.class_prior.end());
  synth_cmd->add_option("--class-prior", synth_prior, "Per-organ prior healthy,low,high")->delimiter(',')
      ->expected(3)->capture_default_str();
  synth_cmd->add_option("--id-prefix", synth.id_prefix, "Patient id prefix")->capture_default_str();

  // pretrain
  PretrainOptions pre;
  PretrainArgs pre_args;
  PreprocessArgs pre_pp;
  std::uint64_t pre_seed = 0;
  std::string pre_extra, pre_resume;
  auto* pre_cmd = app.add_subcommand("pretrain", "Run 2D-VoCo student/teacher pretraining");
  pre_cmd->add_option("--data", pre.data, "Volume directory")->required();
  pre_cmd->add_option("--extra-unlabeled", pre_extra, "Second volume directory merged into the pool");
  pre_cmd->add_option("--out", pre.out, "Output directory")->required();
  pre_cmd->add_option("--seed", pre_seed, "Run seed")->capture_default_str();
  pre_cmd->add_option("--resume", pre_resume, "Checkpoint to resume from");
  pre_cmd->add_flag("--log-crops", pre.log_crops, "Write crops.jsonl");
  add_pretrain(pre_cmd, pre_args);
  add_preprocess(pre_cmd, pre_pp, PreprocessSpec::pretraining().target_shape);

  // finetune
  FinetuneOptions ft;
  PreprocessArgs ft_pp;
  EncoderArgs ft_enc;
  std::string ft_init = "scratch", ft_ssl, ft_pool = "mean", ft_mode = "full", ft_opt = "adam";
  double ft_lr = 1e-3;
  std::vector<double> ft_weights{1.0, 2.0, 4.0};
  auto* ft_cmd = app.add_subcommand("finetune", "Train the CNN/Bi-LSTM classifier on labeled studies");
  ft_cmd->add_option("--data", ft.data, "Labeled dataset directory (volumes + labels.csv)")->required();
  ft_cmd->add_option("--out", ft.out, "Output directory")->required();
  ft_cmd->add_option("--seed", ft.config.seed, "Initialization and shuffling seed")->capture_default_str();
  ft_cmd->add_option("--init", ft_init, "voco|scratch")->capture_default_str();
  ft_cmd->add_option("--ssl-checkpoint", ft_ssl, "Pretraining checkpoint (used with --init voco)");
  ft_cmd->add_option("--split-seed", ft.split_seed, "Patient split seed")->capture_default_str();
  ft_cmd->add_option("--label-budget", ft.label_budget, "Training studies used, 0 = all")->capture_default_str();
  ft_cmd->add_flag("--oof", ft.oof, "Also write 5-fold out-of-fold predictions");
  ft_cmd->add_option("--epochs", ft.config.epochs, "Passes over the training set")->capture_default_str();
  ft_cmd->add_option("--batch-size", ft.config.batch_size, "Studies per step")->capture_default_str();
  ft_cmd->add_option("--hidden", ft.config.hidden, "LSTM hidden size h")->capture_default_str();
  ft_cmd->add_option("--layers", ft.config.layers, "LSTM layers")->capture_default_str();
  ft_cmd->add_option("--pooling", ft_pool, "mean|last_states")->capture_default_str();
  ft_cmd->add_option("--head-hidden", ft.config.head_hidden, "Head hidden width, 0 = none")->capture_default_str();
  ft_cmd->add_option("--mode", ft_mode, "full|frozen_backbone")->capture_default_str();
  ft_cmd->add_option("--optimizer", ft_opt, "sgd|adam")->capture_default_str();
  ft_cmd->add_option("--lr", ft_lr, "Learning rate")->capture_default_str();
  ft_cmd->add_option("--class-weights", ft_weights, "Training class weights healthy,low,high")->delimiter(',')
      ->expected(3)->capture_default_str();
  add_encoder(ft_cmd, ft_enc);
  add_preprocess(ft_cmd, ft_pp, PreprocessSpec::downstream().target_shape);

  // evaluate
  EvaluateOptions ev;
  std::string ev_thr, ev_oof, ev_split;
  std::vector<double> ev_weights{1.0, 2.0, 4.0};
  auto* ev_cmd = app.add_subcommand("evaluate", "Score predictions: RSNA score, mAP, macro precision/recall");
  ev_cmd->add_option("--predictions", ev.predictions, "Predictions CSV")->required();
  ev_cmd->add_option("--labels", ev.labels, "Labels CSV")->required();
  ev_cmd->add_option("--thresholds", ev_thr, "Thresholds JSON");
  ev_cmd->add_option("--oof", ev_oof, "Out-of-fold predictions CSV for threshold selection");
  ev_cmd->add_option("--split", ev_split, "Split JSON written by finetune");
  ev_cmd->add_option("--weights", ev_weights, "RSNA class weights healthy,low,high")->delimiter(',')->expected(3)
      ->capture_default_str();
  ev_cmd->add_option("--out", ev.out, "Report directory")->required();

  // select-thresholds
  SelectThresholdsOptions st;
  auto* st_cmd = app.add_subcommand("select-thresholds", "Per-class F1 thresholds from out-of-fold predictions");
  st_cmd->add_option("--oof", st.oof_predictions, "Out-of-fold predictions CSV")->required();
  st_cmd->add_option("--labels", st.labels, "Labels CSV")->required();
  st_cmd->add_option("--split", st.split, "Split JSON")->required();
  st_cmd->add_option("--out", st.out, "Thresholds JSON to write")->required();

  // compare
  CompareOptions cmp;
  std::vector<std::string> cmp_arms, cmp_curves;
  auto* cmp_cmd = app.add_subcommand("compare", "Table and SVG plots across experiment arms");
  cmp_cmd->add_option("--arm", cmp_arms, "NAME=report.json[,report.json...] (one per seed)")->required();
  cmp_cmd->add_option("--curve", cmp_curves, "NAME=loss_log.jsonl[,...]");
  cmp_cmd->add_option("--out", cmp.out, "Output directory")->required();

  // bench
  BenchOptions bench;
  PretrainArgs bench_args;
  PreprocessArgs bench_pp;
  std::uint64_t bench_seed = 0;
  auto* bench_cmd = app.add_subcommand("bench", "Measure pretraining throughput at several batch sizes");
  bench_cmd->add_option("--data", bench.data, "Volume directory")->required();
  bench_cmd->add_option("--out", bench.out, "Report JSON path")->required();
  bench_cmd->add_option("--batch-sizes", bench.batch_sizes, "Patients per batch to measure")->delimiter(',')
      ->capture_default_str();
  bench_cmd->add_option("--bench-steps", bench.steps, "Timed steps per batch size")->capture_default_str();
  bench_cmd->add_option("--warmup", bench.warmup, "Untimed steps per batch size")->capture_default_str();
  bench_cmd->add_option("--seed", bench_seed, "Seed")->capture_default_str();
  add_pretrain(bench_cmd, bench_args);
  add_preprocess(bench_cmd, bench_pp, PreprocessSpec::pretraining().target_shape);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const bool strict = single_thread || deterministic_env();
  if (strict) Eigen::setNbThreads(1);

  try {
    if (*synth_cmd) {
      synth.shape = synth_shape.get();
      std::copy(synth_prior.begin(), synth_prior.end(), synth.class_prior.begin());
      cmd_synth(synth);
    } else if (*pre_cmd) {
      pre.preprocess = pre_pp.get();
      pre.config = make_pretrain_config(pre_args, pre.preprocess.target_shape, pre_seed);
      if (!pre_extra.empty()) pre.extra_unlabeled = pre_extra;
      if (!pre_resume.empty()) pre.resume = pre_resume;
      pre.prefetch = !strict;
      cmd_pretrain(pre);
      write_run_config(pre_cmd, pre.out);
    } else if (*ft_cmd) {
      ft.preprocess = ft_pp.get();
      ft.init = parse_init_mode(ft_init);
      if (!ft_ssl.empty()) ft.ssl_checkpoint = ft_ssl;
      ft.config.encoder = ft_enc.get();
      ft.config.pooling = parse_pooling(ft_pool);
      ft.config.mode = parse_finetune_mode(ft_mode);
      ft.config.optimizer.kind = parse_optimizer_kind(ft_opt);
      ft.config.optimizer.learning_rate = ft_lr;
      std::copy(ft_weights.begin(), ft_weights.end(), ft.config.class_weights.weights.begin());
      cmd_finetune(ft);
      write_run_config(ft_cmd, ft.out);
    } else if (*ev_cmd) {
      if (!ev_thr.empty()) ev.thresholds = ev_thr;
      if (!ev_oof.empty()) ev.oof_predictions = ev_oof;
      if (!ev_split.empty()) ev.split = ev_split;
      std::copy(ev_weights.begin(), ev_weights.end(), ev.weights.weights.begin());
      const EvaluationReport r = cmd_evaluate(ev);
      std::printf("rsna_score %.6f  map %.6f  macro_precision %.6f  macro_recall %.6f\n", r.rsna_score, r.map,
                  r.macro_precision, r.macro_recall);
    } else if (*st_cmd) {
      cmd_select_thresholds(st);
    } else if (*cmp_cmd) {
      cmp.arms = parse_named_lists(cmp_arms, "--arm");
      cmp.curves = parse_named_lists(cmp_curves, "--curve");
      cmd_compare(cmp);
      std::cout << read_file(cmp.out / "comparison.txt");
    } else if (*bench_cmd) {
      bench.preprocess = bench_pp.get();
      bench.config = make_pretrain_config(bench_args, bench.preprocess.target_shape, bench_seed);
      const auto report = cmd_bench(bench);
      for (const auto& row : report.at("rows")) {
        std::printf("batch %zu  %.3f steps/s\n", row.at("batch_patients").get<std::size_t>(),
                    row.at("steps_per_sec").get<double>());
      }
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    if (!e.diagnostic().empty()) std::fprintf(stderr, "diagnostic: %s\n", e.diagnostic().c_str());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

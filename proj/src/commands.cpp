// SPDX-License-Identifier: Apache-2.0
#include "slicevoco/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "slicevoco/errors.hpp"
#include "slicevoco/hashing.hpp"
#include "slicevoco/plots.hpp"
#include "slicevoco/preprocess.hpp"
#include "slicevoco/rvol.hpp"

namespace slicevoco {

namespace fs = std::filesystem;

namespace {

nlohmann::json preprocess_json(const PreprocessSpec& s) {
  return {{"window_center", s.window_center},
          {"window_width", s.window_width},
          {"target_shape", {s.target_shape.z, s.target_shape.y, s.target_shape.x}},
          {"foreground_crop", s.foreground_crop},
          {"foreground_threshold", s.foreground_threshold},
          {"foreground_margin", s.foreground_margin}};
}

void require_dir(const fs::path& dir, const char* what) {
  if (!fs::is_directory(dir)) throw DataError(std::string(what) + " directory not found: " + dir.string());
}

std::string file_digest(const fs::path& path) { return hex64(fnv1a64(read_file(path))); }

void write_text(const fs::path& path, const std::string& text) { write_file_atomic(path, text); }

std::string format_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

std::vector<LabeledStudy> select(const std::vector<LabeledStudy>& all, const std::vector<std::string>& ids) {
  std::set<std::string> want(ids.begin(), ids.end());
  std::vector<LabeledStudy> out;
  for (const auto& s : all) {
    if (want.contains(s.patient_id)) out.push_back(s);
  }
  return out;
}

void write_finetune_log(const fs::path& path, const std::vector<FinetuneEpochLog>& log) {
  std::string text;
  for (const auto& e : log) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["loss"] = e.mean_loss;
    text += j.dump() + "\n";
  }
  write_text(path, text);
}

}  // namespace

bool deterministic_env() {
  const char* v = std::getenv("SLICEVOCO_DETERMINISTIC");
  return v != nullptr && std::string(v) == "1";
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

nlohmann::json cmd_synth(const SynthOptions& opt) {
  if (opt.count == 0) throw ConfigError("synth: count must be >= 1");
  fs::create_directories(opt.out);
  LabelTable labels;
  for (std::size_t i = 0; i < opt.count; ++i) {
    char id[64];
    std::snprintf(id, sizeof id, "%s_%04zu", opt.id_prefix.c_str(), i);
    SyntheticSpec spec;
    spec.shape = opt.shape;
    spec.num_blobs = opt.num_blobs;
    spec.class_prior = opt.class_prior;
    spec.rng_seed = mix64(opt.seed ^ mix64(i + 1));
    spec.patient_id = id;
    const SyntheticStudy study = generate_synthetic_labeled_study(spec);
    write_volume(opt.out / (std::string(id) + ".rvol"), study.volume);
    labels[id] = study.labels;
  }
  write_labels_csv(opt.out / "labels.csv", labels);
  nlohmann::json manifest{{"command", "synth"},
                          {"version", kVersion},
                          {"count", opt.count},
                          {"seed", opt.seed},
                          {"shape", {opt.shape.z, opt.shape.y, opt.shape.x}},
                          {"num_blobs", opt.num_blobs},
                          {"class_prior", opt.class_prior},
                          {"id_prefix", opt.id_prefix},
                          {"dataset_digest", dataset_digest(opt.out)}};
  write_json(opt.out / "synth_manifest.json", manifest);
  return manifest;
}

std::vector<SliceStack> load_pool(const fs::path& dir, const PreprocessSpec& spec) {
  require_dir(dir, "dataset");
  const auto files = list_volumes(dir);
  if (files.empty()) throw DataError("no .rvol volumes in " + dir.string());
  std::vector<SliceStack> pool;
  pool.reserve(files.size());
  for (const auto& f : files) pool.push_back(preprocess_volume(load_volume(f), spec));
  return pool;
}

nlohmann::json cmd_pretrain(const PretrainOptions& opt) {
  validate(opt.config);
  validate(opt.preprocess);
  auto pool = load_pool(opt.data, opt.preprocess);
  const std::size_t base_size = pool.size();
  if (opt.extra_unlabeled) {
    auto extra = load_pool(*opt.extra_unlabeled, opt.preprocess);
    for (auto& s : extra) pool.push_back(std::move(s));
  }
  PretrainRunOptions run;
  run.out_dir = opt.out;
  run.prefetch = opt.prefetch && !deterministic_env();
  run.log_crops = opt.log_crops;
  if (opt.resume) run.resume_from = load_checkpoint(*opt.resume);
  const PretrainResult result = run_pretraining(opt.config, pool, run);

  nlohmann::json manifest{{"command", "pretrain"},
                          {"version", kVersion},
                          {"config", opt.config},
                          {"preprocess", preprocess_json(opt.preprocess)},
                          {"data", opt.data.string()},
                          {"data_digest", dataset_digest(opt.data)},
                          {"pool_size", pool.size()},
                          {"base_pool_size", base_size},
                          {"resumed_from", opt.resume ? opt.resume->string() : ""},
                          {"checkpoint", "pretrain_final.svck"},
                          {"checkpoint_digest", file_digest(opt.out / "pretrain_final.svck")},
                          {"loss_log", "loss_log.jsonl"}};
  if (opt.extra_unlabeled) {
    manifest["extra_unlabeled"] = opt.extra_unlabeled->string();
    manifest["extra_unlabeled_digest"] = dataset_digest(*opt.extra_unlabeled);
  }
  write_json(opt.out / "manifest.json", manifest);
  const double steps = static_cast<double>(result.log.size());
  write_json(opt.out / "throughput.json",
             {{"steps", result.log.size()},
              {"seconds", result.seconds},
              {"steps_per_sec", result.seconds > 0.0 ? steps / result.seconds : 0.0}});
  return manifest;
}

InitMode parse_init_mode(const std::string& text) {
  if (text == "voco") return InitMode::voco;
  if (text == "scratch") return InitMode::scratch;
  throw ConfigError("unknown init '" + text + "' (voco|scratch)");
}

std::string to_string(InitMode m) { return m == InitMode::voco ? "voco" : "scratch"; }

std::vector<LabeledStudy> load_labeled(const fs::path& dir, const PreprocessSpec& spec) {
  require_dir(dir, "dataset");
  const auto labels_path = dir / "labels.csv";
  if (!fs::exists(labels_path)) throw DataError("missing labels.csv in " + dir.string());
  const LabelTable labels = read_labels_csv(labels_path);
  std::vector<LabeledStudy> out;
  for (const auto& f : list_volumes(dir)) {
    VolumeGrid v = load_volume(f);
    const auto it = labels.find(v.patient_id);
    if (it == labels.end()) continue;
    out.push_back({v.patient_id, preprocess_volume(v, spec), it->second});
  }
  if (out.empty()) throw DataError("no labeled volumes in " + dir.string());
  return out;
}

nlohmann::json cmd_finetune(const FinetuneOptions& opt) {
  validate(opt.config);
  validate(opt.preprocess);
  std::optional<ParameterSet> backbone;
  if (opt.init == InitMode::voco) {
    if (!opt.ssl_checkpoint) throw ConfigError("--init voco needs --ssl-checkpoint");
    backbone = load_ssl_backbone(load_checkpoint(*opt.ssl_checkpoint), opt.config.encoder);
  }
  const auto studies = load_labeled(opt.data, opt.preprocess);
  std::vector<std::string> ids;
  for (const auto& s : studies) ids.push_back(s.patient_id);
  const SplitPlan plan = make_split(ids, opt.split_seed);
  std::vector<std::string> train_ids = plan.train_ids;
  if (opt.label_budget > 0 && opt.label_budget < train_ids.size()) train_ids.resize(opt.label_budget);
  const auto train = select(studies, train_ids);
  const auto test = select(studies, plan.test_ids);

  fs::create_directories(opt.out);
  const Encoder encoder(opt.config.encoder);
  FinetuneResult result = run_finetune(make_downstream_model(opt.config, backbone), train);
  save_checkpoint(opt.out / "classifier.svck",
                  make_classifier_checkpoint(result.state.model, {{"init", to_string(opt.init)}}));
  write_finetune_log(opt.out / "loss_log.jsonl", result.log);
  write_json(opt.out / "split.json", plan);
  if (!test.empty()) write_predictions_csv(opt.out / "test_predictions.csv", predict_all(encoder, result.state.model, test));

  if (opt.oof) {
    PredictionTable oof;
    for (std::size_t f = 0; f < plan.folds; ++f) {
      std::vector<LabeledStudy> fit;
      std::vector<LabeledStudy> held;
      for (const auto& s : train) (plan.fold_of.at(s.patient_id) == f ? held : fit).push_back(s);
      if (held.empty()) continue;
      ClassifierConfig cfg = opt.config;
      cfg.seed = mix64(opt.config.seed ^ mix64(f + 1));
      const auto fold_model = run_finetune(make_downstream_model(cfg, backbone), fit).state.model;
      for (auto& [id, p] : predict_all(encoder, fold_model, held)) oof[id] = p;
    }
    write_predictions_csv(opt.out / "oof_predictions.csv", oof);
  }

  nlohmann::json manifest{{"command", "finetune"},
                          {"version", kVersion},
                          {"config", opt.config},
                          {"preprocess", preprocess_json(opt.preprocess)},
                          {"init", to_string(opt.init)},
                          {"ssl_checkpoint", opt.ssl_checkpoint ? opt.ssl_checkpoint->string() : ""},
                          {"ssl_checkpoint_used", opt.init == InitMode::voco},
                          {"data", opt.data.string()},
                          {"data_digest", dataset_digest(opt.data)},
                          {"split_seed", opt.split_seed},
                          {"label_budget", opt.label_budget},
                          {"train_studies", train.size()},
                          {"test_studies", test.size()},
                          {"oof", opt.oof},
                          {"checkpoint_digest", file_digest(opt.out / "classifier.svck")}};
  write_json(opt.out / "manifest.json", manifest);
  return manifest;
}

nlohmann::json thresholds_to_json(const Thresholds& t) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t c = 0; c < kNumColumns; ++c) j[column_name(c)] = t[c];
  return j;
}

Thresholds thresholds_from_json(const nlohmann::json& j) {
  Thresholds t{};
  for (std::size_t c = 0; c < kNumColumns; ++c) {
    if (!j.contains(column_name(c))) throw DataError("thresholds file lacks column " + column_name(c));
    t[c] = j.at(column_name(c)).get<double>();
  }
  return t;
}

nlohmann::json cmd_select_thresholds(const SelectThresholdsOptions& opt) {
  const SplitPlan plan = read_json(opt.split).get<SplitPlan>();
  const Thresholds t = select_thresholds(read_predictions_csv(opt.oof_predictions), read_labels_csv(opt.labels), plan);
  const nlohmann::json j = thresholds_to_json(t);
  if (opt.out.has_parent_path()) fs::create_directories(opt.out.parent_path());
  write_json(opt.out, j);
  return j;
}

EvaluationReport cmd_evaluate(const EvaluateOptions& opt) {
  const PredictionTable preds = read_predictions_csv(opt.predictions);
  const LabelTable labels = read_labels_csv(opt.labels);
  Thresholds thresholds{};
  std::optional<std::uint64_t> split_seed;
  if (opt.split) split_seed = read_json(*opt.split).get<SplitPlan>().seed;
  if (opt.thresholds) {
    thresholds = thresholds_from_json(read_json(*opt.thresholds));
  } else if (opt.oof_predictions && opt.split) {
    thresholds = select_thresholds(read_predictions_csv(*opt.oof_predictions), labels,
                                   read_json(*opt.split).get<SplitPlan>());
  } else {
    throw ConfigError("evaluate needs --thresholds, or --oof together with --split");
  }
  EvaluationReport report = evaluate_predictions(preds, labels, thresholds, opt.weights);
  report.split_seed = split_seed;
  fs::create_directories(opt.out);
  write_json(opt.out / "report.json", report);
  write_text(opt.out / "report.csv", report_csv(report));
  write_json(opt.out / "thresholds.json", thresholds_to_json(thresholds));
  return report;
}

std::string format_mean_sd(const MeanSd& v, int decimals) {
  return format_fixed(v.mean, decimals) + " \xC2\xB1 " + format_fixed(v.sd, decimals);
}

std::vector<ArmSummary> cmd_compare(const CompareOptions& opt) {
  if (opt.arms.empty()) throw ConfigError("compare needs at least one --arm");
  std::vector<ArmSummary> out;
  std::optional<EvaluationReport> reference;
  std::string reference_name;
  for (const auto& [name, paths] : opt.arms) {
    if (paths.empty()) throw ConfigError("arm '" + name + "' has no reports");
    std::vector<double> rsna, map, prec, rec;
    for (const auto& p : paths) {
      const EvaluationReport r = read_json(p).get<EvaluationReport>();
      if (!reference) {
        reference = r;
        reference_name = p.string();
      } else {
        if (r.split_seed != reference->split_seed || r.test_ids_digest != reference->test_ids_digest) {
          throw ConfigError("protocol violation: " + p.string() + " was evaluated on a different split than " +
                            reference_name);
        }
        if (!(r.weights == reference->weights)) {
          throw ConfigError("protocol violation: " + p.string() + " uses a different weight table than " +
                            reference_name);
        }
      }
      rsna.push_back(r.rsna_score);
      map.push_back(r.map);
      prec.push_back(r.macro_precision);
      rec.push_back(r.macro_recall);
    }
    out.push_back({name, paths.size(), mean_sd(rsna), mean_sd(map), mean_sd(prec), mean_sd(rec)});
  }

  fs::create_directories(opt.out);
  std::ostringstream csv;
  csv << "arm,seeds,rsna_mean,rsna_sd,map_mean,map_sd,precision_mean,precision_sd,recall_mean,recall_sd\n";
  for (const auto& a : out) {
    csv << a.name << ',' << a.seeds << ',' << format_fixed(a.rsna.mean, 6) << ',' << format_fixed(a.rsna.sd, 6) << ','
        << format_fixed(a.map.mean, 6) << ',' << format_fixed(a.map.sd, 6) << ','
        << format_fixed(a.precision.mean, 6) << ',' << format_fixed(a.precision.sd, 6) << ','
        << format_fixed(a.recall.mean, 6) << ',' << format_fixed(a.recall.sd, 6) << '\n';
  }
  write_text(opt.out / "comparison.csv", csv.str());

  std::size_t width = 6;
  for (const auto& a : out) width = std::max(width, a.name.size());
  std::ostringstream txt;
  auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w > s.size() ? w - s.size() : 0, ' '); };
  txt << pad("Method", width) << "  " << pad("RSNA Score", 18) << "  " << pad("mAP (%)", 16) << "  "
      << pad("Precision (%)", 16) << "  " << "Recall (%)\n";
  auto pct = [](const MeanSd& v) { return MeanSd{100.0 * v.mean, 100.0 * v.sd}; };
  for (const auto& a : out) {
    txt << pad(a.name, width) << "  " << pad(format_mean_sd(a.rsna, 4), 18) << "  "
        << pad(format_mean_sd(pct(a.map), 2), 16) << "  " << pad(format_mean_sd(pct(a.precision), 2), 16) << "  "
        << format_mean_sd(pct(a.recall), 2) << '\n';
  }
  write_text(opt.out / "comparison.txt", txt.str());

  std::vector<BarGroup> bars;
  for (const auto& a : out) {
    bars.push_back({a.name, {{"rsna", a.rsna.mean, a.rsna.sd}, {"map", a.map.mean, a.map.sd},
                             {"precision", a.precision.mean, a.precision.sd}, {"recall", a.recall.mean, a.recall.sd}}});
  }
  write_text(opt.out / "metrics.svg", bar_chart_svg("Evaluation metrics (mean and sd over seeds)", bars));

  if (!opt.curves.empty()) {
    std::vector<Series> series;
    for (const auto& [name, paths] : opt.curves) {
      std::map<double, std::vector<double>> by_x;
      for (const auto& p : paths) {
        std::ifstream in(p);
        if (!in) throw DataError("cannot read loss log " + p.string());
        std::string line;
        while (std::getline(in, line)) {
          if (line.empty()) continue;
          const auto j = nlohmann::json::parse(line);
          const double x = j.contains("step") ? j.at("step").get<double>() : j.at("epoch").get<double>();
          const double y = j.contains("total") ? j.at("total").get<double>() : j.at("loss").get<double>();
          by_x[x].push_back(y);
        }
      }
      Series s{name, {}};
      for (const auto& [x, ys] : by_x) s.points.emplace_back(x, mean_sd(ys).mean);
      series.push_back(std::move(s));
    }
    write_text(opt.out / "loss_curves.svg", line_chart_svg("Loss", "step", "loss", series));
  }
  return out;
}

nlohmann::json cmd_bench(const BenchOptions& opt) {
  validate(opt.config);
  if (opt.batch_sizes.empty()) throw ConfigError("bench needs at least one batch size");
  if (opt.steps == 0) throw ConfigError("bench steps must be >= 1");
  const auto pool = load_pool(opt.data, opt.preprocess);
  const Encoder encoder(opt.config.encoder);
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t bs : opt.batch_sizes) {
    if (bs > pool.size()) throw DataError("batch size " + std::to_string(bs) + " exceeds pool size");
    PretrainConfig cfg = opt.config;
    cfg.batch_patients = bs;
    StudentTeacherState state = make_initial_state(encoder, cfg.seed, cfg.momentum);
    Optimizer optimizer(cfg.optimizer, state.student);
    double seconds = 0.0;
    for (std::size_t s = 0; s < opt.warmup + opt.steps; ++s) {
      auto rng = step_rng(cfg.seed, static_cast<std::int64_t>(s + 1));
      const auto t0 = std::chrono::steady_clock::now();
      const PretrainBatch batch = assemble_batch(pool, cfg.grid, rng, bs, cfg.overlap_measure);
      pretrain_step(encoder, state, optimizer, batch, cfg);
      const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (s >= opt.warmup) seconds += dt;
    }
    const double steps = static_cast<double>(opt.steps);
    const std::size_t patches = bs * (cfg.grid.cells() + 1);
    const std::size_t pixels = cfg.grid.crop_w * cfg.grid.crop_h;
    std::size_t activations = 0;
    std::size_t side_h = cfg.grid.crop_h;
    std::size_t side_w = cfg.grid.crop_w;
    std::size_t cin = 1;
    for (std::size_t c : TinyReferenceBackbone::kChannels) {
      side_h = (side_h + 1) / 2;
      side_w = (side_w + 1) / 2;
      activations += side_h * side_w * (c + 9 * cin);
      cin = c;
    }
    // Student with cache plus teacher, doubles; parameters and Adam moments on top.
    const std::size_t params = state.student.scalar_count();
    const std::size_t bytes = 8 * (2 * patches * (pixels + activations) + 4 * params);
    rows.push_back({{"batch_patients", bs},
                    {"steps", opt.steps},
                    {"seconds", seconds},
                    {"steps_per_sec", steps / seconds},
                    {"seconds_per_patient", seconds / (steps * static_cast<double>(bs))},
                    {"peak_memory_estimate_bytes", bytes}});
  }
  nlohmann::json report{{"command", "bench"},
                        {"version", kVersion},
                        {"config", opt.config},
                        {"preprocess", preprocess_json(opt.preprocess)},
                        {"pool_size", pool.size()},
                        {"rows", rows}};
  if (opt.out.has_parent_path()) fs::create_directories(opt.out.parent_path());
  write_json(opt.out, report);
  return report;
}

}  // namespace slicevoco

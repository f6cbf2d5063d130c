// SPDX-License-Identifier: Apache-2.0
#include "slicevoco/pretrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <future>
#include <numeric>
#include <set>
#include <sstream>

#include "slicevoco/errors.hpp"
#include "slicevoco/hashing.hpp"
#include "slicevoco/metrics.hpp"

namespace slicevoco {

StudentTeacherState make_initial_state(const Encoder& encoder, std::uint64_t seed, double momentum) {
  std::mt19937_64 rng(mix64(seed ^ 0x73747564656E74ULL));
  StudentTeacherState state;
  state.student = encoder.init_params(rng);
  state.teacher = state.student;
  state.momentum = momentum;
  state.step = 0;
  return state;
}

void ema_update(StudentTeacherState& state) {
  const double m = state.momentum;
  if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("EMA momentum must lie in [0,1]");
  require_same_layout(state.teacher, state.student, "ema_update");
  const double keep = 1.0 - m;
  for (std::size_t i = 0; i < state.teacher.size(); ++i) {
    auto& t = state.teacher.entry(i).tensor.data;
    const auto& s = state.student.entry(i).tensor.data;
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = std::fma(m, t[k], keep * s[k]);
  }
}

nlohmann::json describe_batch(const PretrainBatch& batch, const CropGridSpec& grid) {
  auto box_json = [](const CropBox& b) {
    return nlohmann::json{{"x0", b.x0}, {"y0", b.y0}, {"w", b.w}, {"h", b.h}};
  };
  nlohmann::json out = nlohmann::json::array();
  for (const auto& p : batch.patients) {
    out.push_back({{"patient_id", p.patient_id},
                   {"slice_index", p.slice_index},
                   {"grid", {{"rows", grid.rows}, {"cols", grid.cols}, {"crop_w", grid.crop_w},
                             {"crop_h", grid.crop_h}, {"slice_w", grid.slice_w}, {"slice_h", grid.slice_h}}},
                   {"random_crop", box_json(p.random_crop)},
                   {"r", p.r}});
  }
  return out;
}

PretrainBatch assemble_batch(std::span<const SliceStack> volumes, const CropGridSpec& grid,
                             std::mt19937_64& rng, std::size_t patients, OverlapMeasure measure) {
  validate(grid);
  if (patients < 2) throw ConfigError("a pretraining batch needs at least 2 patients");
  std::set<std::string> distinct;
  for (const auto& v : volumes) distinct.insert(v.source_patient_id);
  if (distinct.size() < patients) {
    throw DataError("need " + std::to_string(patients) + " distinct patients, pool has " +
                    std::to_string(distinct.size()));
  }

  // Partial Fisher-Yates over pool indices, skipping repeated patient ids.
  std::vector<std::size_t> order(volumes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  PretrainBatch batch;
  std::set<std::string> taken;
  for (std::size_t i = 0; i < order.size() && batch.patients.size() < patients; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
    std::swap(order[i], order[pick(rng)]);
    const auto& stack = volumes[order[i]];
    if (!taken.insert(stack.source_patient_id).second) continue;
    if (stack.width() != grid.slice_w || stack.height() != grid.slice_h) {
      throw ConfigError("slice size " + std::to_string(stack.height()) + "x" + std::to_string(stack.width()) +
                        " of '" + stack.source_patient_id + "' does not match the crop grid");
    }

    PatientCrops p;
    p.patient_id = stack.source_patient_id;
    p.pool_index = order[i];
    std::uniform_int_distribution<std::size_t> slice_pick(0, stack.depth() - 1);
    p.slice_index = slice_pick(rng);
    p.grid = make_base_grid(grid, p.slice_index);
    p.random_crop = sample_random_crop(grid, rng, p.slice_index);
    p.r = overlap_vector(p.random_crop, p.grid, measure);
    p.random_patch = extract_patch(stack, p.random_crop);
    p.base_patches.reserve(p.grid.size());
    for (const auto& b : p.grid) p.base_patches.push_back(extract_patch(stack, b));
    batch.patients.push_back(std::move(p));
  }
  return batch;
}

void validate(const PretrainConfig& c) {
  if (c.steps < 0) throw ConfigError("steps must be >= 0");
  if (c.batch_patients < 2) throw ConfigError("batch_patients must be >= 2");
  if (!(c.momentum >= 0.0 && c.momentum <= 1.0)) throw ConfigError("momentum must lie in [0,1]");
  if (c.checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (!(c.weights.intra >= 0.0 && c.weights.inter >= 0.0 && c.weights.reg >= 0.0)) {
    throw ConfigError("loss weights must be >= 0");
  }
  validate(c.optimizer);
  validate(c.grid);
  validate(c.encoder);
}

void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = {{"steps", c.steps},
       {"batch_patients", c.batch_patients},
       {"optimizer", c.optimizer},
       {"momentum", c.momentum},
       {"loss_weights", {c.weights.intra, c.weights.inter, c.weights.reg}},
       {"seed", c.seed},
       {"checkpoint_every", c.checkpoint_every},
       {"overlap_measure", c.overlap_measure == OverlapMeasure::iou ? "iou" : "overlap_fraction"},
       {"grid",
        {{"rows", c.grid.rows},
         {"cols", c.grid.cols},
         {"crop_w", c.grid.crop_w},
         {"crop_h", c.grid.crop_h},
         {"slice_w", c.grid.slice_w},
         {"slice_h", c.grid.slice_h}}},
       {"encoder", c.encoder}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
  c.steps = j.at("steps").get<std::int64_t>();
  c.batch_patients = j.at("batch_patients").get<std::size_t>();
  c.optimizer = j.at("optimizer").get<OptimizerConfig>();
  c.momentum = j.at("momentum").get<double>();
  const auto w = j.at("loss_weights").get<std::vector<double>>();
  if (w.size() != 3) throw ConfigError("loss_weights must have 3 entries");
  c.weights = {w[0], w[1], w[2]};
  c.seed = j.at("seed").get<std::uint64_t>();
  c.checkpoint_every = j.at("checkpoint_every").get<std::int64_t>();
  c.overlap_measure =
      j.at("overlap_measure").get<std::string>() == "iou" ? OverlapMeasure::iou : OverlapMeasure::overlap_fraction;
  const auto& g = j.at("grid");
  c.grid = {g.at("rows").get<std::size_t>(),   g.at("cols").get<std::size_t>(),
            g.at("crop_w").get<std::size_t>(), g.at("crop_h").get<std::size_t>(),
            g.at("slice_w").get<std::size_t>(), g.at("slice_h").get<std::size_t>()};
  c.encoder = j.at("encoder").get<EncoderConfig>();
}

std::mt19937_64 step_rng(std::uint64_t seed, std::int64_t step) {
  const auto s = static_cast<std::uint64_t>(step);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32)};
  return std::mt19937_64(seq);
}

std::string to_json_line(const StepLog& log) {
  nlohmann::ordered_json j;
  j["step"] = log.step;
  j["intra"] = log.loss.intra;
  j["inter"] = log.loss.inter;
  j["reg"] = log.loss.reg;
  j["total"] = log.loss.total;
  return j.dump();
}

PretrainGradients pretrain_loss_and_grad(const Encoder& encoder, const ParameterSet& student,
                                         const ParameterSet& teacher, const PretrainBatch& batch,
                                         const LossWeights& weights) {
  const std::size_t n_pat = batch.patients.size();
  if (n_pat < 2) throw DataError("pretraining batch needs at least 2 patients");
  const std::size_t cells = batch.patients.front().base_patches.size();

  // Patch layout per patient: [random, base_0 .. base_{n-1}].
  std::vector<Image2D> patches;
  patches.reserve(n_pat * (cells + 1));
  for (const auto& p : batch.patients) {
    if (p.base_patches.size() != cells || p.r.size() != cells) {
      throw DataError("pretraining batch has inconsistent grid sizes");
    }
    patches.push_back(p.random_patch);
    patches.insert(patches.end(), p.base_patches.begin(), p.base_patches.end());
  }
  const auto s_fwd = encoder.forward_patches(student, patches, true);
  const auto t_fwd = encoder.forward_patches(teacher, patches, false);
  auto at = [&](const std::vector<Embedding>& e, std::size_t p, std::size_t slot) -> const Embedding& {
    return e[p * (cells + 1) + slot];
  };

  std::vector<Embedding> d_emb(patches.size(), Embedding(encoder.embedding_dim(), 0.0));
  auto add_scaled = [](Embedding& dst, const Embedding& src, double scale) {
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += scale * src[k];
  };

  // Intra: student random crop against teacher base crops (teacher is a constant).
  double intra = 0.0;
  for (std::size_t p = 0; p < n_pat; ++p) {
    std::vector<double> sims(cells);
    std::vector<CosineGrad> cg(cells);
    for (std::size_t i = 0; i < cells; ++i) {
      cg[i] = cosine_with_grad(at(s_fwd.embeddings, p, 0), at(t_fwd.embeddings, p, i + 1));
      sims[i] = cg[i].value;
    }
    const auto l = intra_loss_grad(sims, batch.patients[p].r);
    intra += l.value / static_cast<double>(n_pat);
    const double scale = weights.intra / static_cast<double>(n_pat);
    if (scale != 0.0) {
      for (std::size_t i = 0; i < cells; ++i) add_scaled(d_emb[p * (cells + 1)], cg[i].d_a, scale * l.grad[i]);
    }
  }

  // Inter: every ordered pair (A, B), A != B; random crop from A, base crops from B.
  double inter = 0.0;
  const double n_pairs = static_cast<double>(n_pat * (n_pat - 1));
  for (std::size_t a = 0; a < n_pat; ++a) {
    for (std::size_t b = 0; b < n_pat; ++b) {
      if (a == b) continue;
      std::vector<double> t_sims(cells);
      std::vector<double> s_sims(cells);
      std::vector<CosineGrad> cg(cells);
      for (std::size_t i = 0; i < cells; ++i) {
        t_sims[i] = cosine_similarity(at(t_fwd.embeddings, a, 0), at(t_fwd.embeddings, b, i + 1));
        cg[i] = cosine_with_grad(at(s_fwd.embeddings, a, 0), at(s_fwd.embeddings, b, i + 1));
        s_sims[i] = cg[i].value;
      }
      const auto l = inter_loss_grad(t_sims, s_sims);
      inter += l.value / n_pairs;
      const double scale = weights.inter / n_pairs;
      if (scale != 0.0) {
        for (std::size_t i = 0; i < cells; ++i) {
          add_scaled(d_emb[a * (cells + 1)], cg[i].d_a, scale * l.grad[i]);
          add_scaled(d_emb[b * (cells + 1) + i + 1], cg[i].d_b, scale * l.grad[i]);
        }
      }
    }
  }

  // Reg: student base crops of each patient kept apart.
  double reg = 0.0;
  for (std::size_t p = 0; p < n_pat; ++p) {
    std::vector<Embedding> base(s_fwd.embeddings.begin() + static_cast<std::ptrdiff_t>(p * (cells + 1) + 1),
                                s_fwd.embeddings.begin() + static_cast<std::ptrdiff_t>((p + 1) * (cells + 1)));
    const auto l = reg_loss_grad(base);
    reg += l.value / static_cast<double>(n_pat);
    const double scale = weights.reg / static_cast<double>(n_pat);
    if (scale != 0.0) {
      for (std::size_t i = 0; i < cells; ++i) add_scaled(d_emb[p * (cells + 1) + i + 1], l.grads[i], scale);
    }
  }

  PretrainGradients out;
  if (!std::isfinite(intra) || !std::isfinite(inter) || !std::isfinite(reg)) {
    out.loss = {intra, inter, reg, weights.intra * intra + weights.inter * inter + weights.reg * reg};
    out.grads = student.zeros_like();
    return out;
  }
  out.loss = total_loss(intra, inter, reg, weights);
  out.grads = student.zeros_like();
  encoder.backward_patches(student, s_fwd, d_emb, out.grads);
  return out;
}

LossBreakdown pretrain_step(const Encoder& encoder, StudentTeacherState& state, Optimizer& optimizer,
                            const PretrainBatch& batch, const PretrainConfig& config) {
  PretrainGradients g;
  try {
    g = pretrain_loss_and_grad(encoder, state.student, state.teacher, batch, config.weights);
  } catch (const NumericalError& e) {
    throw NumericalError(std::string("step ") + std::to_string(state.step + 1) + ": " + e.what(),
                         describe_batch(batch, config.grid).dump());
  }
  if (!std::isfinite(g.loss.total) || !g.grads.all_finite()) {
    throw NumericalError("non-finite pretraining loss at step " + std::to_string(state.step + 1),
                         describe_batch(batch, config.grid).dump());
  }
  optimizer.step(state.student, g.grads);
  ema_update(state);
  ++state.step;
  return g.loss;
}

Checkpoint make_pretrain_checkpoint(const StudentTeacherState& state, const Optimizer& optimizer,
                                    const PretrainConfig& config) {
  Checkpoint ckpt;
  ckpt.kind = "student_teacher";
  ckpt.config = {{"encoder", config.encoder}, {"pretrain", config}};
  ckpt.extras = {{"momentum", state.momentum}, {"step", state.step}};
  append_prefixed(ckpt.arrays, state.student, "student/");
  append_prefixed(ckpt.arrays, state.teacher, "teacher/");
  optimizer.export_state(ckpt.arrays, ckpt.extras, "opt/");
  return ckpt;
}

StudentTeacherState restore_pretrain_checkpoint(const Checkpoint& ckpt, const PretrainConfig& config,
                                                Optimizer& optimizer) {
  if (ckpt.kind != "student_teacher") throw DataError("checkpoint kind '" + ckpt.kind + "' is not student_teacher");
  if (ckpt.config.at("encoder").get<EncoderConfig>() != config.encoder) {
    throw ConfigError("checkpoint encoder config differs from the run config");
  }
  StudentTeacherState state;
  state.student = take_prefixed(ckpt.arrays, "student/");
  state.teacher = take_prefixed(ckpt.arrays, "teacher/");
  require_same_layout(state.student, state.teacher, "checkpoint student/teacher");
  state.momentum = ckpt.extras.at("momentum").get<double>();
  state.step = ckpt.extras.at("step").get<std::int64_t>();
  optimizer.import_state(ckpt.arrays, ckpt.extras, "opt/");
  return state;
}

namespace {

std::string checkpoint_name(std::int64_t step) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "checkpoint_step_%06lld.svck", static_cast<long long>(step));
  return buf;
}

// Keeps only log lines for steps <= `last_step` (used when resuming into the same directory).
void truncate_log(const std::filesystem::path& path, std::int64_t last_step) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path);
  std::string kept;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (nlohmann::json::parse(line).at("step").get<std::int64_t>() <= last_step) kept += line + "\n";
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << kept;
}

}  // namespace

PretrainResult run_pretraining(const PretrainConfig& config, std::span<const SliceStack> pool,
                               const PretrainRunOptions& options) {
  validate(config);
  const Encoder encoder(config.encoder);
  PretrainResult result;
  auto initial = make_initial_state(encoder, config.seed, config.momentum);
  Optimizer optimizer(config.optimizer, initial.student);
  result.state = options.resume_from ? restore_pretrain_checkpoint(*options.resume_from, config, optimizer)
                                     : std::move(initial);
  if (config.steps == 0) return result;
  if (pool.size() < config.batch_patients) {
    throw DataError("pretraining pool has " + std::to_string(pool.size()) + " volumes, need at least " +
                    std::to_string(config.batch_patients));
  }

  std::ofstream loss_log;
  std::ofstream crop_log;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    const auto loss_path = *options.out_dir / "loss_log.jsonl";
    const auto crop_path = *options.out_dir / "crops.jsonl";
    if (options.resume_from) {
      truncate_log(loss_path, result.state.step);
      truncate_log(crop_path, result.state.step);
    }
    const auto mode = options.resume_from ? std::ios::app : std::ios::trunc;
    loss_log.open(loss_path, std::ios::out | mode);
    if (!loss_log) throw DataError("cannot write " + loss_path.string());
    if (options.log_crops) crop_log.open(crop_path, std::ios::out | mode);
  }

  auto make_batch = [&](std::int64_t step) {
    auto rng = step_rng(config.seed, step);
    return assemble_batch(pool, config.grid, rng, config.batch_patients, config.overlap_measure);
  };

  const auto t0 = std::chrono::steady_clock::now();
  std::future<PretrainBatch> next;
  const std::int64_t first = result.state.step + 1;
  for (std::int64_t step = first; step <= config.steps; ++step) {
    PretrainBatch batch = next.valid() ? next.get() : make_batch(step);
    if (options.prefetch && step < config.steps) {
      next = std::async(std::launch::async, make_batch, step + 1);
    }
    StepLog entry{step, pretrain_step(encoder, result.state, optimizer, batch, config)};
    result.log.push_back(entry);
    if (loss_log.is_open()) loss_log << to_json_line(entry) << '\n' << std::flush;
    if (crop_log.is_open()) {
      crop_log << nlohmann::json{{"step", step}, {"patients", describe_batch(batch, config.grid)}}.dump()
               << '\n';
    }
    if (options.on_step) options.on_step(result.state, entry);
    if (options.out_dir && config.checkpoint_every > 0 && step % config.checkpoint_every == 0 &&
        step != config.steps) {
      save_checkpoint(*options.out_dir / checkpoint_name(step),
                      make_pretrain_checkpoint(result.state, optimizer, config));
    }
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (options.out_dir) {
    save_checkpoint(*options.out_dir / "pretrain_final.svck",
                    make_pretrain_checkpoint(result.state, optimizer, config));
  }
  return result;
}

OverlapProbe probe_overlap_prediction(const Encoder& encoder, const ParameterSet& params,
                                      std::span<const SliceStack> volumes, const CropGridSpec& grid,
                                      std::size_t samples, std::uint64_t seed) {
  if (volumes.empty()) throw DataError("probe needs at least one volume");
  std::mt19937_64 rng(mix64(seed ^ 0x70726F6265ULL));
  std::vector<double> cos_all;
  std::vector<double> r_all;
  std::size_t aligned_hits = 0;
  std::uniform_int_distribution<std::size_t> vol_pick(0, volumes.size() - 1);
  std::uniform_int_distribution<std::size_t> cell_pick(0, grid.cells() - 1);

  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t v = vol_pick(rng);
    const auto& stack = volumes[v];
    // The aligned crop comes from another volume so it never shares pixels with the grid.
    const std::size_t other = volumes.size() > 1 ? (v + 1 + vol_pick(rng) % (volumes.size() - 1)) % volumes.size() : v;
    std::uniform_int_distribution<std::size_t> slice_pick(0, stack.depth() - 1);
    const std::size_t z = slice_pick(rng);
    const auto cells = make_base_grid(grid, z);
    std::vector<Image2D> patches;
    patches.reserve(cells.size() + 2);
    for (const auto& b : cells) patches.push_back(extract_patch(stack, b));
    const CropBox random = sample_random_crop(grid, rng, z);
    const std::size_t k = cell_pick(rng);
    patches.push_back(extract_patch(stack, random));
    CropBox aligned = cells[k];
    aligned.slice_index = std::min(z, volumes[other].depth() - 1);
    patches.push_back(extract_patch(volumes[other], aligned));
    const auto emb = encoder.forward_patches(params, patches, false).embeddings;

    const auto r = overlap_vector(random, cells);
    const auto& f_random = emb[cells.size()];
    const auto& f_aligned = emb[cells.size() + 1];
    std::size_t best = 0;
    double best_cos = -2.0;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      cos_all.push_back(cosine_similarity(f_random, emb[i]));
      r_all.push_back(r[i]);
      const double c = cosine_similarity(f_aligned, emb[i]);
      if (c > best_cos) {
        best_cos = c;
        best = i;
      }
    }
    if (best == k) ++aligned_hits;
  }
  OverlapProbe probe;
  probe.pairs = cos_all.size();
  probe.spearman = spearman_correlation(cos_all, r_all);
  std::vector<std::size_t> order(r_all.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return r_all[a] < r_all[b]; });
  std::vector<double> untied(r_all.size());
  for (std::size_t i = 0; i < order.size(); ++i) untied[order[i]] = static_cast<double>(i);
  probe.spearman_ceiling = spearman_correlation(untied, r_all);
  probe.aligned_argmax_accuracy = static_cast<double>(aligned_hits) / static_cast<double>(samples);
  return probe;
}

}  // namespace slicevoco

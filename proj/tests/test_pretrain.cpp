// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <vector>

#include "slicevoco/checkpoint.hpp"
#include "slicevoco/errors.hpp"
#include "slicevoco/pretrain.hpp"
#include "slicevoco/synthetic.hpp"
#include "test_support.hpp"

using namespace slicevoco;
using slicevoco::fixtures::random_stack;
using slicevoco::fixtures::TempDir;

namespace {

PretrainConfig small_config(std::int64_t steps) {
  PretrainConfig c;
  c.steps = steps;
  c.batch_patients = 2;
  c.momentum = 0.9;
  c.seed = 5;
  c.optimizer.learning_rate = 1e-2;
  c.grid = CropGridSpec{2, 2, 8, 8, 16, 16};
  c.encoder.embedding_dim = 16;
  return c;
}

std::vector<SliceStack> small_pool(std::size_t n = 3) {
  std::vector<SliceStack> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back(random_stack({3, 16, 16}, 100 + i));
  return v;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ParameterSet scalar_set(double v) {
  ParameterSet p;
  p.add("w", Tensor({1}, v));
  return p;
}

}  // namespace

TEST(Ema, ScalarGeometricRecursion) {
  StudentTeacherState s{scalar_set(0.0), scalar_set(1.0), 0.9, 0};
  for (int k = 1; k <= 50; ++k) {
    ema_update(s);
    EXPECT_NEAR(s.teacher.at("w").data[0], std::pow(0.9, k), 1e-12);
  }
  EXPECT_EQ(s.student.at("w").data[0], 0.0);
}

TEST(Ema, MomentumEndpoints) {
  std::mt19937_64 rng(1);
  const Encoder enc{EncoderConfig{}};
  const ParameterSet a = enc.init_params(rng);
  const ParameterSet b = enc.init_params(rng);
  StudentTeacherState zero{a, b, 0.0, 0};
  ema_update(zero);
  EXPECT_EQ(zero.teacher, a);
  StudentTeacherState one{a, b, 1.0, 0};
  ema_update(one);
  EXPECT_EQ(one.teacher, b);
}

TEST(Ema, ClosedFormForFrozenStudent) {
  std::mt19937_64 rng(2);
  const Encoder enc{EncoderConfig{}};
  const ParameterSet s = enc.init_params(rng);
  const ParameterSet t0 = enc.init_params(rng);
  for (double m : {0.0, 0.5, 0.9, 0.99, 1.0}) {
    StudentTeacherState st{s, t0, m, 0};
    double prev = max_abs_difference(st.teacher, st.student);
    for (int k = 1; k <= 30; ++k) {
      ema_update(st);
      const double dist = max_abs_difference(st.teacher, st.student);
      EXPECT_LE(dist, prev);
      prev = dist;
      double worst = 0.0;
      const double mk = std::pow(m, k);
      for (std::size_t e = 0; e < s.size(); ++e) {
        const auto& ts = s.entry(e).tensor.data;
        const auto& t0v = t0.entry(e).tensor.data;
        const auto& tk = st.teacher.entry(e).tensor.data;
        for (std::size_t i = 0; i < ts.size(); ++i) worst = std::max(worst, std::abs(tk[i] - (ts[i] + mk * (t0v[i] - ts[i]))));
      }
      EXPECT_LT(worst, 1e-12) << "m=" << m << " k=" << k;
    }
  }
}

TEST(Ema, RejectsMismatchAndBadMomentum) {
  ParameterSet other;
  other.add("v", Tensor({1}));
  StudentTeacherState s{scalar_set(0.0), other, 0.5, 0};
  EXPECT_THROW(ema_update(s), ConfigError);
  StudentTeacherState m{scalar_set(0.0), scalar_set(1.0), 1.5, 0};
  EXPECT_THROW(ema_update(m), ConfigError);
}

TEST(InitialState, TeacherCopiesStudent) {
  const Encoder enc{EncoderConfig{}};
  const StudentTeacherState s = make_initial_state(enc, 9, 0.99);
  EXPECT_EQ(s.student, s.teacher);
  EXPECT_EQ(s.step, 0);
}

TEST(AssembleBatch, DistinctPatientsAndRasterOverlap) {
  const auto pool = small_pool(2);
  const CropGridSpec grid{2, 2, 8, 8, 16, 16};
  std::mt19937_64 rng(3);
  const PretrainBatch b = assemble_batch(pool, grid, rng, 2);
  ASSERT_EQ(b.patients.size(), 2u);
  EXPECT_NE(b.patients[0].pool_index, b.patients[1].pool_index);
  for (const auto& p : b.patients) {
    ASSERT_EQ(p.r.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
      std::size_t inter = 0, uni = 0;
      for (std::size_t y = 0; y < 16; ++y) {
        for (std::size_t x = 0; x < 16; ++x) {
          auto in = [&](const CropBox& c) { return x >= c.x0 && x < c.x0 + c.w && y >= c.y0 && y < c.y0 + c.h; };
          const bool a = in(p.random_crop), g = in(p.grid[i]);
          inter += a && g;
          uni += a || g;
        }
      }
      EXPECT_EQ(p.r[i], static_cast<double>(inter) / static_cast<double>(uni));
    }
    EXPECT_EQ(p.random_patch, extract_patch(pool[p.pool_index], p.random_crop));
    EXPECT_EQ(p.base_patches.size(), 4u);
  }
}

TEST(AssembleBatch, DeterministicAndNeedsEnoughPatients) {
  const auto pool = small_pool(3);
  const CropGridSpec grid{2, 2, 8, 8, 16, 16};
  std::mt19937_64 a(4), b(4);
  EXPECT_EQ(describe_batch(assemble_batch(pool, grid, a, 3), grid), describe_batch(assemble_batch(pool, grid, b, 3), grid));
  std::mt19937_64 c(4);
  EXPECT_ANY_THROW(assemble_batch(pool, grid, c, 4));
  std::mt19937_64 d(4);
  EXPECT_THROW(assemble_batch(pool, CropGridSpec{4, 4, 8, 8, 16, 16}, d, 2), ConfigError);
}

TEST(PretrainStep, ZeroWeightsLeaveParametersAlone) {
  auto cfg = small_config(1);
  cfg.weights = LossWeights{0, 0, 0};
  const Encoder enc(cfg.encoder);
  StudentTeacherState s = make_initial_state(enc, 1, cfg.momentum);
  const ParameterSet before = s.student;
  Optimizer opt(cfg.optimizer, s.student);
  const auto pool = small_pool();
  std::mt19937_64 rng(5);
  pretrain_step(enc, s, opt, assemble_batch(pool, cfg.grid, rng, 2), cfg);
  EXPECT_EQ(s.student, before);
  EXPECT_EQ(s.teacher, before);
  EXPECT_EQ(s.step, 1);
}

TEST(PretrainStep, TeacherFollowsUpdatedStudent) {
  auto cfg = small_config(1);
  const Encoder enc(cfg.encoder);
  StudentTeacherState s = make_initial_state(enc, 2, cfg.momentum);
  std::mt19937_64 prng(6);
  s.teacher = enc.init_params(prng);
  const ParameterSet t0 = s.teacher;
  Optimizer opt(cfg.optimizer, s.student);
  const auto pool = small_pool();
  std::mt19937_64 rng(7);
  pretrain_step(enc, s, opt, assemble_batch(pool, cfg.grid, rng, 2), cfg);
  StudentTeacherState expect{s.student, t0, cfg.momentum, 0};
  ema_update(expect);
  EXPECT_EQ(s.teacher, expect.teacher);
}

TEST(PretrainStep, LossDecreasesOnFixedBatch) {
  auto cfg = small_config(1);
  cfg.optimizer.learning_rate = 5e-3;
  const Encoder enc(cfg.encoder);
  StudentTeacherState s = make_initial_state(enc, 3, cfg.momentum);
  Optimizer opt(cfg.optimizer, s.student);
  const auto pool = small_pool();
  std::mt19937_64 rng(8);
  const PretrainBatch batch = assemble_batch(pool, cfg.grid, rng, 2);
  const double start = pretrain_loss_and_grad(enc, s.student, s.teacher, batch, cfg.weights).loss.total;
  for (int i = 0; i < 20; ++i) pretrain_step(enc, s, opt, batch, cfg);
  EXPECT_LT(pretrain_loss_and_grad(enc, s.student, s.teacher, batch, cfg.weights).loss.total, start);
}

TEST(PretrainStep, NonFiniteInputAbortsWithDiagnostic) {
  auto cfg = small_config(1);
  const Encoder enc(cfg.encoder);
  StudentTeacherState s = make_initial_state(enc, 4, cfg.momentum);
  s.student.at("backbone.conv1.weight").data[0] = std::nan("");
  Optimizer opt(cfg.optimizer, s.student);
  const auto pool = small_pool();
  std::mt19937_64 rng(9);
  try {
    pretrain_step(enc, s, opt, assemble_batch(pool, cfg.grid, rng, 2), cfg);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_FALSE(e.diagnostic().empty());
  }
}

TEST(RunPretraining, ZeroStepsReturnsInitialState) {
  auto cfg = small_config(0);
  const auto pool = small_pool();
  const PretrainResult r = run_pretraining(cfg, pool);
  EXPECT_TRUE(r.log.empty());
  const Encoder enc(cfg.encoder);
  const StudentTeacherState init = make_initial_state(enc, cfg.seed, cfg.momentum);
  EXPECT_EQ(r.state.student, init.student);
  EXPECT_EQ(r.state.teacher, init.teacher);
}

TEST(RunPretraining, LogIsPureFunctionOfSeedConfigData) {
  auto cfg = small_config(6);
  const auto pool = small_pool();
  const PretrainResult a = run_pretraining(cfg, pool);
  PretrainRunOptions opts;
  opts.prefetch = true;
  const PretrainResult b = run_pretraining(cfg, pool, opts);
  ASSERT_EQ(a.log.size(), 6u);
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(to_json_line(a.log[i]), to_json_line(b.log[i]));
  EXPECT_EQ(a.state.student, b.state.student);
  cfg.seed += 1;
  const PretrainResult c = run_pretraining(cfg, pool);
  EXPECT_NE(to_json_line(a.log.back()), to_json_line(c.log.back()));
}

TEST(RunPretraining, TeacherReplayMatchesRecordedStudents) {
  auto cfg = small_config(8);
  const auto pool = small_pool();
  std::vector<ParameterSet> students;
  PretrainRunOptions opts;
  opts.on_step = [&](const StudentTeacherState& s, const StepLog&) { students.push_back(s.student); };
  const PretrainResult r = run_pretraining(cfg, pool, opts);
  ASSERT_EQ(students.size(), 8u);
  const Encoder enc(cfg.encoder);
  StudentTeacherState replay = make_initial_state(enc, cfg.seed, cfg.momentum);
  for (const auto& s : students) {
    replay.student = s;
    ema_update(replay);
  }
  EXPECT_EQ(replay.teacher, r.state.teacher);
}

TEST(RunPretraining, ResumeMatchesUninterruptedRun) {
  for (OptimizerKind kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
    auto cfg = small_config(8);
    cfg.optimizer.kind = kind;
    cfg.optimizer.learning_rate = kind == OptimizerKind::adam ? 1e-3 : 1e-2;
    const auto pool = small_pool();
    const PretrainResult full = run_pretraining(cfg, pool);

    TempDir dir("resume");
    auto first = cfg;
    first.steps = 4;
    PretrainRunOptions o1;
    o1.out_dir = dir.path();
    run_pretraining(first, pool, o1);
    PretrainRunOptions o2;
    o2.resume_from = load_checkpoint(dir / "pretrain_final.svck");
    const PretrainResult rest = run_pretraining(cfg, pool, o2);
    ASSERT_EQ(rest.log.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(to_json_line(rest.log[i]), to_json_line(full.log[4 + i]));
    EXPECT_EQ(rest.state.student, full.state.student);
    EXPECT_EQ(rest.state.teacher, full.state.teacher);
    EXPECT_EQ(rest.state.step, 8);
  }
}

TEST(RunPretraining, CheckpointRoundTripAndCadence) {
  auto cfg = small_config(4);
  cfg.checkpoint_every = 2;
  const auto pool = small_pool();
  TempDir dir("cadence");
  PretrainRunOptions o;
  o.out_dir = dir.path();
  const PretrainResult r = run_pretraining(cfg, pool, o);
  const auto bytes = read_file(dir / "pretrain_final.svck");
  ASSERT_FALSE(bytes.empty());
  const Checkpoint ck = decode_checkpoint(bytes);
  EXPECT_EQ(encode_checkpoint(ck), bytes);
  Optimizer opt(cfg.optimizer, r.state.student);
  const StudentTeacherState back = restore_pretrain_checkpoint(ck, cfg, opt);
  EXPECT_EQ(back.student, r.state.student);
  EXPECT_EQ(back.teacher, r.state.teacher);
  EXPECT_EQ(back.step, 4);
  EXPECT_DOUBLE_EQ(back.momentum, cfg.momentum);
  std::size_t periodic = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir.path())) {
    const auto name = e.path().filename().string();
    if (name.rfind("checkpoint_step", 0) == 0) ++periodic;
  }
  EXPECT_EQ(periodic, 1u);
}

TEST(RunPretraining, ConfigJsonRoundTrip) {
  auto cfg = small_config(3);
  cfg.optimizer.kind = OptimizerKind::adam;
  cfg.weights = LossWeights{1, 0.5, 2};
  nlohmann::json j = cfg;
  const PretrainConfig back = j.get<PretrainConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
}

TEST(StepRng, DependsOnSeedAndStep) {
  auto a = step_rng(1, 0), b = step_rng(1, 0), c = step_rng(1, 1), d = step_rng(2, 0);
  const auto va = a();
  EXPECT_EQ(va, b());
  EXPECT_NE(va, c());
  EXPECT_NE(va, d());
}

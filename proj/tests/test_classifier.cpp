// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "slicevoco/classifier.hpp"
#include "slicevoco/errors.hpp"
#include "slicevoco/synthetic.hpp"
#include "test_support.hpp"

using namespace slicevoco;
using slicevoco::fixtures::random_stack;

namespace {

ClassifierConfig tiny_config() {
  ClassifierConfig c;
  c.hidden = 5;
  c.epochs = 1;
  c.batch_size = 2;
  c.seed = 3;
  c.encoder.embedding_dim = 16;
  return c;
}

Matrix random_seq(std::size_t T, std::size_t F, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(T, F);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

OrganLabelTriple labels(int k, int l, int s) {
  return OrganLabelTriple{{InjuryLevel(k), InjuryLevel(l), InjuryLevel(s)}};
}

void zero_heads(ParameterSet& p) {
  for (auto& e : p) {
    if (e.name.rfind("head.", 0) == 0 && e.name.find(".out.") != std::string::npos) std::fill(e.tensor.data.begin(), e.tensor.data.end(), 0.0);
  }
}

std::vector<LabeledStudy> tiny_studies(std::size_t n) {
  std::vector<LabeledStudy> v;
  std::mt19937_64 rng(8);
  for (std::size_t i = 0; i < n; ++i) {
    v.push_back({"p" + std::to_string(i), random_stack({3, 16, 16}, 40 + i), slicevoco::fixtures::random_labels(rng)});
  }
  return v;
}

double worst_fd_error(const ClassifierConfig& cfg) {
  const std::size_t F = 6;
  const SequenceClassifier clf(cfg, F);
  std::mt19937_64 rng(11);
  const ParameterSet params = clf.init_params(rng);
  const Matrix seq = random_seq(4, F, 12);
  const OrganLabelTriple y = labels(2, 0, 1);
  ParameterSet grads = params.zeros_like();
  Matrix d_seq;
  clf.loss_and_grad(params, seq, y, grads, &d_seq);
  auto loss_at = [&](const ParameterSet& p, const Matrix& s) {
    ParameterSet g = p.zeros_like();
    return clf.loss_and_grad(p, s, y, g, nullptr);
  };
  const double h = 1e-5;
  double worst = 0.0;
  auto rel = [&](double fd, double an) {
    const double denom = std::max({std::abs(fd), std::abs(an), 1e-7});
    worst = std::max(worst, std::abs(fd - an) / denom);
  };
  for (const auto& e : params) {
    for (std::size_t k = 0; k < e.tensor.size(); k += std::max<std::size_t>(1, e.tensor.size() / 7)) {
      ParameterSet p = params, m = params;
      p.at(e.name).data[k] += h;
      m.at(e.name).data[k] -= h;
      rel((loss_at(p, seq) - loss_at(m, seq)) / (2 * h), grads.at(e.name).data[k]);
    }
  }
  for (Eigen::Index i = 0; i < seq.size(); i += 3) {
    Matrix p = seq, m = seq;
    p.data()[i] += h;
    m.data()[i] -= h;
    rel((loss_at(params, p) - loss_at(params, m)) / (2 * h), d_seq.data()[i]);
  }
  return worst;
}

}  // namespace

TEST(ClassifierConfig, ValidationAndJson) {
  ClassifierConfig c = tiny_config();
  c.pooling = Pooling::last_states;
  c.mode = FinetuneMode::frozen_backbone;
  c.head_hidden = 4;
  nlohmann::json j = c;
  EXPECT_EQ(j.get<ClassifierConfig>(), c);
  c.hidden = 0;
  EXPECT_THROW(validate(c), ConfigError);
  EXPECT_THROW(parse_pooling("max"), ConfigError);
  EXPECT_EQ(parse_finetune_mode("frozen_backbone"), FinetuneMode::frozen_backbone);
}

TEST(SequenceFeatures, SingleSliceEqualsEncodeSlice) {
  const Encoder enc(tiny_config().encoder);
  std::mt19937_64 rng(1);
  const ParameterSet params = enc.init_params(rng);
  const SliceStack stack = random_stack({1, 16, 16}, 2);
  const Matrix f = extract_sequence_features(enc, params, stack);
  ASSERT_EQ(f.rows(), 1);
  const auto e = encode_slice(enc, params, slice_image(stack, 0));
  for (std::size_t k = 0; k < e.size(); ++k) EXPECT_NEAR(f(0, static_cast<Eigen::Index>(k)), e[k], 1e-12);
}

TEST(SequenceFeatures, PermutingSlicesPermutesRows) {
  const Encoder enc(tiny_config().encoder);
  std::mt19937_64 rng(3);
  const ParameterSet params = enc.init_params(rng);
  const SliceStack stack = random_stack({4, 12, 12}, 4);
  SliceStack rev = stack;
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t y = 0; y < 12; ++y) {
      for (std::size_t x = 0; x < 12; ++x) rev.slices(t, y, x) = stack.slices(3 - t, y, x);
    }
  }
  const Matrix a = extract_sequence_features(enc, params, stack);
  const Matrix b = extract_sequence_features(enc, params, rev);
  for (Eigen::Index t = 0; t < 4; ++t) EXPECT_LT((a.row(t) - b.row(3 - t)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_GT((a.row(0) - a.row(1)).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_THROW(extract_sequence_features(enc, params, stack, Shape3{5, 12, 12}), DataError);
}

TEST(ClassifierForward, ProbabilitiesAreDistributions) {
  for (Pooling pool : {Pooling::mean, Pooling::last_states}) {
    ClassifierConfig cfg = tiny_config();
    cfg.pooling = pool;
    cfg.layers = 2;
    const SequenceClassifier clf(cfg, 6);
    std::mt19937_64 rng(4);
    const ParameterSet p = clf.init_params(rng);
    for (int i = 0; i < 20; ++i) {
      const auto out = clf.forward(p, random_seq(1 + i % 5, 6, 100 + i));
      for (const auto& organ : out.prediction.probs) {
        double s = 0.0;
        for (double v : organ) {
          EXPECT_GE(v, 0.0);
          EXPECT_LE(v, 1.0);
          s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
    }
  }
}

TEST(ClassifierForward, ZeroHeadsGiveUniform) {
  const SequenceClassifier clf(tiny_config(), 6);
  std::mt19937_64 rng(5);
  ParameterSet p = clf.init_params(rng);
  zero_heads(p);
  const auto out = clf.forward(p, random_seq(3, 6, 6));
  for (const auto& organ : out.prediction.probs) {
    for (double v : organ) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  }
  ClassifierConfig unit = tiny_config();
  unit.class_weights = WeightTable{{1.0, 1.0, 1.0}};
  const SequenceClassifier clf_unit(unit, 6);
  ParameterSet g = p.zeros_like();
  EXPECT_NEAR(clf_unit.loss_and_grad(p, random_seq(3, 6, 6), labels(0, 1, 2), g, nullptr), 3.0 * std::log(3.0),
              1e-12);
}

TEST(ClassifierForward, ReversedSequenceWithSwappedDirectionsKeepsLogits) {
  const ClassifierConfig cfg = tiny_config();
  const SequenceClassifier clf(cfg, 6);
  std::mt19937_64 rng(6);
  const ParameterSet p = clf.init_params(rng);
  ParameterSet swapped = p;
  for (const char* what : {"W", "U", "b"}) {
    swapped.at(std::string("lstm.l0.fwd.") + what) = p.at(std::string("lstm.l0.bwd.") + what);
    swapped.at(std::string("lstm.l0.bwd.") + what) = p.at(std::string("lstm.l0.fwd.") + what);
  }
  // The pooled vector's halves trade places, so the head columns do too.
  const std::size_t h = cfg.hidden;
  for (const auto& organ : kOrganNames) {
    const auto& w = p.at("head." + std::string(organ) + ".out.weight");
    auto& ws = swapped.at("head." + std::string(organ) + ".out.weight");
    for (std::size_t r = 0; r < kNumClasses; ++r) {
      for (std::size_t c = 0; c < 2 * h; ++c) ws.data[r * 2 * h + (c + h) % (2 * h)] = w.data[r * 2 * h + c];
    }
  }
  const Matrix seq = random_seq(5, 6, 7);
  const Matrix rev = seq.colwise().reverse();
  const auto a = clf.forward(p, seq);
  const auto b = clf.forward(swapped, rev);
  for (std::size_t o = 0; o < kNumOrgans; ++o) {
    for (std::size_t c = 0; c < kNumClasses; ++c) EXPECT_NEAR(a.logits[o][c], b.logits[o][c], 1e-12);
  }
}

TEST(FinetuneLoss, Examples) {
  ClassifierConfig cfg = tiny_config();
  StudyPrediction onehot;
  const OrganLabelTriple y = labels(2, 0, 1);
  for (std::size_t o = 0; o < kNumOrgans; ++o) onehot.probs[o][static_cast<std::size_t>(y.class_of(o))] = 1.0;
  EXPECT_EQ(weighted_cross_entropy(onehot, y, cfg), 0.0);
  StudyPrediction uniform;
  for (auto& organ : uniform.probs) organ.fill(1.0 / 3.0);
  cfg.class_weights = WeightTable{{1.0, 1.0, 1.0}};
  EXPECT_NEAR(weighted_cross_entropy(uniform, y, cfg), 3.0 * std::log(3.0), 1e-12);
  EXPECT_NEAR(3.0 * std::log(3.0), 3.2958, 1e-4);
}

TEST(FinetuneLoss, AdditiveAcrossOrgans) {
  const ClassifierConfig base = tiny_config();
  const SequenceClassifier clf(base, 6);
  std::mt19937_64 rng(9);
  const ParameterSet p = clf.init_params(rng);
  const Matrix seq = random_seq(3, 6, 10);
  const OrganLabelTriple y = labels(1, 2, 0);
  ParameterSet g = p.zeros_like();
  const double total = clf.loss_and_grad(p, seq, y, g, nullptr);
  double sum = 0.0;
  for (std::size_t o = 0; o < kNumOrgans; ++o) {
    ClassifierConfig one = base;
    one.organ_weights = {0.0, 0.0, 0.0};
    one.organ_weights[o] = 1.0;
    const SequenceClassifier c1(one, 6);
    ParameterSet g1 = p.zeros_like();
    const double part = c1.loss_and_grad(p, seq, y, g1, nullptr);
    const auto pred = c1.forward(p, seq).prediction;
    const double expect = base.class_weights[static_cast<std::size_t>(y.class_of(o))] *
                          -std::log(pred.probs[o][static_cast<std::size_t>(y.class_of(o))]);
    EXPECT_NEAR(part, expect, 1e-12);
    sum += part;
  }
  EXPECT_NEAR(sum, total, 1e-12);
}

TEST(FinetuneLoss, OrganHeadGradientIgnoresOtherOrganLabels) {
  const SequenceClassifier clf(tiny_config(), 6);
  std::mt19937_64 rng(13);
  const ParameterSet p = clf.init_params(rng);
  const Matrix seq = random_seq(3, 6, 14);
  ParameterSet ga = p.zeros_like(), gb = p.zeros_like();
  clf.loss_and_grad(p, seq, labels(1, 0, 0), ga, nullptr);
  clf.loss_and_grad(p, seq, labels(1, 2, 1), gb, nullptr);
  EXPECT_EQ(ga.at("head.kidney.out.weight"), gb.at("head.kidney.out.weight"));
  EXPECT_EQ(ga.at("head.kidney.out.bias"), gb.at("head.kidney.out.bias"));
  EXPECT_NE(ga.at("head.liver.out.bias"), gb.at("head.liver.out.bias"));
}

TEST(FinetuneGradients, MatchFiniteDifferences) {
  ClassifierConfig cfg = tiny_config();
  EXPECT_LT(worst_fd_error(cfg), 1e-4);
  cfg.pooling = Pooling::last_states;
  EXPECT_LT(worst_fd_error(cfg), 1e-4);
  cfg.layers = 2;
  cfg.head_hidden = 4;
  EXPECT_LT(worst_fd_error(cfg), 1e-4);
}

TEST(FinetuneStep, FrozenModeKeepsBackboneBitwise) {
  ClassifierConfig cfg = tiny_config();
  cfg.mode = FinetuneMode::frozen_backbone;
  const Encoder enc(cfg.encoder);
  FinetuneState st = make_finetune_state(make_downstream_model(cfg, std::nullopt));
  const ParameterSet before = st.model.params;
  const auto studies = tiny_studies(2);
  std::vector<const LabeledStudy*> batch{&studies[0], &studies[1]};
  finetune_step(enc, st, batch);
  EXPECT_EQ(backbone_subset(st.model.params), backbone_subset(before));
  EXPECT_NE(st.model.params, before);

  cfg.mode = FinetuneMode::full;
  FinetuneState full = make_finetune_state(make_downstream_model(cfg, std::nullopt));
  const ParameterSet fb = full.model.params;
  finetune_step(enc, full, batch);
  EXPECT_NE(backbone_subset(full.model.params), backbone_subset(fb));
  EXPECT_THROW(finetune_step(enc, full, std::span<const LabeledStudy* const>{}), DataError);
}

TEST(FinetuneStep, BackboneGradientMatchesFiniteDifferences) {
  ClassifierConfig cfg = tiny_config();
  cfg.optimizer = OptimizerConfig{OptimizerKind::sgd, 1.0};
  cfg.class_weights = WeightTable{{1.0, 1.0, 1.0}};
  const Encoder enc(cfg.encoder);
  const DownstreamModel model = make_downstream_model(cfg, std::nullopt);
  const auto studies = tiny_studies(1);
  std::vector<const LabeledStudy*> batch{&studies[0]};
  // One SGD step with lr 1 moves each parameter by exactly -gradient.
  FinetuneState st = make_finetune_state(model);
  finetune_step(enc, st, batch);
  const SequenceClassifier clf(cfg, enc.feature_dim());
  auto loss_at = [&](const ParameterSet& p) {
    const Matrix seq = extract_sequence_features(enc, p, studies[0].stack);
    ParameterSet g = p.zeros_like();
    return clf.loss_and_grad(p, seq, studies[0].labels, g, nullptr);
  };
  const double h = 1e-5;
  for (const char* name : {"backbone.conv1.weight", "backbone.conv2.bias", "backbone.conv3.weight"}) {
    for (std::size_t k : {0u, 5u}) {
      ParameterSet p = model.params, m = model.params;
      p.at(name).data[k] += h;
      m.at(name).data[k] -= h;
      const double fd = (loss_at(p) - loss_at(m)) / (2 * h);
      const double an = model.params.at(name).data[k] - st.model.params.at(name).data[k];
      EXPECT_LT(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-7}), 1e-4) << name << "[" << k << "]";
    }
  }
}

TEST(Downstream, SeparateStreamsForBackboneAndHead) {
  const ClassifierConfig cfg = tiny_config();
  const DownstreamModel scratch = make_downstream_model(cfg, std::nullopt);
  std::mt19937_64 rng(77);
  const Encoder enc(cfg.encoder);
  const ParameterSet ssl = enc.init_params(rng);
  const DownstreamModel warm = make_downstream_model(cfg, ssl);
  EXPECT_EQ(backbone_subset(warm.params), backbone_subset(ssl));
  for (const auto& e : scratch.params) {
    if (e.name.rfind("backbone.", 0) == 0) continue;
    EXPECT_EQ(warm.params.at(e.name), e.tensor) << e.name;
  }
}

TEST(Downstream, CheckpointRoundTripAndPredictionPurity) {
  ClassifierConfig cfg = tiny_config();
  cfg.head_hidden = 3;
  const auto studies = tiny_studies(4);
  const FinetuneResult r = run_finetune(make_downstream_model(cfg, std::nullopt), studies);
  ASSERT_EQ(r.log.size(), 1u);
  const Checkpoint ck = make_classifier_checkpoint(r.state.model);
  const std::string bytes = encode_checkpoint(ck);
  const DownstreamModel back = restore_classifier_checkpoint(decode_checkpoint(bytes));
  EXPECT_EQ(back.params, r.state.model.params);
  EXPECT_EQ(back.config, r.state.model.config);
  const Encoder enc(cfg.encoder);
  const auto a = predict_all(enc, back, studies);
  EXPECT_EQ(a, predict_all(enc, r.state.model, studies));
}

TEST(Downstream, ZeroEpochsKeepsInitialModel) {
  ClassifierConfig cfg = tiny_config();
  cfg.epochs = 0;
  const DownstreamModel m = make_downstream_model(cfg, std::nullopt);
  const FinetuneResult r = run_finetune(m, std::span<const LabeledStudy>{});
  EXPECT_TRUE(r.log.empty());
  EXPECT_EQ(r.state.model.params, m.params);
}

TEST(Downstream, PredictStudyIsPure) {
  ClassifierConfig cfg = tiny_config();
  const DownstreamModel m = make_downstream_model(cfg, std::nullopt);
  const Encoder enc(cfg.encoder);
  SyntheticSpec spec;
  spec.shape = Shape3{6, 24, 24};
  spec.rng_seed = 5;
  const VolumeGrid vol = generate_synthetic_volume(spec);
  PreprocessSpec pre;
  pre.target_shape = Shape3{3, 16, 16};
  const StudyPrediction a = predict_study(enc, m, vol, pre);
  EXPECT_EQ(a, predict_study(enc, m, vol, pre));
  for (const auto& organ : a.probs) EXPECT_NEAR(organ[0] + organ[1] + organ[2], 1.0, 1e-6);
}

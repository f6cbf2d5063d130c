// SPDX-License-Identifier: Apache-2.0
#include "slicevoco/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "slicevoco/errors.hpp"
#include "slicevoco/hashing.hpp"
#include "slicevoco/preprocess.hpp"

namespace slicevoco {

namespace {

using Vec = Eigen::VectorXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using ConstVecMap = Eigen::Map<const Vec>;
using MutVecMap = Eigen::Map<Vec>;

constexpr std::array<const char*, 2> kDirections{"fwd", "bwd"};

std::string lstm_name(std::size_t layer, std::size_t dir, const char* what) {
  return "lstm.l" + std::to_string(layer) + "." + kDirections[dir] + "." + what;
}

std::string head_name(std::size_t organ, const char* part, const char* what) {
  return "head." + std::string(kOrganNames[organ]) + "." + part + "." + what;
}

ConstMap cmat(const ParameterSet& p, const std::string& name) {
  const Tensor& t = p.at(name);
  return ConstMap(t.data.data(), static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
}

MutMap mmat(ParameterSet& p, const std::string& name) {
  Tensor& t = p.at(name);
  return MutMap(t.data.data(), static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
}

ConstVecMap cvec(const ParameterSet& p, const std::string& name) {
  const Tensor& t = p.at(name);
  return ConstVecMap(t.data.data(), static_cast<Eigen::Index>(t.size()));
}

MutVecMap mvec(ParameterSet& p, const std::string& name) {
  Tensor& t = p.at(name);
  return MutVecMap(t.data.data(), static_cast<Eigen::Index>(t.size()));
}

Vec sigmoid(const Vec& z) { return (1.0 + (-z.array()).exp()).inverse().matrix(); }

struct Step {
  Vec i, f, g, o, c, tc, h;
};

struct DirTrace {
  std::vector<Step> steps;  // indexed by time, not processing order
};

struct LayerTrace {
  Matrix input;  // T × in
  std::array<DirTrace, 2> dirs;
  Matrix output;  // T × 2h
};

struct Trace {
  std::vector<LayerTrace> layers;
  Vec pooled;
  std::array<Vec, kNumOrgans> head_act;
  std::array<Vec, kNumOrgans> logits;
  std::array<Vec, kNumOrgans> probs;
  std::array<Vec, kNumOrgans> log_probs;
};

std::size_t prev_index(std::size_t t, bool reverse, std::size_t T, bool& first) {
  first = reverse ? (t + 1 == T) : (t == 0);
  if (first) return t;
  return reverse ? t + 1 : t - 1;
}

void run_direction(const ParameterSet& params, std::size_t layer, std::size_t dir, std::size_t h,
                   const Matrix& X, DirTrace& trace, Matrix& out) {
  const auto W = cmat(params, lstm_name(layer, dir, "W"));
  const auto U = cmat(params, lstm_name(layer, dir, "U"));
  const auto b = cvec(params, lstm_name(layer, dir, "b"));
  const std::size_t T = static_cast<std::size_t>(X.rows());
  const bool reverse = dir == 1;
  trace.steps.assign(T, {});
  const auto hh = static_cast<Eigen::Index>(h);
  for (std::size_t k = 0; k < T; ++k) {
    const std::size_t t = reverse ? T - 1 - k : k;
    bool first = false;
    const std::size_t p = prev_index(t, reverse, T, first);
    const Vec h_prev = first ? Vec::Zero(hh) : trace.steps[p].h;
    const Vec c_prev = first ? Vec::Zero(hh) : trace.steps[p].c;
    const Vec z = W * X.row(static_cast<Eigen::Index>(t)).transpose() + U * h_prev + b;
    Step& s = trace.steps[t];
    s.i = sigmoid(z.segment(0, hh));
    s.f = sigmoid(z.segment(hh, hh));
    s.g = z.segment(2 * hh, hh).array().tanh().matrix();
    s.o = sigmoid(z.segment(3 * hh, hh));
    s.c = s.f.cwiseProduct(c_prev) + s.i.cwiseProduct(s.g);
    s.tc = s.c.array().tanh().matrix();
    s.h = s.o.cwiseProduct(s.tc);
    out.block(static_cast<Eigen::Index>(t), reverse ? hh : 0, 1, hh) = s.h.transpose();
  }
}

void backward_direction(const ParameterSet& params, std::size_t layer, std::size_t dir, std::size_t h,
                        const LayerTrace& lt, const Matrix& d_out, ParameterSet& grads, Matrix& d_input) {
  const DirTrace& trace = lt.dirs[dir];
  const auto W = cmat(params, lstm_name(layer, dir, "W"));
  const auto U = cmat(params, lstm_name(layer, dir, "U"));
  auto dW = mmat(grads, lstm_name(layer, dir, "W"));
  auto dU = mmat(grads, lstm_name(layer, dir, "U"));
  auto db = mvec(grads, lstm_name(layer, dir, "b"));
  const std::size_t T = trace.steps.size();
  const bool reverse = dir == 1;
  const auto hh = static_cast<Eigen::Index>(h);
  Vec dh_next = Vec::Zero(hh);
  Vec dc_next = Vec::Zero(hh);
  Vec dz(4 * hh);
  for (std::size_t k = T; k-- > 0;) {
    const std::size_t t = reverse ? T - 1 - k : k;
    bool first = false;
    const std::size_t p = prev_index(t, reverse, T, first);
    const Step& s = trace.steps[t];
    const Vec dh = d_out.block(static_cast<Eigen::Index>(t), reverse ? hh : 0, 1, hh).transpose() + dh_next;
    const Vec d_o = dh.cwiseProduct(s.tc);
    const Vec dc = dc_next + dh.cwiseProduct(s.o).cwiseProduct((1.0 - s.tc.array().square()).matrix());
    const Vec c_prev = first ? Vec::Zero(hh) : trace.steps[p].c;
    const Vec h_prev = first ? Vec::Zero(hh) : trace.steps[p].h;
    dz.segment(0, hh) = dc.cwiseProduct(s.g).cwiseProduct((s.i.array() * (1.0 - s.i.array())).matrix());
    dz.segment(hh, hh) = dc.cwiseProduct(c_prev).cwiseProduct((s.f.array() * (1.0 - s.f.array())).matrix());
    dz.segment(2 * hh, hh) = dc.cwiseProduct(s.i).cwiseProduct((1.0 - s.g.array().square()).matrix());
    dz.segment(3 * hh, hh) = d_o.cwiseProduct((s.o.array() * (1.0 - s.o.array())).matrix());
    const auto x = lt.input.row(static_cast<Eigen::Index>(t));
    dW.noalias() += dz * x;
    dU.noalias() += dz * h_prev.transpose();
    db += dz;
    d_input.row(static_cast<Eigen::Index>(t)).noalias() += (W.transpose() * dz).transpose();
    dh_next = U.transpose() * dz;
    dc_next = dc.cwiseProduct(s.f);
  }
}

void check_finite(const Vec& v, const char* where) {
  if (!v.allFinite()) {
    nlohmann::json diag{{"stage", where}, {"values", std::vector<double>(v.data(), v.data() + v.size())}};
    throw NumericalError(std::string("non-finite activation in ") + where, diag.dump());
  }
}

Trace forward_trace(const ClassifierConfig& cfg, std::size_t feature_dim, const ParameterSet& params,
                    const SequenceFeatures& seq) {
  if (seq.rows() == 0) throw DataError("empty slice sequence");
  if (static_cast<std::size_t>(seq.cols()) != feature_dim) {
    throw DataError("sequence feature width " + std::to_string(seq.cols()) + " != " + std::to_string(feature_dim));
  }
  if (!seq.allFinite()) throw NumericalError("non-finite sequence features");
  const auto T = seq.rows();
  const auto h = static_cast<Eigen::Index>(cfg.hidden);
  Trace tr;
  tr.layers.resize(cfg.layers);
  Matrix input = seq;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LayerTrace& lt = tr.layers[l];
    lt.input = std::move(input);
    lt.output = Matrix::Zero(T, 2 * h);
    for (std::size_t d = 0; d < 2; ++d) run_direction(params, l, d, cfg.hidden, lt.input, lt.dirs[d], lt.output);
    input = lt.output;
  }
  const Matrix& top = tr.layers.back().output;
  if (cfg.pooling == Pooling::mean) {
    tr.pooled = top.colwise().mean().transpose();
  } else {
    tr.pooled.resize(2 * h);
    tr.pooled.head(h) = top.block(T - 1, 0, 1, h).transpose();
    tr.pooled.tail(h) = top.block(0, h, 1, h).transpose();
  }
  check_finite(tr.pooled, "lstm");
  for (std::size_t o = 0; o < kNumOrgans; ++o) {
    Vec in = tr.pooled;
    if (cfg.head_hidden > 0) {
      tr.head_act[o] = (cmat(params, head_name(o, "fc", "weight")) * tr.pooled + cvec(params, head_name(o, "fc", "bias")))
                           .array()
                           .tanh()
                           .matrix();
      in = tr.head_act[o];
    }
    const Vec logits = cmat(params, head_name(o, "out", "weight")) * in + cvec(params, head_name(o, "out", "bias"));
    check_finite(logits, "head");
    tr.logits[o] = logits;
    const double mx = logits.maxCoeff();
    const double lse = mx + std::log((logits.array() - mx).exp().sum());
    tr.log_probs[o] = (logits.array() - lse).matrix();
    tr.probs[o] = tr.log_probs[o].array().exp().matrix();
  }
  return tr;
}

void add_tensor(ParameterSet& p, std::string name, std::vector<std::size_t> shape, std::mt19937_64& rng,
                double bound) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (double& v : t.data) v = u(rng);
  p.add(std::move(name), std::move(t));
}

void add_normal(ParameterSet& p, std::string name, std::vector<std::size_t> shape, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(t.shape[1])));
  for (double& v : t.data) v = n(rng);
  p.add(std::move(name), std::move(t));
}

constexpr std::uint64_t kBackboneStream = 0x6261636B626F6E65ULL;
constexpr std::uint64_t kClassifierStream = 0x636C617373696679ULL;
constexpr std::uint64_t kShuffleStream = 0x73687566666C6521ULL;

Matrix sequence_from(const Encoder& encoder, const ParameterSet& params, const SliceStack& stack,
                     std::unique_ptr<BackboneCache>* cache) {
  std::vector<Image2D> slices;
  slices.reserve(stack.depth());
  for (std::size_t t = 0; t < stack.depth(); ++t) slices.push_back(slice_image(stack, t));
  return encoder.forward_slices(params, slices, cache).transpose();
}

double step_impl(const Encoder& encoder, FinetuneState& state, std::span<const LabeledStudy* const> batch,
                 const std::vector<const SequenceFeatures*>* cached) {
  if (batch.empty()) throw DataError("finetune_step: empty batch");
  DownstreamModel& model = state.model;
  const SequenceClassifier clf(model.config, encoder.feature_dim());
  ParameterSet grads = model.params.zeros_like();
  const bool full = model.config.mode == FinetuneMode::full;
  double total = 0.0;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const LabeledStudy& study = *batch[k];
    std::unique_ptr<BackboneCache> cache;
    SequenceFeatures local;
    const SequenceFeatures* seq = nullptr;
    if (cached != nullptr && !full) {
      seq = (*cached)[k];
    } else {
      local = sequence_from(encoder, model.params, study.stack, full ? &cache : nullptr);
      seq = &local;
    }
    SequenceFeatures d_seq;
    total += clf.loss_and_grad(model.params, *seq, study.labels, grads, full ? &d_seq : nullptr);
    if (full) encoder.backward_slices(model.params, *cache, d_seq.transpose(), grads);
  }
  const double scale = 1.0 / static_cast<double>(batch.size());
  const double loss = total * scale;
  if (!std::isfinite(loss)) {
    nlohmann::json diag{{"step", state.step}, {"patients", nlohmann::json::array()}};
    for (const auto* s : batch) diag["patients"].push_back(s->patient_id);
    throw NumericalError("non-finite fine-tune loss", diag.dump());
  }
  for (auto& e : grads) {
    for (double& g : e.tensor.data) g *= scale;
  }
  if (!full) {
    for (auto& e : grads) {
      if (e.name.rfind("backbone.", 0) == 0) std::fill(e.tensor.data.begin(), e.tensor.data.end(), 0.0);
    }
  }
  state.optimizer.step(model.params, grads);
  ++state.step;
  return loss;
}

}  // namespace

std::string to_string(Pooling p) { return p == Pooling::mean ? "mean" : "last_states"; }
std::string to_string(FinetuneMode m) { return m == FinetuneMode::full ? "full" : "frozen_backbone"; }

Pooling parse_pooling(const std::string& text) {
  if (text == "mean") return Pooling::mean;
  if (text == "last_states") return Pooling::last_states;
  throw ConfigError("unknown pooling '" + text + "' (mean|last_states)");
}

FinetuneMode parse_finetune_mode(const std::string& text) {
  if (text == "full") return FinetuneMode::full;
  if (text == "frozen_backbone") return FinetuneMode::frozen_backbone;
  throw ConfigError("unknown fine-tune mode '" + text + "' (full|frozen_backbone)");
}

void validate(const ClassifierConfig& c) {
  validate(c.encoder);
  if (c.hidden < 1) throw ConfigError("lstm hidden size must be >= 1");
  if (c.layers < 1) throw ConfigError("lstm layers must be >= 1");
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  validate(c.class_weights);
  for (double w : c.organ_weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("organ weights must be finite and >= 0");
  }
  validate(c.optimizer);
}

void to_json(nlohmann::json& j, const ClassifierConfig& c) {
  j = {{"encoder", c.encoder},
       {"hidden", c.hidden},
       {"layers", c.layers},
       {"pooling", to_string(c.pooling)},
       {"head_hidden", c.head_hidden},
       {"mode", to_string(c.mode)},
       {"class_weights", c.class_weights.weights},
       {"organ_weights", c.organ_weights},
       {"optimizer", c.optimizer},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ClassifierConfig& c) {
  c.encoder = j.at("encoder").get<EncoderConfig>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.pooling = parse_pooling(j.at("pooling").get<std::string>());
  c.head_hidden = j.at("head_hidden").get<std::size_t>();
  c.mode = parse_finetune_mode(j.at("mode").get<std::string>());
  c.class_weights.weights = j.at("class_weights").get<std::array<double, kNumClasses>>();
  c.organ_weights = j.at("organ_weights").get<std::array<double, kNumOrgans>>();
  c.optimizer = j.at("optimizer").get<OptimizerConfig>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
}

SequenceFeatures extract_sequence_features(const Encoder& encoder, const ParameterSet& params,
                                           const SliceStack& stack) {
  if (stack.depth() == 0) throw DataError("empty slice stack");
  return sequence_from(encoder, params, stack, nullptr);
}

SequenceFeatures extract_sequence_features(const Encoder& encoder, const ParameterSet& params,
                                           const SliceStack& stack, const Shape3& expected) {
  const Shape3 got{stack.depth(), stack.height(), stack.width()};
  if (got.z != expected.z || got.y != expected.y || got.x != expected.x) {
    throw DataError("slice stack " + to_string(got) + " does not match downstream shape " + to_string(expected));
  }
  return extract_sequence_features(encoder, params, stack);
}

SequenceClassifier::SequenceClassifier(ClassifierConfig config, std::size_t feature_dim)
    : config_(std::move(config)), feature_dim_(feature_dim) {
  if (config_.hidden < 1 || config_.layers < 1) throw ConfigError("lstm hidden size and layers must be >= 1");
  if (feature_dim_ < 1) throw ConfigError("feature dimension must be >= 1");
}

ParameterSet SequenceClassifier::init_params(std::mt19937_64& rng) const {
  ParameterSet p;
  const std::size_t h = config_.hidden;
  const double bound = 1.0 / std::sqrt(static_cast<double>(h));
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::size_t in = l == 0 ? feature_dim_ : 2 * h;
    for (std::size_t d = 0; d < 2; ++d) {
      add_tensor(p, lstm_name(l, d, "W"), {4 * h, in}, rng, bound);
      add_tensor(p, lstm_name(l, d, "U"), {4 * h, h}, rng, bound);
      Tensor b({4 * h});
      std::fill(b.data.begin() + static_cast<std::ptrdiff_t>(h), b.data.begin() + static_cast<std::ptrdiff_t>(2 * h),
                1.0);
      p.add(lstm_name(l, d, "b"), std::move(b));
    }
  }
  for (std::size_t o = 0; o < kNumOrgans; ++o) {
    std::size_t in = 2 * h;
    if (config_.head_hidden > 0) {
      add_normal(p, head_name(o, "fc", "weight"), {config_.head_hidden, in}, rng);
      p.add(head_name(o, "fc", "bias"), Tensor({config_.head_hidden}));
      in = config_.head_hidden;
    }
    add_normal(p, head_name(o, "out", "weight"), {kNumClasses, in}, rng);
    p.add(head_name(o, "out", "bias"), Tensor({kNumClasses}));
  }
  return p;
}

SequenceClassifier::Output SequenceClassifier::forward(const ParameterSet& params, const SequenceFeatures& seq) const {
  const Trace tr = forward_trace(config_, feature_dim_, params, seq);
  Output out;
  for (std::size_t o = 0; o < kNumOrgans; ++o) {
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      const auto ci = static_cast<Eigen::Index>(c);
      out.logits[o][c] = tr.logits[o][ci];
      out.prediction.probs[o][c] = tr.probs[o][ci];
    }
  }
  return out;
}

double SequenceClassifier::loss_and_grad(const ParameterSet& params, const SequenceFeatures& seq,
                                         const OrganLabelTriple& y, ParameterSet& grads,
                                         SequenceFeatures* d_seq) const {
  const Trace tr = forward_trace(config_, feature_dim_, params, seq);
  const auto h = static_cast<Eigen::Index>(config_.hidden);
  const auto T = seq.rows();
  double loss = 0.0;
  Vec d_pooled = Vec::Zero(2 * h);
  for (std::size_t o = 0; o < kNumOrgans; ++o) {
    const int cls = y.class_of(o);
    const double w = config_.organ_weights[o] * config_.class_weights[static_cast<std::size_t>(cls)];
    loss += w * -tr.log_probs[o][cls];
    Vec d_logits = w * tr.probs[o];
    d_logits[cls] -= w;
    const Vec& in = config_.head_hidden > 0 ? tr.head_act[o] : tr.pooled;
    mmat(grads, head_name(o, "out", "weight")).noalias() += d_logits * in.transpose();
    mvec(grads, head_name(o, "out", "bias")) += d_logits;
    Vec d_in = cmat(params, head_name(o, "out", "weight")).transpose() * d_logits;
    if (config_.head_hidden > 0) {
      const Vec d_pre = d_in.cwiseProduct((1.0 - tr.head_act[o].array().square()).matrix());
      mmat(grads, head_name(o, "fc", "weight")).noalias() += d_pre * tr.pooled.transpose();
      mvec(grads, head_name(o, "fc", "bias")) += d_pre;
      d_in = cmat(params, head_name(o, "fc", "weight")).transpose() * d_pre;
    }
    d_pooled += d_in;
  }
  Matrix d_out = Matrix::Zero(T, 2 * h);
  if (config_.pooling == Pooling::mean) {
    d_out.rowwise() = d_pooled.transpose() / static_cast<double>(T);
  } else {
    d_out.block(T - 1, 0, 1, h) = d_pooled.head(h).transpose();
    d_out.block(0, h, 1, h) = d_pooled.tail(h).transpose();
  }
  for (std::size_t l = config_.layers; l-- > 0;) {
    const LayerTrace& lt = tr.layers[l];
    Matrix d_input = Matrix::Zero(lt.input.rows(), lt.input.cols());
    for (std::size_t d = 0; d < 2; ++d) backward_direction(params, l, d, config_.hidden, lt, d_out, grads, d_input);
    d_out = std::move(d_input);
  }
  if (d_seq != nullptr) *d_seq = std::move(d_out);
  return loss;
}

double weighted_cross_entropy(const StudyPrediction& p, const OrganLabelTriple& y, const ClassifierConfig& config) {
  double loss = 0.0;
  for (std::size_t o = 0; o < kNumOrgans; ++o) {
    const auto cls = static_cast<std::size_t>(y.class_of(o));
    const double w = config.organ_weights[o] * config.class_weights[cls];
    if (w == 0.0) continue;
    loss += w * -std::log(std::max(p.probs[o][cls], kProbabilityClip));
  }
  return loss;
}

DownstreamModel make_downstream_model(const ClassifierConfig& config,
                                      const std::optional<ParameterSet>& backbone_init) {
  validate(config);
  const Encoder encoder(config.encoder);
  std::mt19937_64 bb_rng(mix64(config.seed ^ kBackboneStream));
  ParameterSet fresh = backbone_subset(encoder.init_params(bb_rng));
  DownstreamModel model{config, {}};
  if (backbone_init) {
    ParameterSet given = backbone_subset(*backbone_init);
    require_same_layout(fresh, given, "SSL backbone vs downstream encoder");
    fresh = std::move(given);
  }
  for (auto& e : fresh) model.params.add(e.name, std::move(e.tensor));
  std::mt19937_64 clf_rng(mix64(config.seed ^ kClassifierStream));
  const SequenceClassifier clf(config, encoder.feature_dim());
  for (auto& e : clf.init_params(clf_rng)) model.params.add(e.name, std::move(e.tensor));
  return model;
}

FinetuneState make_finetune_state(DownstreamModel model) {
  Optimizer opt(model.config.optimizer, model.params);
  return FinetuneState{std::move(model), std::move(opt), 0};
}

double finetune_step(const Encoder& encoder, FinetuneState& state, std::span<const LabeledStudy* const> batch) {
  return step_impl(encoder, state, batch, nullptr);
}

StudyPrediction predict_features(const DownstreamModel& model, const SequenceFeatures& seq) {
  const SequenceClassifier clf(model.config, static_cast<std::size_t>(seq.cols()));
  return clf.forward(model.params, seq).prediction;
}

StudyPrediction predict_stack(const Encoder& encoder, const DownstreamModel& model, const SliceStack& stack) {
  const SequenceClassifier clf(model.config, encoder.feature_dim());
  return clf.forward(model.params, extract_sequence_features(encoder, model.params, stack)).prediction;
}

StudyPrediction predict_study(const Encoder& encoder, const DownstreamModel& model, const VolumeGrid& volume,
                              const PreprocessSpec& spec) {
  const SliceStack stack = preprocess_volume(volume, spec);
  const SequenceClassifier clf(model.config, encoder.feature_dim());
  return clf.forward(model.params, extract_sequence_features(encoder, model.params, stack, spec.target_shape))
      .prediction;
}

FinetuneResult run_finetune(DownstreamModel model, std::span<const LabeledStudy> studies,
                            const std::function<void(const FinetuneEpochLog&)>& on_epoch) {
  validate(model.config);
  if (studies.empty() && model.config.epochs > 0) throw DataError("run_finetune: no labeled studies");
  const Encoder encoder(model.config.encoder);
  const bool frozen = model.config.mode == FinetuneMode::frozen_backbone;
  std::vector<SequenceFeatures> cache;
  if (frozen) {
    cache.reserve(studies.size());
    for (const auto& s : studies) cache.push_back(extract_sequence_features(encoder, model.params, s.stack));
  }
  FinetuneResult result{make_finetune_state(std::move(model)), {}};
  const std::size_t bs = result.state.model.config.batch_size;
  std::vector<std::size_t> order(studies.size());
  for (std::size_t epoch = 0; epoch < result.state.model.config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix64(result.state.model.config.seed ^ kShuffleStream ^ mix64(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(rng)]);
    }
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t stop = std::min(order.size(), start + bs);
      std::vector<const LabeledStudy*> batch;
      std::vector<const SequenceFeatures*> feats;
      for (std::size_t k = start; k < stop; ++k) {
        batch.push_back(&studies[order[k]]);
        if (frozen) feats.push_back(&cache[order[k]]);
      }
      sum += step_impl(encoder, result.state, batch, frozen ? &feats : nullptr);
      ++batches;
    }
    FinetuneEpochLog log{epoch, sum / static_cast<double>(batches)};
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

PredictionTable predict_all(const Encoder& encoder, const DownstreamModel& model,
                            std::span<const LabeledStudy> studies) {
  PredictionTable out;
  for (const auto& s : studies) out[s.patient_id] = predict_stack(encoder, model, s.stack);
  return out;
}

Checkpoint make_classifier_checkpoint(const DownstreamModel& model, const nlohmann::json& extras) {
  Checkpoint ckpt;
  ckpt.kind = "classifier";
  ckpt.config = model.config;
  ckpt.extras = extras.is_null() ? nlohmann::json::object() : extras;
  ckpt.arrays = model.params;
  return ckpt;
}

DownstreamModel restore_classifier_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "classifier") throw DataError("checkpoint kind '" + ckpt.kind + "' is not classifier");
  DownstreamModel model{ckpt.config.get<ClassifierConfig>(), ckpt.arrays};
  const DownstreamModel layout = make_downstream_model(model.config, std::nullopt);
  require_same_layout(layout.params, model.params, "classifier checkpoint");
  return model;
}

ParameterSet load_ssl_backbone(const Checkpoint& ckpt, const EncoderConfig& encoder) {
  if (ckpt.kind != "student_teacher") throw DataError("checkpoint kind '" + ckpt.kind + "' is not student_teacher");
  const EncoderConfig stored = ckpt.config.at("encoder").get<EncoderConfig>();
  const ParameterSet student = backbone_subset(take_prefixed(ckpt.arrays, "student/"));
  std::mt19937_64 rng(0);
  const ParameterSet expected = backbone_subset(Encoder(encoder).init_params(rng));
  if (stored.kind != encoder.kind || stored.input_channels != encoder.input_channels ||
      !expected.same_layout(student)) {
    throw ConfigError("SSL checkpoint backbone does not fit the downstream encoder (dimension mismatch)");
  }
  return student;
}

}  // namespace slicevoco

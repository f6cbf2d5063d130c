// SPDX-License-Identifier: Apache-2.0
#include "slicevoco/encoder.hpp"

#include <cmath>
#include <map>
#include <mutex>

#include "slicevoco/errors.hpp"

namespace slicevoco {

namespace {

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstWeightMap = Eigen::Map<const RowMajorMatrix>;
using WeightMap = Eigen::Map<RowMajorMatrix>;
using ConstVectorMap = Eigen::Map<const Eigen::VectorXd>;
using VectorMap = Eigen::Map<Eigen::VectorXd>;

ConstWeightMap weight_map(const Tensor& t) {
  return {t.data.data(), static_cast<Eigen::Index>(t.shape[0]),
          static_cast<Eigen::Index>(t.size() / t.shape[0])};
}
WeightMap weight_map(Tensor& t) {
  return {t.data.data(), static_cast<Eigen::Index>(t.shape[0]),
          static_cast<Eigen::Index>(t.size() / t.shape[0])};
}
ConstVectorMap vector_map(const Tensor& t) { return {t.data.data(), static_cast<Eigen::Index>(t.size())}; }
VectorMap vector_map(Tensor& t) { return {t.data.data(), static_cast<Eigen::Index>(t.size())}; }

std::size_t conv_out(std::size_t n) { return (n - 1) / 2 + 1; }

const std::array<std::string, 3> kConvNames{"backbone.conv1", "backbone.conv2", "backbone.conv3"};

struct TinyCache final : BackboneCache {
  std::size_t batch = 0;
  std::array<std::size_t, 4> height{};
  std::array<std::size_t, 4> width{};
  std::array<Matrix, 3> cols;
  std::array<Matrix, 3> acts;
};

// Input activations are C × (N·H·W); output columns are (n, oy, ox) row-major.
Matrix im2col(const Matrix& in, std::size_t n_img, std::size_t h, std::size_t w) {
  const auto cin = static_cast<std::size_t>(in.rows());
  const std::size_t ho = conv_out(h);
  const std::size_t wo = conv_out(w);
  Matrix cols = Matrix::Zero(static_cast<Eigen::Index>(cin * 9),
                             static_cast<Eigen::Index>(n_img * ho * wo));
  for (std::size_t n = 0; n < n_img; ++n) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const auto m = static_cast<Eigen::Index>((n * ho + oy) * wo + ox);
        double* dst = cols.col(m).data();
        for (std::size_t ky = 0; ky < 3; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(2 * oy + ky) - 1;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(2 * ox + kx) - 1;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            const auto pos = static_cast<Eigen::Index>((n * h + static_cast<std::size_t>(iy)) * w +
                                                       static_cast<std::size_t>(ix));
            const double* src = in.col(pos).data();
            for (std::size_t ci = 0; ci < cin; ++ci) dst[ci * 9 + ky * 3 + kx] = src[ci];
          }
        }
      }
    }
  }
  return cols;
}

Matrix col2im(const Matrix& cols, std::size_t cin, std::size_t n_img, std::size_t h, std::size_t w) {
  const std::size_t ho = conv_out(h);
  const std::size_t wo = conv_out(w);
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(n_img * h * w));
  for (std::size_t n = 0; n < n_img; ++n) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const auto m = static_cast<Eigen::Index>((n * ho + oy) * wo + ox);
        const double* src = cols.col(m).data();
        for (std::size_t ky = 0; ky < 3; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(2 * oy + ky) - 1;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < 3; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(2 * ox + kx) - 1;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            const auto pos = static_cast<Eigen::Index>((n * h + static_cast<std::size_t>(iy)) * w +
                                                       static_cast<std::size_t>(ix));
            double* dst = out.col(pos).data();
            for (std::size_t ci = 0; ci < cin; ++ci) dst[ci] += src[ci * 9 + ky * 3 + kx];
          }
        }
      }
    }
  }
  return out;
}

void fill_normal(Tensor& t, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  for (auto& v : t.data) v = normal(rng);
}

std::mutex& registry_mutex() {
  static std::mutex m;
  return m;
}
std::map<std::string, BackboneFactory>& registry() {
  static std::map<std::string, BackboneFactory> r;
  return r;
}

void require_finite(const Matrix& m, const char* where) {
  if (!m.allFinite()) throw NumericalError(std::string(where) + ": non-finite activations");
}

}  // namespace

// --- config -----------------------------------------------------------------

void validate(const EncoderConfig& config) {
  if (config.embedding_dim < 8) throw ConfigError("embedding_dim must be >= 8");
  if (config.input_channels != 1) throw ConfigError("only single-channel input is supported");
  if (config.kind == EncoderKind::external_plug && config.external_name.empty()) {
    throw ConfigError("external_plug encoder needs a registered backbone name");
  }
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{
      {"kind", c.kind == EncoderKind::tiny_reference ? "tiny_reference" : "external_plug"},
      {"embedding_dim", c.embedding_dim},
      {"input_channels", c.input_channels},
      {"projection", c.projection == Projection::linear          ? "linear"
                     : c.projection == Projection::two_layer_mlp ? "two_layer_mlp"
                                                                 : "none"},
      {"external_name", c.external_name}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "tiny_reference") {
    c.kind = EncoderKind::tiny_reference;
  } else if (kind == "external_plug") {
    c.kind = EncoderKind::external_plug;
  } else {
    throw ConfigError("unknown encoder kind '" + kind + "'");
  }
  c.embedding_dim = j.at("embedding_dim").get<std::size_t>();
  c.input_channels = j.at("input_channels").get<std::size_t>();
  const auto proj = j.at("projection").get<std::string>();
  if (proj == "linear") {
    c.projection = Projection::linear;
  } else if (proj == "two_layer_mlp") {
    c.projection = Projection::two_layer_mlp;
  } else if (proj == "none") {
    c.projection = Projection::none;
  } else {
    throw ConfigError("unknown projection '" + proj + "'");
  }
  c.external_name = j.value("external_name", std::string{});
}

// --- tiny reference trunk ---------------------------------------------------

ParameterSet TinyReferenceBackbone::init_params(std::mt19937_64& rng) const {
  ParameterSet params;
  std::size_t cin = 1;
  for (std::size_t l = 0; l < kChannels.size(); ++l) {
    const std::size_t fan_in = cin * 9;
    auto& w = params.add(kConvNames[l] + ".weight", Tensor({kChannels[l], cin, 3, 3}));
    fill_normal(w, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
    params.add(kConvNames[l] + ".bias", Tensor({kChannels[l]}));
    cin = kChannels[l];
  }
  return params;
}

Matrix TinyReferenceBackbone::forward(const ParameterSet& params, std::span<const Image2D> images,
                                      std::unique_ptr<BackboneCache>* cache) const {
  if (images.empty()) throw DataError("backbone forward: empty image batch");
  const std::size_t h = images.front().height;
  const std::size_t w = images.front().width;
  if (h == 0 || w == 0) throw DataError("backbone forward: empty image");
  const std::size_t n_img = images.size();

  Matrix act(1, static_cast<Eigen::Index>(n_img * h * w));
  for (std::size_t n = 0; n < n_img; ++n) {
    if (images[n].height != h || images[n].width != w) {
      throw DataError("backbone forward: images in one batch must share a size");
    }
    for (std::size_t i = 0; i < h * w; ++i) act(0, static_cast<Eigen::Index>(n * h * w + i)) = images[n].pixels[i];
  }

  auto state = std::make_unique<TinyCache>();
  state->batch = n_img;
  state->height[0] = h;
  state->width[0] = w;
  for (std::size_t l = 0; l < kChannels.size(); ++l) {
    const std::size_t hi = state->height[l];
    const std::size_t wi = state->width[l];
    Matrix cols = im2col(act, n_img, hi, wi);
    const auto weight = weight_map(params.at(kConvNames[l] + ".weight"));
    const auto bias = vector_map(params.at(kConvNames[l] + ".bias"));
    Matrix z = weight * cols;
    z.colwise() += bias;
    act = z.array().tanh().matrix();
    state->height[l + 1] = conv_out(hi);
    state->width[l + 1] = conv_out(wi);
    if (cache) {
      state->cols[l] = std::move(cols);
      state->acts[l] = act;
    }
  }
  require_finite(act, "backbone forward");

  const std::size_t spatial = state->height[3] * state->width[3];
  Matrix pooled(static_cast<Eigen::Index>(feature_dim()), static_cast<Eigen::Index>(n_img));
  for (std::size_t n = 0; n < n_img; ++n) {
    pooled.col(static_cast<Eigen::Index>(n)) =
        act.middleCols(static_cast<Eigen::Index>(n * spatial), static_cast<Eigen::Index>(spatial))
            .rowwise()
            .mean();
  }
  if (cache) *cache = std::move(state);
  return pooled;
}

void TinyReferenceBackbone::backward(const ParameterSet& params, const BackboneCache& cache_base,
                                     const Matrix& d_features, ParameterSet& grads) const {
  const auto& cache = dynamic_cast<const TinyCache&>(cache_base);
  const std::size_t n_img = cache.batch;
  const std::size_t spatial = cache.height[3] * cache.width[3];

  Matrix d_act(static_cast<Eigen::Index>(feature_dim()), static_cast<Eigen::Index>(n_img * spatial));
  for (std::size_t n = 0; n < n_img; ++n) {
    const Eigen::VectorXd g = d_features.col(static_cast<Eigen::Index>(n)) / static_cast<double>(spatial);
    for (std::size_t s = 0; s < spatial; ++s) d_act.col(static_cast<Eigen::Index>(n * spatial + s)) = g;
  }

  for (std::size_t li = kChannels.size(); li-- > 0;) {
    const Matrix& a = cache.acts[li];
    const Matrix d_z = d_act.cwiseProduct((1.0 - a.array().square()).matrix());
    auto& wt = grads.at(kConvNames[li] + ".weight");
    auto& bt = grads.at(kConvNames[li] + ".bias");
    weight_map(wt).noalias() += d_z * cache.cols[li].transpose();
    vector_map(bt) += d_z.rowwise().sum();
    if (li == 0) break;
    const auto weight = weight_map(params.at(kConvNames[li] + ".weight"));
    const Matrix d_cols = weight.transpose() * d_z;
    d_act = col2im(d_cols, kChannels[li - 1], n_img, cache.height[li], cache.width[li]);
  }
}

void register_backbone(const std::string& name, BackboneFactory factory) {
  std::lock_guard lock(registry_mutex());
  registry()[name] = std::move(factory);
}

// --- encoder ----------------------------------------------------------------

Encoder::Encoder(EncoderConfig config) : config_(std::move(config)) {
  validate(config_);
  if (config_.kind == EncoderKind::tiny_reference) {
    backbone_ = std::make_shared<TinyReferenceBackbone>();
  } else {
    BackboneFactory factory;
    {
      std::lock_guard lock(registry_mutex());
      auto it = registry().find(config_.external_name);
      if (it != registry().end()) factory = it->second;
    }
    if (!factory) throw ConfigError("no backbone registered as '" + config_.external_name + "'");
    backbone_ = factory();
  }
  if (config_.projection == Projection::none && config_.embedding_dim != backbone_->feature_dim()) {
    throw ConfigError("projection 'none' requires embedding_dim == backbone feature dim (" +
                      std::to_string(backbone_->feature_dim()) + ")");
  }
}

ParameterSet Encoder::init_params(std::mt19937_64& rng) const {
  ParameterSet params = backbone_->init_params(rng);
  const std::size_t f = feature_dim();
  const std::size_t d = config_.embedding_dim;
  if (config_.projection == Projection::linear) {
    fill_normal(params.add("head.proj.weight", Tensor({d, f})), 1.0 / std::sqrt(double(f)), rng);
    params.add("head.proj.bias", Tensor({d}));
  } else if (config_.projection == Projection::two_layer_mlp) {
    fill_normal(params.add("head.fc1.weight", Tensor({d, f})), 1.0 / std::sqrt(double(f)), rng);
    params.add("head.fc1.bias", Tensor({d}));
    fill_normal(params.add("head.fc2.weight", Tensor({d, d})), 1.0 / std::sqrt(double(d)), rng);
    params.add("head.fc2.bias", Tensor({d}));
  }
  return params;
}

Encoder::PatchForward Encoder::forward_patches(const ParameterSet& params,
                                               std::span<const Image2D> patches, bool keep_cache) const {
  PatchForward out;
  out.features = backbone_->forward(params, patches, keep_cache ? &out.trunk_cache : nullptr);
  switch (config_.projection) {
    case Projection::linear: {
      out.projected = weight_map(params.at("head.proj.weight")) * out.features;
      out.projected.colwise() += vector_map(params.at("head.proj.bias"));
      break;
    }
    case Projection::two_layer_mlp: {
      Matrix z1 = weight_map(params.at("head.fc1.weight")) * out.features;
      z1.colwise() += vector_map(params.at("head.fc1.bias"));
      out.hidden = z1.array().tanh().matrix();
      out.projected = weight_map(params.at("head.fc2.weight")) * out.hidden;
      out.projected.colwise() += vector_map(params.at("head.fc2.bias"));
      break;
    }
    case Projection::none:
      out.projected = out.features;
      break;
  }
  require_finite(out.projected, "encoder head");
  out.embeddings.resize(patches.size());
  for (Eigen::Index n = 0; n < out.projected.cols(); ++n) {
    const double norm = out.projected.col(n).norm();
    if (!(norm > 0.0)) throw NumericalError("encoder: zero-norm projection, cannot normalize");
    auto& e = out.embeddings[static_cast<std::size_t>(n)];
    e.resize(static_cast<std::size_t>(out.projected.rows()));
    for (Eigen::Index k = 0; k < out.projected.rows(); ++k) e[static_cast<std::size_t>(k)] = out.projected(k, n) / norm;
  }
  return out;
}

void Encoder::backward_patches(const ParameterSet& params, const PatchForward& fwd,
                               std::span<const Embedding> d_embeddings, ParameterSet& grads) const {
  if (!fwd.trunk_cache) throw std::logic_error("backward_patches: forward ran without cache");
  const Eigen::Index d = fwd.projected.rows();
  const Eigen::Index n_img = fwd.projected.cols();
  Matrix d_proj(d, n_img);
  for (Eigen::Index n = 0; n < n_img; ++n) {
    const auto& e = fwd.embeddings[static_cast<std::size_t>(n)];
    const auto& de = d_embeddings[static_cast<std::size_t>(n)];
    const ConstVectorMap ev(e.data(), d);
    const ConstVectorMap dev(de.data(), d);
    const double norm = fwd.projected.col(n).norm();
    d_proj.col(n) = (dev - ev * ev.dot(dev)) / norm;
  }

  Matrix d_features;
  switch (config_.projection) {
    case Projection::linear: {
      weight_map(grads.at("head.proj.weight")).noalias() += d_proj * fwd.features.transpose();
      vector_map(grads.at("head.proj.bias")) += d_proj.rowwise().sum();
      d_features = weight_map(params.at("head.proj.weight")).transpose() * d_proj;
      break;
    }
    case Projection::two_layer_mlp: {
      weight_map(grads.at("head.fc2.weight")).noalias() += d_proj * fwd.hidden.transpose();
      vector_map(grads.at("head.fc2.bias")) += d_proj.rowwise().sum();
      const Matrix d_hidden = weight_map(params.at("head.fc2.weight")).transpose() * d_proj;
      const Matrix d_z1 = d_hidden.cwiseProduct((1.0 - fwd.hidden.array().square()).matrix());
      weight_map(grads.at("head.fc1.weight")).noalias() += d_z1 * fwd.features.transpose();
      vector_map(grads.at("head.fc1.bias")) += d_z1.rowwise().sum();
      d_features = weight_map(params.at("head.fc1.weight")).transpose() * d_z1;
      break;
    }
    case Projection::none:
      d_features = d_proj;
      break;
  }
  backbone_->backward(params, *fwd.trunk_cache, d_features, grads);
}

Matrix Encoder::forward_slices(const ParameterSet& params, std::span<const Image2D> slices,
                               std::unique_ptr<BackboneCache>* cache) const {
  return backbone_->forward(params, slices, cache);
}

void Encoder::backward_slices(const ParameterSet& params, const BackboneCache& cache,
                              const Matrix& d_features, ParameterSet& grads) const {
  backbone_->backward(params, cache, d_features, grads);
}

Embedding encode_patch(const Encoder& encoder, const ParameterSet& params, const Image2D& patch) {
  auto fwd = encoder.forward_patches(params, std::span<const Image2D>(&patch, 1), false);
  return std::move(fwd.embeddings.front());
}

std::vector<double> encode_slice(const Encoder& encoder, const ParameterSet& params, const Image2D& slice) {
  const Matrix f = encoder.forward_slices(params, std::span<const Image2D>(&slice, 1), nullptr);
  return {f.data(), f.data() + f.size()};
}

ParameterSet init_params(const EncoderConfig& config, std::mt19937_64& rng) {
  return Encoder(config).init_params(rng);
}

ParameterSet backbone_subset(const ParameterSet& params) {
  ParameterSet out;
  for (const auto& e : params) {
    if (e.name.rfind("backbone.", 0) == 0) out.add(e.name, e.tensor);
  }
  return out;
}

}  // namespace slicevoco

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "slicevoco/objectives.hpp"
#include "slicevoco/tensor.hpp"
#include "slicevoco/volume.hpp"

namespace slicevoco {

using Matrix = Eigen::MatrixXd;

enum class EncoderKind { tiny_reference, external_plug };
enum class Projection { linear, two_layer_mlp, none };

struct EncoderConfig {
  EncoderKind kind = EncoderKind::tiny_reference;
  std::size_t embedding_dim = 128;
  std::size_t input_channels = 1;
  Projection projection = Projection::linear;
  /// Registry key when kind == external_plug.
  std::string external_name;

  bool operator==(const EncoderConfig&) const = default;
};

void validate(const EncoderConfig& config);
void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

/// Opaque per-forward state kept for the backward pass.
struct BackboneCache {
  virtual ~BackboneCache() = default;
};

/// Differentiable 2D feature trunk: a batch of equal-size single-channel images
/// in, one pooled feature column per image out. Parameter names must start with
/// "backbone." so the trunk can be moved between SSL and downstream models.
class Backbone {
 public:
  virtual ~Backbone() = default;

  virtual std::size_t feature_dim() const = 0;
  virtual ParameterSet init_params(std::mt19937_64& rng) const = 0;

  /// Returns feature_dim × N. When `cache` is non-null it receives what backward needs.
  virtual Matrix forward(const ParameterSet& params, std::span<const Image2D> images,
                         std::unique_ptr<BackboneCache>* cache) const = 0;

  /// Accumulates into `grads` (same layout as params) given d(loss)/d(features).
  /// Returns nothing for the images: inputs are data, not parameters.
  virtual void backward(const ParameterSet& params, const BackboneCache& cache,
                        const Matrix& d_features, ParameterSet& grads) const = 0;
};

/// Reference trunk: three [3×3 conv, stride 2, pad 1, tanh] blocks with
/// 16, 32, 64 channels, then global average pooling.
class TinyReferenceBackbone final : public Backbone {
 public:
  static constexpr std::array<std::size_t, 3> kChannels{16, 32, 64};

  std::size_t feature_dim() const override { return kChannels.back(); }
  ParameterSet init_params(std::mt19937_64& rng) const override;
  Matrix forward(const ParameterSet& params, std::span<const Image2D> images,
                 std::unique_ptr<BackboneCache>* cache) const override;
  void backward(const ParameterSet& params, const BackboneCache& cache, const Matrix& d_features,
                ParameterSet& grads) const override;
};

using BackboneFactory = std::function<std::unique_ptr<Backbone>()>;
void register_backbone(const std::string& name, BackboneFactory factory);

/// Trunk + projection head + L2 normalization.
class Encoder {
 public:
  explicit Encoder(EncoderConfig config);

  const EncoderConfig& config() const noexcept { return config_; }
  const Backbone& backbone() const noexcept { return *backbone_; }
  std::size_t feature_dim() const { return backbone_->feature_dim(); }
  std::size_t embedding_dim() const noexcept { return config_.embedding_dim; }

  /// Fan-in scaled normal weights, zero biases.
  ParameterSet init_params(std::mt19937_64& rng) const;

  struct PatchForward {
    std::vector<Embedding> embeddings;  // unit norm
    std::unique_ptr<BackboneCache> trunk_cache;
    Matrix features;                    // F × N trunk output
    Matrix hidden;                      // two_layer_mlp activations
    Matrix projected;                   // d × N before normalization
  };

  /// Batched encode_patch. Patches must share one size.
  PatchForward forward_patches(const ParameterSet& params, std::span<const Image2D> patches,
                               bool keep_cache) const;
  void backward_patches(const ParameterSet& params, const PatchForward& fwd,
                        std::span<const Embedding> d_embeddings, ParameterSet& grads) const;

  /// Pooled trunk features, projection bypassed. Returns F × N.
  Matrix forward_slices(const ParameterSet& params, std::span<const Image2D> slices,
                        std::unique_ptr<BackboneCache>* cache) const;
  void backward_slices(const ParameterSet& params, const BackboneCache& cache,
                       const Matrix& d_features, ParameterSet& grads) const;

 private:
  EncoderConfig config_;
  std::shared_ptr<const Backbone> backbone_;
};

/// Unit-norm embedding of one patch with values in [0,1].
Embedding encode_patch(const Encoder& encoder, const ParameterSet& params, const Image2D& patch);

/// Unnormalized feature_dim() vector for a whole slice.
std::vector<double> encode_slice(const Encoder& encoder, const ParameterSet& params, const Image2D& slice);

ParameterSet init_params(const EncoderConfig& config, std::mt19937_64& rng);

/// Parameters whose names start with "backbone.".
ParameterSet backbone_subset(const ParameterSet& params);

}  // namespace slicevoco

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "circuit_probe/errors.hpp"
#include "circuit_probe/hashing.hpp"
#include "circuit_probe/tensor_math.hpp"
#include "circuit_probe/tokenizer.hpp"

namespace circuit_probe {

struct ModelConfig {
  std::size_t vocab_size = kByteVocabSize;
  std::size_t n_layers = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_mlp = 128;
  std::size_t max_seq_len = 256;
  double rope_base = 10000.0;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (vocab_size < 1 || n_layers < 1 || d_model < 1 || n_heads < 1 || d_mlp < 1 || max_seq_len < 1) {
      throw ConfigError("model config: every count must be at least 1");
    }
    if (d_model % n_heads != 0) throw ConfigError("model config: d_model must be divisible by n_heads");
    if (head_dim() % 2 != 0) throw ConfigError("model config: rotary embedding needs an even head dimension");
    if (d_mlp < d_model) throw ConfigError("model config: d_mlp must be at least d_model");
    if (!(rope_base > 1.0)) throw ConfigError("model config: rope_base must exceed 1");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// The seven adaptable linear maps of a decoder layer.
enum class Projection : std::size_t { q, k, v, o, gate, up, down };
inline constexpr std::size_t kNumProjections = 7;
inline constexpr std::array<Projection, kNumProjections> kAllProjections = {
    Projection::q, Projection::k, Projection::v, Projection::o, Projection::gate, Projection::up, Projection::down};

inline std::string_view projection_name(Projection p) {
  static constexpr std::array<std::string_view, kNumProjections> kNames = {
      "q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"};
  return kNames[static_cast<std::size_t>(p)];
}

inline std::optional<Projection> projection_from_name(std::string_view name) {
  for (Projection p : kAllProjections) {
    if (projection_name(p) == name) return p;
  }
  return std::nullopt;
}

/// (out_dim, in_dim) of a projection weight.
inline std::pair<Index, Index> projection_shape(const ModelConfig& cfg, Projection p) {
  const auto d = static_cast<Index>(cfg.d_model);
  const auto m = static_cast<Index>(cfg.d_mlp);
  switch (p) {
    case Projection::gate:
    case Projection::up:
      return {m, d};
    case Projection::down:
      return {d, m};
    default:
      return {d, d};
  }
}

enum class SiteKind { mlp_output, mlp_intermediate };

inline std::string_view site_kind_name(SiteKind k) {
  return k == SiteKind::mlp_output ? "mlp_output" : "mlp_intermediate";
}

inline SiteKind site_kind_from_name(std::string_view name) {
  if (name == "mlp_output") return SiteKind::mlp_output;
  if (name == "mlp_intermediate") return SiteKind::mlp_intermediate;
  throw ConfigError("unknown hook site kind '" + std::string(name) + "'");
}

struct HookSite {
  std::size_t layer_index = 0;
  SiteKind kind = SiteKind::mlp_output;

  bool operator==(const HookSite&) const = default;
};

/// Default site: block output of the last MLP, in the residual dimension.
inline HookSite final_mlp_site(const ModelConfig& cfg) { return {cfg.n_layers - 1, SiteKind::mlp_output}; }

inline std::size_t site_dimension(const ModelConfig& cfg, const HookSite& site) {
  return site.kind == SiteKind::mlp_output ? cfg.d_model : cfg.d_mlp;
}

inline void validate_site(const ModelConfig& cfg, const HookSite& site) {
  if (site.layer_index >= cfg.n_layers) {
    throw ContractError("hook site layer " + std::to_string(site.layer_index) + " out of range for a " +
                        std::to_string(cfg.n_layers) + "-layer model");
  }
}

template <typename Scalar>
struct LayerWeights {
  MatrixX<Scalar> attn_norm;  // 1 x d_model
  std::array<MatrixX<Scalar>, kNumProjections> proj;
  MatrixX<Scalar> mlp_norm;  // 1 x d_model

  MatrixX<Scalar>& operator[](Projection p) { return proj[static_cast<std::size_t>(p)]; }
  const MatrixX<Scalar>& operator[](Projection p) const { return proj[static_cast<std::size_t>(p)]; }
};

/// Pre-norm decoder-only transformer: token embedding, n_layers blocks of
/// RoPE attention and a SiLU-gated MLP, final RMSNorm and an untied output
/// head.
template <typename Scalar>
struct TransformerModel {
  ModelConfig config;
  MatrixX<Scalar> embedding;  // vocab x d_model
  std::vector<LayerWeights<Scalar>> layers;
  MatrixX<Scalar> final_norm;  // 1 x d_model
  MatrixX<Scalar> head;        // vocab x d_model
  // Layers whose MLP block is structurally removed from the residual stream.
  // Not persisted; used to build bypass references for intervention tests.
  std::vector<bool> mlp_bypassed;

  TransformerModel() = default;

  /// Zero weights and unit norm gains.
  explicit TransformerModel(const ModelConfig& cfg) : config(cfg) {
    cfg.validate();
    const auto v = static_cast<Index>(cfg.vocab_size);
    const auto d = static_cast<Index>(cfg.d_model);
    embedding = MatrixX<Scalar>::Zero(v, d);
    head = MatrixX<Scalar>::Zero(v, d);
    final_norm = MatrixX<Scalar>::Ones(1, d);
    layers.resize(cfg.n_layers);
    for (auto& layer : layers) {
      layer.attn_norm = MatrixX<Scalar>::Ones(1, d);
      layer.mlp_norm = MatrixX<Scalar>::Ones(1, d);
      for (Projection p : kAllProjections) {
        const auto [rows, cols] = projection_shape(cfg, p);
        layer[p] = MatrixX<Scalar>::Zero(rows, cols);
      }
    }
    mlp_bypassed.assign(cfg.n_layers, false);
  }

  bool is_mlp_bypassed(std::size_t layer) const { return layer < mlp_bypassed.size() && mlp_bypassed[layer]; }

  /// Visits every weight matrix with its checkpoint name, in a fixed order.
  template <typename Fn>
  void for_each_parameter(Fn&& fn) {
    visit(*this, fn);
  }
  template <typename Fn>
  void for_each_parameter(Fn&& fn) const {
    visit(*this, fn);
  }

  template <typename Other>
  TransformerModel<Other> cast() const {
    TransformerModel<Other> out(config);
    out.mlp_bypassed = mlp_bypassed;
    auto src = named_views();
    std::size_t i = 0;
    out.for_each_parameter([&](const std::string&, MatrixX<Other>& m) { m = src[i++]->template cast<Other>(); });
    return out;
  }

 private:
  std::vector<const MatrixX<Scalar>*> named_views() const {
    std::vector<const MatrixX<Scalar>*> out;
    for_each_parameter([&](const std::string&, const MatrixX<Scalar>& m) { out.push_back(&m); });
    return out;
  }

  template <typename Self, typename Fn>
  static void visit(Self& self, Fn& fn) {
    fn(std::string("embed"), self.embedding);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      const std::string prefix = "layers." + std::to_string(l) + ".";
      auto& layer = self.layers[l];
      fn(prefix + "attn_norm", layer.attn_norm);
      for (Projection p : kAllProjections) fn(prefix + std::string(projection_name(p)), layer[p]);
      fn(prefix + "mlp_norm", layer.mlp_norm);
    }
    fn(std::string("final_norm"), self.final_norm);
    fn(std::string("head"), self.head);
  }
};

using Model = TransformerModel<float>;

/// Gaussian initialization of every projection, embedding and head entry;
/// norm gains start at one.
template <typename Scalar>
TransformerModel<Scalar> random_model(const ModelConfig& cfg, std::uint64_t seed, double init_std = 0.02) {
  TransformerModel<Scalar> model(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, init_std);
  model.for_each_parameter([&](const std::string& name, MatrixX<Scalar>& m) {
    if (name.ends_with("norm")) return;
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(normal(rng));
  });
  return model;
}

/// Hex digest of the raw weight bytes; equal digests mean bit-identical
/// weights.
template <typename Scalar>
std::string weights_checksum(const TransformerModel<Scalar>& model) {
  Sha256 h;
  model.for_each_parameter([&](const std::string& name, const MatrixX<Scalar>& m) {
    h.update(name);
    h.update(m.data(), static_cast<std::size_t>(m.size()) * sizeof(Scalar));
  });
  return h.hex_digest();
}

}  // namespace circuit_probe

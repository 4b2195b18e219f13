#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "circuit_probe/errors.hpp"
#include "circuit_probe/model.hpp"

namespace circuit_probe {

struct LoraConfig {
  std::size_t rank = 8;
  double alpha = 16.0;
  double dropout = 0.05;
  std::vector<Projection> target_sites{kAllProjections.begin(), kAllProjections.end()};

  double scale() const { return alpha / static_cast<double>(rank); }

  bool targets(Projection p) const {
    for (Projection t : target_sites) {
      if (t == p) return true;
    }
    return false;
  }

  void validate() const {
    if (rank < 1) throw ConfigError("lora config: rank must be at least 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("lora config: dropout must lie in [0, 1)");
    if (!std::isfinite(alpha)) throw ConfigError("lora config: alpha must be finite");
  }

  /// Parses projection names; unknown names are configuration errors.
  static std::vector<Projection> parse_sites(const std::vector<std::string>& names) {
    std::vector<Projection> out;
    for (const auto& n : names) {
      auto p = projection_from_name(n);
      if (!p) throw ConfigError("lora config: unknown target site '" + n + "'");
      out.push_back(*p);
    }
    return out;
  }

  bool operator==(const LoraConfig&) const = default;
};

/// A is rank x in_dim, B is out_dim x rank.
template <typename Scalar>
struct LowRankPair {
  MatrixX<Scalar> a;
  MatrixX<Scalar> b;
};

template <typename Scalar>
struct LoraAdapter {
  LoraConfig config;
  std::vector<std::array<std::optional<LowRankPair<Scalar>>, kNumProjections>> layers;

  const LowRankPair<Scalar>* find(std::size_t layer, Projection p) const {
    if (layer >= layers.size()) return nullptr;
    const auto& slot = layers[layer][static_cast<std::size_t>(p)];
    return slot ? &*slot : nullptr;
  }
  LowRankPair<Scalar>* find(std::size_t layer, Projection p) {
    if (layer >= layers.size()) return nullptr;
    auto& slot = layers[layer][static_cast<std::size_t>(p)];
    return slot ? &*slot : nullptr;
  }

  template <typename Fn>
  void for_each_pair(Fn&& fn) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      for (Projection p : kAllProjections) {
        if (auto* pair = find(l, p)) fn(l, p, *pair);
      }
    }
  }
  template <typename Fn>
  void for_each_pair(Fn&& fn) const {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      for (Projection p : kAllProjections) {
        if (const auto* pair = find(l, p)) fn(l, p, *pair);
      }
    }
  }

  template <typename Other>
  LoraAdapter<Other> cast() const {
    LoraAdapter<Other> out;
    out.config = config;
    out.layers.resize(layers.size());
    for_each_pair([&](std::size_t l, Projection p, const LowRankPair<Scalar>& pair) {
      out.layers[l][static_cast<std::size_t>(p)] =
          LowRankPair<Other>{pair.a.template cast<Other>(), pair.b.template cast<Other>()};
    });
    return out;
  }
};

using Adapter = LoraAdapter<float>;

inline constexpr double kLoraInitStd = 0.02;

/// A ~ N(0, 0.02) from `seed`, B = 0, on every targeted projection of every
/// layer. A fresh adapter leaves the model's outputs unchanged.
template <typename Scalar>
LoraAdapter<Scalar> init_adapter(const TransformerModel<Scalar>& model, const LoraConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  LoraAdapter<Scalar> adapter;
  adapter.config = cfg;
  adapter.layers.resize(model.config.n_layers);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, kLoraInitStd);
  const auto r = static_cast<Index>(cfg.rank);
  for (std::size_t l = 0; l < model.config.n_layers; ++l) {
    for (Projection p : kAllProjections) {
      if (!cfg.targets(p)) continue;
      const auto [out_dim, in_dim] = projection_shape(model.config, p);
      LowRankPair<Scalar> pair{MatrixX<Scalar>(r, in_dim), MatrixX<Scalar>::Zero(out_dim, r)};
      for (Index i = 0; i < pair.a.size(); ++i) pair.a.data()[i] = static_cast<Scalar>(normal(rng));
      adapter.layers[l][static_cast<std::size_t>(p)] = std::move(pair);
    }
  }
  return adapter;
}

template <typename Scalar>
void check_conformance(const TransformerModel<Scalar>& model, const LoraAdapter<Scalar>& adapter) {
  if (adapter.layers.size() != model.config.n_layers) {
    throw ConformanceError("adapter has " + std::to_string(adapter.layers.size()) + " layers, model has " +
                           std::to_string(model.config.n_layers));
  }
  const auto r = static_cast<Index>(adapter.config.rank);
  adapter.for_each_pair([&](std::size_t l, Projection p, const LowRankPair<Scalar>& pair) {
    const auto [out_dim, in_dim] = projection_shape(model.config, p);
    if (pair.a.rows() != r || pair.a.cols() != in_dim || pair.b.rows() != out_dim || pair.b.cols() != r) {
      throw ConformanceError("adapter " + std::string(projection_name(p)) + " at layer " + std::to_string(l) +
                             ": A " + shape_string(pair.a) + ", B " + shape_string(pair.b) + " do not fit a " +
                             shape_string(out_dim, in_dim) + " weight at rank " + std::to_string(r));
    }
  });
}

/// W' = W + (alpha / r) * B * A at every adapted site.
template <typename Scalar>
TransformerModel<Scalar> merge_adapter(const TransformerModel<Scalar>& model, const LoraAdapter<Scalar>& adapter) {
  check_conformance(model, adapter);
  TransformerModel<Scalar> merged = model;
  const auto s = static_cast<Scalar>(adapter.config.scale());
  adapter.for_each_pair([&](std::size_t l, Projection p, const LowRankPair<Scalar>& pair) {
    MatrixX<Scalar> delta(pair.b.rows(), pair.a.cols());
    delta.noalias() = pair.b * pair.a;
    merged.layers[l][p] += s * delta;
  });
  return merged;
}

template <typename Scalar>
std::string adapter_checksum(const LoraAdapter<Scalar>& adapter) {
  Sha256 h;
  adapter.for_each_pair([&](std::size_t l, Projection p, const LowRankPair<Scalar>& pair) {
    h.update(std::to_string(l) + std::string(projection_name(p)));
    h.update(pair.a.data(), static_cast<std::size_t>(pair.a.size()) * sizeof(Scalar));
    h.update(pair.b.data(), static_cast<std::size_t>(pair.b.size()) * sizeof(Scalar));
  });
  return h.hex_digest();
}

}  // namespace circuit_probe

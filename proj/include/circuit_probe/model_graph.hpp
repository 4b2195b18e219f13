#pragma once

// The transformer forward pass recorded on an autodiff tape, for training.
// It mirrors DecodeSession::feed over a full sequence.

#include <array>
#include <optional>
#include <random>
#include <vector>

#include "circuit_probe/autodiff.hpp"
#include "circuit_probe/lora.hpp"
#include "circuit_probe/model.hpp"

namespace circuit_probe {

template <typename Scalar>
struct ModelVars {
  struct Layer {
    ad::Var<Scalar> attn_norm;
    std::array<ad::Var<Scalar>, kNumProjections> proj;
    ad::Var<Scalar> mlp_norm;
  };
  ad::Var<Scalar> embedding;
  std::vector<Layer> layers;
  ad::Var<Scalar> final_norm;
  ad::Var<Scalar> head;

  /// Leaves in TransformerModel::for_each_parameter order.
  std::vector<ad::Var<Scalar>> leaves() const {
    std::vector<ad::Var<Scalar>> out{embedding};
    for (const auto& l : layers) {
      out.push_back(l.attn_norm);
      for (const auto& p : l.proj) out.push_back(p);
      out.push_back(l.mlp_norm);
    }
    out.push_back(final_norm);
    out.push_back(head);
    return out;
  }
};

template <typename Scalar>
struct AdapterVars {
  struct Pair {
    ad::Var<Scalar> a;
    ad::Var<Scalar> b;
  };
  std::vector<std::array<std::optional<Pair>, kNumProjections>> layers;
  Scalar scale = 0;
  double dropout = 0.0;

  /// A then B for every pair, in LoraAdapter::for_each_pair order.
  std::vector<ad::Var<Scalar>> leaves() const {
    std::vector<ad::Var<Scalar>> out;
    for (const auto& layer : layers) {
      for (const auto& slot : layer) {
        if (slot) {
          out.push_back(slot->a);
          out.push_back(slot->b);
        }
      }
    }
    return out;
  }
};

template <typename Scalar>
ModelVars<Scalar> bind_model(ad::Tape<Scalar>& tape, const TransformerModel<Scalar>& model, bool trainable) {
  ModelVars<Scalar> vars;
  vars.embedding = tape.bind(model.embedding, trainable);
  for (const auto& layer : model.layers) {
    typename ModelVars<Scalar>::Layer lv;
    lv.attn_norm = tape.bind(layer.attn_norm, trainable);
    for (Projection p : kAllProjections) lv.proj[static_cast<std::size_t>(p)] = tape.bind(layer[p], trainable);
    lv.mlp_norm = tape.bind(layer.mlp_norm, trainable);
    vars.layers.push_back(lv);
  }
  vars.final_norm = tape.bind(model.final_norm, trainable);
  vars.head = tape.bind(model.head, trainable);
  return vars;
}

template <typename Scalar>
AdapterVars<Scalar> bind_adapter(ad::Tape<Scalar>& tape, const LoraAdapter<Scalar>& adapter, bool trainable) {
  AdapterVars<Scalar> vars;
  vars.layers.resize(adapter.layers.size());
  vars.scale = static_cast<Scalar>(adapter.config.scale());
  vars.dropout = adapter.config.dropout;
  adapter.for_each_pair([&](std::size_t l, Projection p, const LowRankPair<Scalar>& pair) {
    vars.layers[l][static_cast<std::size_t>(p)] =
        typename AdapterVars<Scalar>::Pair{tape.bind(pair.a, trainable), tape.bind(pair.b, trainable)};
  });
  return vars;
}

namespace detail {

template <typename Scalar>
ad::Var<Scalar> graph_project(ad::Tape<Scalar>& tape, const ad::Var<Scalar>& x, const ModelVars<Scalar>& mv,
                              const AdapterVars<Scalar>* av, std::size_t layer, Projection p,
                              std::mt19937_64* dropout_rng) {
  const auto pi = static_cast<std::size_t>(p);
  ad::Var<Scalar> y = ad::matmul_nt(x, mv.layers[layer].proj[pi]);
  if (!av || layer >= av->layers.size() || !av->layers[layer][pi]) return y;
  const auto& pair = *av->layers[layer][pi];
  ad::Var<Scalar> xa = x;
  if (dropout_rng && av->dropout > 0.0) {
    std::bernoulli_distribution keep(1.0 - av->dropout);
    const auto survivor = static_cast<Scalar>(1.0 / (1.0 - av->dropout));
    MatrixX<Scalar> mask(x.rows(), x.cols());
    for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*dropout_rng) ? survivor : Scalar(0);
    xa = ad::hadamard(x, tape.constant(std::move(mask)));
  }
  ad::Var<Scalar> delta = ad::matmul_nt(ad::matmul_nt(xa, pair.a), pair.b);
  return ad::add(y, ad::scale(delta, av->scale));
}

}  // namespace detail

/// Logits (positions x vocab) for `tokens`. `dropout_rng` enables adapter
/// dropout; pass nullptr for evaluation.
template <typename Scalar>
ad::Var<Scalar> graph_logits(ad::Tape<Scalar>& tape, const TransformerModel<Scalar>& model,
                             const ModelVars<Scalar>& mv, const AdapterVars<Scalar>* av, const TokenSequence& tokens,
                             std::mt19937_64* dropout_rng = nullptr) {
  const auto& cfg = model.config;
  if (tokens.empty()) throw ContractError("graph: empty token sequence");
  if (tokens.size() > cfg.max_seq_len) {
    throw LengthError("graph: sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  }
  std::vector<Index> ids;
  ids.reserve(tokens.size());
  for (TokenId t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
      throw ContractError("graph: token id " + std::to_string(t) + " outside the vocabulary");
    }
    ids.push_back(t);
  }
  const auto heads = static_cast<Index>(cfg.n_heads);
  ad::Var<Scalar> h = ad::gather_rows(mv.embedding, std::move(ids));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& lv = mv.layers[l];
    auto x = ad::rmsnorm_rows(h, lv.attn_norm);
    auto q = ad::rope(detail::graph_project(tape, x, mv, av, l, Projection::q, dropout_rng), heads, cfg.rope_base);
    auto k = ad::rope(detail::graph_project(tape, x, mv, av, l, Projection::k, dropout_rng), heads, cfg.rope_base);
    auto v = detail::graph_project(tape, x, mv, av, l, Projection::v, dropout_rng);
    auto attn = ad::causal_attention(q, k, v, heads);
    h = ad::add(h, detail::graph_project(tape, attn, mv, av, l, Projection::o, dropout_rng));
    if (model.is_mlp_bypassed(l)) continue;
    x = ad::rmsnorm_rows(h, lv.mlp_norm);
    auto gate = detail::graph_project(tape, x, mv, av, l, Projection::gate, dropout_rng);
    auto up = detail::graph_project(tape, x, mv, av, l, Projection::up, dropout_rng);
    auto inner = ad::hadamard(ad::silu(gate), up);
    h = ad::add(h, detail::graph_project(tape, inner, mv, av, l, Projection::down, dropout_rng));
  }
  return ad::matmul_nt(ad::rmsnorm_rows(h, mv.final_norm), mv.head);
}

}  // namespace circuit_probe

#pragma once

// Inference: incremental decoding with a key/value cache, named hook sites,
// optional live LoRA adapters, and greedy generation.

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "circuit_probe/errors.hpp"
#include "circuit_probe/lora.hpp"
#include "circuit_probe/model.hpp"
#include "circuit_probe/tensor_math.hpp"
#include "circuit_probe/tokenizer.hpp"

namespace circuit_probe {

struct HookEvent {
  HookSite site;
  Index first_position;  // position of row 0 of the activation block
};

/// Called with the activation block (one row per processed position) at a
/// hook site. The hook may overwrite entries; downstream layers consume the
/// block as the hook leaves it.
template <typename Scalar>
using HookFn = std::function<void(const HookEvent&, Eigen::Ref<MatrixX<Scalar>>)>;

template <typename Scalar>
struct Hook {
  HookSite site;
  HookFn<Scalar> fn;
};

template <typename Scalar>
using HookList = std::vector<Hook<Scalar>>;

struct ForwardOptions {
  // Enables adapter-branch dropout.
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

template <typename Scalar>
class DecodeSession {
 public:
  explicit DecodeSession(const TransformerModel<Scalar>& model, const LoraAdapter<Scalar>* adapter = nullptr,
                         ForwardOptions options = {})
      : model_(model), adapter_(adapter), options_(options), rng_(options.dropout_seed) {
    if (adapter_) check_conformance(model_, *adapter_);
    const auto max_len = static_cast<Index>(model_.config.max_seq_len);
    const auto d = static_cast<Index>(model_.config.d_model);
    k_cache_.assign(model_.config.n_layers, MatrixX<Scalar>(max_len, d));
    v_cache_.assign(model_.config.n_layers, MatrixX<Scalar>(max_len, d));
  }

  Index length() const { return length_; }

  /// Appends `tokens` and returns their logits (tokens.size() x vocab).
  MatrixX<Scalar> feed(const TokenSequence& tokens, const HookList<Scalar>& hooks = {}) {
    const auto& cfg = model_.config;
    if (tokens.empty()) throw ContractError("forward: empty token sequence");
    if (length_ + static_cast<Index>(tokens.size()) > static_cast<Index>(cfg.max_seq_len)) {
      throw LengthError("forward: sequence of " + std::to_string(length_ + static_cast<Index>(tokens.size())) +
                        " tokens exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    for (const auto& hook : hooks) validate_site(cfg, hook.site);

    const Index n = static_cast<Index>(tokens.size());
    const Index first = length_;
    const auto heads = static_cast<Index>(cfg.n_heads);
    MatrixX<Scalar> h(n, static_cast<Index>(cfg.d_model));
    for (Index i = 0; i < n; ++i) {
      const TokenId t = tokens[static_cast<std::size_t>(i)];
      if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
        throw ContractError("forward: token id " + std::to_string(t) + " outside the vocabulary");
      }
      h.row(i) = model_.embedding.row(t);
    }

    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const auto& layer = model_.layers[l];
      MatrixX<Scalar> x = rmsnorm_rows(h, layer.attn_norm);
      MatrixX<Scalar> q = project(x, l, Projection::q);
      MatrixX<Scalar> k = project(x, l, Projection::k);
      MatrixX<Scalar> v = project(x, l, Projection::v);
      apply_rope(q, heads, first, cfg.rope_base);
      apply_rope(k, heads, first, cfg.rope_base);
      k_cache_[l].middleRows(first, n) = k;
      v_cache_[l].middleRows(first, n) = v;
      MatrixX<Scalar> attn =
          causal_attention<Scalar>(q, k_cache_[l].topRows(first + n), v_cache_[l].topRows(first + n), heads, first);
      h += project(attn, l, Projection::o);

      if (model_.is_mlp_bypassed(l)) continue;
      x = rmsnorm_rows(h, layer.mlp_norm);
      MatrixX<Scalar> gate = project(x, l, Projection::gate);
      MatrixX<Scalar> up = project(x, l, Projection::up);
      MatrixX<Scalar> inner = silu(gate).cwiseProduct(up);
      run_hooks(hooks, {l, SiteKind::mlp_intermediate}, first, inner);
      MatrixX<Scalar> out = project(inner, l, Projection::down);
      run_hooks(hooks, {l, SiteKind::mlp_output}, first, out);
      h += out;
    }
    length_ += n;
    MatrixX<Scalar> normed = rmsnorm_rows(h, model_.final_norm);
    return matmul_nt(normed, model_.head);
  }

 private:
  MatrixX<Scalar> project(const MatrixX<Scalar>& x, std::size_t layer, Projection p) {
    MatrixX<Scalar> y = matmul_nt(x, model_.layers[layer][p]);
    const LowRankPair<Scalar>* pair = adapter_ ? adapter_->find(layer, p) : nullptr;
    if (!pair) return y;
    const double drop = adapter_->config.dropout;
    MatrixX<Scalar> low(x.rows(), pair->a.rows());
    if (options_.training && drop > 0.0) {
      std::bernoulli_distribution keep(1.0 - drop);
      const auto survivor = static_cast<Scalar>(1.0 / (1.0 - drop));
      MatrixX<Scalar> xd = x;
      for (Index i = 0; i < xd.size(); ++i) xd.data()[i] = keep(rng_) ? xd.data()[i] * survivor : Scalar(0);
      low.noalias() = xd * pair->a.transpose();
    } else {
      low.noalias() = x * pair->a.transpose();
    }
    MatrixX<Scalar> delta(x.rows(), pair->b.rows());
    delta.noalias() = low * pair->b.transpose();
    y += static_cast<Scalar>(adapter_->config.scale()) * delta;
    return y;
  }

  void run_hooks(const HookList<Scalar>& hooks, const HookSite& site, Index first, MatrixX<Scalar>& act) {
    for (const auto& hook : hooks) {
      if (hook.site == site) hook.fn(HookEvent{site, first}, act);
    }
  }

  const TransformerModel<Scalar>& model_;
  const LoraAdapter<Scalar>* adapter_;
  ForwardOptions options_;
  std::mt19937_64 rng_;
  std::vector<MatrixX<Scalar>> k_cache_;
  std::vector<MatrixX<Scalar>> v_cache_;
  Index length_ = 0;
};

/// Logits for every position of `tokens` (positions x vocab).
template <typename Scalar>
MatrixX<Scalar> forward(const TransformerModel<Scalar>& model, const TokenSequence& tokens,
                        const HookList<Scalar>& hooks = {}) {
  DecodeSession<Scalar> session(model);
  return session.feed(tokens, hooks);
}

/// Forward pass with every adapted projection computing
/// W x + (alpha / r) B (A x); dropout touches only the adapter branch and
/// only when `options.training` is set.
template <typename Scalar>
MatrixX<Scalar> adapted_forward(const TransformerModel<Scalar>& model, const LoraAdapter<Scalar>& adapter,
                                const TokenSequence& tokens, const HookList<Scalar>& hooks = {},
                                ForwardOptions options = {}) {
  DecodeSession<Scalar> session(model, &adapter, options);
  return session.feed(tokens, hooks);
}

/// Index of the largest entry; ties go to the lowest index.
template <typename Derived>
TokenId argmax_lowest(const Eigen::MatrixBase<Derived>& row) {
  Index best = 0;
  for (Index i = 1; i < row.size(); ++i) {
    if (row(i) > row(best)) best = i;
  }
  return static_cast<TokenId>(best);
}

/// Greedy decoding. Returns the continuation only; generation stops after
/// EOS (which is not included), after `max_new` tokens, or when the context
/// is full.
template <typename Scalar>
TokenSequence generate_greedy(const TransformerModel<Scalar>& model, const TokenSequence& prompt,
                              std::size_t max_new, const HookList<Scalar>& hooks = {},
                              const LoraAdapter<Scalar>* adapter = nullptr) {
  TokenSequence out;
  if (max_new == 0) return out;
  DecodeSession<Scalar> session(model, adapter);
  MatrixX<Scalar> logits = session.feed(prompt, hooks);
  TokenId next = argmax_lowest(logits.row(logits.rows() - 1));
  while (true) {
    if (next == kEos) break;
    out.push_back(next);
    if (out.size() >= max_new) break;
    if (session.length() >= static_cast<Index>(model.config.max_seq_len)) break;
    logits = session.feed(TokenSequence{next}, hooks);
    next = argmax_lowest(logits.row(0));
  }
  return out;
}

}  // namespace circuit_probe

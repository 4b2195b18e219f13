#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "circuit_probe/autodiff.hpp"
#include "circuit_probe/errors.hpp"
#include "circuit_probe/lora.hpp"
#include "circuit_probe/model.hpp"
#include "circuit_probe/model_graph.hpp"

namespace circuit_probe {

/// A token sequence plus the positions whose tokens are prediction targets.
struct TrainingExample {
  TokenSequence tokens;
  std::vector<bool> loss_mask;
};

struct TrainConfig {
  double learning_rate = 2e-5;
  std::size_t batch_size = 1;
  std::size_t grad_accum_steps = 8;
  std::size_t epochs = 2;
  std::size_t warmup_steps = 50;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1 || grad_accum_steps < 1 || epochs < 1 || warmup_steps < 1) {
      throw ConfigError("train config: every count must be at least 1");
    }
    // Zero is accepted so that a run can be checked for leaving parameters untouched.
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw ConfigError("train config: learning_rate must be a non-negative finite number");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && epsilon > 0.0 && weight_decay >= 0.0)) {
      throw ConfigError("train config: invalid optimizer constants");
    }
  }
};

/// Linear warmup from zero over warmup_steps optimizer steps, then constant.
inline double scheduled_learning_rate(const TrainConfig& cfg, std::size_t step) {
  if (step < cfg.warmup_steps) {
    return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  return cfg.learning_rate;
}

/// AdamW with decoupled weight decay (decay applied to the parameter before
/// the moment update, bias-corrected moments).
template <typename Scalar>
class AdamW {
 public:
  AdamW(double beta1, double beta2, double epsilon, double weight_decay)
      : beta1_(beta1), beta2_(beta2), epsilon_(epsilon), weight_decay_(weight_decay) {}

  explicit AdamW(const TrainConfig& cfg) : AdamW(cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay) {}

  void step(std::span<MatrixX<Scalar>* const> params, std::span<const MatrixX<Scalar>> grads, double lr) {
    if (params.size() != grads.size()) throw ContractError("adamw: parameter/gradient count mismatch");
    if (m_.empty()) {
      for (auto* p : params) {
        m_.push_back(MatrixX<Scalar>::Zero(p->rows(), p->cols()));
        v_.push_back(MatrixX<Scalar>::Zero(p->rows(), p->cols()));
      }
    }
    if (m_.size() != params.size()) throw ContractError("adamw: parameter set changed between steps");
    ++t_;
    const auto b1 = static_cast<Scalar>(beta1_);
    const auto b2 = static_cast<Scalar>(beta2_);
    const auto bias1 = static_cast<Scalar>(1.0 - std::pow(beta1_, static_cast<double>(t_)));
    const auto bias2_sqrt = static_cast<Scalar>(std::sqrt(1.0 - std::pow(beta2_, static_cast<double>(t_))));
    const auto step_size = static_cast<Scalar>(lr) / bias1;
    const auto decay = Scalar(1) - static_cast<Scalar>(lr * weight_decay_);
    const auto eps = static_cast<Scalar>(epsilon_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      const auto& g = grads[i];
      if (g.rows() != p.rows() || g.cols() != p.cols()) throw ShapeError("adamw: gradient shape mismatch");
      p *= decay;
      m_[i] = b1 * m_[i] + (Scalar(1) - b1) * g;
      v_[i] = b2 * v_[i] + (Scalar(1) - b2) * g.cwiseProduct(g);
      p.array() -= step_size * m_[i].array() / (v_[i].array().sqrt() / bias2_sqrt + eps);
    }
  }

  std::size_t steps_taken() const { return t_; }
  const std::vector<MatrixX<Scalar>>& first_moments() const { return m_; }
  const std::vector<MatrixX<Scalar>>& second_moments() const { return v_; }

 private:
  double beta1_, beta2_, epsilon_, weight_decay_;
  std::size_t t_ = 0;
  std::vector<MatrixX<Scalar>> m_, v_;
};

/// Records the loss of one example on `tape`: mean next-token cross-entropy
/// over the positions selected by the example's loss mask.
template <typename Scalar>
ad::Var<Scalar> graph_example_loss(ad::Tape<Scalar>& tape, const TransformerModel<Scalar>& model,
                                   const ModelVars<Scalar>& mv, const AdapterVars<Scalar>* av,
                                   const TrainingExample& ex, std::mt19937_64* dropout_rng = nullptr) {
  if (ex.tokens.size() != ex.loss_mask.size()) throw ContractError("loss: mask length differs from token length");
  if (ex.tokens.size() < 2) throw ContractError("loss: example needs at least two tokens");
  std::vector<Index> targets;
  std::vector<bool> mask;
  for (std::size_t i = 1; i < ex.tokens.size(); ++i) {
    targets.push_back(ex.tokens[i]);
    mask.push_back(ex.loss_mask[i]);
  }
  if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; })) {
    throw ContractError("loss: example has no answer tokens");
  }
  TokenSequence input(ex.tokens.begin(), ex.tokens.end() - 1);
  auto logits = graph_logits(tape, model, mv, av, input, dropout_rng);
  return ad::masked_cross_entropy(logits, std::move(targets), std::move(mask));
}

/// Loss of one example with adapters live and dropout off.
template <typename Scalar>
Scalar loss_next_token(const TransformerModel<Scalar>& model, const LoraAdapter<Scalar>* adapter,
                       const TrainingExample& ex) {
  ad::Tape<Scalar> tape;
  auto mv = bind_model(tape, model, false);
  std::optional<AdapterVars<Scalar>> av;
  if (adapter) {
    check_conformance(model, *adapter);
    av = bind_adapter(tape, *adapter, false);
  }
  return graph_example_loss(tape, model, mv, av ? &*av : nullptr, ex).value()(0, 0);
}

struct TraceRow {
  std::size_t step;  // optimizer step the micro-batch contributes to
  double micro_loss;
  double effective_lr;
};

template <typename Scalar>
struct TrainResult {
  LoraAdapter<Scalar> adapter;
  std::vector<TraceRow> trace;
  std::size_t optimizer_steps = 0;
};

enum class TrainScope { adapter_only, full_model };

namespace detail {

/// Shared loop: seeded per-epoch shuffle, micro-batches of batch_size,
/// optimizer step every grad_accum_steps micro-batches (a short window at the
/// end of an epoch is stepped on its own, averaged over its actual size).
template <typename Scalar>
std::vector<TraceRow> run_training(const TransformerModel<Scalar>& model, LoraAdapter<Scalar>* adapter,
                                   std::span<MatrixX<Scalar>* const> params, TrainScope scope,
                                   const TrainConfig& cfg, const std::vector<TrainingExample>& data,
                                   std::size_t* steps_out) {
  cfg.validate();
  if (data.empty()) throw ContractError("train: dataset is empty");
  std::mt19937_64 shuffle_rng(cfg.seed);
  std::mt19937_64 dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  AdamW<Scalar> opt(cfg);
  std::vector<MatrixX<Scalar>> accum;
  for (auto* p : params) accum.push_back(MatrixX<Scalar>::Zero(p->rows(), p->cols()));
  std::vector<TraceRow> trace;
  std::size_t step = 0;
  std::vector<std::size_t> order(data.size());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const std::size_t n_micro = (order.size() + cfg.batch_size - 1) / cfg.batch_size;
    std::size_t in_window = 0;
    for (std::size_t mb = 0; mb < n_micro; ++mb) {
      const std::size_t window_start = mb - in_window;
      const std::size_t window = std::min(cfg.grad_accum_steps, n_micro - window_start);
      const std::size_t begin = mb * cfg.batch_size;
      const std::size_t end = std::min(begin + cfg.batch_size, order.size());

      ad::Tape<Scalar> tape;
      auto mv = bind_model(tape, model, scope == TrainScope::full_model);
      std::optional<AdapterVars<Scalar>> av;
      if (adapter) av = bind_adapter(tape, *adapter, scope == TrainScope::adapter_only);
      ad::Var<Scalar> total;
      for (std::size_t i = begin; i < end; ++i) {
        auto l = graph_example_loss(tape, model, mv, av ? &*av : nullptr, data[order[i]], &dropout_rng);
        total = total.valid() ? ad::add(total, l) : l;
      }
      auto loss = ad::scale(total, static_cast<Scalar>(1.0 / static_cast<double>(end - begin)));
      auto grads = tape.backward(loss);
      auto leaves = scope == TrainScope::full_model ? mv.leaves() : av->leaves();
      const auto inv_window = static_cast<Scalar>(1.0 / static_cast<double>(window));
      for (std::size_t i = 0; i < leaves.size(); ++i) accum[i] += grads[leaves[i]] * inv_window;

      const double lr = scheduled_learning_rate(cfg, step);
      trace.push_back({step, static_cast<double>(loss.value()(0, 0)), lr});
      ++in_window;
      if (in_window == window) {
        opt.step(params, accum, lr);
        for (auto& a : accum) a.setZero();
        in_window = 0;
        ++step;
      }
    }
  }
  if (steps_out) *steps_out = step;
  return trace;
}

}  // namespace detail

/// Trains only the adapter matrices; the base model is read-only.
template <typename Scalar>
TrainResult<Scalar> train(const TransformerModel<Scalar>& model, LoraAdapter<Scalar> adapter, const TrainConfig& cfg,
                          const std::vector<TrainingExample>& data) {
  check_conformance(model, adapter);
  std::vector<MatrixX<Scalar>*> params;
  adapter.for_each_pair([&](std::size_t, Projection, LowRankPair<Scalar>& pair) {
    params.push_back(&pair.a);
    params.push_back(&pair.b);
  });
  TrainResult<Scalar> result;
  result.trace = detail::run_training<Scalar>(model, &adapter, params, TrainScope::adapter_only, cfg, data,
                                              &result.optimizer_steps);
  result.adapter = std::move(adapter);
  return result;
}

/// Full-parameter training of the base model (generic pre-training).
template <typename Scalar>
std::vector<TraceRow> pretrain(TransformerModel<Scalar>& model, const TrainConfig& cfg,
                               const std::vector<TrainingExample>& data) {
  std::vector<MatrixX<Scalar>*> params;
  model.for_each_parameter([&](const std::string&, MatrixX<Scalar>& m) { params.push_back(&m); });
  return detail::run_training<Scalar>(model, nullptr, params, TrainScope::full_model, cfg, data, nullptr);
}

}  // namespace circuit_probe

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "circuit_probe/dataset.hpp"
#include "circuit_probe/forward.hpp"

namespace circuit_probe {

/// Neuron indices to zero at a hook site. Indices are sorted and unique;
/// an empty set is an explicit no-op.
class SilenceSpec {
 public:
  /// Throws SpecError when an index is not below `site_dim`.
  SilenceSpec(HookSite site, std::vector<std::size_t> indices, std::size_t site_dim, std::string label);

  static SilenceSpec for_model(const ModelConfig& cfg, const HookSite& site, std::vector<std::size_t> indices,
                               std::string label);

  const HookSite& site() const { return site_; }
  const std::vector<std::size_t>& indices() const { return indices_; }
  const std::string& label() const { return label_; }
  std::size_t site_dimension() const { return site_dim_; }

 private:
  HookSite site_;
  std::vector<std::size_t> indices_;
  std::size_t site_dim_;
  std::string label_;
};

inline const std::string kBaseLabel = "Base";
inline const std::string kLoraLabel = "LoRA";
std::string single_silence_label(std::size_t neuron);
std::string group_silence_label(std::size_t k);

template <typename Scalar = float>
Hook<Scalar> make_silencing_hook(const SilenceSpec& spec) {
  return {spec.site(), [indices = spec.indices()](const HookEvent&, Eigen::Ref<MatrixX<Scalar>> act) {
            for (std::size_t i : indices) act.col(static_cast<Index>(i)).setZero();
          }};
}

struct EvalOptions {
  std::size_t max_new_tokens = 190;
  std::size_t workers = 1;
  std::size_t bleu_max_order = 4;
};

struct VariantAnswer {
  std::string question_id;
  std::string variant_label;
  std::string answer_text;
  std::size_t answer_word_count = 0;

  bool operator==(const VariantAnswer&) const = default;
};

struct MetricRow {
  std::string question_id;
  std::string variant_label;
  double bleu = 0;
  std::size_t answer_words = 0;

  bool operator==(const MetricRow&) const = default;
};

struct VariantReport {
  std::string label;
  std::vector<VariantAnswer> answers;
  std::vector<MetricRow> rows;

  double mean_bleu() const;
  double mean_words() const;
  std::vector<double> bleu_scores() const;
};

/// One greedy generation per record, scored against the record's answer.
/// With a spec, the silencing hook is active at every position; the label
/// then comes from the spec. Questions may run on several workers; results
/// keep dataset order.
VariantReport evaluate_variant(const Model& model, const std::optional<SilenceSpec>& spec, const Dataset& records,
                               const EvalOptions& options = {}, const std::string& label = kLoraLabel);

std::string answers_jsonl(const std::vector<VariantAnswer>& answers);
std::vector<VariantAnswer> parse_answers_jsonl(const std::string& text);

}  // namespace circuit_probe

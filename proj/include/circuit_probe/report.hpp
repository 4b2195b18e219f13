#pragma once

#include <optional>
#include <string>
#include <vector>

#include "circuit_probe/activation_lab.hpp"
#include "circuit_probe/intervention.hpp"
#include "circuit_probe/metrics.hpp"

namespace circuit_probe {

struct VariantSummary {
  std::string label;
  double mean_bleu = 0;
  std::optional<double> mean_words;
};

VariantSummary summarize(const VariantReport& report);

struct StatRow {
  std::string variant_a;
  std::string variant_b;
  WilcoxonResult result;
};

/// Wilcoxon on BLEU of b against a, paired by question id.
StatRow compare_variants(const VariantReport& a, const VariantReport& b);

std::string metrics_csv(const std::vector<MetricRow>& rows);
std::string statistics_csv(const std::vector<StatRow>& rows);
std::string summary_csv(const std::vector<VariantSummary>& summaries);
std::vector<VariantSummary> parse_summary_csv(const std::string& text);
std::string boxplot_csv(const std::vector<BoxplotStats>& base, const std::vector<BoxplotStats>& adapted);

std::vector<MetricRow> parse_metrics_csv(const std::string& text);
std::vector<StatRow> parse_statistics_csv(const std::string& text);
std::vector<NeuronDelta> parse_deltas_csv(const std::string& text);

struct BoxGroup;
std::vector<BoxGroup> parse_boxplot_csv(const std::string& text);

/// Rebuilds per-variant reports from metric rows, in first-seen order.
std::vector<VariantReport> group_by_variant(const std::vector<MetricRow>& rows);

struct Bar {
  std::string label;
  double value = 0;
  std::string css_class = "bar";
};

struct BarChart {
  std::string title;
  std::string y_label;
  std::vector<Bar> bars;
  std::optional<double> threshold;
  std::string threshold_label;
};

/// Hand-written SVG. Every bar carries data-label and data-value, the
/// threshold line data-value, all in shortest round-trip decimal form.
std::string render_bar_chart(const BarChart& chart);

struct BoxGroup {
  std::string label;
  BoxplotStats base;
  BoxplotStats adapted;
};

std::string render_boxplot_chart(const std::string& title, const std::vector<BoxGroup>& groups);

inline constexpr std::size_t kDeltaChartNeurons = 12;

/// Top neurons by |delta| as signed bars, classed amplified or suppressed.
BarChart delta_chart(const std::vector<NeuronDelta>& deltas, std::size_t top = kDeltaChartNeurons);
BarChart bleu_chart(const std::vector<VariantSummary>& variants);
BarChart length_chart(const std::vector<VariantSummary>& variants);
/// -log10 p per comparison with the line at -log10(0.05).
BarChart significance_chart(const std::vector<StatRow>& rows);

std::string xml_escape(const std::string& text);

}  // namespace circuit_probe

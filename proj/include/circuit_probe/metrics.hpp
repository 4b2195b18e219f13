#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace circuit_probe {

using WordList = std::vector<std::string>;

/// Lowercases, splits on whitespace and separates ASCII punctuation into
/// standalone tokens.
WordList tokenize_for_metric(std::string_view text);

/// Number of whitespace-separated words.
std::size_t word_count(std::string_view text);

/// Mean word_count over `answers`; zero for an empty list.
double avg_word_length(const std::vector<std::string>& answers);

inline constexpr double kBleuEpsilon = 1e-9;

struct BleuScore {
  double value = 0.0;
  // Modified precision per order (index 0 is unigrams); zero-match orders
  // hold kBleuEpsilon.
  std::vector<double> precisions;
  std::vector<bool> order_included;
  double brevity_penalty = 1.0;
};

/// Sentence BLEU with clipped n-gram counts. Orders without any candidate
/// n-gram are left out of the geometric mean; an empty candidate scores 0.
BleuScore bleu_sentence(const WordList& candidate, const WordList& reference, std::size_t max_order = 4);

struct PairedScores {
  std::vector<std::string> question_ids;
  std::vector<double> scores_a;
  std::vector<double> scores_b;
};

enum class WilcoxonMethod { exact, normal_approx };

std::string_view wilcoxon_method_name(WilcoxonMethod m);

struct WilcoxonResult {
  std::size_t n_effective = 0;
  double w_plus = 0.0;
  double w_minus = 0.0;
  double statistic = 0.0;
  double p_value = 1.0;
  WilcoxonMethod method = WilcoxonMethod::exact;
  bool significant = false;
  bool degenerate = false;  // every difference was zero
};

inline constexpr std::size_t kWilcoxonExactMax = 20;
inline constexpr double kSignificanceLevel = 0.05;

/// Two-sided signed-rank test on the differences a - b. Zero differences
/// are dropped and tied magnitudes get average ranks. The exact null
/// distribution is used up to kWilcoxonExactMax effective pairs, the
/// tie-corrected normal approximation with continuity correction above.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b,
                                    std::size_t exact_max = kWilcoxonExactMax);
WilcoxonResult wilcoxon_signed_rank(const PairedScores& pairs);

/// Exact two-sided p for W+ = observed given the ranks, counting all 2^n
/// sign assignments.
double wilcoxon_exact_p(const std::vector<double>& ranks, double observed_w_plus);

/// Normal approximation with tie-corrected variance and 0.5 continuity
/// correction.
double wilcoxon_normal_p(const std::vector<double>& ranks, double observed_w_plus);

/// Average ranks (1-based) of |d| in input order.
std::vector<double> average_ranks(const std::vector<double>& magnitudes);

double neg_log10_p(double p);
inline double neg_log10_p(const WilcoxonResult& r) { return neg_log10_p(r.p_value); }

}  // namespace circuit_probe

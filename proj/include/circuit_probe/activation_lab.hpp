#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "circuit_probe/dataset.hpp"
#include "circuit_probe/forward.hpp"

namespace circuit_probe {

enum class PositionMode { all, generated_only };

std::string_view position_mode_name(PositionMode mode);
PositionMode position_mode_from_name(std::string_view name);

inline constexpr std::size_t kDefaultReservoirCap = 10000;
inline constexpr std::size_t kDefaultMaxNewTokens = 190;

struct ProfileOptions {
  PositionMode mode = PositionMode::all;
  std::size_t max_new_tokens = kDefaultMaxNewTokens;
  // 0 disables raw-value retention.
  std::size_t reservoir_cap = kDefaultReservoirCap;
  std::uint64_t reservoir_seed = 0;
};

/// Per-neuron running sums over the observed positions of a hook site, plus
/// an optional reservoir of raw activation rows for quantiles.
struct ActivationProfile {
  HookSite site;
  std::string dataset_fingerprint;
  std::size_t count = 0;
  std::vector<double> sums;
  std::size_t reservoir_cap = 0;
  // retained[neuron][slot]; every neuron keeps the same slots.
  std::vector<std::vector<float>> retained;

  std::size_t neurons() const { return sums.size(); }
  double mean(std::size_t neuron) const;
  std::vector<double> means() const;
  bool retains_raw() const { return reservoir_cap > 0; }

  bool operator==(const ActivationProfile&) const = default;
};

/// Accumulates activation rows into a profile. Reservoir sampling decides
/// once per position so retained values of different neurons stay aligned.
class ProfileAccumulator {
 public:
  ProfileAccumulator(HookSite site, std::size_t neurons, std::size_t reservoir_cap, std::uint64_t seed);

  void observe(const float* row);
  template <typename Derived>
  void observe_rows(const Eigen::MatrixBase<Derived>& block) {
    for (Index i = 0; i < block.rows(); ++i) {
      Eigen::Matrix<float, 1, Eigen::Dynamic> row = block.row(i).template cast<float>();
      observe(row.data());
    }
  }

  ActivationProfile finish(std::string dataset_fingerprint) &&;

 private:
  ActivationProfile profile_;
  std::mt19937_64 rng_;
};

/// Greedy-generates an answer for every record with a record-only hook at
/// `site` and accumulates the activations of the selected positions.
ActivationProfile profile_activations(const Model& model, const Dataset& records, const HookSite& site,
                                      const ProfileOptions& options = {});

enum class DeltaClass { amplified, suppressed };
std::string_view delta_class_name(DeltaClass c);

struct NeuronDelta {
  std::size_t neuron_index = 0;
  double avg_base = 0;
  double avg_lora = 0;
  double delta = 0;
  DeltaClass classification = DeltaClass::suppressed;
};

/// Throws ComparabilityError unless both profiles share site, dataset
/// fingerprint and neuron count.
std::vector<NeuronDelta> diff_profiles(const ActivationProfile& base, const ActivationProfile& adapted);

struct KeyNeuronSet {
  std::vector<std::size_t> indices;
  std::size_t k = 0;
};

inline constexpr std::size_t kDefaultKeyNeurons = 6;

/// Top-k by |delta|, ties to the lower index.
KeyNeuronSet select_key_neurons(const std::vector<NeuronDelta>& deltas, std::size_t k = kDefaultKeyNeurons);

struct BoxplotStats {
  std::size_t neuron_index = 0;
  double min = 0;
  double q1 = 0;
  double median = 0;
  double q3 = 0;
  double max = 0;
};

/// Inclusive linear-interpolation quantile of sorted values, p in [0, 1].
double quantile_sorted(const std::vector<double>& sorted, double p);

std::vector<BoxplotStats> boxplot_stats(const ActivationProfile& profile, const std::vector<std::size_t>& neurons);

std::string serialize_profile(const ActivationProfile& profile);
ActivationProfile deserialize_profile(const std::string& text);
void save_profile(const std::filesystem::path& path, const ActivationProfile& profile);
ActivationProfile load_profile(const std::filesystem::path& path);

std::string profile_csv(const ActivationProfile& profile);
std::string deltas_csv(const std::vector<NeuronDelta>& deltas);

}  // namespace circuit_probe

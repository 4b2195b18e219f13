#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "circuit_probe/activation_lab.hpp"
#include "circuit_probe/dataset.hpp"
#include "circuit_probe/json_io.hpp"
#include "circuit_probe/lora.hpp"
#include "circuit_probe/trainer.hpp"

namespace circuit_probe {

/// Generic pre-training of the base model on synthetic conversational text.
struct PretrainSpec {
  bool enabled = true;
  std::size_t texts = 600;
  std::size_t max_tokens = 256;
  TrainConfig train = [] {
    TrainConfig t;
    t.learning_rate = 5e-3;
    t.epochs = 4;
    t.grad_accum_steps = 8;
    t.warmup_steps = 20;
    return t;
  }();
};

struct MetricSettings {
  std::size_t max_new_tokens = kDefaultMaxNewTokens;
  std::size_t bleu_max_order = 4;
  PositionMode position_mode = PositionMode::all;
  std::size_t reservoir_cap = kDefaultReservoirCap;
  std::size_t workers = 1;
};

struct ExperimentConfig {
  std::filesystem::path dataset_path;
  std::filesystem::path output_dir;
  ModelConfig model;
  LoraConfig lora;
  TrainConfig train;
  bool train_seed_explicit = false;
  PretrainSpec pretrain;
  SplitSpec split;
  bool split_seed_explicit = false;
  std::optional<HookSite> site;
  std::size_t k = kDefaultKeyNeurons;
  MetricSettings metrics;
  std::uint64_t seed = 0;

  HookSite effective_site() const { return site ? *site : final_mlp_site(model); }
  /// Seeds not given explicitly are derived from `seed`.
  std::uint64_t model_seed() const { return seed + 1; }
  std::uint64_t pretrain_text_seed() const { return seed + 1; }
  std::uint64_t pretrain_seed() const { return seed + 1; }
  std::uint64_t train_seed() const { return seed + 2; }
  std::uint64_t adapter_seed() const { return seed + 3; }
  TrainConfig effective_train() const;
  TrainConfig effective_pretrain() const;
  SplitSpec effective_split() const;

  /// Sub-configs individually valid, site and k in range, dataset present.
  void validate() const;
};

/// Relative paths resolve against `base_dir`.
ExperimentConfig parse_experiment_config(const Json& j, const std::filesystem::path& base_dir);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Every setting that influences results, with derived seeds filled in and
/// paths left out.
Json effective_config_json(const ExperimentConfig& cfg);

/// SHA-256 of the effective config plus the dataset content hash.
std::string config_hash(const ExperimentConfig& cfg, const std::string& dataset_sha256);

struct StageRecord {
  std::string completed_at;
  std::map<std::string, std::string> inputs;
  std::map<std::string, std::string> artifacts;
};

struct RunManifest {
  std::string toolkit_version;
  std::string config_hash;
  std::string dataset_sha256;
  std::map<std::string, StageRecord> stages;

  /// artifact name -> checksum over every stage.
  std::map<std::string, std::string> artifact_checksums() const;
};

Json manifest_to_json(const RunManifest& m);
RunManifest manifest_from_json(const Json& j);

inline constexpr const char* kManifestFile = "run_manifest.json";

struct RunOptions {
  bool force = false;
};

/// Run directory output_dir/run-<first 12 hex of the config hash>.
class Run {
 public:
  explicit Run(ExperimentConfig cfg);

  const ExperimentConfig& config() const { return cfg_; }
  const std::filesystem::path& dir() const { return dir_; }
  const RunManifest& manifest() const { return manifest_; }
  std::filesystem::path path(const std::string& artifact) const { return dir_ / artifact; }

  /// Throws ValidationError naming the missing prerequisite stage.
  std::filesystem::path require(const std::string& artifact, const std::string& producer) const;
  /// Throws ValidationError when an output exists and force is off.
  void check_outputs(const std::vector<std::string>& artifacts, const RunOptions& opts) const;
  void write(const std::string& artifact, const std::string& bytes);
  void record_stage(const std::string& stage, const std::vector<std::string>& inputs,
                    const std::vector<std::string>& artifacts);

 private:
  void save_manifest() const;

  ExperimentConfig cfg_;
  std::filesystem::path dir_;
  RunManifest manifest_;
};

std::vector<TrainingExample> pretraining_examples(const std::vector<std::string>& texts, std::size_t max_tokens);

enum class ProfileWhich { base, adapted, both };
ProfileWhich profile_which_from_name(const std::string& name);

void cmd_init_model(Run& run, const RunOptions& opts = {});
void cmd_finetune(Run& run, const RunOptions& opts = {});
void cmd_profile(Run& run, ProfileWhich which, const RunOptions& opts = {});
void cmd_diff(Run& run, const RunOptions& opts = {});
void cmd_silence_eval(Run& run, const RunOptions& opts = {});
void cmd_stats(Run& run, const RunOptions& opts = {});
void cmd_report(Run& run, const RunOptions& opts = {});
void cmd_run_all(Run& run, const RunOptions& opts = {});

}  // namespace circuit_probe

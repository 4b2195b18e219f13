#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "circuit_probe/tokenizer.hpp"
#include "circuit_probe/trainer.hpp"

namespace circuit_probe {

struct QaRecord {
  std::string id;
  std::string source_doc;
  std::string question;
  std::string answer;

  bool operator==(const QaRecord&) const = default;
};

using Dataset = std::vector<QaRecord>;

/// One JSON object per line with string fields id, source_doc, question and
/// answer. Blank lines are skipped. Errors carry the 1-based line number.
Dataset parse_dataset(std::istream& in);
Dataset load_dataset(const std::filesystem::path& path);
void save_dataset(const std::filesystem::path& path, const Dataset& records);
std::string dataset_to_jsonl(const Dataset& records);

struct SplitSpec {
  double eval_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Split {
  Dataset train;
  Dataset eval;
};

/// Within each source_doc stratum a seeded shuffle sends
/// ceil(eval_fraction * n) records to eval. Both halves keep input order.
Split stratified_split(const Dataset& records, const SplitSpec& spec);

/// JSON audit record of a split: seed, fraction and id -> split.
std::string split_manifest_json(const Split& split, const SplitSpec& spec);

inline constexpr const char* kAnswerMarker = "\nA: ";

/// "Q: {question}\nA: {answer}"; EOS is appended at the token level.
std::string format_prompt(const QaRecord& record);
/// "Q: {question}\nA: ", the prefix fed to the model at evaluation.
std::string generation_prompt(const std::string& question);

/// Marks the tokens after the first answer marker (answer bytes and the
/// closing EOS). Throws ContractError when the marker is absent.
std::vector<bool> extract_answer_region(const TokenSequence& tokens);

/// BOS + formatted prompt + EOS with its answer mask.
TrainingExample make_training_example(const QaRecord& record);

/// Order-independent content hash: SHA-256 over the sorted per-record hashes.
std::string dataset_fingerprint(const Dataset& records);

/// Template QA corpus about a fictional plant: 16 components x 5 attribute
/// documents x 4 phrasings. Values are drawn from `seed`.
Dataset synthetic_qa_corpus(std::uint64_t seed);

/// Rambling conversational text used to pre-train the base model, including
/// long-winded answers to generic questions in the same Q/A layout.
std::vector<std::string> synthetic_pretraining_texts(std::uint64_t seed, std::size_t count);

}  // namespace circuit_probe

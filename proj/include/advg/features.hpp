#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "advg/corpus.hpp"
#include "advg/kernels.hpp"

namespace advg {

enum class Family : int { STRING = 0, API_PARAM = 1, API_TRIGRAM = 2 };

const char* family_name(Family f);
Family family_from_name(const std::string& name);

// One candidate input feature. The canonical text is globally unique within
// its family: the raw string, "api@pos=value", or "a>b>c" for call trigrams.
struct FeatureToken {
  Family family = Family::STRING;
  std::string text;
  auto operator<=>(const FeatureToken&) const = default;
};

struct VocabEntry {
  FeatureToken token;
  std::uint32_t column = 0;
  double mi_bits = 0.0;
};

// Selected feature set, ordered by descending mutual information with the
// label (ties by family then token text). Column index equals rank.
class FeatureVocabulary {
 public:
  FeatureVocabulary() = default;
  explicit FeatureVocabulary(std::vector<VocabEntry> entries);

  const std::vector<VocabEntry>& entries() const { return entries_; }
  std::uint32_t dim() const { return static_cast<std::uint32_t>(entries_.size()); }
  // Returns the column for a token, or -1 if the token was not selected.
  std::int64_t column_of(const FeatureToken& t) const;

  void save(const std::filesystem::path& path) const;
  static FeatureVocabulary load(const std::filesystem::path& path);

 private:
  std::vector<VocabEntry> entries_;
  std::vector<std::uint32_t> order_;  // entry ids sorted by (family, text)
};

struct SparseBinaryVector {
  std::uint32_t dim = 0;
  std::vector<std::uint32_t> on;  // sorted ascending, unique
  bool operator==(const SparseBinaryVector&) const = default;
};

struct LabeledDataset {
  std::uint32_t dim = 0;
  std::vector<SparseBinaryVector> vectors;
  std::vector<std::uint8_t> labels;
  std::size_t size() const { return vectors.size(); }
};

// The distinct features present in one log, across all three families.
// Sorted by (family, text); empty log yields an empty set.
std::vector<FeatureToken> extract_features(const BehaviorLog& log);

// Plug-in mutual information estimate, in bits, between two binary columns.
double mutual_information(std::span<const std::uint8_t> x,
                          std::span<const std::uint8_t> y);

// Same estimator from the 2x2 joint counts: n samples total, of which
// n_y1 have y=1, on_y0/on_y1 have x=1 split by y.
double mi_from_counts(std::uint64_t n, std::uint64_t n_y1, std::uint64_t on_y0,
                      std::uint64_t on_y1);

// Rank all features observed in `train_logs` by mutual information with the
// label and keep the top k. Deterministic for any input permutation.
FeatureVocabulary select_top_k(std::span<const BehaviorLog> train_logs,
                               std::size_t k,
                               kernels::Exec ex = kernels::default_exec());

SparseBinaryVector vectorize(const BehaviorLog& log, const FeatureVocabulary& vocab);

struct SplitResult {
  LabeledDataset train, valid, test;
  std::size_t duplicates_dropped = 0;
  std::size_t label_conflicts = 0;
};

// Drop exact duplicate vectors (first instance wins), then partition the
// survivors at the given ratios with a seeded shuffle. Ratios must be
// positive and sum to 1; split sizes are largest-remainder rounded.
SplitResult dedup_and_split(std::span<const SparseBinaryVector> vectors,
                            std::span<const std::uint8_t> labels,
                            std::array<double, 3> ratios, std::uint64_t seed);

struct ExtractResult {
  FeatureVocabulary vocab;
  LabeledDataset train, valid, test;
  std::size_t candidate_count = 0;
  std::size_t duplicates_dropped = 0;
  std::size_t label_conflicts = 0;
  std::size_t collisions_dropped = 0;  // post-selection duplicate vectors
};

// Full featurization pipeline: extract, dedup in the full candidate space,
// split, rank by train-split MI, vectorize against the selected vocabulary.
// Items whose selected-feature vector collides with an earlier one are
// dropped so the final splits stay pairwise distinct.
ExtractResult run_extract(std::span<const BehaviorLog> corpus, std::size_t k,
                          std::array<double, 3> ratios, std::uint64_t seed,
                          kernels::Exec ex = kernels::default_exec());

void save_dataset(const LabeledDataset& data, const std::filesystem::path& path);
LabeledDataset load_dataset(const std::filesystem::path& path);

}  // namespace advg

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "nodulenet/annotations.hpp"

namespace nodulenet {

/// Patient -> fold index in [0, k).
struct FoldAssignment {
  int k = 0;
  std::map<std::string, int> fold_of_patient;

  int fold_of(const std::string& patient_id) const;
};

/// Shuffles the distinct patients with `seed`, then assigns each to the fold
/// currently holding the fewest nodules (lowest index on ties). All nodules
/// of a patient share one fold.
FoldAssignment grouped_kfold(std::span<const NoduleRecord> records, int k, std::uint64_t seed);

/// Writes the fold of each record's patient into record.fold.
void apply_folds(std::span<NoduleRecord> records, const FoldAssignment& folds);

/// Indices of records whose patient sits in fold `f` (validation) and the
/// complement (training).
struct FoldSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};
FoldSplit split_for_fold(std::span<const NoduleRecord> records, const FoldAssignment& folds, int f);

}  // namespace nodulenet

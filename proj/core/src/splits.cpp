#include "nodulenet/splits.hpp"

#include <algorithm>

#include "nodulenet/error.hpp"
#include "nodulenet/rng.hpp"

namespace nodulenet {

int FoldAssignment::fold_of(const std::string& patient_id) const {
  const auto it = fold_of_patient.find(patient_id);
  if (it == fold_of_patient.end()) throw ValidationError("patient without fold: " + patient_id);
  return it->second;
}

FoldAssignment grouped_kfold(std::span<const NoduleRecord> records, int k, std::uint64_t seed) {
  if (k < 1) throw ValidationError("fold count must be positive");
  std::vector<std::string> patients;
  std::map<std::string, std::size_t> nodules_per_patient;
  for (const auto& r : records) {
    if (nodules_per_patient[r.patient_id]++ == 0) patients.push_back(r.patient_id);
  }
  if (patients.size() < static_cast<std::size_t>(k)) {
    throw ValidationError("fewer patients (" + std::to_string(patients.size()) + ") than folds (" + std::to_string(k) + ")");
  }

  // Fisher-Yates on the first-appearance order.
  RngStream rng(seed);
  for (std::size_t i = patients.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.index(i));
    std::swap(patients[i - 1], patients[j]);
  }

  FoldAssignment out;
  out.k = k;
  std::vector<std::size_t> load(static_cast<std::size_t>(k), 0);
  for (const auto& p : patients) {
    const auto f = static_cast<std::size_t>(std::min_element(load.begin(), load.end()) - load.begin());
    load[f] += nodules_per_patient[p];
    out.fold_of_patient[p] = static_cast<int>(f);
  }
  return out;
}

void apply_folds(std::span<NoduleRecord> records, const FoldAssignment& folds) {
  for (auto& r : records) r.fold = folds.fold_of(r.patient_id);
}

FoldSplit split_for_fold(std::span<const NoduleRecord> records, const FoldAssignment& folds, int f) {
  FoldSplit s;
  for (std::size_t i = 0; i < records.size(); ++i) {
    (folds.fold_of(records[i].patient_id) == f ? s.validation : s.train).push_back(i);
  }
  return s;
}

}  // namespace nodulenet

#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>

#include "nodulenet/error.hpp"
#include "nodulenet/rng.hpp"
#include "nodulenet/splits.hpp"

namespace nodulenet {
namespace {

std::vector<NoduleRecord> records_for(const std::vector<int>& nodules_per_patient) {
  std::vector<NoduleRecord> out;
  for (std::size_t p = 0; p < nodules_per_patient.size(); ++p)
    for (int n = 0; n < nodules_per_patient[p]; ++n) {
      NoduleRecord r;
      r.patient_id = "p" + std::to_string(p);
      r.scan_id = r.patient_id + "-s";
      r.nodule_id = r.patient_id + "-n" + std::to_string(n);
      r.bbox = {0, 0, 0, 1, 1, 1};
      r.annotator_labels = {SuspicionLevel::HighlySuspicious};
      out.push_back(r);
    }
  return out;
}

std::vector<int> fold_sizes(const std::vector<NoduleRecord>& records, const FoldAssignment& fa) {
  std::vector<int> sizes(static_cast<std::size_t>(fa.k), 0);
  for (const auto& r : records) sizes[static_cast<std::size_t>(fa.fold_of(r.patient_id))] += 1;
  return sizes;
}

TEST(Splits, ExactBalanceWithSingletons) {
  const auto records = records_for(std::vector<int>(10, 1));
  const auto fa = grouped_kfold(records, 5, 1);
  EXPECT_EQ(fold_sizes(records, fa), (std::vector<int>{2, 2, 2, 2, 2}));
}

TEST(Splits, PatientNodulesShareFold) {
  auto counts = std::vector<int>(9, 1);
  counts.push_back(7);
  const auto records = records_for(counts);
  const auto fa = grouped_kfold(records, 5, 2);
  std::set<int> folds;
  for (const auto& r : records)
    if (r.patient_id == "p9") folds.insert(fa.fold_of(r.patient_id));
  EXPECT_EQ(folds.size(), 1u);
}

TEST(Splits, TooFewPatients) {
  const auto records = records_for({3, 2});
  EXPECT_THROW(grouped_kfold(records, 5, 0), ValidationError);
}

TEST(Splits, PartitionProperties) {
  RngStream rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const int patients = 5 + static_cast<int>(rng.index(60));
    const int k = 2 + static_cast<int>(rng.index(4));
    std::vector<int> counts(static_cast<std::size_t>(patients));
    for (int& c : counts) c = 1 + static_cast<int>(rng.index(7));
    auto records = records_for(counts);
    const auto fa = grouped_kfold(records, k, rng.next_u64());
    ASSERT_EQ(fa.fold_of_patient.size(), static_cast<std::size_t>(patients));
    const auto sizes = fold_sizes(records, fa);
    for (int s : sizes) ASSERT_GT(s, 0);
    const int spread = *std::max_element(sizes.begin(), sizes.end()) - *std::min_element(sizes.begin(), sizes.end());
    ASSERT_LE(spread, *std::max_element(counts.begin(), counts.end()));

    apply_folds(records, fa);
    for (int f = 0; f < k; ++f) {
      const auto split = split_for_fold(records, fa, f);
      ASSERT_EQ(split.train.size() + split.validation.size(), records.size());
      std::set<std::size_t> all(split.train.begin(), split.train.end());
      all.insert(split.validation.begin(), split.validation.end());
      ASSERT_EQ(all.size(), records.size());
      std::set<std::string> train_patients;
      for (auto i : split.train) train_patients.insert(records[i].patient_id);
      for (auto i : split.validation) {
        ASSERT_EQ(records[i].fold, f);
        ASSERT_FALSE(train_patients.count(records[i].patient_id));
      }
    }
  }
}

TEST(Splits, DeterministicPerSeed) {
  const auto records = records_for(std::vector<int>(30, 2));
  EXPECT_EQ(grouped_kfold(records, 5, 9).fold_of_patient, grouped_kfold(records, 5, 9).fold_of_patient);
  EXPECT_NE(grouped_kfold(records, 5, 9).fold_of_patient, grouped_kfold(records, 5, 10).fold_of_patient);
}

TEST(Splits, UnknownPatient) {
  const auto records = records_for(std::vector<int>(5, 1));
  const auto fa = grouped_kfold(records, 5, 0);
  EXPECT_THROW(fa.fold_of("nobody"), Error);
}

}  // namespace
}  // namespace nodulenet

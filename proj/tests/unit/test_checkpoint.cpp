#include <gtest/gtest.h>

#include "nodulenet/checkpoint.hpp"
#include "nodulenet/error.hpp"
#include "nodulenet/shards.hpp"
#include "test_util.hpp"

namespace nodulenet {
namespace {

using testing::TempDir;

Checkpoint sample_checkpoint() {
  RngStream rng(111);
  auto cfg = ModelConfig::tiny(4);
  cfg.norm = nn::NormKind::group;
  cfg.stem_pool = true;
  Checkpoint c;
  c.params = build_model<float>(cfg, rng);
  for (auto& b : c.params.buffers)
    for (auto& v : b.value.data) v = static_cast<float>(rng.uniform());
  c.task = Task::multiclass4;
  c.epoch = 7;
  c.metric = 0.8125;
  c.fold = 2;
  c.spacing = {0.7, 0.7, 1.5};
  c.normalization.a_min = -1000;
  c.crop_size = 32;
  return c;
}

TEST(Checkpoint, RoundTripIsExact) {
  const Checkpoint c = sample_checkpoint();
  const Checkpoint back = deserialize_checkpoint(serialize_checkpoint(c));
  EXPECT_EQ(back.params.config, c.params.config);
  ASSERT_EQ(back.params.tensors.size(), c.params.tensors.size());
  for (std::size_t i = 0; i < c.params.tensors.size(); ++i) {
    EXPECT_EQ(back.params.tensors[i].name, c.params.tensors[i].name);
    EXPECT_EQ(back.params.tensors[i].value, c.params.tensors[i].value);
  }
  for (std::size_t i = 0; i < c.params.buffers.size(); ++i)
    EXPECT_EQ(back.params.buffers[i].value, c.params.buffers[i].value);
  EXPECT_EQ(back.task, c.task);
  EXPECT_EQ(back.epoch, 7);
  EXPECT_EQ(back.metric, 0.8125);
  EXPECT_EQ(back.fold, 2);
  EXPECT_EQ(back.spacing, c.spacing);
  EXPECT_EQ(back.normalization.a_min, -1000);
  EXPECT_EQ(back.crop_size, 32);
}

TEST(Checkpoint, FileRoundTrip) {
  TempDir dir;
  const Checkpoint c = sample_checkpoint();
  save_checkpoint(c, dir.path() / "sub" / "c.bin");
  const Checkpoint back = load_checkpoint(dir.path() / "sub" / "c.bin");
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(c));
  EXPECT_THROW(load_checkpoint(dir.path() / "missing.bin"), Error);
}

TEST(Checkpoint, CorruptInputRejected) {
  const std::string bytes = serialize_checkpoint(sample_checkpoint());
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), Error);
  EXPECT_THROW(deserialize_checkpoint("not a checkpoint\n"), Error);
  EXPECT_THROW(deserialize_checkpoint(bytes + "x"), Error);
}

ShardRecord sample_record(RngStream& rng, int edge, int i) {
  ShardRecord r;
  r.patch = Patch(edge);
  for (auto& v : r.patch.data) v = static_cast<float>(rng.uniform());
  r.patient_id = "p" + std::to_string(i);
  r.scan_id = "s" + std::to_string(i);
  r.nodule_id = "n" + std::to_string(i);
  r.label = suspicion_from_code(i % 5);
  r.fold = i % 3;
  r.bbox = {i, 1, 2, i + 5, 6, 7};
  r.volume = "../volumes/s" + std::to_string(i) + ".raw";
  r.resized = i % 2 == 0;
  return r;
}

TEST(Shards, RoundTrip) {
  RngStream rng(112);
  std::vector<ShardRecord> recs;
  for (int i = 0; i < 5; ++i) recs.push_back(sample_record(rng, 8, i));
  const std::string bytes = serialize_shard(recs);
  EXPECT_EQ(bytes.substr(0, bytes.find('\n')), R"({"count":5,"dtype":"f32","shape":[2,8,8,8]})");
  const auto back = deserialize_shard(bytes);
  ASSERT_EQ(back.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(back[i].patch.data, recs[i].patch.data);
    EXPECT_EQ(back[i].patch.edge, 8);
    EXPECT_EQ(back[i].nodule_id, recs[i].nodule_id);
    EXPECT_EQ(back[i].patch.nodule_id, recs[i].nodule_id);
    EXPECT_EQ(back[i].label, recs[i].label);
    EXPECT_EQ(back[i].fold, recs[i].fold);
    EXPECT_EQ(back[i].bbox, recs[i].bbox);
    EXPECT_EQ(back[i].volume, recs[i].volume);
    EXPECT_EQ(back[i].resized, recs[i].resized);
  }
  EXPECT_TRUE(deserialize_shard(serialize_shard(std::vector<ShardRecord>{})).empty());
}

TEST(Shards, FileRoundTripAndErrors) {
  TempDir dir;
  RngStream rng(113);
  std::vector<ShardRecord> recs{sample_record(rng, 4, 0), sample_record(rng, 4, 1)};
  write_shard(recs, dir.path() / "f.shard");
  EXPECT_EQ(read_shard(dir.path() / "f.shard").size(), 2u);
  EXPECT_THROW(read_shard(dir.path() / "none.shard"), Error);
  const std::string bytes = serialize_shard(recs);
  EXPECT_THROW(deserialize_shard(bytes.substr(0, bytes.size() - 10)), Error);
  recs.push_back(sample_record(rng, 6, 2));
  EXPECT_THROW(serialize_shard(recs), ValidationError);
}

}  // namespace
}  // namespace nodulenet

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "repo/checkpoint.hpp"
#include "repo/tasks.hpp"

namespace fs = std::filesystem;
using repo::CheckpointError;

namespace {

repo::ModelConfig config() {
  repo::ModelConfig c;
  c.vocab_size = repo::tasks::vocab::kSize;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_p = 4;
  c.max_seq_len = 32;
  c.schedule = repo::named_schedule("r2n1", 2, 0);
  return c;
}

class CheckpointFile : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("repo_ckpt_" + std::string(::testing::UnitTest::GetInstance()
                                           ->current_test_info()
                                           ->name()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  std::vector<char> bytes(const std::string& p) const {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
  }
  void put(const std::string& p, const std::vector<char>& b) const {
    std::ofstream os(p, std::ios::binary);
    os.write(b.data(), std::streamsize(b.size()));
  }

  fs::path dir_;
};

}  // namespace

TEST_F(CheckpointFile, RoundTripPreservesParametersAndOutputs) {
  auto m = repo::Model<float>::build(config(), 5);
  write_checkpoint(path("m.bin"), to_checkpoint(m, {{"step", 42}}));
  auto data = repo::read_checkpoint(path("m.bin"));
  EXPECT_EQ(data.meta.at("step"), 42);
  EXPECT_EQ(data.meta.at("model"), repo::to_json(m.config()));
  auto back = repo::model_from_checkpoint(data);
  auto a = m.parameters(), b = back.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i]->name, b[i]->name);
    EXPECT_EQ(a[i]->value, b[i]->value) << a[i]->name;
  }
  const std::vector<std::int32_t> toks = {3, 4, 5, 6, 10, 11, 1};
  EXPECT_EQ(m.forward(toks).logits, back.forward(toks).logits);
}

TEST_F(CheckpointFile, ExtraTensorsSurvive) {
  auto m = repo::Model<float>::build(config(), 6);
  auto data = to_checkpoint(m);
  data.tensors["adam.m.embed"] = repo::Tensor<float>(repo::Shape{2, 3}, 0.5f);
  write_checkpoint(path("x.bin"), data);
  auto back = repo::read_checkpoint(path("x.bin"));
  EXPECT_EQ(back.tensors.at("adam.m.embed"), data.tensors.at("adam.m.embed"));
  EXPECT_NO_THROW(repo::model_from_checkpoint(back));
}

TEST_F(CheckpointFile, MissingFile) {
  EXPECT_THROW(repo::read_checkpoint(path("absent.bin")), CheckpointError);
}

TEST_F(CheckpointFile, BadMagic) {
  put(path("bad.bin"), {'N', 'O', 'T', 'A', 'C', 'K', 'P', 'T', 1, 0, 0, 0});
  try {
    repo::read_checkpoint(path("bad.bin"));
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
  }
}

TEST_F(CheckpointFile, EveryTruncationIsRejected) {
  auto m = repo::Model<float>::build(config(), 7);
  write_checkpoint(path("full.bin"), to_checkpoint(m));
  const auto full = bytes(path("full.bin"));
  // Cutting anywhere must raise, never crash or return a partial model.
  for (std::size_t cut = 0; cut < full.size(); cut += 97) {
    put(path("cut.bin"), std::vector<char>(full.begin(), full.begin() + cut));
    EXPECT_THROW(repo::read_checkpoint(path("cut.bin")), CheckpointError) << "cut " << cut;
  }
  auto extra = full;
  extra.push_back(0);
  put(path("extra.bin"), extra);
  EXPECT_THROW(repo::read_checkpoint(path("extra.bin")), CheckpointError);
}

TEST_F(CheckpointFile, WrongVersion) {
  auto m = repo::Model<float>::build(config(), 8);
  write_checkpoint(path("v.bin"), to_checkpoint(m));
  auto b = bytes(path("v.bin"));
  b[8] = 99;
  put(path("v.bin"), b);
  EXPECT_THROW(repo::read_checkpoint(path("v.bin")), CheckpointError);
}

TEST_F(CheckpointFile, ShapeMismatchNamesParameter) {
  auto m = repo::Model<float>::build(config(), 9);
  auto data = to_checkpoint(m);
  data.tensors.at("embed") = repo::Tensor<float>(repo::Shape{3, 3});
  try {
    repo::model_from_checkpoint(data);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("embed"), std::string::npos) << e.what();
  }
  data = to_checkpoint(m);
  data.tensors.erase("embed");
  EXPECT_THROW(repo::model_from_checkpoint(data), CheckpointError);
}

TEST_F(CheckpointFile, UnwritablePath) {
  auto m = repo::Model<float>::build(config(), 10);
  EXPECT_THROW(write_checkpoint(path("no/such/dir/m.bin"), to_checkpoint(m)),
               CheckpointError);
}

#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "indiclm/common/error.hpp"
#include "indiclm/common/rng.hpp"
#include "indiclm/lm/checkpoint.hpp"
#include "indiclm/lm/inference.hpp"

using namespace indiclm;
using namespace indiclm::lm;

namespace {

ModelConfig small_config(bool tied = true) {
  ModelConfig c;
  c.vocab_size = 23;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 4;
  c.context_len = 24;
  c.tied_head = tied;
  c.seed = 5;
  return c;
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "indiclm_ckpt_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  for (bool tied : {true, false}) {
    const auto p = init_model(small_config(tied), 0.3f);
    const auto path = temp_path(tied ? "tied.plmf" : "untied.plmf");
    save_model(path, p);
    const auto q = load_model(path);
    EXPECT_EQ(q.config, p.config);
    ASSERT_EQ(q.tensors.size(), p.tensors.size());
    for (std::size_t i = 0; i < p.tensors.size(); ++i) {
      EXPECT_EQ(q.tensors[i].name, p.tensors[i].name);
      EXPECT_EQ(q.tensors[i].shape, p.tensors[i].shape);
      EXPECT_EQ(0, std::memcmp(q.tensors[i].ptr(), p.tensors[i].ptr(), p.tensors[i].data.size() * sizeof(float)));
    }
  }
}

TEST(Checkpoint, FileStartsWithMagicAndVersion) {
  const auto bytes = encode_checkpoint(to_checkpoint(init_model(small_config())));
  ASSERT_GE(bytes.size(), 8u);
  EXPECT_EQ(bytes.substr(0, 4), "PLMF");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), kCheckpointVersionF32);
}

TEST(Checkpoint, EveryTruncationIsRejected) {
  const auto bytes = encode_checkpoint(to_checkpoint(init_model(small_config())));
  for (std::size_t cut = 0; cut < bytes.size(); cut += 97)
    EXPECT_THROW(decode_checkpoint(std::string_view(bytes).substr(0, cut)), FormatError) << cut;
  EXPECT_THROW(decode_checkpoint(bytes + "x"), FormatError);
}

TEST(Checkpoint, TruncatedFileLeavesNoState) {
  const auto path = temp_path("trunc.plmf");
  save_model(path, init_model(small_config()));
  std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
  EXPECT_THROW(load_model(path), FormatError);
}

TEST(Checkpoint, BadMagicAndVersion) {
  auto bytes = encode_checkpoint(to_checkpoint(init_model(small_config())));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  bad = bytes;
  bad[4] = 9;
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
}

TEST(Checkpoint, ShapeMismatchNamesTensor) {
  auto file = to_checkpoint(init_model(small_config()));
  for (auto& t : file.tensors)
    if (t.name == "layers.1.w1") {
      t.dims[0] -= 1;
      t.f32.resize(t.numel());
    }
  try {
    parameters_from_checkpoint(file);
    FAIL() << "expected an error";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("layers.1.w1"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, MissingTensorNamed) {
  auto file = to_checkpoint(init_model(small_config()));
  std::erase_if(file.tensors, [](const TensorRecord& t) { return t.name == "final_norm"; });
  try {
    parameters_from_checkpoint(file);
    FAIL() << "expected an error";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("final_norm"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, MixedPrecisionRecordsRoundTrip) {
  CheckpointFile f;
  f.meta["x"] = 1;
  TensorRecord a{"a", {2, 3}, Precision::i8, {}, {1, -2, 3, -127, 127, 0}, {0.5f, 0.25f}};
  TensorRecord b{"b", {3}, Precision::f32, {1.5f, -2.0f, 0.0f}, {}, {}};
  f.tensors = {a, b};
  const auto bytes = encode_checkpoint(f);
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), kCheckpointVersionMixed);
  const auto g = decode_checkpoint(bytes);
  ASSERT_EQ(g.tensors.size(), 2u);
  EXPECT_EQ(g.tensors[0].i8, a.i8);
  EXPECT_EQ(g.tensors[0].scales, a.scales);
  EXPECT_EQ(g.tensors[1].f32, b.f32);
  EXPECT_EQ(g.meta["x"], 1);
}

TEST(Inference, SessionMatchesFullForward) {
  for (bool tied : {true, false}) {
    const auto cfg = small_config(tied);
    auto p = init_model(cfg, 0.3f);
    Rng rng(11);
    std::vector<TokenId> ids(cfg.context_len);
    for (auto& x : ids) x = static_cast<TokenId>(rng.uniform_index(cfg.vocab_size));
    const auto full = forward(p, ids);
    Fp32Predictor model(p);
    const auto inc = incremental_logits(model, ids);
    ASSERT_EQ(inc.size(), full.logits.size());
    for (std::size_t i = 0; i < inc.size(); ++i)
      EXPECT_NEAR(inc[i], full.logits[i], 1e-5 * (1 + std::abs(full.logits[i]))) << i;
  }
}

TEST(Inference, SessionStopsAtContext) {
  const auto cfg = small_config();
  Fp32Predictor model(init_model(cfg));
  auto s = model.start();
  for (std::size_t i = 0; i < cfg.context_len; ++i) s->step(1);
  EXPECT_EQ(s->position(), cfg.context_len);
  EXPECT_THROW(s->step(1), std::length_error);
  EXPECT_THROW(model.start()->step(static_cast<TokenId>(cfg.vocab_size)), std::invalid_argument);
}

TEST(Inference, SessionsAreIndependent) {
  Fp32Predictor model(init_model(small_config(), 0.3f));
  auto a = model.start();
  auto b = model.start();
  a->step(3);
  a->step(4);
  a->step(5);
  const auto sa = a->step(5);
  const std::vector<float> la(sa.begin(), sa.end());
  b->step(3);
  b->step(4);
  const auto lb = b->step(5);
  // a has seen one more token, so its logits must differ from b's.
  EXPECT_NE(la, std::vector<float>(lb.begin(), lb.end()));
  auto c = model.start();
  c->step(3);
  c->step(4);
  c->step(5);
  const auto lc = c->step(5);
  EXPECT_EQ(la, std::vector<float>(lc.begin(), lc.end()));
}

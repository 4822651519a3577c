#include <filesystem>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "indiclm/serve/quantize.hpp"
#include "indiclm/serve/server.hpp"

using namespace indiclm;
using namespace indiclm::serve;
using nlohmann::json;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "indiclm_server_test" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

ModelRegistry toy_registry() {
  tokenizer::TrainOptions o;
  o.vocab_size = 260;
  auto tok = std::make_shared<const tokenizer::TokenizerModel>(tokenizer::train_bpe({"abc"}, o));
  lm::ModelConfig c;
  c.vocab_size = 260;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.context_len = 48;
  c.seed = 3;
  const auto p = lm::init_model(c, 1.0f);
  ModelRegistry reg;
  reg["toy"] = {std::make_shared<lm::Fp32Predictor>(p), tok, "hi"};
  reg["toy-int8"] = {std::make_shared<QuantizedPredictor>(quantize_int8(p)), tok, "hi"};
  return reg;
}

class ServerFixture : public ::testing::Test {
 protected:
  void start(std::optional<std::string> token = std::nullopt) {
    ServerOptions o;
    o.reference_dir = std::filesystem::path(INDICLM_DATA_DIR) / "reference";
    o.scores_path = fresh_dir(::testing::UnitTest::GetInstance()->current_test_info()->name()) / "scores.jsonl";
    o.api_token = std::move(token);
    server_ = std::make_unique<Server>(toy_registry(), o);
    port_ = server_->bind("127.0.0.1", 0);
    thread_ = std::thread([this] { server_->run(); });
    server_->wait_until_ready();
  }
  void TearDown() override {
    if (server_) server_->stop();
    if (thread_.joinable()) thread_.join();
  }
  httplib::Client client() const { return httplib::Client("127.0.0.1", port_); }
  httplib::Result post(const std::string& path, const json& body) const {
    return client().Post(path, body.dump(), "application/json");
  }

  std::unique_ptr<Server> server_;
  std::thread thread_;
  int port_ = 0;
};

json without_timing(json body) {
  for (auto& s : body["samples"]) s.erase("seconds");
  return body;
}

json valid_score() {
  return {{"prompt_id", "p1"},  {"model_id", "toy"}, {"sample_index", 0}, {"evaluator_id", "e1"},
          {"grammar", 5},       {"coherence", 5},    {"creativity", 4},   {"factuality", 3.5}};
}

}  // namespace

TEST_F(ServerFixture, ListsModels) {
  start();
  const auto res = client().Get("/v1/models");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  const auto j = json::parse(res->body);
  ASSERT_EQ(j["models"].size(), 2u);
  EXPECT_EQ(j["models"][0]["id"], "toy");
  EXPECT_EQ(j["models"][0]["precision"], "fp32");
  EXPECT_EQ(j["models"][1]["precision"], "int8");
  EXPECT_EQ(j["models"][0]["config"]["context_len"], 48);
}

TEST_F(ServerFixture, GenerateDefaults) {
  start();
  const auto res = post("/v1/generate", {{"model", "toy"}, {"prompt", "ab"}});
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200) << res->body;
  const auto j = json::parse(res->body);
  ASSERT_EQ(j["samples"].size(), 3u);
  EXPECT_EQ(j["sampler"]["temperature"], 1.0);
  EXPECT_EQ(j["sampler"]["top_p"], 0.9);
  EXPECT_TRUE(j["sampler"]["top_k"].is_null());
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(j["samples"][i]["index"], i);
    EXPECT_EQ(j["samples"][i]["tokens"], j["samples"][i]["token_ids"].size());
    EXPECT_TRUE(j["samples"][i]["seconds"].is_number());
  }
}

TEST_F(ServerFixture, SeededRepeatIsIdentical) {
  start();
  const json req = {{"model", "toy-int8"}, {"prompt", "abc"}, {"seed", 99}, {"max_new_tokens", 12}};
  const auto a = post("/v1/generate", req), b = post("/v1/generate", req);
  ASSERT_TRUE(a && b);
  EXPECT_EQ(without_timing(json::parse(a->body)).dump(), without_timing(json::parse(b->body)).dump());
}

TEST_F(ServerFixture, GenerateFieldDiagnostics) {
  start();
  const auto res = post("/v1/generate", {{"model", "toy"},
                                         {"prompt", "a"},
                                         {"temperature", -1},
                                         {"top_p", 1.5},
                                         {"n", 0},
                                         {"top_k", 0},
                                         {"colour", "red"}});
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  const auto j = json::parse(res->body);
  EXPECT_EQ(j["error"]["code"], "invalid_request");
  std::set<std::string> fields;
  for (const auto& f : j["error"]["fields"]) fields.insert(f["field"].get<std::string>());
  EXPECT_EQ(fields, (std::set<std::string>{"temperature", "top_p", "n", "top_k", "colour"}));

  const auto long_prompt = post("/v1/generate", {{"model", "toy"}, {"prompt", std::string(60, 'a')}});
  EXPECT_EQ(long_prompt->status, 400);
  const auto bad_json = client().Post("/v1/generate", "{not json", "application/json");
  EXPECT_EQ(bad_json->status, 400);
  EXPECT_EQ(json::parse(bad_json->body)["error"]["code"], "invalid_json");
}

TEST_F(ServerFixture, UnknownModelAndRoute) {
  start();
  const auto res = post("/v1/generate", {{"model", "nope"}, {"prompt", "a"}});
  EXPECT_EQ(res->status, 404);
  EXPECT_EQ(json::parse(res->body)["error"]["code"], "model_not_found");
  const auto missing = client().Get("/v1/nothing");
  EXPECT_EQ(missing->status, 404);
  EXPECT_EQ(json::parse(missing->body)["error"]["code"], "not_found");
}

TEST_F(ServerFixture, ScoresValidateStoreAndAggregate) {
  start();
  auto bad = valid_score();
  bad["grammar"] = 6;
  const auto r1 = post("/v1/scores", bad);
  EXPECT_EQ(r1->status, 400);
  const auto e = json::parse(r1->body)["error"];
  EXPECT_EQ(e["code"], "invalid_score");
  EXPECT_EQ(e["fields"][0]["field"], "grammar");

  EXPECT_EQ(client().Get("/v1/scores/aggregate")->status, 200);
  for (int i = 0; i < 3; ++i) {
    auto s = valid_score();
    s["sample_index"] = i;
    const auto r = post("/v1/scores", s);
    EXPECT_EQ(r->status, 201) << r->body;
  }
  const auto agg = json::parse(client().Get("/v1/scores/aggregate")->body);
  ASSERT_EQ(agg["rows"].size(), 1u);
  EXPECT_DOUBLE_EQ(agg["rows"][0]["grammar"].get<double>(), 5.0);
  EXPECT_DOUBLE_EQ(agg["rows"][0]["factuality"].get<double>(), 3.5);
  const auto csv = client().Get("/v1/scores/export");
  EXPECT_EQ(csv->body, "model,grammar,coherence,creativity,factuality\ntoy,5.00000,5.00000,4.00000,3.50000\n");

  auto partial = valid_score();
  partial["prompt_id"] = "p2";
  post("/v1/scores", partial);
  const auto gap = client().Get("/v1/scores/aggregate");
  EXPECT_EQ(gap->status, 409);
  EXPECT_NE(gap->body.find("prompt p2 evaluator e1: missing samples 1,2"), std::string::npos) << gap->body;
  EXPECT_EQ(client().Get("/v1/scores/aggregate?n=0")->status, 400);
}

TEST_F(ServerFixture, ReferenceTablesVerbatim) {
  start();
  const auto t2 = json::parse(client().Get("/v1/reference/table2")->body);
  bool found = false;
  for (const auto& r : t2["rows"])
    if (r["model"].get<std::string>().ends_with("-Sanskrit 139.33M")) {
      EXPECT_EQ(r["perplexity"], "1.74891");
      found = true;
    }
  EXPECT_TRUE(found);
  const auto t11 = json::parse(client().Get("/v1/reference/11")->body);
  EXPECT_EQ(t11["id"], "table11");
  EXPECT_EQ(client().Get("/v1/reference/table99")->status, 404);
  EXPECT_GE(json::parse(client().Get("/v1/reference")->body)["tables"].size(), 3u);
}

TEST_F(ServerFixture, BearerTokenRequired) {
  start("s3cret");
  EXPECT_EQ(client().Get("/v1/models")->status, 401);
  auto c = client();
  c.set_bearer_token_auth("s3cret");
  EXPECT_EQ(c.Get("/v1/models")->status, 200);
}

TEST_F(ServerFixture, ConcurrentGenerateKeepsPerRequestSeeds) {
  start();
  const json a = {{"model", "toy"}, {"prompt", "ab"}, {"seed", 1}, {"max_new_tokens", 30}};
  const json b = {{"model", "toy"}, {"prompt", "ab"}, {"seed", 2}, {"max_new_tokens", 30}};
  const auto want_a = without_timing(json::parse(post("/v1/generate", a)->body));
  const auto want_b = without_timing(json::parse(post("/v1/generate", b)->body));
  ASSERT_NE(want_a["samples"], want_b["samples"]);
  for (int round = 0; round < 5; ++round) {
    json got_a, got_b;
    std::thread ta([&] { got_a = without_timing(json::parse(post("/v1/generate", a)->body)); });
    std::thread tb([&] { got_b = without_timing(json::parse(post("/v1/generate", b)->body)); });
    ta.join();
    tb.join();
    EXPECT_EQ(got_a, want_a);
    EXPECT_EQ(got_b, want_b);
  }
}

#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "indiclm/lm/inference.hpp"
#include "indiclm/tokenizer/tokenizer.hpp"

namespace indiclm::serve {

struct ModelEntry {
  std::shared_ptr<const lm::TokenPredictor> model;
  std::shared_ptr<const tokenizer::TokenizerModel> tokenizer;
  std::string language;
};

using ModelRegistry = std::map<std::string, ModelEntry>;

// Scans dir for <id>.plmf checkpoints, each with a <id>.tok tokenizer next to
// it; a <id>.json sidecar may give {"language": ...}. Throws
// std::runtime_error when nothing loads.
ModelRegistry load_registry(const std::filesystem::path& dir);

struct ServerOptions {
  std::filesystem::path reference_dir;
  std::filesystem::path scores_path;
  std::optional<std::filesystem::path> ui_dir;
  // When set, every /v1 request needs "Authorization: Bearer <token>".
  std::optional<std::string> api_token;
  std::size_t max_new_tokens_limit = 1024;
  std::size_t max_samples = 16;
};

// The /v1 JSON API. Errors are {"error": {"code", "message", "fields"?}}.
class Server {
 public:
  Server(ModelRegistry registry, ServerOptions options);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Returns the bound port (useful with port 0); throws on failure.
  int bind(const std::string& host, int port);
  // Serves until stop(); call after bind.
  void run();
  void stop();
  void wait_until_ready() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace indiclm::serve

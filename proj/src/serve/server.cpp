#include "indiclm/serve/server.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include <fmt/format.h>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "indiclm/decode/decode.hpp"
#include "indiclm/evalkit/evalkit.hpp"
#include "indiclm/serve/quantize.hpp"

namespace indiclm::serve {
namespace {

using nlohmann::json;

struct FieldError {
  std::string field;
  std::string message;
};

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json; charset=utf-8");
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message,
                const std::vector<FieldError>& fields = {}) {
  json err = {{"code", code}, {"message", message}};
  if (!fields.empty()) {
    err["fields"] = json::array();
    for (const auto& f : fields) err["fields"].push_back({{"field", f.field}, {"message", f.message}});
  }
  send_json(res, status, {{"error", err}});
}

std::optional<json> parse_body(const httplib::Request& req, httplib::Response& res) {
  try {
    auto j = json::parse(req.body);
    if (!j.is_object()) {
      send_error(res, 400, "invalid_json", "request body must be a JSON object");
      return std::nullopt;
    }
    return j;
  } catch (const json::exception& e) {
    send_error(res, 400, "invalid_json", e.what());
    return std::nullopt;
  }
}

std::size_t query_n(const httplib::Request& req) {
  if (!req.has_param("n")) return 3;
  const auto v = req.get_param_value("n");
  std::size_t n = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), n);
  if (ec != std::errc() || p != v.data() + v.size() || n == 0) throw std::invalid_argument("n must be a positive integer");
  return n;
}

const std::vector<std::string> kGenerateFields{"model", "prompt", "temperature", "top_k",
                                               "top_p", "max_new_tokens", "n", "seed"};

}  // namespace

ModelRegistry load_registry(const std::filesystem::path& dir) {
  ModelRegistry reg;
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("models directory not found: " + dir.string());
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const auto& path = entry.path();
    if (path.extension() != ".plmf") continue;
    auto tok_path = path;
    tok_path.replace_extension(".tok");
    if (!std::filesystem::exists(tok_path)) throw std::runtime_error("no tokenizer for " + path.string());
    ModelEntry m;
    m.model = load_predictor(path);
    m.tokenizer = std::make_shared<const tokenizer::TokenizerModel>(tokenizer::TokenizerModel::load(tok_path));
    auto meta_path = path;
    meta_path.replace_extension(".json");
    if (std::filesystem::exists(meta_path)) {
      std::ifstream in(meta_path);
      m.language = json::parse(in).value("language", "");
    }
    reg.emplace(path.stem().string(), std::move(m));
  }
  if (reg.empty()) throw std::runtime_error("no models found in " + dir.string());
  return reg;
}

struct Server::Impl {
  ModelRegistry registry;
  ServerOptions options;
  evalkit::ScoreStore store;
  std::vector<evalkit::ReferenceTable> reference;
  httplib::Server http;

  Impl(ModelRegistry r, ServerOptions o)
      : registry(std::move(r)), options(std::move(o)), store(options.scores_path),
        reference(evalkit::load_reference_tables(options.reference_dir)) {
    if (registry.empty()) throw std::invalid_argument("at least one model is required");
    routes();
  }

  void routes() {
    http.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
      if (!options.api_token || req.path.rfind("/v1/", 0) != 0) return httplib::Server::HandlerResponse::Unhandled;
      if (req.get_header_value("Authorization") == "Bearer " + *options.api_token)
        return httplib::Server::HandlerResponse::Unhandled;
      send_error(res, 401, "unauthorized", "missing or wrong bearer token");
      return httplib::Server::HandlerResponse::Handled;
    });
    http.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string what = "unknown error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        what = e.what();
      } catch (...) {
      }
      send_error(res, 500, "internal_error", what);
    });
    http.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
      if (!res.body.empty()) return;
      if (res.status == 404) send_error(res, 404, "not_found", "no route for " + req.path);
      else send_error(res, res.status, "http_error", httplib::status_message(res.status));
    });
    http.Get("/v1/models", [this](const httplib::Request&, httplib::Response& res) { models(res); });
    http.Post("/v1/generate", [this](const httplib::Request& req, httplib::Response& res) { generate(req, res); });
    http.Post("/v1/scores", [this](const httplib::Request& req, httplib::Response& res) { post_score(req, res); });
    http.Get("/v1/scores", [this](const httplib::Request&, httplib::Response& res) {
      json out = json::array();
      for (const auto& s : store.latest()) out.push_back(s.to_json());
      send_json(res, 200, {{"scores", out}});
    });
    http.Get("/v1/scores/aggregate", [this](const httplib::Request& req, httplib::Response& res) { aggregate(req, res, false); });
    http.Get("/v1/scores/export", [this](const httplib::Request& req, httplib::Response& res) { aggregate(req, res, true); });
    http.Get("/v1/reference", [this](const httplib::Request&, httplib::Response& res) {
      json out = json::array();
      for (const auto& t : reference) out.push_back({{"id", t.id}, {"table_number", t.table_number}, {"title", t.title}});
      send_json(res, 200, {{"tables", out}});
    });
    http.Get(R"(/v1/reference/([A-Za-z0-9_]+))", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string key = req.matches[1];
      for (const auto& t : reference)
        if (t.id == key || std::to_string(t.table_number) == key) return send_json(res, 200, t.to_json());
      send_error(res, 404, "table_not_found", fmt::format("no reference table '{}'", key));
    });
    if (options.ui_dir && !http.set_mount_point("/", options.ui_dir->string()))
      throw std::runtime_error("UI directory not found: " + options.ui_dir->string());
  }

  void models(httplib::Response& res) {
    json out = json::array();
    for (const auto& [id, m] : registry) {
      const auto& c = m.model->config();
      out.push_back({{"id", id},
                     {"precision", m.model->precision()},
                     {"language", m.language},
                     {"parameters", lm::count_params(c)},
                     {"config",
                      {{"vocab_size", c.vocab_size},
                       {"d_model", c.d_model},
                       {"n_layers", c.n_layers},
                       {"n_heads", c.n_heads},
                       {"context_len", c.context_len}}}});
    }
    send_json(res, 200, {{"models", out}});
  }

  void generate(const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req, res);
    if (!body) return;
    std::vector<FieldError> errors;
    for (const auto& [key, value] : body->items())
      if (std::find(kGenerateFields.begin(), kGenerateFields.end(), key) == kGenerateFields.end())
        errors.push_back({key, "unknown field"});
    if (!body->contains("model") || !(*body)["model"].is_string())
      errors.push_back({"model", "required string"});
    if (!body->contains("prompt") || !(*body)["prompt"].is_string())
      errors.push_back({"prompt", "required string"});
    const bool missing = std::any_of(errors.begin(), errors.end(),
                                     [](const FieldError& e) { return e.field == "model" || e.field == "prompt"; });
    if (missing) return send_error(res, 400, "invalid_request", "invalid generate request", errors);

    const auto model_id = (*body)["model"].get<std::string>();
    const auto it = registry.find(model_id);
    if (it == registry.end()) return send_error(res, 404, "model_not_found", fmt::format("unknown model '{}'", model_id));
    const auto& entry = it->second;
    const auto vocab = entry.model->config().vocab_size;

    decode::SamplerConfig cfg;
    auto number = [&](const char* key, auto check, const char* rule) -> std::optional<double> {
      if (!body->contains(key)) return std::nullopt;
      const auto& v = (*body)[key];
      if (!v.is_number() || !std::isfinite(v.get<double>()) || !check(v.get<double>())) {
        errors.push_back({key, rule});
        return std::nullopt;
      }
      return v.get<double>();
    };
    auto integer = [&](const char* key, std::int64_t lo, std::int64_t hi) -> std::optional<std::int64_t> {
      if (!body->contains(key)) return std::nullopt;
      const auto& v = (*body)[key];
      if (!v.is_number_integer() || v.get<std::int64_t>() < lo || v.get<std::int64_t>() > hi) {
        errors.push_back({key, fmt::format("must be an integer in [{}, {}]", lo, hi)});
        return std::nullopt;
      }
      return v.get<std::int64_t>();
    };
    if (auto t = number("temperature", [](double x) { return x >= 0; }, "must be a number >= 0")) cfg.temperature = *t;
    if (body->contains("top_k") && !(*body)["top_k"].is_null()) {
      if (auto k = integer("top_k", 1, static_cast<std::int64_t>(vocab))) cfg.top_k = static_cast<std::size_t>(*k);
    }
    if (body->contains("top_p") && (*body)["top_p"].is_null()) {
      cfg.top_p.reset();
    } else if (auto p = number("top_p", [](double x) { return x > 0 && x <= 1; }, "must be a number in (0, 1]")) {
      cfg.top_p = *p;
    }
    if (auto m = integer("max_new_tokens", 1, static_cast<std::int64_t>(options.max_new_tokens_limit)))
      cfg.max_new_tokens = static_cast<std::size_t>(*m);
    if (auto n = integer("n", 1, static_cast<std::int64_t>(options.max_samples))) cfg.n_samples = static_cast<std::size_t>(*n);
    if (body->contains("seed")) {
      const auto& s = (*body)["seed"];
      if (s.is_number_unsigned() || (s.is_number_integer() && s.get<std::int64_t>() >= 0))
        cfg.seed = s.get<std::uint64_t>();
      else
        errors.push_back({"seed", "must be a non-negative integer"});
    } else {
      cfg.seed = (static_cast<std::uint64_t>(std::random_device{}()) << 32) ^ std::random_device{}();
    }
    const auto prompt = (*body)["prompt"].get<std::string>();
    if (entry.tokenizer->encode(prompt).size() + 1 >= entry.model->config().context_len)
      errors.push_back({"prompt", fmt::format("longer than the model context of {} tokens", entry.model->config().context_len)});
    if (!errors.empty()) return send_error(res, 400, "invalid_request", "invalid generate request", errors);

    const auto samples = decode::generate(*entry.model, *entry.tokenizer, prompt, cfg);
    json out = json::array();
    for (const auto& s : samples)
      out.push_back({{"index", s.sample_index},
                     {"text", s.text},
                     {"tokens", s.token_count},
                     {"token_ids", s.tokens},
                     {"seconds", s.seconds}});
    send_json(res, 200, {{"model", model_id}, {"seed", cfg.seed}, {"sampler", cfg.to_json()}, {"samples", out}});
  }

  void post_score(const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req, res);
    if (!body) return;
    std::vector<FieldError> errors;
    for (const char* key : {"prompt_id", "model_id", "evaluator_id"})
      if (!body->contains(key) || !(*body)[key].is_string() || (*body)[key].get<std::string>().empty())
        errors.push_back({key, "required non-empty string"});
    if (!body->contains("sample_index") || !(*body)["sample_index"].is_number_integer() ||
        (*body)["sample_index"].get<std::int64_t>() < 0)
      errors.push_back({"sample_index", "required non-negative integer"});
    for (const char* m : evalkit::kMetrics) {
      if (!body->contains(m) || !(*body)[m].is_number()) {
        errors.push_back({m, "required number"});
        continue;
      }
      const double v = (*body)[m].get<double>();
      if (!(v >= evalkit::kMinScore && v <= evalkit::kMaxScore))
        errors.push_back({m, fmt::format("{} is outside [{}, {}]", v, evalkit::kMinScore, evalkit::kMaxScore)});
    }
    if (body->contains("note") && !(*body)["note"].is_string() && !(*body)["note"].is_null())
      errors.push_back({"note", "must be a string"});
    if (!errors.empty()) return send_error(res, 400, "invalid_score", "invalid score", errors);
    const auto score = evalkit::HumanScore::from_json(*body);
    store.append(score);
    send_json(res, 201, {{"id", score.id()}, {"stored", true}});
  }

  void aggregate(const httplib::Request& req, httplib::Response& res, bool csv) {
    std::size_t n = 3;
    try {
      n = query_n(req);
    } catch (const std::invalid_argument& e) {
      return send_error(res, 400, "invalid_request", e.what(), {{"n", e.what()}});
    }
    const auto scores = store.latest();
    evalkit::EvalTable table;
    try {
      table = evalkit::aggregate_scores(scores, n);
    } catch (const std::invalid_argument& e) {
      return send_error(res, 409, "incomplete_scores", e.what());
    }
    if (csv) {
      res.status = 200;
      res.set_content(evalkit::export_csv(table), "text/csv; charset=utf-8");
      return;
    }
    json rows = json::array();
    for (const auto& r : table.rows) {
      json row = {{"model", r.model}};
      for (std::size_t m = 0; m < evalkit::kMetrics.size(); ++m) row[evalkit::kMetrics[m]] = r.values[m];
      rows.push_back(row);
    }
    send_json(res, 200, {{"n", n}, {"scores", scores.size()}, {"rows", rows}, {"provenance", table.provenance}});
  }
};

Server::Server(ModelRegistry registry, ServerOptions options)
    : impl_(std::make_unique<Impl>(std::move(registry), std::move(options))) {}

Server::~Server() { stop(); }

int Server::bind(const std::string& host, int port) {
  const int bound = port == 0 ? impl_->http.bind_to_any_port(host) : (impl_->http.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw std::runtime_error(fmt::format("cannot bind {}:{}", host, port));
  return bound;
}

void Server::run() { impl_->http.listen_after_bind(); }

void Server::stop() {
  if (impl_ && impl_->http.is_running()) impl_->http.stop();
}

void Server::wait_until_ready() const { impl_->http.wait_until_ready(); }

}  // namespace indiclm::serve

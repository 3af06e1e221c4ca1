#pragma once

// Remote condition enhancer: renders a condition into a text prompt, posts it
// to a chat-completions endpoint, and parses a strict line format back:
//
//   <slot>=<value>      one line per present slot, slot is a 0-based index
//
// Blank lines are ignored. Anything else is a parse failure; no synthetic
// fallback is ever substituted.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <optional>
#include <regex>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "mvgrpo/condspace.hpp"
#include "mvgrpo/digest.hpp"
#include "mvgrpo/enhancer.hpp"
#include "mvgrpo/error.hpp"
#include "mvgrpo/mvgrpo.hpp"
#include "mvgrpo/rng.hpp"

namespace mvgrpo {

struct RemoteEnhancerConfig {
  std::string endpoint = "http://127.0.0.1:8000/v1/chat/completions";
  std::string model = "condition-enhancer";
  std::string auth_env = "MVGRPO_ENHANCER_TOKEN";
  std::string template_text;
  double timeout_seconds = 30.0;
  std::size_t max_retries = 3;
  double backoff_seconds = 0.5;  // doubled after each failed attempt
  std::size_t max_in_flight = 4;

  void validate() const {
    if (!(timeout_seconds > 0.0)) throw ValidationError("remote timeout must be positive");
    if (!(backoff_seconds >= 0.0)) throw ValidationError("remote backoff must be nonnegative");
    if (max_in_flight == 0) throw ValidationError("remote max_in_flight must be positive");
    if (template_text.empty()) throw ValidationError("remote template text is empty");
  }
};

inline std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

inline std::string serialize_condition(const Condition& c) {
  std::string out;
  for (std::size_t a = 0; a < c.size(); ++a) {
    if (!c.slots[a].present) continue;
    out += std::to_string(a) + "=" + format_value(c.slots[a].value) + "\n";
  }
  return out;
}

inline std::string serialize_features(std::span<const double> features) {
  std::string out;
  for (std::size_t a = 0; a < features.size(); ++a) out += std::to_string(a) + "=" + format_value(features[a]) + "\n";
  return out;
}

// Substitutes {{instruction}}, {{condition}}, {{observed}}, {{subject_slots}}, {{slots}}.
inline std::string render_template(std::string text, const std::string& instruction, const Condition& c,
                                   const std::string& observed) {
  auto replace_all = [&text](const std::string& key, const std::string& value) {
    for (std::size_t pos = text.find(key); pos != std::string::npos; pos = text.find(key, pos + value.size()))
      text.replace(pos, key.size(), value);
  };
  replace_all("{{instruction}}", instruction);
  replace_all("{{condition}}", serialize_condition(c));
  replace_all("{{observed}}", observed.empty() ? std::string("(none)\n") : observed);
  replace_all("{{subject_slots}}", std::to_string(c.subject_slots));
  replace_all("{{slots}}", std::to_string(c.size()));
  return text;
}

// Parses the strict "slot=value" format into a condition shaped like `shape`.
inline Condition parse_condition_response(const std::string& content, const Condition& shape) {
  static const std::regex line_re(R"(^\s*(\d+)\s*=\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*$)");
  Condition c;
  c.subject_slots = shape.subject_slots;
  c.slots.assign(shape.size(), Slot{});
  std::istringstream in(content);
  std::string line;
  std::size_t lineno = 0;
  std::size_t parsed = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::smatch m;
    if (!std::regex_match(line, m, line_re))
      throw ParseError("response line " + std::to_string(lineno) + " is not 'slot=value': " + line);
    const unsigned long slot = std::stoul(m[1].str());
    const double value = std::stod(m[2].str());
    if (slot >= c.size()) throw ParseError("response line " + std::to_string(lineno) + " names unknown slot");
    if (c.slots[slot].present) throw ParseError("response line " + std::to_string(lineno) + " repeats a slot");
    if (!std::isfinite(value) || value < -kValueLimit || value > kValueLimit)
      throw ParseError("response line " + std::to_string(lineno) + " value out of [-3, 3]");
    c.slots[slot] = {true, value};
    ++parsed;
  }
  if (parsed == 0) throw ParseError("response contains no slot lines");
  if (!is_valid(c)) throw ParseError("response drops every subject slot");
  return c;
}

struct EndpointParts {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

inline EndpointParts split_endpoint(const std::string& url) {
  static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re)) throw ValidationError("remote endpoint is not an http(s) URL: " + url);
  return {m[1].str(), m[2].matched ? m[2].str() : std::string("/")};
}

struct RemoteCallResult {
  std::string content;
  std::size_t retries = 0;
};

// Posts one chat-completions request with retries and exponential backoff.
// Timeouts, connection failures, 429 and 5xx are retried; other statuses and
// malformed bodies fail immediately.
inline RemoteCallResult post_chat_completion(const RemoteEnhancerConfig& cfg, const std::string& prompt) {
  const EndpointParts ep = split_endpoint(cfg.endpoint);
  nlohmann::json body = {
      {"model", cfg.model},
      {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
  };
  const std::string payload = body.dump();
  httplib::Headers headers;
  if (!cfg.auth_env.empty())
    if (const char* token = std::getenv(cfg.auth_env.c_str()); token && *token)
      headers.emplace("Authorization", std::string("Bearer ") + token);

  const auto secs = static_cast<time_t>(cfg.timeout_seconds);
  const auto usecs = static_cast<time_t>((cfg.timeout_seconds - static_cast<double>(secs)) * 1e6);
  double delay = cfg.backoff_seconds;
  RemoteCallResult result;
  for (std::size_t attempt = 0;; ++attempt) {
    httplib::Client client(ep.origin);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    auto res = client.Post(ep.path, headers, payload, "application/json");

    std::optional<Error> failure;
    if (!res) {
      const auto err = res.error();
      if (err == httplib::Error::Read || err == httplib::Error::ConnectionTimeout)
        failure = TimeoutError("request to " + cfg.endpoint + " timed out");
      else
        failure = IoError("request to " + cfg.endpoint + " failed: " + httplib::to_string(err));
    } else if (res->status < 200 || res->status >= 300) {
      HttpStatusError e(res->status, "endpoint returned status " + std::to_string(res->status));
      if (res->status != 429 && res->status < 500) throw e;
      failure = e;
    } else {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(res->body);
        result.content = j.at("choices").at(0).at("message").at("content").get<std::string>();
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed chat-completions body: ") + e.what());
      }
      result.retries = attempt;
      return result;
    }
    if (attempt >= cfg.max_retries) {
      if (failure->kind() == ErrorKind::Timeout) throw TimeoutError(failure->what());
      if (failure->kind() == ErrorKind::HttpStatus) throw HttpStatusError(res ? res->status : 0, failure->what());
      throw IoError(failure->what());
    }
    std::this_thread::sleep_for(std::chrono::duration<double>(delay));
    delay *= 2.0;
  }
}

// K remote queries, each with a randomly drawn perspective instruction and, when provided,
// one sample's observed attributes. Requests run concurrently up to cfg.max_in_flight.
inline AugmentedConditionSet enhance_remote(const Condition& c, std::size_t k_views, const RemoteEnhancerConfig& cfg,
                                            const PerspectiveSet& perspectives, Rng& rng,
                                            std::span<const Vec> sample_summaries = {}) {
  validate(c);
  cfg.validate();
  perspectives.validate();
  std::vector<std::string> prompts;
  for (std::size_t k = 0; k < k_views; ++k) {
    const auto& p = perspectives.items[rng.index(perspectives.items.size())];
    std::string observed;
    if (!sample_summaries.empty())
      observed = serialize_features(extract_features(sample_summaries[k % sample_summaries.size()], c.size()));
    prompts.push_back(render_template(cfg.template_text, p.instruction, c, observed));
  }

  std::vector<RemoteCallResult> responses(k_views);
  for (std::size_t start = 0; start < k_views; start += cfg.max_in_flight) {
    const std::size_t end = std::min(k_views, start + cfg.max_in_flight);
    std::vector<std::future<RemoteCallResult>> futures;
    for (std::size_t k = start; k < end; ++k)
      futures.push_back(std::async(std::launch::async, [&cfg, &prompts, k] { return post_chat_completion(cfg, prompts[k]); }));
    // Collect all before rethrowing so no request outlives this call.
    std::optional<std::exception_ptr> first_error;
    for (std::size_t k = start; k < end; ++k) {
      try {
        responses[k] = futures[k - start].get();
      } catch (...) {
        if (!first_error) first_error = std::current_exception();
      }
    }
    if (first_error) std::rethrow_exception(*first_error);
  }

  AugmentedConditionSet out;
  std::vector<AugmentedCondition> items;
  for (std::size_t k = 0; k < k_views; ++k) {
    Condition ck = parse_condition_response(responses[k].content, c);
    Provenance prov;
    prov.kind = ProvenanceKind::Remote;
    prov.response_digest = digest_hex(responses[k].content);
    prov.degenerate = ck == c;
    items.push_back({std::move(ck), prov});
    out.retries += responses[k].retries;
  }
  out.items = std::move(items);
  return out;
}

inline std::string load_template(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open prompt template " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline EnhanceFn make_remote_enhancer(RemoteEnhancerConfig cfg, PerspectiveSet perspectives) {
  cfg.validate();
  return [cfg = std::move(cfg), perspectives = std::move(perspectives)](const Condition& c, std::span<const Vec> xs,
                                                                        std::size_t k, Rng& rng) {
    return enhance_remote(c, k, cfg, perspectives, rng, xs);
  };
}

}  // namespace mvgrpo

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <openssl/evp.h>

#include "abstain/errors.hpp"
#include "abstain/parallel.hpp"
#include "abstain/trialstore.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"
// <resolv.h> defines _res as a macro, which collides with Eigen parameter names.
#undef _res

// Client for chat-completion APIs that expose token log-probabilities, with
// record/replay so collected trials are reproducible offline.
namespace abstain::llmio {

inline constexpr const char* kApiKeyEnv = "ABSTAIN_API_KEY";

// ----- prompts ---------------------------------------------------------------

enum class PromptVariant { standard, gemma };

namespace detail {

inline std::string question_block(const std::string& question, const std::array<std::string, 4>& options) {
  std::string s = question;
  for (std::size_t i = 0; i < 4; ++i) s += " " + std::to_string(i + 1) + ") " + options[i];
  return s;
}

inline std::string percent(double t) {
  std::ostringstream os;
  os << t;
  return os.str();
}

}  // namespace detail

inline void validate_threshold(double t) {
  const double k = t / 10.0;
  if (!(t >= 0 && t <= 100) || k != std::round(k))
    throw ValidationError("threshold: " + detail::percent(t) + " is not one of 0, 10, ..., 100");
}

// Task prompts for Phases 1, 2 (also used in Phase 3) and 4. Phase 4 needs a
// threshold; the gemma variant is the rephrased Phase 4 prompt.
inline std::string build_phase_prompt(Phase phase, const std::string& question, const std::array<std::string, 4>& options,
                                      std::optional<double> threshold = std::nullopt,
                                      PromptVariant variant = PromptVariant::standard) {
  const std::string q = detail::question_block(question, options);
  const std::string tail = "Remember, that your answer should be a single number, no spaces, no punctuation, no words. ";
  switch (phase) {
    case Phase::P1:
      return "You will be given a 4-way multiple choice question, with options 1-4. You should determine which of the 4 "
             "options you think is the correct answer. " +
             tail + "Question: " + q + " Answer: ";
    case Phase::P2:
    case Phase::P3:
      return "You will be given a 4-way multiple choice question. Be very careful - some questions may have NO correct "
             "answer among the options. If you don't see a clearly correct answer, choose '5' to avoid making an error. "
             "It's better to be safe than sorry. " +
             tail + "Question: " + q + " Answer: ";
    case Phase::P4: {
      if (!threshold) throw ValidationError("threshold: required for Phase 4 prompts");
      validate_threshold(*threshold);
      const std::string t = detail::percent(*threshold);
      if (variant == PromptVariant::gemma)
        return "You are given a 4-way multiple choice question, with choices numbered 1-4. Identify the choice that is "
               "correct: Begin by judging on a 0–100 scale what probability there is that your choice will be verified "
               "as correct by an oracle model having perfect information, maintaining this judgment internally. Then: "
               "should your confidence be above " +
               t + "%, state only the number of your choice. Should your confidence be below " + t +
               "%, state the number '5' which signals you wish to access an oracle LLM for help. " + tail + "Question: " + q +
               " choices 1:4. Answer:";
      return "You will be given a 4-way multiple choice question, with options 1-4. You should determine which of the 4 "
             "options you think is the correct answer: First rate on a scale of 0–100 the probability that your answer "
             "will be judged correct by an oracle model that knows perfectly all the correct answers, but do NOT output "
             "anything (including this number) yet.Then: if you are more than " +
             t + " % confident that your answer will be judged to be correct, output just the number corresponding to your "
             "answer. However, if you are less than " + t +
             " % confident that your answer will be judged to be correct, then output the number '5' which means you wish "
             "to seek the advice of an oracle LLM. " + tail + "Question: " + q + " Answer: ";
    }
  }
  throw ValidationError("phase: unknown");
}

// ----- requests --------------------------------------------------------------

struct CompletionRequest {
  std::string model_name;
  std::string prompt;
  int max_tokens = 3;
  double sampling_temperature = 0.0;
  bool want_logprobs = true;
  int top_logprobs = 20;
};

inline void validate(const CompletionRequest& r) {
  if (r.model_name.empty()) throw ValidationError("model_name: empty");
  if (r.max_tokens < 1) throw ValidationError("max_tokens: must be at least 1");
  if (!(r.sampling_temperature >= 0)) throw ValidationError("sampling_temperature: must be non-negative");
  if (r.top_logprobs < 0 || r.top_logprobs > 20) throw ValidationError("top_logprobs: must be in 0..20");
}

// Decoding defaults per model family.
inline CompletionRequest request_for(const std::string& model, std::string prompt) {
  CompletionRequest r;
  r.model_name = model;
  r.prompt = std::move(prompt);
  std::string lower = model;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower.find("deepseek") != std::string::npos) {
    r.max_tokens = 5000;
    r.sampling_temperature = 0.7;
  }
  return r;
}

// OpenAI-compatible chat-completion body.
inline json to_wire(const CompletionRequest& r) {
  json j;
  j["model"] = r.model_name;
  j["messages"] = json::array({{{"role", "user"}, {"content", r.prompt}}});
  j["max_tokens"] = r.max_tokens;
  j["temperature"] = r.sampling_temperature;
  j["logprobs"] = r.want_logprobs;
  if (r.want_logprobs) j["top_logprobs"] = r.top_logprobs;
  return j;
}

inline std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) throw Error("sha256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xF]);
  }
  return out;
}

// Hash of everything that affects the response: model, prompt and decoding
// parameters. Object keys serialize in sorted order, so the hash is stable.
inline std::string request_hash(const CompletionRequest& r) { return sha256_hex(to_wire(r).dump()); }

// ----- transports ------------------------------------------------------------

class Transport {
 public:
  virtual ~Transport() = default;
  // Sends a request body and returns the raw response body.
  virtual std::string post(const std::string& body) = 0;
};

// HTTP(S) transport with bearer authentication and exponential backoff on
// 429 and 5xx responses.
class HttpTransport : public Transport {
 public:
  HttpTransport(std::string base_url, std::string path, std::string api_key, int max_retries = 3)
      : base_url_(std::move(base_url)), path_(std::move(path)), key_(std::move(api_key)), max_retries_(max_retries) {}

  std::string post(const std::string& body) override {
    httplib::Client cli(base_url_);
    cli.set_read_timeout(120, 0);
    const httplib::Headers headers{{"Authorization", "Bearer " + key_}};
    for (int attempt = 0;; ++attempt) {
      auto res = cli.Post(path_, headers, body, "application/json");
      if (res && res->status == 200) return res->body;
      const bool retry = !res || res->status == 429 || res->status >= 500;
      if (!retry || attempt >= max_retries_) {
        if (!res) throw IoError("request to " + base_url_ + path_ + " failed: " + httplib::to_string(res.error()));
        throw IoError("request to " + base_url_ + path_ + " returned HTTP " + std::to_string(res->status) + ": " +
                      res->body.substr(0, 500));
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(500 << attempt));
    }
  }

 private:
  std::string base_url_, path_, key_;
  int max_retries_;
};

// Live transport using the key in ABSTAIN_API_KEY.
inline std::shared_ptr<Transport> live_transport(const std::string& base_url,
                                                 const std::string& path = "/v1/chat/completions") {
  const char* key = std::getenv(kApiKeyEnv);
  if (!key || !*key) throw ConfigError(std::string("live API access needs credentials in ") + kApiKeyEnv);
  return std::make_shared<HttpTransport>(base_url, path, key);
}

// ----- record / replay -------------------------------------------------------

enum class Mode { live, record, replay };

inline Mode mode_from_string(const std::string& s) {
  if (s == "live") return Mode::live;
  if (s == "record") return Mode::record;
  if (s == "replay") return Mode::replay;
  throw ConfigError("mode: expected live, record or replay, got '" + s + "'");
}

// Recordings are JSONL lines {hash, request, response}; the response is the
// raw body, so replays are byte-identical. Requests never carry credentials.
class Client {
 public:
  Client(Mode mode, std::shared_ptr<Transport> transport, std::filesystem::path recordings = {})
      : mode_(mode), transport_(std::move(transport)), path_(std::move(recordings)) {
    if (mode_ != Mode::live && path_.empty()) throw ConfigError("recordings: a file is required in record and replay modes");
    if (mode_ != Mode::replay && !transport_) throw ConfigError("transport: required in live and record modes");
    if (mode_ == Mode::replay) {
      read_jsonl(path_, [&](std::size_t line, const json& j) {
        try {
          cache_[j.at("hash").get<std::string>()] = j.at("response").get<std::string>();
        } catch (const json::exception& e) {
          throw ParseError(std::string("recording: ") + e.what(), line);
        }
      });
    } else if (mode_ == Mode::record) {
      out_.open(path_, std::ios::app | std::ios::binary);
      if (!out_) throw IoError("cannot append to " + path_.string());
    }
  }

  Mode mode() const noexcept { return mode_; }

  std::string complete_raw(const CompletionRequest& req) {
    validate(req);
    const auto hash = request_hash(req);
    if (mode_ == Mode::replay) {
      const auto it = cache_.find(hash);
      if (it == cache_.end()) throw CacheMissError(hash);
      return it->second;
    }
    auto body = transport_->post(to_wire(req).dump());
    if (mode_ == Mode::record) {
      json line{{"hash", hash}, {"request", to_wire(req)}, {"response", body}};
      std::lock_guard lock(write_mu_);
      out_ << line.dump() << '\n';
      out_.flush();
      if (!out_) throw IoError("failed appending to " + path_.string());
    }
    return body;
  }

  // Requests in order, at most max_in_flight concurrently.
  std::vector<std::string> complete_all(const std::vector<CompletionRequest>& reqs, unsigned max_in_flight = 4) {
    std::vector<std::string> out(reqs.size());
    parallel_for(reqs.size(), max_in_flight, [&](std::size_t i) { out[i] = complete_raw(reqs[i]); });
    return out;
  }

 private:
  Mode mode_;
  std::shared_ptr<Transport> transport_;
  std::filesystem::path path_;
  std::map<std::string, std::string> cache_;
  std::ofstream out_;
  std::mutex write_mu_;
};

// ----- response parsing ------------------------------------------------------

struct ParsedResponse {
  std::string text;                           // generated content
  std::map<std::string, double> first_token;  // token -> logprob at the first generated position
  bool multi_token = false;                   // content continued past the first non-blank token
};

inline ParsedResponse parse_response(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    throw ExtractionError(std::string("response is not JSON: ") + e.what());
  }
  ParsedResponse p;
  try {
    const auto& choice = j.at("choices").at(0);
    if (choice.contains("message") && choice["message"].contains("content") && choice["message"]["content"].is_string())
      p.text = choice["message"]["content"].get<std::string>();
    const auto& content = choice.at("logprobs").at("content");
    if (content.empty()) throw ExtractionError("response has no token logprobs");
    const auto& first = content.at(0);
    p.first_token[first.at("token").get<std::string>()] = first.at("logprob").get<double>();
    if (first.contains("top_logprobs"))
      for (const auto& t : first["top_logprobs"]) p.first_token[t.at("token").get<std::string>()] = t.at("logprob").get<double>();
    for (std::size_t i = 1; i < content.size(); ++i) {
      const auto tok = content[i].at("token").get<std::string>();
      if (tok.find_first_not_of(" \t\r\n") != std::string::npos) p.multi_token = true;
    }
  } catch (const json::exception& e) {
    throw ExtractionError(std::string("response lacks logprobs: ") + e.what());
  }
  return p;
}

// Probability over options 1..n_options from next-token log-probabilities.
// Tokens "k" and " k" both count toward option k; mass is summed per option
// and renormalized over the options found.
inline std::vector<double> extract_answer_distribution(const std::map<std::string, double>& logprobs, int n_options) {
  if (n_options != 4 && n_options != 5) throw ValidationError("n_options: must be 4 or 5");
  std::vector<double> p(static_cast<std::size_t>(n_options), 0.0);
  double total = 0;
  for (const auto& [tok, lp] : logprobs) {
    const auto start = tok.find_first_not_of(' ');
    if (start == std::string::npos || tok.size() - start != 1) continue;
    const int k = tok[start] - '0';
    if (k < 1 || k > n_options) continue;
    p[static_cast<std::size_t>(k - 1)] += std::exp(lp);
    total += std::exp(lp);
  }
  if (total <= 0) {
    std::string dump;
    for (const auto& [tok, lp] : logprobs) dump += " " + json(tok).dump() + ":" + detail::percent(lp);
    throw ExtractionError("no option token among the returned logprobs; top-k was" + (dump.empty() ? std::string(" empty") : dump));
  }
  for (auto& v : p) v /= total;
  return p;
}

// One trial from a response. The chosen option is the generated answer
// when it names a valid option, else the most probable option.
inline Trial trial_from_response(const std::string& body, const std::string& item_id, Phase phase, std::int64_t seed,
                                 int correct_option, std::optional<double> threshold = std::nullopt,
                                 std::vector<std::string>* notes = nullptr) {
  const auto parsed = parse_response(body);
  const int n = phase == Phase::P1 ? 4 : 5;
  Trial t;
  t.item_id = item_id;
  t.phase = phase;
  t.seed = seed;
  t.option_probs = extract_answer_distribution(parsed.first_token, n);
  t.correct_option = correct_option;
  t.chosen = static_cast<int>(std::max_element(t.option_probs.begin(), t.option_probs.end()) - t.option_probs.begin()) + 1;
  const auto start = parsed.text.find_first_not_of(" \t\r\n");
  if (start != std::string::npos) {
    const int k = parsed.text[start] - '0';
    if (k >= 1 && k <= n) t.chosen = k;
  }
  t.abstained = t.chosen == kAbstainOption;
  t.is_correct = t.chosen == correct_option;
  if (phase == Phase::P4) t.instructed_threshold = threshold;
  if (parsed.multi_token && notes) notes->push_back(item_id + ": multi-token answer, first position used");
  validate(t);
  return t;
}

}  // namespace abstain::llmio

#pragma once

#include <chrono>
#include <string>
#include <string_view>
#include <thread>

#include <json.hpp>

#include "conceptset/error.hpp"

namespace conceptset {

// An OpenAI-compatible API root, e.g. "https://api.openai.com/v1".
struct Endpoint {
  std::string base_url;
  std::string api_key;
  std::chrono::milliseconds timeout{std::chrono::seconds(120)};
};

// Reads a credential from the environment. Throws Error(kInvalidState) when
// the variable is unset or empty.
std::string api_key_from_env(const std::string& variable);

// POSTs JSON and returns the decoded JSON reply. Failures are RemoteErrors:
// transport errors, 408, 429 and 5xx are retryable, other statuses are not.
class JsonHttpClient {
 public:
  explicit JsonHttpClient(Endpoint endpoint);

  nlohmann::json post(std::string_view path, const nlohmann::json& body) const;

  const Endpoint& endpoint() const { return endpoint_; }

 private:
  Endpoint endpoint_;
  std::string scheme_host_port_;
  std::string path_prefix_;
};

struct RetryPolicy {
  int max_attempts = 4;
  std::chrono::milliseconds base_delay{500};
  std::chrono::milliseconds max_delay{std::chrono::seconds(30)};
};

// Calls `fn` until it succeeds, a non-retryable RemoteError escapes, or the
// attempts run out. Delay doubles after each failure, capped at max_delay.
template <typename Fn>
auto with_backoff(const RetryPolicy& policy, Fn&& fn) -> decltype(fn()) {
  auto delay = policy.base_delay;
  for (int attempt = 1;; ++attempt) {
    try {
      return fn();
    } catch (const RemoteError& e) {
      if (!e.retryable() || attempt >= policy.max_attempts) throw;
    }
    std::this_thread::sleep_for(delay);
    delay = std::min(delay * 2, policy.max_delay);
  }
}

}  // namespace conceptset

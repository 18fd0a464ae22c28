#include "conceptset/http_client.hpp"

#include <cstdlib>

#include <httplib.h>

namespace conceptset {

std::string api_key_from_env(const std::string& variable) {
  const char* value = std::getenv(variable.c_str());
  if (value == nullptr || *value == '\0') {
    throw Error(ErrorCode::kInvalidState, "environment variable " + variable + " is not set");
  }
  return value;
}

JsonHttpClient::JsonHttpClient(Endpoint endpoint) : endpoint_(std::move(endpoint)) {
  const auto& url = endpoint_.base_url;
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw Error(ErrorCode::kInvalidArgument, "endpoint URL needs a scheme: " + url);
  }
  const auto path_start = url.find('/', scheme_end + 3);
  scheme_host_port_ = url.substr(0, path_start);
  path_prefix_ = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
}

nlohmann::json JsonHttpClient::post(std::string_view path, const nlohmann::json& body) const {
  httplib::Client client(scheme_host_port_);
  const auto seconds = std::chrono::duration_cast<std::chrono::seconds>(endpoint_.timeout);
  client.set_connection_timeout(seconds.count() ? seconds : std::chrono::seconds(1));
  client.set_read_timeout(seconds.count() ? seconds : std::chrono::seconds(1));
  client.set_write_timeout(seconds.count() ? seconds : std::chrono::seconds(1));
  httplib::Headers headers;
  if (!endpoint_.api_key.empty()) {
    headers.emplace("Authorization", "Bearer " + endpoint_.api_key);
  }
  const std::string target = path_prefix_ + std::string(path);
  auto result = client.Post(target, headers, body.dump(), "application/json");
  if (!result) {
    throw RemoteError("POST " + target + " failed: " + httplib::to_string(result.error()), 0,
                      true);
  }
  const int status = result->status;
  if (status < 200 || status >= 300) {
    const bool retryable = status == 408 || status == 429 || status >= 500;
    throw RemoteError("POST " + target + " returned HTTP " + std::to_string(status) + ": " +
                          result->body.substr(0, 300),
                      status, retryable);
  }
  try {
    return nlohmann::json::parse(result->body);
  } catch (const nlohmann::json::exception& e) {
    throw RemoteError("POST " + target + " returned invalid JSON: " + e.what(), status, false);
  }
}

}  // namespace conceptset

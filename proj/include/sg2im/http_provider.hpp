#pragma once

#include <chrono>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "sg2im/conditioning.hpp"

namespace sg2im {

class TransportError : public std::runtime_error {
 public:
  TransportError(const std::string& what, int attempts)
      : std::runtime_error(what + " (after " + std::to_string(attempts) + " attempts)"), attempts_(attempts) {}
  int attempts() const { return attempts_; }

 private:
  int attempts_;
};

struct HttpProviderConfig {
  std::string base_url = "http://127.0.0.1:8080";  // scheme://host:port
  std::string path = "/embed";
  std::size_t text_dim = 512;
  std::size_t image_dim = 512;
  double timeout_seconds = 10.0;
  int retries = 2;  // extra attempts after the first
};

// Remote encoder. Request body: {"kind": "text"|"image", "payload": ...} where
// an image payload is {"height", "width", "channels", "data": [floats, HWC]}.
// Response body: {"vector": [floats]}; the vector is normalized locally.
// Each call opens its own client, so concurrent use is safe.
class HttpEmbeddingProvider final : public EmbeddingProvider {
 public:
  explicit HttpEmbeddingProvider(HttpProviderConfig cfg) : cfg_(std::move(cfg)) {}

  std::size_t text_dim() const override { return cfg_.text_dim; }
  std::size_t image_dim() const override { return cfg_.image_dim; }
  std::string tag() const override { return "external-service:" + cfg_.base_url + cfg_.path; }

  std::vector<double> embed_text(const std::string& label) const override {
    if (label.empty()) throw std::invalid_argument("cannot embed an empty label");
    return request({{"kind", "text"}, {"payload", label}}, cfg_.text_dim);
  }

  std::vector<double> embed_image(const Image& image) const override {
    nlohmann::json payload{{"height", image.height}, {"width", image.width}, {"channels", image.channels},
                           {"data", image.data}};
    return request({{"kind", "image"}, {"payload", payload}}, cfg_.image_dim);
  }

 private:
  std::vector<double> request(const nlohmann::json& body, std::size_t expected_dim) const {
    const int attempts = cfg_.retries + 1;
    std::string last_error;
    for (int a = 1; a <= attempts; ++a) {
      httplib::Client cli(cfg_.base_url);
      const auto to = std::chrono::duration<double>(cfg_.timeout_seconds);
      cli.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(to));
      cli.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(to));
      auto res = cli.Post(cfg_.path, body.dump(), "application/json");
      if (!res) {
        last_error = "embedding endpoint unreachable: " + httplib::to_string(res.error());
      } else if (res->status != 200) {
        last_error = "embedding endpoint returned HTTP " + std::to_string(res->status);
      } else {
        try {
          auto v = nlohmann::json::parse(res->body).at("vector").get<std::vector<double>>();
          if (v.size() != expected_dim)
            throw std::runtime_error("embedding endpoint returned width " + std::to_string(v.size()) + ", expected " +
                                     std::to_string(expected_dim));
          return normalized(std::move(v));
        } catch (const nlohmann::json::exception& e) {
          last_error = std::string("malformed embedding response: ") + e.what();
        }
      }
      if (a < attempts) std::this_thread::sleep_for(std::chrono::milliseconds(50 * a));
    }
    throw TransportError(last_error, attempts);
  }

  HttpProviderConfig cfg_;
};

}  // namespace sg2im

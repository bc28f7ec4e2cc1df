#pragma once

#include <cstdlib>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "viser/embeddings.hpp"

namespace viser {

// Remote inference service client. POSTs the image as a binary PGM to the
// configured endpoint and expects {"embedding": [...]} back. Bearer token is
// read from the configured environment variable when present.
class RemoteExtractorClient : public EmbeddingExtractor {
public:
    RemoteExtractorClient(std::string id, RemoteExtractorConfig config)
        : id_(std::move(id)), config_(std::move(config)) {
        const auto slash = config_.endpoint_url.find('/', config_.endpoint_url.find("//") + 2);
        host_ = slash == std::string::npos ? config_.endpoint_url
                                           : config_.endpoint_url.substr(0, slash);
        path_ = slash == std::string::npos ? "/" : config_.endpoint_url.substr(slash);
    }

    const std::string& id() const override { return id_; }

    std::vector<double> extract(const Grid& image) override {
        count_invocation();
        std::ostringstream body;
        body << "P5\n" << image.cols() << " " << image.rows() << "\n255\n";
        for (double v : image.data())
            body.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));

        int backoff = config_.backoff_ms;
        std::string last_error = "no attempts made";
        for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
            if (attempt > 0) {
                std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
                backoff *= 2;
            }
            httplib::Client client(host_);
            client.set_connection_timeout(config_.timeout_seconds);
            client.set_read_timeout(config_.timeout_seconds);
            httplib::Headers headers;
            if (const char* token = std::getenv(config_.auth_token_env.c_str()))
                headers.emplace("Authorization", std::string("Bearer ") + token);
            auto res = client.Post(path_, headers, body.str(), "image/x-portable-graymap");
            if (!res) {
                last_error = "transport error " + httplib::to_string(res.error());
                continue;
            }
            if (res->status != 200) {
                last_error = "http status " + std::to_string(res->status);
                continue;
            }
            try {
                const auto parsed = nlohmann::json::parse(res->body);
                return parsed.at("embedding").get<std::vector<double>>();
            } catch (const std::exception& e) {
                last_error = std::string("bad response: ") + e.what();
            }
        }
        throw std::runtime_error("remote extractor failed after " +
                                 std::to_string(config_.max_retries + 1) + " attempts: " +
                                 last_error);
    }

private:
    std::string id_;
    RemoteExtractorConfig config_;
    std::string host_;
    std::string path_;
};

}  // namespace viser

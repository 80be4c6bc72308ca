#pragma once

// HTTP/JSON service for the replay explorer. Request handling is independent
// of the socket layer so it can be exercised directly in tests.

#include <atomic>
#include <filesystem>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfstates/counterfactual.hpp"
#include "cfstates/dataset.hpp"

namespace cfstates::api {

template <typename Value>
class LruCache {
public:
    explicit LruCache(std::size_t capacity) : capacity_(capacity) {
        if (capacity == 0) throw Error("cache capacity must be positive");
    }

    std::optional<Value> get(const std::string& key) {
        std::lock_guard lock(mutex_);
        auto it = index_.find(key);
        if (it == index_.end()) return std::nullopt;
        order_.splice(order_.begin(), order_, it->second);
        return it->second->second;
    }

    void put(const std::string& key, Value value) {
        std::lock_guard lock(mutex_);
        if (auto it = index_.find(key); it != index_.end()) {
            it->second->second = std::move(value);
            order_.splice(order_.begin(), order_, it->second);
            return;
        }
        order_.emplace_front(key, std::move(value));
        index_[key] = order_.begin();
        if (order_.size() > capacity_) {
            index_.erase(order_.back().first);
            order_.pop_back();
        }
    }

    std::size_t size() const {
        std::lock_guard lock(mutex_);
        return order_.size();
    }

private:
    std::size_t capacity_;
    mutable std::mutex mutex_;
    std::list<std::pair<std::string, Value>> order_;
    std::unordered_map<std::string, typename std::list<std::pair<std::string, Value>>::iterator> index_;
};

struct Request {
    std::string method;
    std::string path;
    std::map<std::string, std::string> query;
    std::string body;
};

struct Response {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;

    nlohmann::json json() const { return nlohmann::json::parse(body); }
};

struct ServiceConfig {
    std::filesystem::path model_dir;  // agent.ckpt, gen.ckpt, replays/*.replay
    counterfactual::CfConfig cf;
    std::size_t cache_capacity = 256;
    int workers = 2;
    std::optional<std::filesystem::path> annotation_log;  // default: model_dir/annotations.jsonl
};

/// Reads CFSTATES_MODEL_DIR / CFSTATES_PORT with the documented defaults.
std::filesystem::path model_dir_from_env(const std::filesystem::path& fallback);
int port_from_env(int fallback = 8787);

class Service {
public:
    explicit Service(ServiceConfig cfg);

    /// Loads models and replays from the model directory. Until this
    /// completes, model-dependent endpoints answer 503.
    void load();
    void install(counterfactual::ModelSet models, std::vector<std::pair<std::string, Replay>> replays);
    bool ready() const { return ready_.load(); }

    Response handle(const Request& req);

    std::size_t cached_results() const { return cache_.size(); }

private:
    Response list_replays() const;
    Response frame(const std::string& id, const std::string& t) const;
    Response keyframes(const std::string& id, const Request& req) const;
    Response actions() const;
    Response counterfactual(const Request& req);
    Response annotate(const Request& req);

    const Replay* find_replay(const std::string& id) const;

    ServiceConfig cfg_;
    std::atomic<bool> ready_{false};
    counterfactual::ModelSet models_;
    std::map<std::string, Replay> replays_;
    LruCache<std::string> cache_;
    std::counting_semaphore<64> workers_;
    std::mutex annotation_mutex_;
};

Response error_response(int status, const std::string& code, const std::string& message);

/// Blocks serving HTTP on host:port until the process is stopped.
void serve(Service& service, const std::string& host, int port);

}  // namespace cfstates::api

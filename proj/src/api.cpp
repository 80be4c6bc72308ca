#include "cfstates/api.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <regex>
#include <thread>

#include <httplib.h>

#include "cfstates/distribution.hpp"
#include "cfstates/persistence.hpp"

namespace cfstates::api {
namespace {

std::optional<long long> parse_int(const std::string& s) {
    long long v = 0;
    const auto* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || ptr != end) return std::nullopt;
    return v;
}

Response json_response(const nlohmann::json& j, int status = 200) {
    return Response{status, "application/json", j.dump()};
}

std::string png_base64(const env::Frame& frame) {
    const auto bytes = persistence::export_png(frame);
    return httplib::detail::base64_encode(std::string(bytes.begin(), bytes.end()));
}

nlohmann::json action_json(int id) {
    return {{"id", id}, {"name", std::string(action_name(action_from_id(id)))}};
}

nlohmann::json policy_json(const PolicyVector& pi) { return std::vector<float>(pi.begin(), pi.end()); }

}  // namespace

Response error_response(int status, const std::string& code, const std::string& message) {
    return json_response({{"code", code}, {"message", message}}, status);
}

std::filesystem::path model_dir_from_env(const std::filesystem::path& fallback) {
    if (const char* v = std::getenv("CFSTATES_MODEL_DIR"); v && *v) return v;
    return fallback;
}

int port_from_env(int fallback) {
    if (const char* v = std::getenv("CFSTATES_PORT"); v && *v) {
        auto parsed = parse_int(v);
        if (!parsed || *parsed <= 0 || *parsed > 65535) throw Error(std::string("invalid CFSTATES_PORT: ") + v);
        return static_cast<int>(*parsed);
    }
    return fallback;
}

Service::Service(ServiceConfig cfg)
    : cfg_(std::move(cfg)), cache_(cfg_.cache_capacity), workers_(std::clamp(cfg_.workers, 1, 64)) {
    cfg_.cf.validate();
}

void Service::load() {
    const auto& dir = cfg_.model_dir;
    auto models = counterfactual::load_models(dir / "agent.ckpt", dir / "gen.ckpt");
    std::vector<std::pair<std::string, Replay>> replays;
    const auto replay_dir = dir / "replays";
    if (std::filesystem::is_directory(replay_dir)) {
        for (const auto& entry : std::filesystem::directory_iterator(replay_dir)) {
            if (entry.path().extension() != ".replay") continue;
            replays.emplace_back(entry.path().stem().string(), persistence::read_replay(entry.path()));
        }
    }
    install(std::move(models), std::move(replays));
}

void Service::install(counterfactual::ModelSet models, std::vector<std::pair<std::string, Replay>> replays) {
    models_ = std::move(models);
    models_.agent->eval();
    models_.gen->eval();
    replays_.clear();
    for (auto& [id, r] : replays) {
        r.validate();
        replays_.emplace(id, std::move(r));
    }
    ready_.store(true);
}

const Replay* Service::find_replay(const std::string& id) const {
    auto it = replays_.find(id);
    return it == replays_.end() ? nullptr : &it->second;
}

Response Service::handle(const Request& req) {
    static const std::regex frame_re("^/api/replays/([^/]+)/frames/([^/]+)$");
    static const std::regex key_re("^/api/replays/([^/]+)/keyframes$");
    std::smatch m;
    try {
        if (req.method == "GET" && req.path == "/api/actions") return actions();
        if (req.method == "POST" && req.path == "/api/annotations") return annotate(req);

        const bool known = req.path == "/api/replays" || req.path == "/api/counterfactual" ||
                           std::regex_match(req.path, m, frame_re) || std::regex_match(req.path, m, key_re);
        if (known && !ready()) return error_response(503, "unavailable", "models are still loading");

        if (req.method == "GET" && req.path == "/api/replays") return list_replays();
        if (req.method == "POST" && req.path == "/api/counterfactual") return counterfactual(req);
        if (req.method == "GET" && std::regex_match(req.path, m, frame_re)) return frame(m[1], m[2]);
        if (req.method == "GET" && std::regex_match(req.path, m, key_re)) return keyframes(m[1], req);
        if (known) return error_response(405, "method_not_allowed", req.method + " not supported on " + req.path);
        return error_response(404, "not_found", "no route for " + req.path);
    } catch (const std::exception& e) {
        return error_response(500, "internal", e.what());
    }
}

Response Service::list_replays() const {
    auto list = nlohmann::json::array();
    for (const auto& [id, r] : replays_) {
        list.push_back({{"id", id}, {"length", r.length()}, {"score", r.score}, {"seed", r.seed}});
    }
    return json_response(list);
}

Response Service::frame(const std::string& id, const std::string& t_text) const {
    const auto* replay = find_replay(id);
    if (!replay) return error_response(404, "not_found", "unknown replay '" + id + "'");
    auto t = parse_int(t_text);
    if (!t || *t < 0 || static_cast<std::size_t>(*t) >= replay->length()) {
        return error_response(404, "not_found", "frame " + t_text + " out of range for replay '" + id + "'");
    }
    const auto bytes = persistence::export_png(replay->frame(static_cast<std::size_t>(*t)));
    return Response{200, "image/png", std::string(bytes.begin(), bytes.end())};
}

Response Service::keyframes(const std::string& id, const Request& req) const {
    const auto* replay = find_replay(id);
    if (!replay) return error_response(404, "not_found", "unknown replay '" + id + "'");
    long long n = 10;
    if (auto it = req.query.find("n"); it != req.query.end()) {
        auto parsed = parse_int(it->second);
        if (!parsed || *parsed < 0) return error_response(400, "bad_request", "n must be a non-negative integer");
        n = *parsed;
    }
    const auto picked = counterfactual::select_key_frames(*replay, static_cast<std::size_t>(n),
                                                          cfg_.cf.low_entropy_key_frames);
    return json_response(picked);
}

Response Service::actions() const {
    auto list = nlohmann::json::array();
    for (int a = 0; a < kNumActions; ++a) list.push_back(action_json(a));
    return json_response(list);
}

Response Service::counterfactual(const Request& req) {
    nlohmann::json body;
    try {
        body = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception&) {
        return error_response(400, "bad_request", "request body is not valid JSON");
    }
    if (!body.is_object() || !body.contains("replay_id") || !body["replay_id"].is_string() || !body.contains("t") ||
        !body["t"].is_number_integer() || !body.contains("action")) {
        return error_response(400, "bad_request", "expected {replay_id: string, t: integer, action: id | \"auto\"}");
    }
    const auto id = body["replay_id"].get<std::string>();
    const auto* replay = find_replay(id);
    if (!replay) return error_response(404, "not_found", "unknown replay '" + id + "'");
    const auto t = body["t"].get<long long>();
    if (t < 0 || static_cast<std::size_t>(t) >= replay->length()) {
        return error_response(404, "not_found", "t = " + std::to_string(t) + " out of range");
    }
    const auto& action = body["action"];
    std::optional<int> target;
    if (action.is_number_integer()) {
        const auto v = action.get<long long>();
        if (v < 0 || v >= kNumActions) return error_response(400, "bad_request", "invalid action " + std::to_string(v));
        target = static_cast<int>(v);
    } else if (!(action.is_string() && action.get<std::string>() == "auto")) {
        return error_response(400, "bad_request", "action must be an action id or \"auto\"");
    }

    const auto key = id + "|" + std::to_string(t) + "|" + (target ? std::to_string(*target) : "auto");
    if (auto hit = cache_.get(key)) return Response{200, "application/json", *hit};

    workers_.acquire();
    struct Release {
        std::counting_semaphore<64>& s;
        ~Release() { s.release(); }
    } release{workers_};

    const auto obs = replay->observation(static_cast<std::size_t>(t));
    nlohmann::json out;
    if (!target) {
        try {
            auto choice = counterfactual::select_cf_action(models_, obs, cfg_.cf);
            target = choice.action;
            auto table = nlohmann::json::object();
            for (const auto& [a, run] : choice.table) {
                table[std::string(action_name(action_from_id(a)))] = {
                    {"success", run.success}, {"distance", run.distance}, {"steps", run.steps}};
            }
            out["auto_table"] = table;
        } catch (const Error& e) {
            return error_response(422, "no_counterfactual", e.what());
        }
    }
    const auto r = counterfactual::generate_counterfactual(models_, obs, *target, cfg_.cf);
    out["replay_id"] = id;
    out["t"] = t;
    out["action"] = action_json(r.action);
    out["target"] = action_json(r.target);
    out["pi_before"] = policy_json(r.pi_before);
    out["pi_after"] = policy_json(r.pi_after);
    out["steps"] = r.steps;
    out["success"] = r.success;
    out["latent_distance"] = r.latent_distance;
    out["images"] = {{"query", png_base64(r.query.current_frame())},
                     {"reconstruction", png_base64(r.reconstruction.current_frame())},
                     {"counterfactual", png_base64(r.counterfactual.current_frame())},
                     {"highlight", png_base64(r.highlight.overlay)}};
    auto text = out.dump();
    cache_.put(key, text);
    return Response{200, "application/json", std::move(text)};
}

Response Service::annotate(const Request& req) {
    nlohmann::json body;
    try {
        body = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception&) {
        return error_response(400, "bad_request", "annotation body is not valid JSON");
    }
    if (!body.is_object()) return error_response(400, "bad_request", "annotation must be a JSON object");
    const auto path = cfg_.annotation_log.value_or(cfg_.model_dir / "annotations.jsonl");
    body["received_unix_ms"] = std::chrono::duration_cast<std::chrono::milliseconds>(
                                   std::chrono::system_clock::now().time_since_epoch())
                                   .count();
    std::lock_guard lock(annotation_mutex_);
    std::ofstream log(path, std::ios::app);
    if (!log) return error_response(500, "internal", "cannot open annotation log " + path.string());
    log << body.dump() << '\n';
    return json_response({{"ok", true}});
}

void serve(Service& service, const std::string& host, int port) {
    httplib::Server server;
    auto bridge = [&service](const httplib::Request& in, httplib::Response& out) {
        Request req{in.method, in.path, {}, in.body};
        for (const auto& [k, v] : in.params) req.query.emplace(k, v);
        const auto res = service.handle(req);
        out.status = res.status;
        out.set_content(res.body, res.content_type);
    };
    server.Get(R"(/api/.*)", bridge);
    server.Post(R"(/api/.*)", bridge);
    if (!server.bind_to_port(host, port)) throw Error("cannot bind " + host + ":" + std::to_string(port));
    server.listen_after_bind();
}

}  // namespace cfstates::api

#include "cryoscan/http_api.hpp"

#include "cryoscan/errors.hpp"

#include <httplib.h>

#include <atomic>
#include <thread>

namespace cryoscan::service {

namespace {

constexpr const char* kJson = "application/json";

void reply(httplib::Response& res, int status, const Json& body) {
    res.status = status;
    res.set_content(body.dump(), kJson);
}

Json parse_body(const httplib::Request& req) {
    if (req.body.empty()) {
        return Json::object();
    }
    Json j = jsonio::parse(req.body, "request body");
    if (!j.is_object()) {
        throw ValidationError("request body must be a JSON object");
    }
    return j;
}

std::uint64_t parse_id(const std::string& text) {
    try {
        std::size_t used = 0;
        const auto id = std::stoull(text, &used);
        if (used == text.size()) return id;
    } catch (const std::exception&) {
    }
    throw NotFoundError("bad scan id '" + text + "'");
}

Json vec(const Vec2& p) { return jsonio::vec_to_json(p.x(), p.y()); }

SteerRequest read_steer(const Json& body) {
    jsonio::ObjectReader r(body, "steer");
    SteerRequest req;
    if (const Json* v = r.child("v")) {
        const auto p = jsonio::read_pair(*v, "steer.v");
        req.v = VoltageCoord(p[0], p[1]);
    }
    if (const Json* mm = r.child("mm")) {
        const auto p = jsonio::read_pair(*mm, "steer.mm");
        req.mm = Vec2(p[0], p[1]);
    }
    r.get("override_interlock", req.override_interlock);
    r.finish();
    return req;
}

ScanRequest read_scan(const Json& body) {
    jsonio::ObjectReader r(body, "scan");
    ScanRequest req;
    if (r.has("preset")) {
        req.preset = r.require<std::string>("preset");
    }
    if (const Json* plan = r.child("plan")) {
        req.plan = jsonio::plan_from_json_value(*plan, "scan.plan");
    }
    if (r.has("seed")) {
        req.seed = r.require<std::size_t>("seed");
    }
    r.get("pace_s", req.pace_s);
    r.finish();
    return req;
}

std::string sse_frame(const Event& e) {
    return "id: " + std::to_string(e.seq) + "\nevent: " + e.kind + "\ndata: " + event_to_json(e).dump() + "\n\n";
}

}  // namespace

ErrorReply error_reply(const std::exception& e) {
    ErrorReply out;
    Json body = Json::object();
    std::string kind = "runtime";
    if (dynamic_cast<const NotFoundError*>(&e)) {
        out.status = 404;
        kind = "not_found";
    } else if (auto* pe = dynamic_cast<const ParseError*>(&e)) {
        out.status = 400;
        kind = "parse";
        body["line"] = pe->line();
        body["column"] = pe->column();
    } else if (dynamic_cast<const ValidationError*>(&e)) {
        out.status = 400;
        kind = "validation";
    } else if (dynamic_cast<const BusyError*>(&e)) {
        out.status = 409;
        kind = "busy";
    } else if (dynamic_cast<const InterlockError*>(&e)) {
        out.status = 409;
        kind = "interlock";
    } else if (dynamic_cast<const StateError*>(&e)) {
        out.status = 409;
        kind = "state";
    } else if (auto* oe = dynamic_cast<const OutOfRangeError*>(&e)) {
        out.status = 422;
        kind = "out_of_range";
        body["nearest_v"] = jsonio::vec_to_json(oe->nearest_vx(), oe->nearest_vy());
    }
    body["error"] = kind;
    body["message"] = e.what();
    out.body = std::move(body);
    return out;
}

struct HttpServer::Impl {
    Session& session;
    httplib::Server server;
    std::thread thread;
    std::atomic<bool> stopping{false};

    explicit Impl(Session& s) : session(s) { routes(); }

    template <typename F>
    httplib::Server::Handler guarded(F f) {
        return [f](const httplib::Request& req, httplib::Response& res) {
            try {
                f(req, res);
            } catch (const std::exception& e) {
                const auto err = error_reply(e);
                reply(res, err.status, err.body);
            }
        };
    }

    void routes() {
        server.Get("/status", guarded([this](const httplib::Request&, httplib::Response& res) {
            reply(res, 200, status_to_json(session.status()));
        }));

        server.Post("/steer", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto ack = session.steer(read_steer(parse_body(req)));
            Json j = Json::object();
            j["commanded"] = jsonio::vec_to_json(ack.commanded.vx(), ack.commanded.vy());
            j["predicted_mm"] = ack.predicted_mm ? vec(*ack.predicted_mm) : Json(nullptr);
            j["model_mm"] = ack.model_mm ? vec(*ack.model_mm) : Json(nullptr);
            j["slew_time_s"] = ack.slew_time_s;
            j["seq"] = ack.seq;
            reply(res, 200, j);
        }));

        server.Post("/source", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const Json body = parse_body(req);
            jsonio::ObjectReader r(body, "source");
            const bool on = r.require<bool>("on");
            std::optional<scan::SourceSettings> settings;
            if (r.has("wavelength_nm") || r.has("power_w")) {
                scan::SourceSettings s = session.status().source;
                r.get("wavelength_nm", s.wavelength_nm);
                r.get("power_w", s.power_w);
                settings = s;
            }
            r.finish();
            const auto ack = session.set_source(on, settings);
            Json j = Json::object();
            j["on"] = ack.on;
            j["changed"] = ack.changed;
            j["wavelength_nm"] = ack.settings.wavelength_nm;
            j["power_w"] = ack.settings.power_w;
            j["absorbed_w"] = ack.absorbed_w;
            j["seq"] = ack.seq;
            reply(res, 200, j);
        }));

        server.Post("/scan", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto id = session.start_scan(read_scan(parse_body(req)));
            reply(res, 202, scan_status_to_json(session.scan_status(id)));
        }));

        server.Get(R"(/scan/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            reply(res, 200, scan_status_to_json(session.scan_status(parse_id(req.matches[1]))));
        }));

        server.Get(R"(/scan/([^/]+)/map)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto map = session.fetch_map(parse_id(req.matches[1]));
            res.status = 200;
            res.set_content(scan::format_map(map), "text/csv");
        }));

        server.Post(R"(/scan/([^/]+)/cancel)",
                    guarded([this](const httplib::Request& req, httplib::Response& res) {
                        const auto id = parse_id(req.matches[1]);
                        session.cancel_scan(id);
                        reply(res, 202, scan_status_to_json(session.scan_status(id)));
                    }));

        server.Get("/calibration", guarded([this](const httplib::Request&, httplib::Response& res) {
            const auto model = session.calibration();
            if (!model) {
                throw NotFoundError("no calibration loaded");
            }
            res.status = 200;
            res.set_content(calib::mapping_to_json(*model), kJson);
        }));

        server.Post("/calibration", guarded([this](const httplib::Request& req, httplib::Response& res) {
            session.load_calibration(calib::mapping_from_json(req.body, "request body"));
            reply(res, 200, status_to_json(session.status()));
        }));

        server.Post("/reset", guarded([this](const httplib::Request&, httplib::Response& res) {
            session.reset();
            reply(res, 200, status_to_json(session.status()));
        }));

        server.Get("/events", guarded([this](const httplib::Request& req, httplib::Response& res) {
            std::uint64_t since = 0;
            if (req.has_param("since")) {
                since = parse_id(req.get_param_value("since"));
            } else if (req.has_header("Last-Event-ID")) {
                since = parse_id(req.get_header_value("Last-Event-ID"));
            }
            bool follow = true;
            if (req.has_param("follow")) {
                const auto f = req.get_param_value("follow");
                if (f != "0" && f != "1") throw ValidationError("follow must be 0 or 1");
                follow = f == "1";
            }
            auto cursor = std::make_shared<std::uint64_t>(since);
            res.set_header("Cache-Control", "no-cache");
            res.set_chunked_content_provider(
                "text/event-stream", [this, cursor, follow](std::size_t, httplib::DataSink& sink) {
                    const auto batch = session.events().since(*cursor, 256);
                    if (batch.empty()) {
                        if (!follow || stopping || session.events().closed()) {
                            sink.done();
                            return true;
                        }
                        if (!session.events().wait_after(*cursor, std::chrono::milliseconds(500))) {
                            const std::string ping = ": keep-alive\n\n";
                            return sink.is_writable() && sink.write(ping.data(), ping.size());
                        }
                        return true;
                    }
                    std::string out;
                    for (const auto& e : batch) out += sse_frame(e);
                    *cursor = batch.back().seq;
                    return sink.write(out.data(), out.size());
                });
        }));

        server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
            if (res.body.empty()) {
                Json j = Json::object();
                j["error"] = res.status == 404 ? "not_found" : "http";
                j["message"] = "HTTP " + std::to_string(res.status);
                res.set_content(j.dump(), kJson);
            }
        });
    }
};

HttpServer::HttpServer(Session& session) : impl_(std::make_unique<Impl>(session)) {}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
    int bound = port;
    if (port == 0) {
        bound = impl_->server.bind_to_any_port(host);
        if (bound < 0) throw Error("cannot bind " + host);
    } else if (!impl_->server.bind_to_port(host, port)) {
        throw Error("cannot bind " + host + ":" + std::to_string(port));
    }
    impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
    return bound;
}

void HttpServer::run(const std::string& host, int port) {
    if (!impl_->server.bind_to_port(host, port)) {
        throw Error("cannot bind " + host + ":" + std::to_string(port));
    }
    impl_->server.listen_after_bind();
}

void HttpServer::stop() {
    if (!impl_) return;
    impl_->stopping = true;
    impl_->server.stop();
    if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace cryoscan::service

#pragma once

// JSON-over-HTTP front end of a Session with a server-sent event stream.
// Routes and payloads are described by api/schema.json.

#include "cryoscan/service.hpp"

#include <memory>
#include <string>

namespace cryoscan::service {

class HttpServer {
public:
    explicit HttpServer(Session& session);
    ~HttpServer();

    HttpServer(const HttpServer&) = delete;
    HttpServer& operator=(const HttpServer&) = delete;

    // Binds and serves on a background thread; port 0 picks a free port.
    // Returns the bound port.
    int start(const std::string& host, int port);
    // Blocks until stop() is called from elsewhere.
    void run(const std::string& host, int port);
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// Error body and status code for an exception escaping a handler.
struct ErrorReply {
    int status = 500;
    Json body;
};

ErrorReply error_reply(const std::exception& e);

}  // namespace cryoscan::service

#pragma once

// Control session: the single command processor in front of the simulated
// instrument. Owns the event log, scan workers and the loaded calibration.

#include "cryoscan/calib.hpp"
#include "cryoscan/config.hpp"
#include "cryoscan/json_io.hpp"
#include "cryoscan/scan.hpp"

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace cryoscan::service {

using jsonio::Json;
using optics::Vec2;
using steering::VoltageCoord;

// Unknown scan id or route.
class NotFoundError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

enum class SessionState { idle, scanning, fault };
std::string to_string(SessionState s);

struct Event {
    std::uint64_t seq = 0;
    double t = 0.0;  // seconds since the session started, non-decreasing
    std::string kind;
    Json payload;
};

Json event_to_json(const Event& e);

class EventLog {
public:
    EventLog();

    Event append(const std::string& kind, Json payload);
    std::vector<Event> since(std::uint64_t after, std::size_t limit = SIZE_MAX) const;
    std::uint64_t last_seq() const;
    // True once an event newer than `after` exists; false on timeout or close.
    bool wait_after(std::uint64_t after, std::chrono::milliseconds timeout) const;
    void close();
    bool closed() const;

private:
    mutable std::mutex m_;
    mutable std::condition_variable cv_;
    std::vector<Event> events_;
    std::chrono::steady_clock::time_point start_;
    double last_t_ = 0.0;
    bool closed_ = false;
};

struct SteerRequest {
    std::optional<VoltageCoord> v;
    std::optional<Vec2> mm;  // physical target, needs a calibration
    bool override_interlock = false;
};

struct SteerAck {
    VoltageCoord commanded;
    std::optional<Vec2> predicted_mm;  // traced by the twin
    std::optional<Vec2> model_mm;      // calibration prediction, physical steers only
    double slew_time_s = 0.0;
    std::uint64_t seq = 0;
};

struct SourceAck {
    bool on = false;
    bool changed = false;
    scan::SourceSettings settings;
    double absorbed_w = 0.0;
    std::uint64_t seq = 0;
};

struct ScanRequest {
    std::optional<std::string> preset;
    std::optional<scan::ScanPlan> plan;
    std::optional<std::uint64_t> seed;
    double pace_s = 0.0;  // wall-clock delay per point, for live viewing
};

enum class ScanState { running, complete, cancelled, failed };
std::string to_string(ScanState s);

struct ScanStatus {
    std::uint64_t id = 0;
    ScanState state = ScanState::running;
    std::size_t done = 0;
    std::size_t total = 0;
    std::optional<scan::ResponseSample> latest;
    std::optional<std::string> preset;
    std::string config_hash;
    std::uint64_t seed = 0;
    std::string error;
};

struct MirrorSnapshot {
    VoltageCoord commanded;
    steering::DriveVoltages drive;
    double clock_s = 0.0;
    double energy_j = 0.0;
};

struct StatusReport {
    std::string session_id;
    SessionState state = SessionState::idle;
    std::string config_hash;
    MirrorSnapshot mirror;
    bool source_on = false;
    scan::SourceSettings source;
    std::optional<std::uint64_t> active_scan;
    bool calibrated = false;
    std::uint64_t last_seq = 0;
    std::string fault;
};

Json status_to_json(const StatusReport& s);
Json scan_status_to_json(const ScanStatus& s);
Json sample_to_json(const scan::ResponseSample& s);

class Session {
public:
    explicit Session(config::SystemConfig cfg, std::string id = "session-1");
    ~Session();

    Session(const Session&) = delete;
    Session& operator=(const Session&) = delete;

    StatusReport status() const;
    EventLog& events() { return log_; }
    const EventLog& events() const { return log_; }

    SteerAck steer(const SteerRequest& req);
    SourceAck set_source(bool on, const std::optional<scan::SourceSettings>& settings);

    std::uint64_t start_scan(const ScanRequest& req);
    ScanStatus scan_status(std::uint64_t id) const;
    // Snapshot of completed points; complete only once the scan finished.
    scan::ResponseMap fetch_map(std::uint64_t id) const;
    void cancel_scan(std::uint64_t id);
    ScanStatus wait_scan(std::uint64_t id);

    void load_calibration(calib::MappingModel model);
    std::optional<calib::MappingModel> calibration() const;

    // Leaves the fault state; no-op when idle.
    void reset();

private:
    struct ScanRecord {
        ScanStatus status;
        scan::ResponseMap map;
        bool cancel = false;
    };

    void require_idle_locked() const;
    void run_worker(std::uint64_t id, config::SystemConfig cfg, scan::ScanPlan plan, std::uint64_t seed,
                    double pace_s);
    MirrorSnapshot snapshot_of(const steering::MirrorState& m) const;

    const std::string id_;
    EventLog log_;

    mutable std::mutex m_;
    std::condition_variable scan_cv_;
    config::SystemConfig cfg_;
    std::unique_ptr<scan::Instrument> instrument_;
    SessionState state_ = SessionState::idle;
    std::string fault_;
    MirrorSnapshot live_mirror_;
    std::optional<calib::MappingModel> calibration_;
    std::map<std::uint64_t, ScanRecord> scans_;
    std::optional<std::uint64_t> active_scan_;
    std::uint64_t next_scan_id_ = 1;
    std::thread worker_;
    bool shutting_down_ = false;
};

}  // namespace cryoscan::service

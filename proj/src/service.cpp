#include "cryoscan/service.hpp"

#include "cryoscan/errors.hpp"

#include <algorithm>

namespace cryoscan::service {

std::string to_string(SessionState s) {
    switch (s) {
        case SessionState::idle: return "idle";
        case SessionState::scanning: return "scanning";
        case SessionState::fault: return "fault";
    }
    return "fault";
}

std::string to_string(ScanState s) {
    switch (s) {
        case ScanState::running: return "running";
        case ScanState::complete: return "complete";
        case ScanState::cancelled: return "cancelled";
        case ScanState::failed: return "failed";
    }
    return "failed";
}

Json event_to_json(const Event& e) {
    Json j = Json::object();
    j["seq"] = e.seq;
    j["t"] = e.t;
    j["kind"] = e.kind;
    j["payload"] = e.payload;
    return j;
}

EventLog::EventLog() : start_(std::chrono::steady_clock::now()) {}

Event EventLog::append(const std::string& kind, Json payload) {
    Event e;
    {
        std::lock_guard lock(m_);
        const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - start_;
        last_t_ = std::max(last_t_, dt.count());
        e.seq = events_.size() + 1;
        e.t = last_t_;
        e.kind = kind;
        e.payload = std::move(payload);
        events_.push_back(e);
    }
    cv_.notify_all();
    return e;
}

std::vector<Event> EventLog::since(std::uint64_t after, std::size_t limit) const {
    std::lock_guard lock(m_);
    std::vector<Event> out;
    for (std::size_t i = static_cast<std::size_t>(std::min<std::uint64_t>(after, events_.size()));
         i < events_.size() && out.size() < limit; ++i) {
        out.push_back(events_[i]);
    }
    return out;
}

std::uint64_t EventLog::last_seq() const {
    std::lock_guard lock(m_);
    return events_.size();
}

bool EventLog::wait_after(std::uint64_t after, std::chrono::milliseconds timeout) const {
    std::unique_lock lock(m_);
    cv_.wait_for(lock, timeout, [&] { return closed_ || events_.size() > after; });
    return events_.size() > after;
}

void EventLog::close() {
    {
        std::lock_guard lock(m_);
        closed_ = true;
    }
    cv_.notify_all();
}

bool EventLog::closed() const {
    std::lock_guard lock(m_);
    return closed_;
}

namespace {

Json coord_json(const VoltageCoord& v) { return jsonio::vec_to_json(v.vx(), v.vy()); }
Json vec_json(const Vec2& p) { return jsonio::vec_to_json(p.x(), p.y()); }

Json source_json(bool on, const scan::SourceSettings& s) {
    Json j = Json::object();
    j["on"] = on;
    j["wavelength_nm"] = s.wavelength_nm;
    j["power_w"] = s.power_w;
    return j;
}

}  // namespace

Json sample_to_json(const scan::ResponseSample& s) {
    Json j = Json::object();
    j["ix"] = s.ix;
    j["iy"] = s.iy;
    j["v"] = coord_json(s.v);
    j["s21_off"] = s.s21_off;
    j["s21_on"] = s.s21_on;
    j["delta"] = s.delta;
    j["t"] = s.t;
    j["flags"] = scan::format_flags(s.flags);
    return j;
}

Json status_to_json(const StatusReport& s) {
    Json j = Json::object();
    j["session_id"] = s.session_id;
    j["state"] = to_string(s.state);
    j["config_hash"] = s.config_hash;
    Json m = Json::object();
    m["commanded"] = coord_json(s.mirror.commanded);
    m["drive_v"] = Json::array({s.mirror.drive.x_plus, s.mirror.drive.x_minus, s.mirror.drive.y_plus,
                                s.mirror.drive.y_minus});
    m["clock_s"] = s.mirror.clock_s;
    m["energy_j"] = s.mirror.energy_j;
    j["mirror"] = m;
    j["source"] = source_json(s.source_on, s.source);
    j["active_scan"] = s.active_scan ? Json(*s.active_scan) : Json(nullptr);
    j["calibrated"] = s.calibrated;
    j["last_seq"] = s.last_seq;
    j["fault"] = s.fault.empty() ? Json(nullptr) : Json(s.fault);
    return j;
}

Json scan_status_to_json(const ScanStatus& s) {
    Json j = Json::object();
    j["id"] = s.id;
    j["state"] = to_string(s.state);
    j["done"] = s.done;
    j["total"] = s.total;
    j["latest"] = s.latest ? sample_to_json(*s.latest) : Json(nullptr);
    j["preset"] = s.preset ? Json(*s.preset) : Json(nullptr);
    j["config_hash"] = s.config_hash;
    j["seed"] = s.seed;
    j["error"] = s.error.empty() ? Json(nullptr) : Json(s.error);
    return j;
}

Session::Session(config::SystemConfig cfg, std::string id) : id_(std::move(id)), cfg_(std::move(cfg)) {
    instrument_ = std::make_unique<scan::Instrument>(cfg_.instrument, cfg_.noise_seed);
    live_mirror_ = snapshot_of(instrument_->mirror());
    Json p = Json::object();
    p["session_id"] = id_;
    p["config_hash"] = cfg_.hash();
    log_.append("session", std::move(p));
}

Session::~Session() {
    {
        std::lock_guard lock(m_);
        shutting_down_ = true;
        for (auto& [id, rec] : scans_) rec.cancel = true;
    }
    scan_cv_.notify_all();
    if (worker_.joinable()) worker_.join();
    log_.close();
}

MirrorSnapshot Session::snapshot_of(const steering::MirrorState& m) const {
    return {m.commanded, m.drive, m.clock, m.energy_dissipated};
}

StatusReport Session::status() const {
    std::lock_guard lock(m_);
    StatusReport r;
    r.session_id = id_;
    r.state = state_;
    r.config_hash = cfg_.hash();
    r.mirror = live_mirror_;
    if (state_ != SessionState::scanning) {
        r.source_on = instrument_->source_on();
        r.source = instrument_->source();
    } else {
        r.source_on = false;
        r.source = scans_.at(*active_scan_).map.plan.source;
    }
    r.active_scan = active_scan_;
    r.calibrated = calibration_.has_value();
    r.last_seq = log_.last_seq();
    r.fault = fault_;
    return r;
}

void Session::require_idle_locked() const {
    if (state_ == SessionState::scanning) {
        throw BusyError("session is busy with scan " + std::to_string(*active_scan_));
    }
    if (state_ == SessionState::fault) {
        throw StateError("session is in fault state: " + fault_);
    }
}

SteerAck Session::steer(const SteerRequest& req) {
    std::lock_guard lock(m_);
    require_idle_locked();
    if (req.v.has_value() == req.mm.has_value()) {
        throw ValidationError("steer needs exactly one of a voltage target or a physical target");
    }
    SteerAck ack;
    if (req.mm) {
        if (!calibration_) {
            throw StateError("physical steer needs a loaded calibration");
        }
        ack.commanded = calib::invert_mapping(*calibration_, *req.mm);
        ack.model_mm = calibration_->predict(ack.commanded);
    } else {
        ack.commanded = *req.v;
    }
    ack.slew_time_s = instrument_->slew_to(ack.commanded, req.override_interlock);
    ack.predicted_mm = instrument_->landing(ack.commanded);
    live_mirror_ = snapshot_of(instrument_->mirror());

    Json p = Json::object();
    p["commanded"] = coord_json(ack.commanded);
    p["target_mm"] = req.mm ? vec_json(*req.mm) : Json(nullptr);
    p["predicted_mm"] = ack.predicted_mm ? vec_json(*ack.predicted_mm) : Json(nullptr);
    p["slew_time_s"] = ack.slew_time_s;
    p["override_interlock"] = req.override_interlock;
    p["clock_s"] = instrument_->clock();
    ack.seq = log_.append("steer", std::move(p)).seq;
    return ack;
}

SourceAck Session::set_source(bool on, const std::optional<scan::SourceSettings>& settings) {
    std::lock_guard lock(m_);
    require_idle_locked();
    const scan::SourceSettings s = settings.value_or(instrument_->source());
    if (on || settings) {
        s.validate();
    }
    SourceAck ack;
    ack.on = on;
    ack.changed = on != instrument_->source_on() || (on && !(s == instrument_->source()));
    if (ack.changed) {
        instrument_->set_source(on, s);
    }
    ack.settings = instrument_->source();
    ack.absorbed_w = on ? instrument_->illumination(instrument_->mirror().commanded, s).absorbed_w : 0.0;

    Json p = source_json(on, ack.settings);
    p["changed"] = ack.changed;
    p["absorbed_w"] = ack.absorbed_w;
    p["clock_s"] = instrument_->clock();
    ack.seq = log_.append("source", std::move(p)).seq;
    return ack;
}

std::uint64_t Session::start_scan(const ScanRequest& req) {
    if (req.preset.has_value() == req.plan.has_value()) {
        throw ValidationError("scan needs exactly one of a plan or a preset");
    }
    if (!(req.pace_s >= 0.0) || req.pace_s > 10.0) {
        throw ValidationError("pace_s must be in [0, 10]");
    }
    std::lock_guard lock(m_);
    require_idle_locked();

    config::SystemConfig cfg = cfg_;
    scan::ScanPlan plan;
    if (req.preset) {
        auto resolved = config::resolve_preset(cfg_, *req.preset);
        cfg = std::move(resolved.config);
        plan = resolved.plan;
    } else {
        plan = *req.plan;
    }
    plan.validate();

    const std::uint64_t id = next_scan_id_++;
    const std::uint64_t seed = req.seed.value_or(cfg.noise_seed + id - 1);

    ScanRecord rec;
    rec.status.id = id;
    rec.status.total = plan.point_count();
    rec.status.preset = req.preset;
    rec.status.config_hash = cfg.hash();
    rec.status.seed = seed;
    rec.map.plan = plan;
    rec.map.meta.config_hash = rec.status.config_hash;
    rec.map.meta.session_id = id_;
    rec.map.meta.seed = seed;
    scans_[id] = rec;

    // A finished worker only has to return once the session is idle again.
    if (worker_.joinable()) worker_.join();
    state_ = SessionState::scanning;
    active_scan_ = id;

    Json p = Json::object();
    p["id"] = id;
    p["preset"] = req.preset ? Json(*req.preset) : Json(nullptr);
    p["plan"] = jsonio::plan_to_json_value(plan);
    p["config_hash"] = rec.status.config_hash;
    p["seed"] = seed;
    p["total"] = rec.status.total;
    log_.append("scan_started", std::move(p));

    worker_ = std::thread(&Session::run_worker, this, id, std::move(cfg), plan, seed, req.pace_s);
    return id;
}

void Session::run_worker(std::uint64_t id, config::SystemConfig cfg, scan::ScanPlan plan, std::uint64_t seed,
                         double pace_s) {
    std::unique_ptr<scan::Instrument> inst;
    scan::ResponseMap result;
    std::string error;
    try {
        inst = std::make_unique<scan::Instrument>(cfg.instrument, seed);
        scan::MapMetadata meta;
        meta.config_hash = cfg.hash();
        meta.session_id = id_;
        meta.seed = seed;

        scan::ScanHooks hooks;
        hooks.on_sample = [&](const scan::ResponseSample& s, std::size_t done, std::size_t total) {
            {
                std::unique_lock lock(m_);
                auto& rec = scans_.at(id);
                rec.map.samples.push_back(s);
                rec.status.done = done;
                rec.status.latest = s;
                live_mirror_ = snapshot_of(inst->mirror());
                Json p = Json::object();
                p["id"] = id;
                p["done"] = done;
                p["total"] = total;
                p["sample"] = sample_to_json(s);
                log_.append("sample", std::move(p));
                if (pace_s > 0.0) {
                    scan_cv_.wait_for(lock, std::chrono::duration<double>(pace_s),
                                      [&] { return rec.cancel || shutting_down_; });
                }
            }
        };
        hooks.cancelled = [&] {
            std::lock_guard lock(m_);
            return scans_.at(id).cancel || shutting_down_;
        };
        result = scan::execute(plan, *inst, meta, hooks);
    } catch (const std::exception& e) {
        error = e.what();
    }

    std::lock_guard lock(m_);
    auto& rec = scans_.at(id);
    Json p = Json::object();
    p["id"] = id;
    if (error.empty()) {
        rec.map = result;
        rec.status.done = result.samples.size();
        rec.status.state = result.meta.complete ? ScanState::complete : ScanState::cancelled;
        state_ = SessionState::idle;
        cfg_ = std::move(cfg);
        instrument_ = std::move(inst);
        live_mirror_ = snapshot_of(instrument_->mirror());
    } else {
        rec.status.state = ScanState::failed;
        rec.status.error = error;
        state_ = SessionState::fault;
        fault_ = error;
        p["error"] = error;
    }
    active_scan_.reset();
    p["state"] = to_string(rec.status.state);
    p["done"] = rec.status.done;
    p["total"] = rec.status.total;
    log_.append("scan_finished", std::move(p));
    scan_cv_.notify_all();
}

ScanStatus Session::scan_status(std::uint64_t id) const {
    std::lock_guard lock(m_);
    auto it = scans_.find(id);
    if (it == scans_.end()) {
        throw NotFoundError("no scan with id " + std::to_string(id));
    }
    return it->second.status;
}

scan::ResponseMap Session::fetch_map(std::uint64_t id) const {
    std::lock_guard lock(m_);
    auto it = scans_.find(id);
    if (it == scans_.end()) {
        throw NotFoundError("no scan with id " + std::to_string(id));
    }
    scan::ResponseMap map = it->second.map;
    map.meta.complete = it->second.status.state == ScanState::complete;
    return map;
}

void Session::cancel_scan(std::uint64_t id) {
    std::lock_guard lock(m_);
    auto it = scans_.find(id);
    if (it == scans_.end()) {
        throw NotFoundError("no scan with id " + std::to_string(id));
    }
    if (it->second.status.state != ScanState::running) {
        throw StateError("scan " + std::to_string(id) + " is not running");
    }
    if (it->second.cancel) {
        throw StateError("scan " + std::to_string(id) + " is already being cancelled");
    }
    it->second.cancel = true;
    Json p = Json::object();
    p["id"] = id;
    log_.append("scan_cancel", std::move(p));
    scan_cv_.notify_all();
}

ScanStatus Session::wait_scan(std::uint64_t id) {
    std::unique_lock lock(m_);
    auto it = scans_.find(id);
    if (it == scans_.end()) {
        throw NotFoundError("no scan with id " + std::to_string(id));
    }
    scan_cv_.wait(lock, [&] { return it->second.status.state != ScanState::running; });
    return it->second.status;
}

void Session::load_calibration(calib::MappingModel model) {
    model.validate();
    std::lock_guard lock(m_);
    require_idle_locked();
    Json p = Json::object();
    p["provenance"] = model.provenance;
    p["residual_rms_mm"] = model.residual_rms_mm;
    calibration_ = std::move(model);
    log_.append("calibration", std::move(p));
}

std::optional<calib::MappingModel> Session::calibration() const {
    std::lock_guard lock(m_);
    return calibration_;
}

void Session::reset() {
    std::lock_guard lock(m_);
    if (state_ == SessionState::scanning) {
        throw BusyError("cannot reset while scanning");
    }
    const bool was_fault = state_ == SessionState::fault;
    state_ = SessionState::idle;
    Json p = Json::object();
    p["cleared_fault"] = was_fault ? Json(fault_) : Json(nullptr);
    fault_.clear();
    log_.append("reset", std::move(p));
}

}  // namespace cryoscan::service

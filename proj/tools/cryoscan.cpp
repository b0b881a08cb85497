// cryoscan command-line front end.
// Exit codes: 0 ok, 2 validation error, 3 runtime fault.

#include "cryoscan/calib.hpp"
#include "cryoscan/config.hpp"
#include "cryoscan/errors.hpp"
#include "cryoscan/http_api.hpp"
#include "cryoscan/scan.hpp"
#include "cryoscan/service.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <iostream>
#include <numbers>

using namespace cryoscan;
using jsonio::Json;

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 2;
constexpr int kRuntime = 3;

int simulate(const std::string& config_path, const std::string& preset, const std::string& out,
             std::optional<std::uint64_t> seed) {
    const auto cfg = config::load_config(config_path);
    const auto resolved = config::resolve_preset(cfg, preset);
    const std::uint64_t s = seed.value_or(resolved.config.noise_seed);
    scan::Instrument inst(resolved.config.instrument, s);
    scan::MapMetadata meta;
    meta.config_hash = resolved.config.hash();
    meta.seed = s;
    const auto map = scan::execute(resolved.plan, inst, meta);
    scan::save_map(map, out);

    Json j = Json::object();
    j["out"] = out;
    j["preset"] = preset;
    j["points"] = map.samples.size();
    j["config_hash"] = meta.config_hash;
    j["seed"] = s;
    j["session_time_s"] = inst.clock();
    std::cout << j.dump() << "\n";
    return kOk;
}

int fit_spot(const std::string& image, double pitch_um) {
    const auto img = calib::read_pgm(image, pitch_um);
    const auto fit = calib::fit_spot(img);
    Json j = Json::object();
    j["center_um"] = jsonio::vec_to_json(fit.spot.center_mm.x() * 1e3, fit.spot.center_mm.y() * 1e3);
    j["sigma_major_um"] = fit.spot.sigma_major_um;
    j["sigma_minor_um"] = fit.spot.sigma_minor_um;
    j["diameter_major_um"] = fit.spot.diameter_major_um();
    j["diameter_minor_um"] = fit.spot.diameter_minor_um();
    j["orientation_deg"] = fit.spot.orientation_rad * 180.0 / std::numbers::pi;
    j["background"] = fit.background;
    j["residual_rms"] = jsonio::vec_to_json(fit.residual_rms_major, fit.residual_rms_minor);
    std::cout << j.dump() << "\n";
    return kOk;
}

int calibrate(const std::string& map_path, const std::string& mask_path, const std::string& out, double threshold,
              double gate_mm) {
    const auto map = scan::load_map(map_path);
    const auto mask = device::load_mask(mask_path);
    if (mask.kind != device::MaskKind::screen) {
        throw ValidationError(mask_path + ": calibration needs a screen-plate mask");
    }
    std::vector<optics::Vec2> holes;
    for (const auto& h : mask.holes) holes.push_back(h.center_mm);
    const auto blobs = calib::detect_holes(map, threshold);
    calib::MappingFitOptions opt;
    opt.residual_gate_mm = gate_mm;
    auto fit = calib::fit_mapping_detailed(blobs, holes, opt);
    fit.model.provenance = "map " + map_path + " config " + map.meta.config_hash + " seed " +
                           std::to_string(map.meta.seed) + " mask " + mask_path;
    calib::save_mapping(fit.model, out);

    Json j = Json::object();
    j["out"] = out;
    j["blobs"] = blobs.size();
    j["matches"] = fit.matches.size();
    j["kappa"] = jsonio::vec_to_json(fit.model.kappa_x, fit.model.kappa_y);
    j["kappa_fitted"] = fit.kappa_fitted;
    j["residual_rms_mm"] = fit.model.residual_rms_mm;
    std::cout << j.dump() << "\n";
    return kOk;
}

int steer(const std::string& model_path, const std::vector<double>& to_mm, const std::string& config_path) {
    const auto model = calib::load_mapping(model_path);
    const optics::Vec2 target(to_mm.at(0), to_mm.at(1));
    Json j = Json::object();
    try {
        const auto v = calib::invert_mapping(model, target);
        j["v"] = jsonio::vec_to_json(v.vx(), v.vy());
        const auto p = model.predict(v);
        j["model_mm"] = jsonio::vec_to_json(p.x(), p.y());
        if (!config_path.empty()) {
            const auto cfg = config::load_config(config_path);
            try {
                const auto traced = optics::trace_command(v, cfg.instrument.electrical, cfg.instrument.layout);
                j["traced_mm"] = jsonio::vec_to_json(traced.x(), traced.y());
            } catch (const optics::TraceMiss&) {
                j["traced_mm"] = nullptr;
            }
        }
    } catch (const OutOfRangeError& e) {
        j["error"] = "out_of_range";
        j["message"] = e.what();
        j["nearest_v"] = jsonio::vec_to_json(e.nearest_vx(), e.nearest_vy());
        std::cout << j.dump() << "\n";
        return kRuntime;
    }
    std::cout << j.dump() << "\n";
    return kOk;
}

int serve(const std::string& config_path, const std::string& host, int port, const std::string& model_path) {
    // Block termination signals before any thread starts so sigwait sees them.
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);

    service::Session session(config::load_config(config_path));
    if (!model_path.empty()) {
        session.load_calibration(calib::load_mapping(model_path));
    }
    service::HttpServer server(session);
    const int bound = server.start(host, port);
    std::cout << "listening on http://" << host << ":" << bound << std::endl;

    int sig = 0;
    sigwait(&set, &sig);
    server.stop();
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Beam steering control and calibration for cryogenic detector scans"};
    app.require_subcommand(1);

    std::string config_path, preset, out, image, map_path, mask_path, model_path, host = "127.0.0.1";
    std::optional<std::uint64_t> seed;
    double pitch_um = 0.0, threshold = 0.5, gate_mm = 0.5;
    std::vector<double> to_mm;
    int port = 8080;

    auto* sim = app.add_subcommand("simulate", "Run a preset scan on the simulated instrument");
    sim->add_option("--config", config_path, "System config file")->required()->check(CLI::ExistingFile);
    sim->add_option("--preset", preset, "Preset name")->required();
    sim->add_option("--out", out, "Response map CSV to write")->required();
    sim->add_option("--seed", seed, "Noise seed (default: config noise_seed)");

    auto* fit = app.add_subcommand("fit-spot", "Fit a Gaussian beam spot in a PGM image");
    fit->add_option("image", image, "Binary PGM image")->required()->check(CLI::ExistingFile);
    fit->add_option("--pitch-um", pitch_um, "Pixel pitch in micrometres")->required();

    auto* cal = app.add_subcommand("calibrate", "Fit the voltage-to-position mapping from a screen-plate map");
    cal->add_option("map", map_path, "Response map CSV")->required()->check(CLI::ExistingFile);
    cal->add_option("--mask", mask_path, "Mask file with the known holes")->required()->check(CLI::ExistingFile);
    cal->add_option("--out", out, "Mapping model JSON to write")->required();
    cal->add_option("--threshold", threshold, "Blob threshold as a fraction of the delta range")
        ->check(CLI::Range(0.0, 1.0));
    cal->add_option("--gate-mm", gate_mm, "Residual gate in mm");

    auto* st = app.add_subcommand("steer", "Invert a mapping model for a physical target");
    st->add_option("--model", model_path, "Mapping model JSON")->required()->check(CLI::ExistingFile);
    st->add_option("--to-mm", to_mm, "Target x y in mm")->required()->expected(2);
    st->add_option("--config", config_path, "Also trace the command through this config")
        ->check(CLI::ExistingFile);

    auto* srv = app.add_subcommand("serve", "Serve the HTTP API");
    srv->add_option("--config", config_path, "System config file")->required()->check(CLI::ExistingFile);
    srv->add_option("--port", port, "TCP port (0 picks a free one)")->check(CLI::Range(0, 65535));
    srv->add_option("--host", host, "Bind address");
    srv->add_option("--model", model_path, "Mapping model to load at start")->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kValidation;
    }

    try {
        if (*sim) return simulate(config_path, preset, out, seed);
        if (*fit) return fit_spot(image, pitch_um);
        if (*cal) return calibrate(map_path, mask_path, out, threshold, gate_mm);
        if (*st) return steer(model_path, to_mm, config_path);
        if (*srv) return serve(config_path, host, port, model_path);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntime;
    }
    return kRuntime;
}

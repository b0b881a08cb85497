#pragma once

// System configuration: strict JSON with units in key names, named presets
// (plan + merge-patch overrides) and a content hash for provenance.

#include "cryoscan/json_io.hpp"
#include "cryoscan/scan.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace cryoscan::config {

struct Preset {
    std::string description;
    scan::ScanPlan plan;
    jsonio::Json overrides = jsonio::Json::object();
};

struct SystemConfig {
    scan::InstrumentConfig instrument;
    std::uint64_t noise_seed = 1;
    std::map<std::string, Preset> presets;
    // Directory that relative mask paths resolve against.
    std::filesystem::path base_dir;

    // As-loaded document with defaults filled in, masks inlined and presets
    // omitted; null for configs assembled in code.
    jsonio::Json document;

    // Canonical document and the first 16 hex digits of its SHA-256.
    jsonio::Json canonical() const;
    std::string hash() const;
};

SystemConfig parse_config(std::string_view text, const std::filesystem::path& base_dir,
                          const std::string& source = "<config>");
SystemConfig load_config(const std::filesystem::path& path);

struct ResolvedPreset {
    SystemConfig config;  // overrides applied and re-validated
    scan::ScanPlan plan;
};

ResolvedPreset resolve_preset(const SystemConfig& cfg, const std::string& name);

std::string sha256_hex(std::string_view data);

}  // namespace cryoscan::config

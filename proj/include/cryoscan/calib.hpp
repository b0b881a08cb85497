#pragma once

// Calibration toolkit: beam-spot fitting on camera images, hole detection in
// response maps, the voltage->position mapping fit and its inverse.

#include "cryoscan/device.hpp"
#include "cryoscan/image.hpp"
#include "cryoscan/scan.hpp"

#include <Eigen/Core>

#include <string>
#include <vector>

namespace cryoscan::calib {

using optics::Vec2;
using steering::VoltageCoord;

struct SpotFit {
    // center_mm is in image coordinates; total_power_w holds the
    // background-subtracted integrated counts.
    optics::BeamSpot spot;
    double background = 0.0;
    double residual_rms_major = 0.0;
    double residual_rms_minor = 0.0;
    int iterations = 0;
};

SpotFit fit_spot(const IntensityImage& img);

struct Blob {
    VoltageCoord centroid;
    double weight = 0.0;
    Eigen::Matrix2d second_moments = Eigen::Matrix2d::Zero();  // weighted covariance in v
    std::size_t pixel_count = 0;
};

using BlobSet = std::vector<Blob>;

// Threshold sits at min + threshold_frac * (max - min) of the map's deltas.
BlobSet detect_holes(const scan::ResponseMap& map, double threshold_frac = 0.5);

struct DistortionMetrics {
    double eccentricity = 0.0;
    double elongation_axis_rad = 0.0;  // major axis in voltage space, in (-pi/2, pi/2]
    double aspect_ratio = 1.0;
    double reference_eccentricity = 0.0;  // of the true hole outline
};

DistortionMetrics distortion_metrics(const Blob& blob, const device::Hole& true_hole);

struct MappingModel {
    Eigen::Matrix2d affine = Eigen::Matrix2d::Identity();  // mm per unit saturated command
    Eigen::Vector2d offset = Eigen::Vector2d::Zero();
    double kappa_x = 0.0;
    double kappa_y = 0.0;
    double residual_rms_mm = 0.0;
    std::string provenance;

    Vec2 predict(const VoltageCoord& v) const;
    Vec2 predict(double vx, double vy) const;
    Eigen::Matrix2d jacobian(double vx, double vy) const;
    void validate() const;
};

std::string mapping_to_json(const MappingModel& model);
MappingModel mapping_from_json(std::string_view text, const std::string& source = "<model>");
void save_mapping(const MappingModel& model, const std::filesystem::path& path);
MappingModel load_mapping(const std::filesystem::path& path);

struct MappingFitOptions {
    double residual_gate_mm = 0.5;
    double max_rotation_rad = 0.7853981633974483;  // prior on the voltage->device rotation
    bool allow_reflection = false;
};

struct Correspondence {
    std::size_t blob = 0;
    std::size_t hole = 0;
    double residual_mm = 0.0;
};

struct MappingFit {
    MappingModel model;
    std::vector<Correspondence> matches;
    int iterations = 0;
    bool kappa_fitted = false;
};

MappingFit fit_mapping_detailed(const BlobSet& blobs, const std::vector<Vec2>& known_holes_mm,
                                const MappingFitOptions& options = {});
MappingModel fit_mapping(const BlobSet& blobs, const std::vector<Vec2>& known_holes_mm,
                         const MappingFitOptions& options = {});

// Throws OutOfRangeError carrying the nearest reachable command when the
// target lies outside the model image of [-1,1]^2.
VoltageCoord invert_mapping(const MappingModel& model, const Vec2& target_mm);

}  // namespace cryoscan::calib

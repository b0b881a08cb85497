#pragma once

#include "cryoscan/optics.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace cryoscan::calib {

// Row-major intensities; pixel (x, y) sits at ((x + 0.5) * pitch, (y + 0.5) * pitch) um.
struct IntensityImage {
    int width = 0;
    int height = 0;
    double pixel_pitch_um = 1.0;
    std::vector<double> values;
    // Level at which the sensor clips, when known (PGM maxval).
    std::optional<double> saturation_level;

    double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
    double& at(int x, int y) { return values[static_cast<std::size_t>(y) * width + x]; }
    void validate() const;
};

// Binary 16-bit (or 8-bit) PGM. The pitch is not part of the format.
IntensityImage read_pgm(const std::filesystem::path& path, double pixel_pitch_um);
IntensityImage parse_pgm(const std::string& bytes, double pixel_pitch_um, const std::string& source = "<pgm>");
// Values are rounded and clipped to [0, maxval].
std::string format_pgm(const IntensityImage& img, std::uint16_t maxval = 65535);
void write_pgm(const IntensityImage& img, const std::filesystem::path& path, std::uint16_t maxval = 65535);

struct RenderOptions {
    int width = 64;
    int height = 64;
    double pixel_pitch_um = 5.0;
    double peak = 1000.0;
    double background = 0.0;
    double noise_sigma = 0.0;
    std::uint64_t seed = 1;
};

// Point-sampled elliptical Gaussian. The spot centre is given in image
// coordinates (mm from the image origin corner).
IntensityImage render_spot_image(const optics::BeamSpot& spot, const RenderOptions& opt);

}  // namespace cryoscan::calib

#include "cryoscan/image.hpp"

#include "cryoscan/errors.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace cryoscan::calib {

void IntensityImage::validate() const {
    if (width <= 0 || height <= 0) {
        throw ValidationError("image dimensions must be positive");
    }
    if (!(pixel_pitch_um > 0.0) || !std::isfinite(pixel_pitch_um)) {
        throw ValidationError("pixel pitch must be > 0");
    }
    if (values.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
        throw ValidationError("image value count does not match its dimensions");
    }
    for (double v : values) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw ValidationError("image intensities must be finite and >= 0");
        }
    }
}

IntensityImage parse_pgm(const std::string& bytes, double pixel_pitch_um, const std::string& source) {
    std::size_t pos = 0;
    std::size_t line = 1;
    std::size_t line_start = 0;
    auto fail = [&](const std::string& what) {
        throw ParseError(source, line, pos - line_start + 1, what);
    };
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            const char c = bytes[pos];
            if (c == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(c))) {
                if (c == '\n') {
                    ++line;
                    line_start = pos + 1;
                }
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&]() -> long {
        skip_space();
        const std::size_t begin = pos;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (pos == begin) fail("expected an integer");
        return std::stol(bytes.substr(begin, pos - begin));
    };

    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
        fail("not a binary PGM (P5)");
    }
    pos = 2;
    const long w = read_int();
    const long h = read_int();
    const long maxval = read_int();
    if (w <= 0 || h <= 0 || w > 1 << 15 || h > 1 << 15) fail("bad image dimensions");
    if (maxval <= 0 || maxval > 65535) fail("maxval must be in 1..65535");
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        fail("expected whitespace before pixel data");
    }
    ++pos;
    const std::size_t bpp = maxval > 255 ? 2 : 1;
    const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
    if (bytes.size() - pos < n * bpp) {
        fail("truncated pixel data");
    }
    IntensityImage img;
    img.width = static_cast<int>(w);
    img.height = static_cast<int>(h);
    img.pixel_pitch_um = pixel_pitch_um;
    img.saturation_level = static_cast<double>(maxval);
    img.values.resize(n);
    const auto* data = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
    for (std::size_t i = 0; i < n; ++i) {
        img.values[i] = bpp == 2 ? static_cast<double>((data[2 * i] << 8) | data[2 * i + 1]) : data[i];
    }
    img.validate();
    return img;
}

IntensityImage read_pgm(const std::filesystem::path& path, double pixel_pitch_um) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ValidationError("cannot open image " + path.string());
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_pgm(buffer.str(), pixel_pitch_um, path.string());
}

std::string format_pgm(const IntensityImage& img, std::uint16_t maxval) {
    img.validate();
    if (maxval == 0) {
        throw ValidationError("maxval must be > 0");
    }
    std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n" +
                      std::to_string(maxval) + "\n";
    const bool wide = maxval > 255;
    for (double v : img.values) {
        const auto q = static_cast<unsigned>(std::lround(std::min(v, static_cast<double>(maxval))));
        if (wide) out.push_back(static_cast<char>(q >> 8));
        out.push_back(static_cast<char>(q & 0xff));
    }
    return out;
}

void write_pgm(const IntensityImage& img, const std::filesystem::path& path, std::uint16_t maxval) {
    const std::string bytes = format_pgm(img, maxval);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error("cannot write image " + path.string());
    }
    out << bytes;
}

IntensityImage render_spot_image(const optics::BeamSpot& spot, const RenderOptions& opt) {
    spot.validate();
    IntensityImage img;
    img.width = opt.width;
    img.height = opt.height;
    img.pixel_pitch_um = opt.pixel_pitch_um;
    img.values.assign(static_cast<std::size_t>(opt.width) * opt.height, 0.0);
    const double c = std::cos(spot.orientation_rad);
    const double s = std::sin(spot.orientation_rad);
    const double cx = spot.center_mm.x() * 1e3;
    const double cy = spot.center_mm.y() * 1e3;
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (int y = 0; y < opt.height; ++y) {
        for (int x = 0; x < opt.width; ++x) {
            const double px = (x + 0.5) * opt.pixel_pitch_um - cx;
            const double py = (y + 0.5) * opt.pixel_pitch_um - cy;
            const double a = (c * px + s * py) / spot.sigma_major_um;
            const double b = (-s * px + c * py) / spot.sigma_minor_um;
            double v = opt.peak * std::exp(-0.5 * (a * a + b * b)) + opt.background;
            if (opt.noise_sigma > 0.0) v += opt.noise_sigma * noise(rng);
            img.at(x, y) = std::max(v, 0.0);
        }
    }
    return img;
}

}  // namespace cryoscan::calib

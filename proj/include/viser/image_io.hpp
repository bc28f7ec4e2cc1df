#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "viser/grid.hpp"

namespace viser {

// Binary PGM (P5) read/write. 8-bit for source images and binary masks,
// 16-bit (big-endian, per the PNM spec) for compiled saliency maps.
// Values are mapped to/from [0,1] doubles.

namespace detail {

inline int pgm_read_token(std::istream& in) {
    // skips whitespace and '#' comment lines
    while (true) {
        int ch = in.peek();
        if (ch == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(ch)) {
            in.get();
        } else {
            break;
        }
    }
    int value = 0;
    in >> value;
    return value;
}

}  // namespace detail

inline Grid read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_pgm: cannot open " + path.string());
    std::string magic(2, '\0');
    in.read(magic.data(), 2);
    if (magic != "P5") throw std::runtime_error("read_pgm: not a P5 file: " + path.string());
    const int cols = detail::pgm_read_token(in);
    const int rows = detail::pgm_read_token(in);
    const int maxval = detail::pgm_read_token(in);
    in.get();  // single whitespace before raster
    if (cols <= 0 || rows <= 0 || maxval <= 0 || maxval > 65535)
        throw std::runtime_error("read_pgm: bad header in " + path.string());

    Grid grid(rows, cols);
    const size_t n = grid.size();
    if (maxval < 256) {
        std::vector<uint8_t> raw(n);
        in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n));
        if (!in) throw std::runtime_error("read_pgm: truncated raster in " + path.string());
        for (size_t i = 0; i < n; ++i) grid[i] = raw[i] / static_cast<double>(maxval);
    } else {
        std::vector<uint8_t> raw(n * 2);
        in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * 2));
        if (!in) throw std::runtime_error("read_pgm: truncated raster in " + path.string());
        for (size_t i = 0; i < n; ++i) {
            const uint16_t v = static_cast<uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
            grid[i] = v / static_cast<double>(maxval);
        }
    }
    return grid;
}

// Values are clamped to [0,1] before quantization.
inline void write_pgm(const std::filesystem::path& path, const Grid& grid, int maxval = 255) {
    if (maxval != 255 && maxval != 65535)
        throw std::invalid_argument("write_pgm: maxval must be 255 or 65535");
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("write_pgm: cannot open " + path.string());
    out << "P5\n" << grid.cols() << " " << grid.rows() << "\n" << maxval << "\n";
    const size_t n = grid.size();
    auto quantize = [&](double v) {
        const double clamped = std::clamp(v, 0.0, 1.0);
        return static_cast<uint32_t>(std::lround(clamped * maxval));
    };
    if (maxval == 255) {
        std::vector<uint8_t> raw(n);
        for (size_t i = 0; i < n; ++i) raw[i] = static_cast<uint8_t>(quantize(grid[i]));
        out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(n));
    } else {
        std::vector<uint8_t> raw(n * 2);
        for (size_t i = 0; i < n; ++i) {
            const uint16_t v = static_cast<uint16_t>(quantize(grid[i]));
            raw[2 * i] = static_cast<uint8_t>(v >> 8);
            raw[2 * i + 1] = static_cast<uint8_t>(v & 0xff);
        }
        out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(n * 2));
    }
    if (!out) throw std::runtime_error("write_pgm: write failed for " + path.string());
}

}  // namespace viser

#pragma once

// Minimal grayscale PNG writer: zlib stream with stored (uncompressed)
// deflate blocks. Enough for exporting small heatmap images without an
// external codec dependency.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "avsync/common.hpp"

namespace avsync::png {

namespace detail {

inline uint32_t crc32(const uint8_t* data, size_t len, uint32_t crc = 0xffffffffu) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t n = 0; n < 256; ++n) {
            uint32_t c = n;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[n] = c;
        }
        return t;
    }();
    for (size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
    return crc;
}

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

inline void put_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& payload) {
    put_u32(out, static_cast<uint32_t>(payload.size()));
    std::vector<uint8_t> body(type, type + 4);
    body.insert(body.end(), payload.begin(), payload.end());
    out.insert(out.end(), body.begin(), body.end());
    put_u32(out, crc32(body.data(), body.size()) ^ 0xffffffffu);
}

inline std::vector<uint8_t> zlib_stored(const std::vector<uint8_t>& raw) {
    std::vector<uint8_t> z{0x78, 0x01};
    uint32_t a = 1, b = 0;
    for (uint8_t byte : raw) {
        a = (a + byte) % 65521;
        b = (b + a) % 65521;
    }
    size_t pos = 0;
    while (pos < raw.size() || raw.empty()) {
        const size_t n = std::min<size_t>(raw.size() - pos, 65535);
        const bool final = pos + n == raw.size();
        z.push_back(final ? 1 : 0);
        z.push_back(static_cast<uint8_t>(n & 0xff));
        z.push_back(static_cast<uint8_t>(n >> 8));
        z.push_back(static_cast<uint8_t>(~n & 0xff));
        z.push_back(static_cast<uint8_t>((~n >> 8) & 0xff));
        z.insert(z.end(), raw.begin() + static_cast<std::ptrdiff_t>(pos), raw.begin() + static_cast<std::ptrdiff_t>(pos + n));
        pos += n;
        if (raw.empty()) break;
    }
    z.push_back(static_cast<uint8_t>((b >> 8) & 0xff));
    z.push_back(static_cast<uint8_t>(b & 0xff));
    z.push_back(static_cast<uint8_t>((a >> 8) & 0xff));
    z.push_back(static_cast<uint8_t>(a & 0xff));
    return z;
}

}  // namespace detail

// pixels: row-major grayscale in [0, 1], optionally upscaled by an integer
// factor with nearest-neighbour sampling
inline void write_gray(const std::string& path, const std::vector<double>& pixels, int width, int height,
                       int upscale = 1) {
    if (width < 1 || height < 1 || upscale < 1 ||
        static_cast<size_t>(width) * static_cast<size_t>(height) != pixels.size())
        throw ContractError("png::write_gray: bad dimensions");
    const int w = width * upscale, h = height * upscale;
    std::vector<uint8_t> raw;
    raw.reserve(static_cast<size_t>(h) * (w + 1));
    for (int y = 0; y < h; ++y) {
        raw.push_back(0);  // filter: none
        for (int x = 0; x < w; ++x) {
            const double v = pixels[static_cast<size_t>(y / upscale) * width + x / upscale];
            raw.push_back(static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
        }
    }
    std::vector<uint8_t> out{0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<uint8_t> ihdr;
    detail::put_u32(ihdr, static_cast<uint32_t>(w));
    detail::put_u32(ihdr, static_cast<uint32_t>(h));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(0);  // grayscale
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    detail::put_chunk(out, "IHDR", ihdr);
    detail::put_chunk(out, "IDAT", detail::zlib_stored(raw));
    detail::put_chunk(out, "IEND", {});
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write png " + path);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

}  // namespace avsync::png

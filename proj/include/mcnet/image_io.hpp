#pragma once

#include <cctype>
#include <fstream>
#include <string>

#include "mcnet/tensor.hpp"

// Binary PPM (P6) for color and PGM (P5) for grayscale, 8-bit. Values are
// clamped to [0,1] and quantized round-to-nearest on write, mapped back to
// [0,1] on read, so a round trip moves a pixel by at most 1/510.

namespace mcnet {

namespace detail {

inline unsigned char quantize_byte(double v) {
    v = v < 0.0 ? 0.0 : v > 1.0 ? 1.0 : v;
    return static_cast<unsigned char>(v * 255.0 + 0.5);
}

// One whitespace-delimited token, skipping '#' comments per the PNM spec.
inline std::string pnm_token(std::istream& in, const std::string& path) {
    std::string tok;
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    while (c != EOF && !std::isspace(c)) {
        tok.push_back(static_cast<char>(c));
        c = in.get();
    }
    if (tok.empty()) throw DataError("truncated image header: " + path);
    return tok;
}

inline int pnm_dim(std::istream& in, const std::string& path) {
    const std::string tok = pnm_token(in, path);
    try {
        std::size_t used = 0;
        const long v = std::stol(tok, &used);
        if (used != tok.size() || v <= 0 || v > (1 << 20))
            throw std::invalid_argument(tok);
        return static_cast<int>(v);
    } catch (const std::exception&) {
        throw DataError("bad dimension '" + tok + "' in image header: " + path);
    }
}

}  // namespace detail

// image: [3,H,W] in [0,1].
template <class S>
void write_ppm(const std::string& path, const Tensor<S>& image) {
    check_rank(image, 3, "write_ppm");
    if (image.dim(0) != 3) throw DataError("write_ppm: expected 3 channels, got " +
                                           shape_str(image.shape()));
    const int h = image.dim(1), w = image.dim(2);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write image: " + path);
    out << "P6\n" << w << ' ' << h << "\n255\n";
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    for (std::int64_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c)
            out.put(static_cast<char>(detail::quantize_byte(
                static_cast<double>(image[c * plane + i]))));
    if (!out) throw DataError("short write: " + path);
}

// image: [H,W] in [0,1].
template <class S>
void write_pgm(const std::string& path, const Tensor<S>& image) {
    check_rank(image, 2, "write_pgm");
    const int h = image.dim(0), w = image.dim(1);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write image: " + path);
    out << "P5\n" << w << ' ' << h << "\n255\n";
    for (std::int64_t i = 0; i < image.numel(); ++i)
        out.put(static_cast<char>(detail::quantize_byte(static_cast<double>(image[i]))));
    if (!out) throw DataError("short write: " + path);
}

template <class S>
Tensor<S> read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image: " + path);
    const std::string magic = detail::pnm_token(in, path);
    if (magic != "P6")
        throw DataError("unsupported image format '" + magic + "' (want binary P6): " + path);
    const int w = detail::pnm_dim(in, path);
    const int h = detail::pnm_dim(in, path);
    const std::string maxval = detail::pnm_token(in, path);
    if (maxval != "255") throw DataError("unsupported max value " + maxval + ": " + path);
    // pnm_token consumed the single whitespace byte after the max value.
    Tensor<S> img{{3, h, w}};
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    std::vector<char> row(static_cast<std::size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        in.read(row.data(), static_cast<std::streamsize>(row.size()));
        if (in.gcount() != static_cast<std::streamsize>(row.size()))
            throw DataError("truncated image payload: " + path);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img[c * plane + static_cast<std::int64_t>(y) * w + x] = static_cast<S>(
                    static_cast<unsigned char>(row[static_cast<std::size_t>(x) * 3 + c]) / 255.0);
    }
    return img;
}

template <class S>
Tensor<S> read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image: " + path);
    const std::string magic = detail::pnm_token(in, path);
    if (magic != "P5")
        throw DataError("unsupported image format '" + magic + "' (want binary P5): " + path);
    const int w = detail::pnm_dim(in, path);
    const int h = detail::pnm_dim(in, path);
    const std::string maxval = detail::pnm_token(in, path);
    if (maxval != "255") throw DataError("unsupported max value " + maxval + ": " + path);
    Tensor<S> img{{h, w}};
    std::vector<char> row(static_cast<std::size_t>(w));
    for (int y = 0; y < h; ++y) {
        in.read(row.data(), static_cast<std::streamsize>(row.size()));
        if (in.gcount() != static_cast<std::streamsize>(row.size()))
            throw DataError("truncated image payload: " + path);
        for (int x = 0; x < w; ++x)
            img[static_cast<std::int64_t>(y) * w + x] =
                static_cast<S>(static_cast<unsigned char>(row[static_cast<std::size_t>(x)]) /
                               255.0);
    }
    return img;
}

}  // namespace mcnet

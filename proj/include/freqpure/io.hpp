#pragma once

// Portable batch container and lossless image export.
//
// Batch file layout (.fqb):
//   8 bytes   magic "FQBATCH1"
//   8 bytes   little-endian u64 header length L
//   L bytes   UTF-8 JSON header: shape [n,c,h,w], range, labels, mode, seed, config_hash
//   n*c*h*w   little-endian IEEE-754 doubles, row-major

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "freqpure/tensor.hpp"

namespace freqpure {

struct BatchFile {
    ImageBatch batch;
    std::vector<int> labels;
    std::string mode;        ///< attack mode, "clean" or "purified"
    std::uint64_t seed = 0;
    std::string config_hash;
};

namespace detail {

inline constexpr char batch_magic[9] = "FQBATCH1";

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
}

} // namespace detail

/// Writes to a temporary sibling and renames, so readers never see a torn file.
inline void write_batch(const std::string& path, const BatchFile& f) {
    const Shape s = f.batch.shape();
    if (!f.labels.empty() && f.labels.size() != s.n) throw InvalidInput("write_batch: label count does not match batch");
    nlohmann::json header{{"shape", {s.n, s.c, s.h, s.w}},
                          {"range", to_string(f.batch.range)},
                          {"labels", f.labels},
                          {"mode", f.mode},
                          {"seed", f.seed},
                          {"config_hash", f.config_hash}};
    const std::string text = header.dump();
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw InvalidInput("cannot write " + path);
        os.write(detail::batch_magic, 8);
        detail::put_u64(os, text.size());
        os.write(text.data(), std::streamsize(text.size()));
        for (double v : f.batch.data.values()) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
        if (!os) throw InvalidInput("short write to " + path);
    }
    std::filesystem::rename(tmp, path);
}

inline BatchFile read_batch(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw LoadError(path, "cannot open batch file");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::batch_magic, 8) != 0) throw LoadError(path, "not a batch file");
    const std::uint64_t len = detail::get_u64(is);
    if (!is || len > (1u << 30)) throw LoadError(path, "corrupt header length");
    std::string text(len, '\0');
    is.read(text.data(), std::streamsize(len));
    BatchFile f;
    try {
        const auto header = nlohmann::json::parse(text);
        const auto dims = header.at("shape").get<std::vector<std::size_t>>();
        if (dims.size() != 4) throw LoadError(path, "shape must have four entries");
        const Shape s{dims[0], dims[1], dims[2], dims[3]};
        f.batch = ImageBatch{Tensor(s), range_from_string(header.at("range").get<std::string>())};
        f.labels = header.at("labels").get<std::vector<int>>();
        f.mode = header.at("mode").get<std::string>();
        f.seed = header.at("seed").get<std::uint64_t>();
        f.config_hash = header.at("config_hash").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(path, std::string("bad header: ") + e.what());
    }
    for (double& v : f.batch.data.values()) v = std::bit_cast<double>(detail::get_u64(is));
    if (!is) throw LoadError(path, "truncated data section");
    return f;
}

/// 16-bit binary PGM of one image channel. Values are mapped through
/// v -> offset + scale * v and clamped to [0,1] before quantisation.
inline void write_pgm16(const std::string& path, std::span<const double> plane, std::size_t h, std::size_t w,
                        double scale = 1.0, double offset = 0.0) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InvalidInput("cannot write " + path);
    os << "P5\n" << w << ' ' << h << "\n65535\n";
    for (double v : plane) {
        const double u = std::clamp(offset + scale * v, 0.0, 1.0);
        const auto q = static_cast<std::uint16_t>(std::lround(u * 65535.0));
        const unsigned char b[2] = {static_cast<unsigned char>(q >> 8), static_cast<unsigned char>(q & 0xff)};
        os.write(reinterpret_cast<const char*>(b), 2);
    }
}

/// Reads back a 16-bit PGM into [0,1].
inline std::vector<double> read_pgm16(const std::string& path, std::size_t& h, std::size_t& w) {
    std::ifstream is(path, std::ios::binary);
    std::string magic;
    std::size_t maxval = 0;
    is >> magic >> w >> h >> maxval;
    if (!is || magic != "P5" || maxval != 65535) throw LoadError(path, "not a 16-bit PGM");
    is.get();
    std::vector<double> out(h * w);
    for (double& v : out) {
        unsigned char b[2];
        is.read(reinterpret_cast<char*>(b), 2);
        v = double((unsigned(b[0]) << 8) | b[1]) / 65535.0;
    }
    if (!is) throw LoadError(path, "truncated PGM");
    return out;
}

} // namespace freqpure

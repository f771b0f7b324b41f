#pragma once

// Optimized product quantization: an orthogonal rotation followed by m
// independent k-means codebooks. Each item becomes a tuple of m codes.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "acerec/binary_io.hpp"
#include "acerec/data.hpp"
#include "acerec/error.hpp"
#include "acerec/kmeans.hpp"
#include "acerec/rng.hpp"

namespace acerec {

struct RealMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
    double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
};

struct CodebookSet {
    std::size_t m = 0;           // digits
    std::size_t M = 0;           // centroids per digit
    std::size_t dim = 0;         // original embedding dim D
    std::size_t padded_dim = 0;  // D rounded up to a multiple of m
    std::size_t sub_dim = 0;
    std::uint64_t seed = 0;
    std::vector<double> rotation;   // padded_dim x padded_dim, rotated = x * R
    std::vector<double> codebooks;  // m x M x sub_dim

    std::size_t padding() const { return padded_dim - dim; }
    const double* centroid(std::size_t digit, std::size_t code) const {
        return codebooks.data() + (digit * M + code) * sub_dim;
    }
};

struct SemanticIdTable {
    std::size_t rows = 0;
    std::size_t m = 0;
    std::vector<std::uint16_t> codes;  // rows x m

    std::uint16_t operator()(std::size_t r, std::size_t j) const { return codes[r * m + j]; }
    std::span<const std::uint16_t> row(std::size_t r) const { return {codes.data() + r * m, m}; }

    friend bool operator==(const SemanticIdTable&, const SemanticIdTable&) = default;
};

struct OpqOptions {
    std::size_t m = 32;
    std::size_t M = 256;
    std::size_t iters = 20;
    std::size_t lloyd_iters = 10;
    std::uint64_t seed = 0;
    bool learn_rotation = true;  // false gives plain PQ with identity rotation
};

struct OpqFit {
    CodebookSet codebooks;
    std::vector<double> error_trace;          // quantization error after each outer iteration
    std::vector<double> orthogonality_trace;  // ||R^T R - I||_F after each rotation update
};

namespace detail {

inline RealMatrix padded_copy(const ItemEmbeddingMatrix& x, std::size_t padded_dim) {
    RealMatrix out{x.rows, padded_dim, std::vector<double>(x.rows * padded_dim, 0.0)};
    for (std::size_t r = 0; r < x.rows; ++r)
        for (std::size_t c = 0; c < x.dim; ++c) out(r, c) = x(r, c);
    return out;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline RealMatrix multiply(const RealMatrix& a, const std::vector<double>& b, std::size_t b_cols) {
    Eigen::Map<const RowMat> am(a.values.data(), Eigen::Index(a.rows), Eigen::Index(a.cols));
    Eigen::Map<const RowMat> bm(b.data(), Eigen::Index(a.cols), Eigen::Index(b_cols));
    RealMatrix out{a.rows, b_cols, std::vector<double>(a.rows * b_cols)};
    Eigen::Map<RowMat>(out.values.data(), Eigen::Index(a.rows), Eigen::Index(b_cols)) = am * bm;
    return out;
}

inline std::vector<double> block_of(const RealMatrix& x, std::size_t block, std::size_t sub_dim) {
    std::vector<double> out(x.rows * sub_dim);
    for (std::size_t r = 0; r < x.rows; ++r)
        for (std::size_t c = 0; c < sub_dim; ++c) out[r * sub_dim + c] = x(r, block * sub_dim + c);
    return out;
}

// Concatenated centroids in the rotated space.
inline RealMatrix assemble(const CodebookSet& cb, const SemanticIdTable& codes) {
    RealMatrix y{codes.rows, cb.padded_dim, std::vector<double>(codes.rows * cb.padded_dim)};
    for (std::size_t r = 0; r < codes.rows; ++r)
        for (std::size_t j = 0; j < cb.m; ++j) {
            const auto code = codes(r, j);
            if (code >= cb.M) throw ShapeError("code out of range for codebook");
            std::copy_n(cb.centroid(j, code), cb.sub_dim, y.values.data() + r * cb.padded_dim + j * cb.sub_dim);
        }
    return y;
}

inline double orthogonality_defect(const std::vector<double>& r, std::size_t n) {
    Eigen::Map<const RowMat> rm(r.data(), Eigen::Index(n), Eigen::Index(n));
    return (rm.transpose() * rm - RowMat::Identity(Eigen::Index(n), Eigen::Index(n))).norm();
}

}  // namespace detail

inline double rotation_orthogonality_defect(const CodebookSet& cb) {
    return detail::orthogonality_defect(cb.rotation, cb.padded_dim);
}

inline RealMatrix rotate(const ItemEmbeddingMatrix& x, const CodebookSet& cb) {
    if (x.dim != cb.dim)
        throw ShapeError("embedding dim " + std::to_string(x.dim) + " does not match codebook dim " +
                         std::to_string(cb.dim));
    return detail::multiply(detail::padded_copy(x, cb.padded_dim), cb.rotation, cb.padded_dim);
}

inline SemanticIdTable encode_rotated(const RealMatrix& rotated, const CodebookSet& cb) {
    SemanticIdTable t{rotated.rows, cb.m, std::vector<std::uint16_t>(rotated.rows * cb.m)};
    const std::span<const double> all(cb.codebooks);
    for (std::size_t r = 0; r < rotated.rows; ++r)
        for (std::size_t j = 0; j < cb.m; ++j) {
            const auto book = all.subspan(j * cb.M * cb.sub_dim, cb.M * cb.sub_dim);
            t.codes[r * cb.m + j] = static_cast<std::uint16_t>(
                nearest_centroid(rotated.values.data() + r * cb.padded_dim + j * cb.sub_dim, book, cb.M, cb.sub_dim));
        }
    return t;
}

inline SemanticIdTable encode_items(const ItemEmbeddingMatrix& x, const CodebookSet& cb) {
    return encode_rotated(rotate(x, cb), cb);
}

// Centroid concatenation mapped back through R^T with padding removed.
inline RealMatrix reconstruct(const SemanticIdTable& codes, const CodebookSet& cb) {
    if (codes.m != cb.m) throw ShapeError("code table width does not match codebook digits");
    const auto y = detail::assemble(cb, codes);
    const std::size_t n = cb.padded_dim;
    std::vector<double> rt(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) rt[i * n + j] = cb.rotation[j * n + i];
    const auto full = detail::multiply(y, rt, n);
    RealMatrix out{codes.rows, cb.dim, std::vector<double>(codes.rows * cb.dim)};
    for (std::size_t r = 0; r < codes.rows; ++r)
        for (std::size_t c = 0; c < cb.dim; ++c) out(r, c) = full(r, c);
    return out;
}

// Mean squared reconstruction error per item: ||X - decode(encode(X))||_F^2 / |I|.
inline double quantization_error(const ItemEmbeddingMatrix& x, const CodebookSet& cb) {
    const auto xhat = reconstruct(encode_items(x, cb), cb);
    double s = 0.0;
    for (std::size_t r = 0; r < x.rows; ++r)
        for (std::size_t c = 0; c < x.dim; ++c) {
            const double d = double(x(r, c)) - xhat(r, c);
            s += d * d;
        }
    return x.rows ? s / double(x.rows) : 0.0;
}

// Alternates per-block k-means with an orthogonal Procrustes rotation update.
// Outer iterations after the first warm-start Lloyd from the previous
// codebooks, which keeps the error trace non-increasing.
inline OpqFit fit_opq(const ItemEmbeddingMatrix& x, const OpqOptions& opt) {
    if (opt.m == 0 || opt.M == 0) throw ConfigError("OPQ needs m >= 1 and M >= 1");
    if (opt.M > 65536) throw ConfigError("codebook size M must be <= 65536");
    if (opt.iters == 0) throw ConfigError("OPQ needs iters >= 1");
    if (opt.M > x.rows)
        throw ConfigError("codebook size M=" + std::to_string(opt.M) + " exceeds item count " + std::to_string(x.rows));

    OpqFit fit;
    auto& cb = fit.codebooks;
    cb.m = opt.m;
    cb.M = opt.M;
    cb.dim = x.dim;
    cb.padded_dim = (x.dim + opt.m - 1) / opt.m * opt.m;
    cb.sub_dim = cb.padded_dim / opt.m;
    cb.seed = opt.seed;
    const std::size_t n = cb.padded_dim;
    cb.rotation.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) cb.rotation[i * n + i] = 1.0;
    cb.codebooks.assign(opt.m * opt.M * cb.sub_dim, 0.0);

    const auto xp = detail::padded_copy(x, n);
    Rng rng(opt.seed);
    SemanticIdTable codes{x.rows, opt.m, std::vector<std::uint16_t>(x.rows * opt.m)};

    for (std::size_t outer = 0; outer < opt.iters; ++outer) {
        const auto rotated = detail::multiply(xp, cb.rotation, n);
        for (std::size_t j = 0; j < opt.m; ++j) {
            const auto block = detail::block_of(rotated, j, cb.sub_dim);
            std::vector<double> init;
            if (outer == 0) {
                init = kmeanspp_init(block, x.rows, cb.sub_dim, opt.M, rng);
            } else {
                init.assign(cb.centroid(j, 0), cb.centroid(j, 0) + opt.M * cb.sub_dim);
            }
            auto km = lloyd(block, x.rows, cb.sub_dim, opt.M, std::move(init), opt.lloyd_iters);
            std::copy(km.centroids.begin(), km.centroids.end(), cb.codebooks.begin() + j * opt.M * cb.sub_dim);
            for (std::size_t r = 0; r < x.rows; ++r) codes.codes[r * opt.m + j] = static_cast<std::uint16_t>(km.assign[r]);
        }
        if (opt.learn_rotation) {
            // argmin_R ||X R - Y||_F over orthogonal R: R = U V^T from X^T Y = U S V^T.
            const auto y = detail::assemble(cb, codes);
            Eigen::Map<const detail::RowMat> xm(xp.values.data(), Eigen::Index(x.rows), Eigen::Index(n));
            Eigen::Map<const detail::RowMat> ym(y.values.data(), Eigen::Index(x.rows), Eigen::Index(n));
            const detail::RowMat cross = xm.transpose() * ym;
            Eigen::JacobiSVD<detail::RowMat> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
            const detail::RowMat r = svd.matrixU() * svd.matrixV().transpose();
            Eigen::Map<detail::RowMat>(cb.rotation.data(), Eigen::Index(n), Eigen::Index(n)) = r;
        }
        fit.orthogonality_trace.push_back(detail::orthogonality_defect(cb.rotation, n));
        fit.error_trace.push_back(quantization_error(x, cb));
    }
    return fit;
}

inline CodebookSet fit_opq_codebooks(const ItemEmbeddingMatrix& x, const OpqOptions& opt) {
    return fit_opq(x, opt).codebooks;
}

// Number of unordered item pairs whose full code tuples coincide.
inline std::uint64_t code_collision_pairs(const SemanticIdTable& t) {
    std::unordered_map<std::string, std::uint64_t> groups;
    for (std::size_t r = 0; r < t.rows; ++r) {
        const auto row = t.row(r);
        ++groups[std::string(reinterpret_cast<const char*>(row.data()), row.size() * sizeof(std::uint16_t))];
    }
    std::uint64_t pairs = 0;
    for (const auto& [key, count] : groups) pairs += count * (count - 1) / 2;
    return pairs;
}

inline const std::string kCodebookMagic = "ACECB001";
inline const std::string kCodesMagic = "ACEIDS01";

// Codebook file: magic, u64 header length, JSON header, then the rotation and
// the codebooks as little-endian f32.
inline void save_codebooks(const CodebookSet& cb, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write " + path);
    const nlohmann::json header = {{"m", cb.m},       {"M", cb.M},
                                   {"D", cb.dim},     {"sub_dim", cb.sub_dim},
                                   {"padding", cb.padding()}, {"seed", cb.seed}};
    const auto text = header.dump();
    io::write_bytes(os, kCodebookMagic);
    io::write_le<std::uint64_t>(os, text.size());
    io::write_bytes(os, text);
    for (double v : cb.rotation) io::write_le<float>(os, static_cast<float>(v));
    for (double v : cb.codebooks) io::write_le<float>(os, static_cast<float>(v));
}

inline CodebookSet load_codebooks(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("missing codebook file: " + path);
    io::expect_magic(is, kCodebookMagic, "codebook file");
    const auto len = io::read_le<std::uint64_t>(is, "codebook header length");
    CodebookSet cb;
    try {
        const auto header = nlohmann::json::parse(io::read_bytes(is, len, "codebook header"));
        cb.m = header.at("m");
        cb.M = header.at("M");
        cb.dim = header.at("D");
        cb.sub_dim = header.at("sub_dim");
        cb.seed = header.at("seed");
        cb.padded_dim = cb.dim + header.at("padding").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad codebook header: ") + e.what());
    }
    if (cb.m == 0 || cb.sub_dim * cb.m != cb.padded_dim) throw FormatError("inconsistent codebook header");
    cb.rotation.resize(cb.padded_dim * cb.padded_dim);
    for (auto& v : cb.rotation) v = io::read_le<float>(is, "rotation");
    cb.codebooks.resize(cb.m * cb.M * cb.sub_dim);
    for (auto& v : cb.codebooks) v = io::read_le<float>(is, "codebooks");
    return cb;
}

inline void save_codes(const SemanticIdTable& t, std::size_t M, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write " + path);
    io::write_bytes(os, kCodesMagic);
    io::write_le<std::uint64_t>(os, t.rows);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.m));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(M));
    for (auto c : t.codes) io::write_le<std::uint16_t>(os, c);
}

struct LoadedCodes {
    SemanticIdTable table;
    std::size_t M = 0;
};

inline LoadedCodes load_codes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("missing semantic-id file: " + path);
    io::expect_magic(is, kCodesMagic, "semantic-id file");
    LoadedCodes out;
    out.table.rows = io::read_le<std::uint64_t>(is, "row count");
    out.table.m = io::read_le<std::uint32_t>(is, "digit count");
    out.M = io::read_le<std::uint32_t>(is, "codebook size");
    out.table.codes.resize(out.table.rows * out.table.m);
    for (auto& c : out.table.codes) {
        c = io::read_le<std::uint16_t>(is, "codes");
        if (c >= out.M) throw FormatError("code out of range in semantic-id file");
    }
    return out;
}

}  // namespace acerec

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "nasaudit/core/network.hpp"

namespace nasaudit {

enum class DataSource { synthetic, cifar10_binary };

inline const char* to_string(DataSource s) { return s == DataSource::synthetic ? "synthetic" : "cifar10_binary"; }

inline DataSource data_source_from_string(const std::string& s) {
    if (s == "synthetic") return DataSource::synthetic;
    if (s == "cifar10_binary") return DataSource::cifar10_binary;
    throw ConfigError("unknown dataset source '" + s + "'");
}

struct DatasetSpec {
    DataSource source = DataSource::synthetic;
    /// CIFAR-10 binary batch files (data_batch_*.bin) or a directory holding them.
    std::vector<std::string> paths;
    std::size_t resolution = 16;
    std::size_t channels = 3;
    std::size_t classes = 10;
    std::size_t per_class = 100;
    double noise = 0.6;
    /// Largest random spatial shift in pixels (applied per example, wrapping around).
    std::size_t max_shift = 2;
    std::uint64_t seed = 0;
    double train_fraction = 0.8;
    /// Caps the number of loaded binary records (0 = all).
    std::size_t limit = 0;

    void validate() const {
        if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train fraction must be in (0, 1)");
        if (source == DataSource::synthetic) {
            if (resolution == 0 || channels == 0 || classes < 2 || per_class == 0)
                throw ConfigError("synthetic dataset needs resolution, channels, per_class >= 1 and classes >= 2");
            if (!(noise >= 0.0)) throw ConfigError("noise scale must be non-negative");
        } else if (paths.empty()) {
            throw ConfigError("cifar10_binary dataset needs at least one path");
        }
    }
};

inline void to_json(nlohmann::ordered_json& j, const DatasetSpec& d) {
    j = nlohmann::ordered_json{{"source", to_string(d.source)},
                               {"paths", d.paths},
                               {"resolution", d.resolution},
                               {"channels", d.channels},
                               {"classes", d.classes},
                               {"per_class", d.per_class},
                               {"noise", d.noise},
                               {"max_shift", d.max_shift},
                               {"seed", d.seed},
                               {"train_fraction", d.train_fraction},
                               {"limit", d.limit}};
}

inline void from_json(const nlohmann::ordered_json& j, DatasetSpec& d) {
    DatasetSpec def;
    d.source = data_source_from_string(j.value("source", std::string(to_string(def.source))));
    d.paths = j.value("paths", def.paths);
    d.resolution = j.value("resolution", def.resolution);
    d.channels = j.value("channels", def.channels);
    d.classes = j.value("classes", def.classes);
    d.per_class = j.value("per_class", def.per_class);
    d.noise = j.value("noise", def.noise);
    d.max_shift = j.value("max_shift", def.max_shift);
    d.seed = j.value("seed", def.seed);
    d.train_fraction = j.value("train_fraction", def.train_fraction);
    d.limit = j.value("limit", def.limit);
}

/// Examples stored NCHW in one flat buffer.
struct Examples {
    std::size_t channels = 0, height = 0, width = 0;
    std::vector<float> x;
    std::vector<int> y;

    std::size_t size() const { return y.size(); }
    std::size_t example_size() const { return channels * height * width; }
};

struct Dataset {
    Examples train;
    Examples valid;
    std::size_t classes = 0;
    std::vector<double> mean;  // per channel, from the training split
    std::vector<double> stddev;
};

inline constexpr std::size_t kCifarRecord = 3073;

/// Parses CIFAR-10 binary records (1 label byte + 3072 channel-major pixel bytes).
inline Examples parse_cifar10(const std::string& bytes, const std::string& name = "<buffer>", std::size_t limit = 0) {
    if (bytes.size() % kCifarRecord != 0)
        throw ConfigError(name + ": truncated record at byte offset " +
                          std::to_string(bytes.size() - bytes.size() % kCifarRecord) + " (file size " +
                          std::to_string(bytes.size()) + " is not a multiple of 3073)");
    Examples e;
    e.channels = 3;
    e.height = e.width = 32;
    std::size_t n = bytes.size() / kCifarRecord;
    if (limit) n = std::min(n, limit);
    e.x.reserve(n * 3072);
    e.y.reserve(n);
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t off = r * kCifarRecord;
        const auto label = static_cast<unsigned char>(bytes[off]);
        if (label > 9)
            throw ConfigError(name + ": invalid label " + std::to_string(label) + " at byte offset " +
                              std::to_string(off));
        e.y.push_back(label);
        for (std::size_t k = 1; k < kCifarRecord; ++k)
            e.x.push_back(static_cast<float>(static_cast<unsigned char>(bytes[off + k])) / 255.0f);
    }
    return e;
}

inline Examples load_cifar10(const std::vector<std::string>& paths, std::size_t limit = 0) {
    std::vector<std::filesystem::path> files;
    for (const auto& p : paths) {
        if (std::filesystem::is_directory(p)) {
            std::vector<std::filesystem::path> found;
            for (const auto& f : std::filesystem::directory_iterator(p))
                if (f.path().filename().string().rfind("data_batch_", 0) == 0 && f.path().extension() == ".bin")
                    found.push_back(f.path());
            std::sort(found.begin(), found.end());
            files.insert(files.end(), found.begin(), found.end());
        } else {
            files.emplace_back(p);
        }
    }
    if (files.empty()) throw ConfigError("no CIFAR-10 binary files found");
    Examples all;
    for (const auto& f : files) {
        std::ifstream in(f, std::ios::binary);
        if (!in) throw ConfigError("cannot open " + f.string());
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        auto part = parse_cifar10(bytes, f.string(), limit ? limit - all.size() : 0);
        all.channels = part.channels;
        all.height = part.height;
        all.width = part.width;
        all.x.insert(all.x.end(), part.x.begin(), part.x.end());
        all.y.insert(all.y.end(), part.y.begin(), part.y.end());
        if (limit && all.size() >= limit) break;
    }
    return all;
}

/// Class-conditional Gaussian prototypes, smoothed so they carry spatial structure, plus
/// per-example Gaussian noise and a random cyclic shift.
inline Examples make_synthetic(const DatasetSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const std::size_t c = spec.channels, h = spec.resolution, w = spec.resolution, n = c * h * w;
    std::vector<std::vector<double>> proto(spec.classes, std::vector<double>(n));
    for (auto& p : proto) {
        std::vector<double> raw(n);
        for (auto& v : raw) v = normal(rng);
        // 3x3 cyclic box blur
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) {
                    double s = 0;
                    for (std::size_t di = 0; di < 3; ++di)
                        for (std::size_t dj = 0; dj < 3; ++dj)
                            s += raw[ch * h * w + ((i + h + di - 1) % h) * w + (j + w + dj - 1) % w];
                    p[ch * h * w + i * w + j] = s / 3.0;
                }
    }
    Examples e;
    e.channels = c;
    e.height = h;
    e.width = w;
    const std::size_t total = spec.classes * spec.per_class;
    e.x.reserve(total * n);
    std::uniform_int_distribution<long> shift(-static_cast<long>(spec.max_shift), static_cast<long>(spec.max_shift));
    for (std::size_t k = 0; k < total; ++k) {
        const std::size_t cls = k % spec.classes;
        const long si = shift(rng), sj = shift(rng);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) {
                    const auto ii = static_cast<std::size_t>((static_cast<long>(i + h) + si) % static_cast<long>(h));
                    const auto jj = static_cast<std::size_t>((static_cast<long>(j + w) + sj) % static_cast<long>(w));
                    e.x.push_back(static_cast<float>(proto[cls][ch * h * w + ii * w + jj] + spec.noise * normal(rng)));
                }
        e.y.push_back(static_cast<int>(cls));
    }
    return e;
}

namespace detail {

inline Examples take(const Examples& e, const std::vector<std::size_t>& idx, std::size_t lo, std::size_t hi) {
    Examples out;
    out.channels = e.channels;
    out.height = e.height;
    out.width = e.width;
    const std::size_t n = e.example_size();
    out.x.reserve((hi - lo) * n);
    for (std::size_t k = lo; k < hi; ++k) {
        const auto src = e.x.begin() + static_cast<std::ptrdiff_t>(idx[k] * n);
        out.x.insert(out.x.end(), src, src + static_cast<std::ptrdiff_t>(n));
        out.y.push_back(e.y[idx[k]]);
    }
    return out;
}

}  // namespace detail

/// Seeded shuffle, train/valid split and per-channel normalization with training statistics.
inline Dataset ingest(const DatasetSpec& spec) {
    spec.validate();
    Examples all = spec.source == DataSource::synthetic ? make_synthetic(spec) : load_cifar10(spec.paths, spec.limit);
    if (all.size() < 2) throw ConfigError("dataset needs at least two examples");
    std::vector<std::size_t> idx(all.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(spec.seed ^ 0x5eedULL);
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * static_cast<double>(all.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, all.size() - 1);
    Dataset d;
    d.classes = spec.source == DataSource::synthetic ? spec.classes : 10;
    d.train = detail::take(all, idx, 0, n_train);
    d.valid = detail::take(all, idx, n_train, all.size());
    const std::size_t c = all.channels, hw = all.height * all.width;
    d.mean.assign(c, 0.0);
    d.stddev.assign(c, 0.0);
    for (std::size_t k = 0; k < d.train.size(); ++k)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) d.mean[ch] += d.train.x[(k * c + ch) * hw + p];
    const double cnt = static_cast<double>(d.train.size() * hw);
    for (auto& m : d.mean) m /= cnt;
    for (std::size_t k = 0; k < d.train.size(); ++k)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) {
                const double v = d.train.x[(k * c + ch) * hw + p] - d.mean[ch];
                d.stddev[ch] += v * v;
            }
    for (auto& s : d.stddev) s = std::max(std::sqrt(s / cnt), 1e-8);
    for (auto* part : {&d.train, &d.valid})
        for (std::size_t k = 0; k < part->size(); ++k)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t p = 0; p < hw; ++p) {
                    auto& v = part->x[(k * c + ch) * hw + p];
                    v = static_cast<float>((v - d.mean[ch]) / d.stddev[ch]);
                }
    return d;
}

/// Mini-batches in a seeded order; `drop_last` discards a short final batch.
template <std::floating_point T>
std::vector<Batch<T>> make_batches(const Examples& e, std::size_t batch_size, std::uint64_t seed, bool shuffle = true,
                                   bool drop_last = false) {
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    std::vector<std::size_t> idx(e.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (shuffle) {
        std::mt19937_64 rng(seed);
        std::shuffle(idx.begin(), idx.end(), rng);
    }
    const std::size_t n = e.example_size();
    std::vector<Batch<T>> out;
    for (std::size_t lo = 0; lo < idx.size(); lo += batch_size) {
        const std::size_t hi = std::min(idx.size(), lo + batch_size);
        if (drop_last && hi - lo < batch_size) break;
        Batch<T> b{Tensor<T>({hi - lo, e.channels, e.height, e.width}), {}};
        for (std::size_t k = lo; k < hi; ++k) {
            for (std::size_t q = 0; q < n; ++q) b.x.data[(k - lo) * n + q] = static_cast<T>(e.x[idx[k] * n + q]);
            b.y.push_back(e.y[idx[k]]);
        }
        out.push_back(std::move(b));
    }
    return out;
}

/// FNV-1a over labels and raw float bytes; a cheap determinism fingerprint.
template <std::floating_point T>
std::uint64_t batch_checksum(const Batch<T>& b) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&](const void* p, std::size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= c[i];
            h *= 1099511628211ULL;
        }
    };
    mix(b.x.data.data(), b.x.data.size() * sizeof(T));
    mix(b.y.data(), b.y.size() * sizeof(int));
    return h;
}

}  // namespace nasaudit

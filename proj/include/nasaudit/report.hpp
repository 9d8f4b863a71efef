#pragma once

#include <openssl/evp.h>

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "nasaudit/core/checkpoint.hpp"

namespace nasaudit {

/// Tab-separated table with a one-line header.
struct Table {
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;

    void add(std::vector<std::string> row) {
        if (row.size() != columns.size())
            throw ConfigError("row has " + std::to_string(row.size()) + " fields, table has " +
                              std::to_string(columns.size()) + " columns");
        rows.push_back(std::move(row));
    }

    std::size_t column(const std::string& name) const {
        for (std::size_t i = 0; i < columns.size(); ++i)
            if (columns[i] == name) return i;
        throw ConfigError("table has no column '" + name + "'");
    }
};

/// Shortest text that parses back to the same double; non-finite values as nan/inf/-inf.
inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

inline double parse_double(const std::string& s) {
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    std::size_t used = 0;
    double v = 0;
    try {
        v = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != s.size() || s.empty()) throw ConfigError("not a number: '" + s + "'");
    return v;
}

inline std::string to_tsv(const Table& t) {
    auto check = [](const std::string& f) {
        if (f.find_first_of("\t\n\r") != std::string::npos) throw ConfigError("field contains a tab or newline: " + f);
    };
    std::string out;
    auto line = [&](const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) {
            check(fields[i]);
            if (i) out += '\t';
            out += fields[i];
        }
        out += '\n';
    };
    line(t.columns);
    for (const auto& r : t.rows) line(r);
    return out;
}

inline Table parse_tsv(const std::string& text, const std::string& name = "<tsv>") {
    Table t;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    auto split = [](const std::string& l) {
        std::vector<std::string> f;
        std::size_t start = 0;
        for (;;) {
            auto tab = l.find('\t', start);
            f.push_back(l.substr(start, tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        return f;
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno == 1) {
            t.columns = split(line);
            continue;
        }
        auto f = split(line);
        if (f.size() != t.columns.size())
            throw ConfigError(name + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.columns.size()) +
                              " fields, got " + std::to_string(f.size()));
        t.rows.push_back(std::move(f));
    }
    if (lineno == 0) throw ConfigError(name + ": missing header");
    return t;
}

/// Column layout of every artifact kind.
inline const std::map<std::string, std::vector<std::string>>& report_schemas() {
    static const std::map<std::string, std::vector<std::string>> s{
        {"oracle", {"genotype", "seed", "accuracy", "status", "config_hash"}},
        {"scores", {"genotype", "estimator", "seed", "epoch", "value"}},
        {"criteria", {"estimator", "seed", "epoch", "criterion", "K", "value"}},
        {"ranking_difference", {"estimator", "seed", "genotype", "gt_rank", "est_rank", "rd"}},
        {"complexity_bias", {"estimator", "seed", "key", "group", "size", "mean_rd", "kd"}},
        {"mutation", {"estimator", "seed", "from_op", "to_op", "group", "pairs", "missing", "gt_increase",
                      "os_acc_increase", "os_loss_decrease"}},
        {"pareto", {"estimator", "seed", "direction", "key", "level", "genotype"}},
        {"forgetting", {"seed", "epoch", "step", "genotype", "acc1", "acc2", "fv"}},
        {"gradient_similarity", {"seed", "epoch", "layer", "pairs", "skipped_zero", "mean", "histogram"}},
        {"epochs", {"seed", "epoch", "mean_loss", "lr", "steps", "skipped"}},
    };
    return s;
}

inline void validate_schema(const Table& t, const std::string& schema) {
    auto it = report_schemas().find(schema);
    if (it == report_schemas().end()) throw ConfigError("unknown report schema '" + schema + "'");
    if (t.columns != it->second) throw ConfigError("table columns do not match schema '" + schema + "'");
    for (const auto& r : t.rows)
        if (r.size() != t.columns.size()) throw ConfigError("ragged row in '" + schema + "' table");
}

inline std::string sha1_hex(std::string_view bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha1(), nullptr) != 1)
        throw Error("SHA-1 digest failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

/// Git blob id of `bytes` (same as `git hash-object`).
inline std::string content_address(std::string_view bytes) {
    std::string buf = "blob " + std::to_string(bytes.size());
    buf.push_back('\0');
    buf.append(bytes);
    return sha1_hex(buf);
}

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct ArtifactMeta {
    std::string schema;
    std::string config_hash;
    std::vector<std::uint64_t> seeds;
    std::string created;
    std::string content_address;
    std::size_t rows = 0;

    nlohmann::ordered_json to_json() const {
        return {{"schema", schema},
                {"config_hash", config_hash},
                {"seeds", seeds},
                {"created", created},
                {"content_address", content_address},
                {"rows", rows},
                {"columns", report_schemas().at(schema)}};
    }
};

inline std::filesystem::path meta_path(const std::filesystem::path& p) {
    auto m = p;
    m += ".meta.json";
    return m;
}

/// Writes the table and then its sidecar, both atomically; the sidecar marks completion.
inline ArtifactMeta write_artifact(const std::filesystem::path& path, const Table& t, const std::string& schema,
                                   const std::string& config_hash, std::vector<std::uint64_t> seeds = {}) {
    validate_schema(t, schema);
    const std::string text = to_tsv(t);
    ArtifactMeta m{schema, config_hash, std::move(seeds), utc_timestamp(), content_address(text), t.rows.size()};
    atomic_write(path, text);
    atomic_write(meta_path(path), m.to_json().dump(2) + "\n");
    return m;
}

inline std::optional<ArtifactMeta> read_meta(const std::filesystem::path& path) {
    if (!std::filesystem::exists(meta_path(path))) return std::nullopt;
    auto j = nlohmann::json::parse(read_file(meta_path(path)));
    ArtifactMeta m;
    m.schema = j.at("schema").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    m.created = j.at("created").get<std::string>();
    m.content_address = j.at("content_address").get<std::string>();
    m.rows = j.at("rows").get<std::size_t>();
    return m;
}

/// True when the artifact and its sidecar exist, the sidecar names `config_hash` and the file
/// content still matches its recorded address.
inline bool artifact_complete(const std::filesystem::path& path, const std::string& config_hash) {
    if (!std::filesystem::exists(path)) return false;
    auto m = read_meta(path);
    return m && m->config_hash == config_hash && m->content_address == content_address(read_file(path));
}

inline Table read_artifact(const std::filesystem::path& path, const std::string& schema) {
    Table t = parse_tsv(read_file(path), path.string());
    validate_schema(t, schema);
    return t;
}

}  // namespace nasaudit

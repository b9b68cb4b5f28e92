#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <fcntl.h>
#include <unistd.h>

#include <openssl/evp.h>

#include "json.hpp"

#include "rkinn/error.hpp"
#include "rkinn/linalg.hpp"

namespace rkinn::io {

namespace fs = std::filesystem;

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline double parse_double(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\r' || s.back() == '\t')) s.remove_suffix(1);
    if (s.empty()) throw ConfigError("csv: empty numeric field");
    if (s == "nan" || s == "NaN") return std::numeric_limits<double>::quiet_NaN();
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size())
        throw ConfigError("csv: cannot parse '" + std::string(s) + "' as a number");
    return v;
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Writes through a temporary next to the target, then renames.
inline void write_file(const fs::path& path, std::string_view content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw std::runtime_error("write failed for '" + tmp.string() + "'");
    }
    fs::rename(tmp, path);
}

inline nlohmann::json read_json(const fs::path& path) {
    try {
        return nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("'" + path.string() + "': " + e.what());
    }
}

inline void write_json(const fs::path& path, const nlohmann::json& j) { write_file(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// CSV

struct Table {
    std::vector<std::string> header;
    Matrix values;  // rows x header.size()

    std::size_t column(std::string_view name) const {
        for (std::size_t k = 0; k < header.size(); ++k)
            if (header[k] == name) return k;
        throw ConfigError("csv: no column '" + std::string(name) + "'");
    }
    Vector col(std::string_view name) const {
        const std::size_t k = column(name);
        Vector v(values.rows());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = values(i, k);
        return v;
    }
};

inline std::string csv_row(std::span<const double> v) {
    std::string s;
    for (std::size_t k = 0; k < v.size(); ++k) {
        if (k) s += ',';
        s += format_double(v[k]);
    }
    s += '\n';
    return s;
}

inline std::string csv_header(const std::vector<std::string>& h) {
    std::string s;
    for (std::size_t k = 0; k < h.size(); ++k) {
        if (k) s += ',';
        s += h[k];
    }
    s += '\n';
    return s;
}

inline std::string to_csv(const Table& t) {
    detail::require(t.values.cols() == t.header.size() || t.values.rows() == 0, "csv: header width mismatch");
    std::string s = csv_header(t.header);
    for (std::size_t i = 0; i < t.values.rows(); ++i) s += csv_row(t.values.row(i));
    return s;
}

inline void write_csv(const fs::path& path, const Table& t) { write_file(path, to_csv(t)); }

inline std::vector<std::string> split(std::string_view line, char sep = ',') {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        const auto pos = line.find(sep, start);
        out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    for (auto& s : out)
        if (!s.empty() && s.back() == '\r') s.pop_back();
    return out;
}

/// Numeric CSV with a header row. Blank lines are skipped.
inline Table parse_csv(std::string_view text, const std::string& what = "csv") {
    Table t;
    std::vector<double> flat;
    std::size_t rows = 0;
    bool first = true;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        const std::string_view line = text.substr(pos, nl - pos);
        pos = nl + 1;
        if (line.empty() || line == "\r") {
            if (nl == text.size()) break;
            continue;
        }
        auto fields = split(line);
        if (first) {
            t.header = std::move(fields);
            first = false;
            continue;
        }
        if (fields.size() != t.header.size())
            throw ConfigError(what + ": row " + std::to_string(rows + 1) + " has " + std::to_string(fields.size()) +
                              " fields, header has " + std::to_string(t.header.size()));
        for (const auto& f : fields) flat.push_back(parse_double(f));
        ++rows;
    }
    if (first) throw ConfigError(what + ": empty file");
    t.values = Matrix(rows, t.header.size());
    std::copy(flat.begin(), flat.end(), t.values.storage().begin());
    return t;
}

inline Table read_csv(const fs::path& path) { return parse_csv(read_file(path), path.string()); }

// ---------------------------------------------------------------------------
// Checksums

inline std::string sha256_hex(std::string_view data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256 failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string s;
    for (unsigned int i = 0; i < len; ++i) {
        s += hex[md[i] >> 4];
        s += hex[md[i] & 15];
    }
    return s;
}

inline std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

// ---------------------------------------------------------------------------
// Run-directory lock

/// Exclusive lock on a run directory; the lock file is created with
/// O_EXCL and removed on destruction.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
        fs::create_directories(dir);
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw ConfigError("run directory '" + dir.string() + "' is locked by another process (remove " +
                              path_.string() + " if stale)");
        const std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] auto n = ::write(fd_, pid.data(), pid.size());
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;
    ~DirLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            std::error_code ec;
            fs::remove(path_, ec);
        }
    }

private:
    fs::path path_;
    int fd_ = -1;
};

}  // namespace rkinn::io

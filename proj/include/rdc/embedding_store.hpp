#pragma once

#include <Eigen/Core>

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "rdc/errors.hpp"

namespace rdc {

/// A labelled collection of feature vectors; the gallery episodes are drawn
/// from. Immutable after construction and safe to share across threads.
struct EmbeddingSet {
    Eigen::MatrixXd vectors;                                   // n x m
    std::vector<std::int64_t> labels;                          // per row
    std::vector<std::string> ids;                              // per row, unique
    std::map<std::int64_t, std::vector<Eigen::Index>> class_index;

    Eigen::Index rows() const { return vectors.rows(); }
    Eigen::Index dim() const { return vectors.cols(); }
};

enum class FileFormat { csv, packed_binary };

namespace detail {

inline void check_finite(const Eigen::MatrixXd& vectors) {
    for (Eigen::Index r = 0; r < vectors.rows(); ++r) {
        if (!vectors.row(r).allFinite()) {
            throw NonFiniteValue("non-finite feature value in row " + std::to_string(r));
        }
    }
}

inline std::map<std::int64_t, std::vector<Eigen::Index>>
build_class_index(const std::vector<std::int64_t>& labels) {
    std::map<std::int64_t, std::vector<Eigen::Index>> index;
    for (std::size_t r = 0; r < labels.size(); ++r) {
        index[labels[r]].push_back(static_cast<Eigen::Index>(r));
    }
    return index;
}

inline double parse_double(std::string_view text, const char* what, std::size_t row) {
    double value = 0.0;
    const char* begin = text.data();
    const char* end = begin + text.size();
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end) {
        throw MalformedHeader(std::string("cannot parse ") + what + " in data row " +
                              std::to_string(row));
    }
    return value;
}

inline std::int64_t parse_label(std::string_view text, std::size_t row) {
    std::int64_t value = 0;
    const char* begin = text.data();
    const char* end = begin + text.size();
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end) {
        throw MalformedHeader("cannot parse label in data row " + std::to_string(row));
    }
    if (value < 0) {
        throw MalformedHeader("negative label in data row " + std::to_string(row));
    }
    return value;
}

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
    return fields;
}

// Little-endian scalar IO, independent of host byte order.
inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_i64(std::string& out, std::int64_t v) {
    const auto u = static_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& out, float v) {
    std::uint32_t bits = 0;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct ByteReader {
    const std::uint8_t* data;
    std::size_t size;
    std::size_t pos = 0;

    bool exhausted() const { return pos >= size; }

    void require(std::size_t count, const char* what) const {
        if (size - pos < count) {
            throw MalformedHeader(std::string("truncated packed-binary file while reading ") + what);
        }
    }
    std::uint32_t u32(const char* what) {
        require(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::int64_t i64(const char* what) {
        require(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data[pos + i]) << (8 * i);
        pos += 8;
        return static_cast<std::int64_t>(v);
    }
    float f32(const char* what) {
        const std::uint32_t bits = u32(what);
        float v = 0.0f;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string bytes(std::size_t count, const char* what) {
        require(count, what);
        std::string v(reinterpret_cast<const char*>(data + pos), count);
        pos += count;
        return v;
    }
};

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open file: " + path);
    std::string contents((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return contents;
}

}  // namespace detail

/// Builds a validated set from parallel row data. Throws if any invariant
/// fails: finite entries, matching lengths, unique ids.
inline EmbeddingSet make_embedding_set(Eigen::MatrixXd vectors,
                                       std::vector<std::int64_t> labels,
                                       std::vector<std::string> ids) {
    const auto n = static_cast<std::size_t>(vectors.rows());
    if (labels.size() != n || ids.size() != n) {
        throw ShapeMismatch("labels/ids length does not match vector row count");
    }
    detail::check_finite(vectors);
    std::unordered_set<std::string_view> seen;
    seen.reserve(n);
    for (std::size_t r = 0; r < n; ++r) {
        if (!seen.insert(ids[r]).second) {
            throw DuplicateId("duplicate id '" + ids[r] + "' at row " + std::to_string(r));
        }
    }
    EmbeddingSet set;
    set.vectors = std::move(vectors);
    set.labels = std::move(labels);
    set.ids = std::move(ids);
    set.class_index = detail::build_class_index(set.labels);
    return set;
}

/// Re-checks every EmbeddingSet invariant. Loaders produce valid sets by
/// construction; this guards hand-assembled ones.
inline void validate(const EmbeddingSet& set) {
    const auto n = static_cast<std::size_t>(set.rows());
    if (set.labels.size() != n || set.ids.size() != n) {
        throw ShapeMismatch("labels/ids length does not match vector row count");
    }
    detail::check_finite(set.vectors);
    std::unordered_set<std::string_view> seen;
    for (std::size_t r = 0; r < n; ++r) {
        if (!seen.insert(set.ids[r]).second) {
            throw DuplicateId("duplicate id '" + set.ids[r] + "' at row " + std::to_string(r));
        }
    }
    for (const auto& [label, rows] : set.class_index) {
        if (rows.empty()) {
            throw EmptyClass("class " + std::to_string(label) + " has zero rows");
        }
        for (Eigen::Index r : rows) {
            if (r < 0 || r >= set.rows() || set.labels[static_cast<std::size_t>(r)] != label) {
                throw ShapeMismatch("class_index entry disagrees with labels");
            }
        }
    }
    for (std::size_t r = 0; r < n; ++r) {
        if (!set.class_index.count(set.labels[r])) {
            throw EmptyClass("label " + std::to_string(set.labels[r]) +
                             " missing from class_index");
        }
    }
}

inline EmbeddingSet load_embeddings_csv(const std::string& path) {
    const std::string contents = detail::read_file(path);
    std::vector<std::string_view> lines;
    {
        std::string_view rest(contents);
        while (!rest.empty()) {
            std::size_t nl = rest.find('\n');
            std::string_view line = (nl == std::string_view::npos) ? rest : rest.substr(0, nl);
            if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
            if (!line.empty()) lines.push_back(line);
            if (nl == std::string_view::npos) break;
            rest.remove_prefix(nl + 1);
        }
    }
    if (lines.empty()) throw MalformedHeader("empty CSV file: " + path);

    const auto header = detail::split_csv_line(lines[0]);
    if (header.size() < 3 || header[0] != "id" || header[1] != "label") {
        throw MalformedHeader("CSV header must be 'id,label,f0,...': " + path);
    }
    const std::size_t m = header.size() - 2;

    const std::size_t n = lines.size() - 1;
    Eigen::MatrixXd vectors(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
    std::vector<std::int64_t> labels(n);
    std::vector<std::string> ids(n);

    for (std::size_t r = 0; r < n; ++r) {
        const auto fields = detail::split_csv_line(lines[r + 1]);
        if (fields.size() != m + 2) {
            throw MalformedHeader("data row " + std::to_string(r) + " has " +
                                  std::to_string(fields.size()) + " fields, expected " +
                                  std::to_string(m + 2));
        }
        ids[r] = std::string(fields[0]);
        labels[r] = detail::parse_label(fields[1], r);
        for (std::size_t c = 0; c < m; ++c) {
            vectors(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                detail::parse_double(fields[c + 2], "feature", r);
        }
    }
    return make_embedding_set(std::move(vectors), std::move(labels), std::move(ids));
}

inline EmbeddingSet load_embeddings_packed(const std::string& path) {
    const std::string contents = detail::read_file(path);
    detail::ByteReader reader{reinterpret_cast<const std::uint8_t*>(contents.data()),
                              contents.size()};

    const std::string magic = reader.bytes(4, "magic");
    if (magic != "RDCE") throw MalformedHeader("bad magic bytes in " + path);
    const std::uint32_t version = reader.u32("version");
    if (version != 1) {
        throw MalformedHeader("unsupported packed-binary version " + std::to_string(version));
    }
    const std::uint32_t n = reader.u32("row count");
    const std::uint32_t m = reader.u32("dimension");

    Eigen::MatrixXd vectors(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
    std::vector<std::int64_t> labels(n);
    std::vector<std::string> ids(n);

    for (std::uint32_t r = 0; r < n; ++r) {
        const std::uint32_t id_len = reader.u32("id length");
        ids[r] = reader.bytes(id_len, "id bytes");
        labels[r] = reader.i64("label");
        if (labels[r] < 0) {
            throw MalformedHeader("negative label in record " + std::to_string(r));
        }
        for (std::uint32_t c = 0; c < m; ++c) {
            vectors(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                static_cast<double>(reader.f32("feature"));
        }
    }
    if (!reader.exhausted()) {
        throw MalformedHeader("trailing bytes after declared payload in " + path);
    }
    return make_embedding_set(std::move(vectors), std::move(labels), std::move(ids));
}

inline EmbeddingSet load_embeddings(const std::string& path, FileFormat format) {
    return format == FileFormat::csv ? load_embeddings_csv(path)
                                     : load_embeddings_packed(path);
}

inline void save_embeddings(const EmbeddingSet& set, const std::string& path,
                            FileFormat format) {
    std::string out;
    if (format == FileFormat::csv) {
        out = "id,label";
        for (Eigen::Index c = 0; c < set.dim(); ++c) out += ",f" + std::to_string(c);
        out += "\n";
        char buf[64];
        for (Eigen::Index r = 0; r < set.rows(); ++r) {
            out += set.ids[static_cast<std::size_t>(r)];
            out += "," + std::to_string(set.labels[static_cast<std::size_t>(r)]);
            for (Eigen::Index c = 0; c < set.dim(); ++c) {
                std::snprintf(buf, sizeof(buf), ",%.17g", set.vectors(r, c));
                out += buf;
            }
            out += "\n";
        }
    } else {
        out = "RDCE";
        detail::put_u32(out, 1);
        detail::put_u32(out, static_cast<std::uint32_t>(set.rows()));
        detail::put_u32(out, static_cast<std::uint32_t>(set.dim()));
        for (Eigen::Index r = 0; r < set.rows(); ++r) {
            const auto& id = set.ids[static_cast<std::size_t>(r)];
            detail::put_u32(out, static_cast<std::uint32_t>(id.size()));
            out += id;
            detail::put_i64(out, set.labels[static_cast<std::size_t>(r)]);
            for (Eigen::Index c = 0; c < set.dim(); ++c) {
                detail::put_f32(out, static_cast<float>(set.vectors(r, c)));
            }
        }
    }
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw Error("cannot open file for writing: " + path);
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
}

/// Row-wise l2 normalization of a feature matrix; rejects zero rows.
inline Eigen::MatrixXd l2_normalized_rows(const Eigen::MatrixXd& features) {
    Eigen::MatrixXd out(features.rows(), features.cols());
    for (Eigen::Index r = 0; r < features.rows(); ++r) {
        const double norm = features.row(r).norm();
        if (norm == 0.0) {
            throw ZeroVector("zero vector at row " + std::to_string(r));
        }
        out.row(r) = features.row(r) / norm;
    }
    return out;
}

/// Returns a copy of the set with every row scaled to unit Euclidean norm.
inline EmbeddingSet l2_normalize(const EmbeddingSet& set) {
    EmbeddingSet out = set;
    out.vectors = l2_normalized_rows(set.vectors);
    return out;
}

}  // namespace rdc

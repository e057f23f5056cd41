// Copyright (c) 2026, mosld contributors
// SPDX-License-Identifier: Apache-2.0

#include "mosld/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <iterator>

#include "mosld/error.hpp"

namespace mosld {
namespace {

constexpr std::size_t kMagicLen = 6;

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
}

void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

class Reader {
public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    [[nodiscard]] bool done() const { return pos_ == bytes_.size(); }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += 8;
        return v;
    }

    double f64() { return std::bit_cast<double>(u64()); }

    std::string str(std::uint64_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

private:
    void need(std::uint64_t n) const {
        if (n > bytes_.size() - pos_) {
            throw DataError("checkpoint truncated at byte " + std::to_string(pos_));
        }
    }

    const std::string& bytes_;
    std::size_t pos_ = kMagicLen;
};

}  // namespace

TensorRecord TensorRecord::from_matrix(std::string name, const Matrix& m) {
    return TensorRecord{std::move(name), {m.rows(), m.cols()}, std::vector<double>(m.data().begin(), m.data().end())};
}

Matrix TensorRecord::to_matrix() const {
    if (dims.size() != 2) {
        throw DataError("tensor '" + name + "' has rank " + std::to_string(dims.size()) + ", expected 2");
    }
    return Matrix(dims[0], dims[1], data);
}

std::string encode_checkpoint(std::span<const TensorRecord> records, const CheckpointMeta& meta) {
    std::string out(kCheckpointMagic, kMagicLen);
    put_u64(out, meta.size());
    for (const auto& [key, value] : meta) {
        put_u64(out, key.size());
        out += key;
        put_u64(out, value.size());
        out += value;
    }
    for (const TensorRecord& r : records) {
        std::uint64_t count = 1;
        for (auto d : r.dims) {
            count *= d;
        }
        if (count != r.data.size()) {
            throw InternalError("tensor '" + r.name + "' payload does not match its dims");
        }
        put_u64(out, r.name.size());
        out += r.name;
        put_u64(out, r.dims.size());
        for (auto d : r.dims) {
            put_u64(out, d);
        }
        for (double v : r.data) {
            put_f64(out, v);
        }
    }
    return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
    if (bytes.size() < kMagicLen || bytes.compare(0, kMagicLen, kCheckpointMagic) != 0) {
        throw DataError("not a checkpoint: missing MOSLD1 magic");
    }
    Reader in(bytes);
    Checkpoint ck;
    const std::uint64_t n_meta = in.u64();
    for (std::uint64_t i = 0; i < n_meta; ++i) {
        std::string key = in.str(in.u64());
        ck.meta[std::move(key)] = in.str(in.u64());
    }
    std::vector<TensorRecord>& records = ck.tensors;
    while (!in.done()) {
        TensorRecord r;
        r.name = in.str(in.u64());
        const std::uint64_t rank = in.u64();
        if (rank > 8) {
            throw DataError("tensor '" + r.name + "' claims rank " + std::to_string(rank));
        }
        std::uint64_t count = 1;
        for (std::uint64_t i = 0; i < rank; ++i) {
            r.dims.push_back(in.u64());
            count *= r.dims.back();
        }
        if (count > bytes.size()) {
            throw DataError("tensor '" + r.name + "' payload larger than file");
        }
        r.data.reserve(count);
        for (std::uint64_t i = 0; i < count; ++i) {
            r.data.push_back(in.f64());
        }
        records.push_back(std::move(r));
    }
    return ck;
}

void write_checkpoint(const std::filesystem::path& path, std::span<const TensorRecord> records,
                      const CheckpointMeta& meta) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw MissingArtifactError("cannot open " + path.string() + " for writing");
    }
    const std::string bytes = encode_checkpoint(records, meta);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw MissingArtifactError("checkpoint not found: " + path.string());
    }
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

}  // namespace mosld

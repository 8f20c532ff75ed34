// SPDX-License-Identifier: Apache-2.0
#include "lamer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "lamer/errors.hpp"

namespace lamer {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

Tensor Tensor::from_matrix(std::string name, const Matrix& m, Dtype dtype) {
    Tensor t;
    t.name = std::move(name);
    t.dtype = dtype;
    t.dims = {m.rows(), m.cols()};
    t.values.assign(m.data().begin(), m.data().end());
    if (dtype == Dtype::F32)
        for (double& v : t.values) v = static_cast<double>(static_cast<float>(v));
    return t;
}

Matrix Tensor::to_matrix() const {
    if (dims.size() == 2) return Matrix::from_data(dims[0], dims[1], values);
    if (dims.size() == 1) return Matrix::from_data(1, dims[0], values);
    throw FormatError("tensor '" + name + "' has rank " + std::to_string(dims.size()) + ", expected 1 or 2");
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return t;
    throw FormatError("checkpoint has no tensor '" + name + "'");
}

bool Checkpoint::has_tensor(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return true;
    return false;
}

namespace {

class Writer {
public:
    template <typename T>
    void put(T v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        out_.insert(out_.end(), p, p + sizeof(T));
    }
    void put_bytes(const std::string& s) { out_.insert(out_.end(), s.begin(), s.end()); }
    std::vector<std::uint8_t> take() { return std::move(out_); }

private:
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    template <typename T>
    T get(const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string get_string(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    bool at_end() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n, const char* what) {
        if (bytes_.size() - pos_ < n)
            throw IoError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                          std::to_string(pos_));
    }
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

constexpr char kMagic[4] = {'L', 'A', 'M', 'R'};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    Writer w;
    for (char c : kMagic) w.put(c);
    w.put<std::uint32_t>(ckpt.version);
    const std::string config = ckpt.config.dump();
    w.put<std::uint64_t>(config.size());
    w.put_bytes(config);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) {
        if (t.name.size() > UINT16_MAX) throw FormatError("tensor name too long: " + t.name);
        std::uint64_t expected = 1;
        for (auto d : t.dims) expected *= d;
        if (expected != t.values.size())
            throw FormatError("tensor '" + t.name + "' holds " + std::to_string(t.values.size()) +
                              " values for its dims");
        w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
        w.put_bytes(t.name);
        w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
        w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dims.size()));
        for (auto d : t.dims) w.put<std::uint64_t>(d);
        for (double v : t.values) {
            if (t.dtype == Dtype::F32) {
                w.put<float>(static_cast<float>(v));
            } else {
                w.put<double>(v);
            }
        }
    }
    w.put<std::uint64_t>(ckpt.rng_state);
    return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    for (char c : kMagic)
        if (r.get<char>("magic") != c) throw FormatError("not a checkpoint: bad magic bytes");
    Checkpoint ckpt;
    ckpt.version = r.get<std::uint32_t>("version");
    if (ckpt.version != Checkpoint::kVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(ckpt.version));
    const auto config_len = r.get<std::uint64_t>("config length");
    const std::string config = r.get_string(config_len, "config");
    try {
        ckpt.config = nlohmann::json::parse(config);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("checkpoint config is not valid JSON: ") + e.what());
    }
    const auto count = r.get<std::uint32_t>("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        Tensor t;
        t.name = r.get_string(r.get<std::uint16_t>("name length"), "name");
        const auto dtype = r.get<std::uint8_t>("dtype");
        if (dtype > 1) throw FormatError("tensor '" + t.name + "' has unknown dtype " + std::to_string(dtype));
        t.dtype = static_cast<Dtype>(dtype);
        const auto rank = r.get<std::uint8_t>("rank");
        std::uint64_t n = 1;
        for (std::uint8_t k = 0; k < rank; ++k) {
            t.dims.push_back(r.get<std::uint64_t>("dims"));
            n *= t.dims.back();
        }
        if (n > bytes.size()) throw IoError("checkpoint truncated: tensor '" + t.name + "' larger than file");
        t.values.resize(n);
        for (auto& v : t.values)
            v = t.dtype == Dtype::F32 ? static_cast<double>(r.get<float>("payload")) : r.get<double>("payload");
        ckpt.tensors.push_back(std::move(t));
    }
    ckpt.rng_state = r.get<std::uint64_t>("rng state");
    if (!r.at_end()) throw FormatError("trailing bytes after checkpoint");
    return ckpt;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    write_file_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace lamer

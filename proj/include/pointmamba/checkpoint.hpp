// Binary checkpoint format (all integers little-endian):
//
//   "PMBA"                     4-byte magic
//   u32 version                currently 1
//   u32 n, n bytes             model config as `key = value` text
//   u32 count                  number of tensors
//   count x {
//     u32 n, n bytes           tensor name
//     u8  dtype                1 = float64
//     u32 rank, rank x u64     shape
//     numel x f64              payload, IEEE-754 little-endian
//   }
#pragma once

#include <bit>
#include <fstream>
#include <sstream>
#include <string>

#include "network.hpp"

namespace pointmamba {

inline constexpr char kCheckpointMagic[4] = {'P', 'M', 'B', 'A'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 1;

namespace ckpt {

template <class U>
void put_le(std::string& out, U v)
{
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
public:
    explicit Reader(const std::string& bytes) : b_(bytes) {}

    template <class U>
    U le()
    {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
        pos_ += sizeof(U);
        return v;
    }

    std::string bytes(std::size_t n)
    {
        need(n);
        std::string s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == b_.size(); }

private:
    void need(std::size_t n) const
    {
        if (pos_ + n > b_.size()) throw Error("checkpoint: truncated file");
    }

    const std::string& b_;
    std::size_t pos_ = 0;
};

}  // namespace ckpt

inline std::string encode_checkpoint(const Model& model)
{
    std::string out(kCheckpointMagic, 4);
    ckpt::put_le<std::uint32_t>(out, kCheckpointVersion);
    const std::string text = model.config.to_text();
    ckpt::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    const auto& params = model.params;
    ckpt::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& name = params.names()[i];
        const auto& t = params.values()[i];
        ckpt::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        out.push_back(static_cast<char>(kDtypeF64));
        ckpt::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) ckpt::put_le<std::uint64_t>(out, d);
        for (double v : t.data()) ckpt::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
}

inline Model decode_checkpoint(const std::string& bytes)
{
    ckpt::Reader r(bytes);
    if (r.bytes(4) != std::string(kCheckpointMagic, 4)) throw Error("checkpoint: bad magic");
    const auto version = r.le<std::uint32_t>();
    if (version != kCheckpointVersion) throw Error("checkpoint: unsupported version " + std::to_string(version));
    Model m;
    m.config = ModelConfig::from_text(r.bytes(r.le<std::uint32_t>()));
    const auto count = r.le<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.bytes(r.le<std::uint32_t>());
        const auto dtype = r.le<std::uint8_t>();
        if (dtype != kDtypeF64) throw Error("checkpoint: tensor '" + name + "' has unsupported dtype " + std::to_string(dtype));
        Shape shape(r.le<std::uint32_t>());
        for (auto& d : shape) d = static_cast<std::size_t>(r.le<std::uint64_t>());
        Tensor t(shape);
        for (auto& v : t.data()) v = std::bit_cast<double>(r.le<std::uint64_t>());
        m.params.add(name, std::move(t));
    }
    if (!r.done()) throw Error("checkpoint: trailing bytes");
    // Parameter names and shapes must match what the config would create.
    const Model fresh = init_model(m.config, 0);
    if (fresh.params.names() != m.params.names()) throw Error("checkpoint: parameter table does not match config");
    for (std::size_t i = 0; i < fresh.params.size(); ++i) {
        if (fresh.params.values()[i].shape() != m.params.values()[i].shape()) {
            throw Error("checkpoint: shape mismatch for '" + m.params.names()[i] + "'");
        }
    }
    return m;
}

inline void save_checkpoint(const std::string& path, const Model& model)
{
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write checkpoint '" + path + "'");
    const std::string bytes = encode_checkpoint(model);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Model load_checkpoint(const std::string& path) { return decode_checkpoint(cfg::read_file(path)); }

}  // namespace pointmamba

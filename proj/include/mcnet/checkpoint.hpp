#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "mcnet/tensor.hpp"

// Named-tensor archive. Layout:
//   "MCNC" | u32 version | u32 entry count
//   per entry: u32 name length | name bytes | u8 dtype (0=f32, 1=f64)
//              | u32 rank | u32 dims[rank] | raw little-endian payload
// Entries keep insertion order, so save(load(x)) reproduces x byte for byte.

namespace mcnet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Payloads are bulk-copied; the format is defined as little-endian.
static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

class Checkpoint {
  public:
    using Entry = std::variant<Tensor<float>, Tensor<double>>;

    void add(const std::string& name, Tensor<float> t) { add_entry(name, Entry(std::move(t))); }
    void add(const std::string& name, Tensor<double> t) { add_entry(name, Entry(std::move(t))); }

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t size() const { return names_.size(); }
    const std::vector<std::string>& names() const { return names_; }

    // 0 for f32 entries, 1 for f64.
    int dtype_of(const std::string& name) const {
        return static_cast<int>(entries_[find(name)].index());
    }

    template <class S>
    const Tensor<S>& get(const std::string& name) const {
        const Entry& e = entries_[find(name)];
        const Tensor<S>* t = std::get_if<Tensor<S>>(&e);
        if (!t)
            throw DataError("checkpoint entry '" + name + "' holds " +
                            (e.index() == 0 ? "f32" : "f64") + " data");
        return *t;
    }

  private:
    std::size_t find(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw DataError("checkpoint has no entry '" + name + "'");
        return it->second;
    }

    void add_entry(const std::string& name, Entry e) {
        if (name.empty()) throw DataError("checkpoint entry name is empty");
        if (has(name)) throw DataError("duplicate checkpoint entry '" + name + "'");
        index_.emplace(name, names_.size());
        names_.push_back(name);
        entries_.push_back(std::move(e));
    }

    std::vector<std::string> names_;
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    out.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (in.gcount() != 4) throw DataError("truncated checkpoint: " + path);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

template <class S>
void put_tensor(std::ostream& out, const Tensor<S>& t, const std::string& name) {
    for (int d : t.shape())
        if (d <= 0 || static_cast<std::int64_t>(d) > 0xffffffffLL)
            throw DataError("checkpoint entry '" + name + "' has an unstorable dimension");
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(S)));
}

template <class S>
Tensor<S> get_tensor(std::istream& in, const std::string& path) {
    const std::uint32_t rank = get_u32(in, path);
    if (rank > 8) throw DataError("checkpoint tensor rank " + std::to_string(rank) +
                                  " out of range: " + path);
    Shape shape(rank);
    std::int64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        const std::uint32_t d = get_u32(in, path);
        if (d == 0 || d > 0x7fffffffu)
            throw DataError("checkpoint tensor dimension out of range: " + path);
        shape[i] = static_cast<int>(d);
        numel *= d;
        if (numel > (std::int64_t(1) << 40))
            throw DataError("checkpoint tensor dimension overflow: " + path);
    }
    Tensor<S> t{shape};
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(S)));
    if (in.gcount() != static_cast<std::streamsize>(t.numel() * sizeof(S)))
        throw DataError("truncated checkpoint: " + path);
    return t;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    out.write("MCNC", 4);
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.size()));
    for (const std::string& name : ckpt.names()) {
        if (name.size() > 0xffff)
            throw DataError("checkpoint entry name too long: " + name.substr(0, 32) + "...");
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        const int dtype = ckpt.dtype_of(name);
        out.put(static_cast<char>(dtype));
        if (dtype == 0)
            detail::put_tensor(out, ckpt.get<float>(name), name);
        else
            detail::put_tensor(out, ckpt.get<double>(name), name);
    }
    if (!out) throw DataError("short write: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, "MCNC", 4) != 0)
        throw DataError("not a checkpoint file: " + path);
    const std::uint32_t version = detail::get_u32(in, path);
    if (version != kCheckpointVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version) + ": " +
                        path);
    const std::uint32_t count = detail::get_u32(in, path);
    Checkpoint ckpt;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = detail::get_u32(in, path);
        if (name_len == 0 || name_len > 0xffff)
            throw DataError("checkpoint entry name length out of range: " + path);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (in.gcount() != static_cast<std::streamsize>(name_len))
            throw DataError("truncated checkpoint: " + path);
        const int dtype = in.get();
        if (dtype == 0)
            ckpt.add(name, detail::get_tensor<float>(in, path));
        else if (dtype == 1)
            ckpt.add(name, detail::get_tensor<double>(in, path));
        else
            throw DataError("unknown dtype tag in checkpoint: " + path);
    }
    return ckpt;
}

}  // namespace mcnet

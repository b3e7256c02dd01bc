#include "dfl/serialize.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "dfl/rng.hpp"

namespace dfl {

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("tensor read: truncated header");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw std::runtime_error("tensor read: truncated header");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

constexpr bool host_is_little_endian() {
    return std::endian::native == std::endian::little;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    if (t.empty()) throw std::invalid_argument("write_tensor: empty tensor");
    os.write("DFL1", 4);
    put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put_u64(os, static_cast<std::uint64_t>(d));
    if constexpr (host_is_little_endian()) {
        os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    } else {
        for (std::size_t i = 0; i < t.size(); ++i) {
            std::uint64_t bits;
            double v = t[i];
            std::memcpy(&bits, &v, 8);
            put_u64(os, bits);
        }
    }
    if (!os) throw std::runtime_error("write_tensor: stream failure");
}

Tensor read_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DFL1", 4) != 0) throw std::runtime_error("tensor read: bad magic");
    const std::uint32_t rank = get_u32(is);
    if (rank == 0 || rank > 16) throw std::runtime_error("tensor read: implausible rank " + std::to_string(rank));
    std::vector<int> shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
        const std::uint64_t v = get_u64(is);
        if (v == 0 || v > (1ull << 31)) throw std::runtime_error("tensor read: implausible dim");
        d = static_cast<int>(v);
        numel *= static_cast<std::size_t>(v);
    }
    std::vector<double> data(numel);
    if constexpr (host_is_little_endian()) {
        is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(numel * sizeof(double)));
        if (!is) throw std::runtime_error("tensor read: truncated payload");
    } else {
        for (auto& v : data) {
            const std::uint64_t bits = get_u64(is);
            std::memcpy(&v, &bits, 8);
        }
    }
    return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_tensor: cannot open " + path.string());
    write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_tensor: cannot open " + path.string());
    return read_tensor(is);
}

Tensor& ParamStore::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParamStore: no parameter named '" + name + "'");
    return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParamStore: no parameter named '" + name + "'");
    return it->second;
}

void ParamStore::set(std::string name, Tensor t) { params_[std::move(name)] = std::move(t); }

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [k, _] : params_) out.push_back(k);
    return out;
}

std::size_t ParamStore::total_elements() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
}

void ParamStore::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("ParamStore::save: cannot open " + path.string());
    os.write("DFLS", 4);
    put_u32(os, static_cast<std::uint32_t>(params_.size()));
    for (const auto& [name, t] : params_) {
        put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_tensor(os, t);
    }
    if (!os) throw std::runtime_error("ParamStore::save: stream failure");
}

ParamStore ParamStore::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("ParamStore::load: cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DFLS", 4) != 0) throw std::runtime_error("ParamStore::load: bad magic");
    const std::uint32_t count = get_u32(is);
    ParamStore store;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t len = get_u32(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        if (!is) throw std::runtime_error("ParamStore::load: truncated name");
        store.set(std::move(name), read_tensor(is));
    }
    return store;
}

std::string file_hash_hex(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("file_hash_hex: cannot open " + path.string());
    std::ostringstream buf;
    buf << is.rdbuf();
    const std::string bytes = buf.str();
    const std::uint64_t h = fnv1a64(bytes.data(), bytes.size());
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return std::string(out);
}

}  // namespace dfl

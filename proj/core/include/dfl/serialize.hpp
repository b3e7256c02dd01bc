#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "dfl/tensor.hpp"

namespace dfl {

// Tensor file format, little-endian: magic "DFL1", u32 rank, u64 dims,
// raw f64 payload. Every checkpoint and dataset artifact uses it.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

/// Named, shaped parameter tensors. Names are kept sorted so saves are
/// byte-stable. Container format: magic "DFLS", u32 count, then per entry
/// u32 name length, name bytes, and an inline "DFL1" tensor record.
class ParamStore {
public:
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    void set(std::string name, Tensor t);
    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    std::vector<std::string> names() const;
    std::size_t size() const { return params_.size(); }
    std::size_t total_elements() const;

    void save(const std::filesystem::path& path) const;
    static ParamStore load(const std::filesystem::path& path);

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::map<std::string, Tensor> params_;
};

std::string file_hash_hex(const std::filesystem::path& path);

}  // namespace dfl

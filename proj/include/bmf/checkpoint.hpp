#pragma once

#include <cstring>

#include "bmf/params.hpp"

namespace bmf {

// One record of the binary tensor container: float32 payload, little-endian.
struct NamedTensorRecord {
    std::string name;
    std::vector<uint32_t> dims;
    std::vector<float> data;

    int64_t numel() const {
        int64_t n = 1;
        for (uint32_t d : dims) n *= d;
        return n;
    }
};

// File layout: magic "BMFT", version u32, then repeated records
// {name-length u32, utf-8 name, rank u32, dims u32[], payload float32 LE}.
void write_bmft(const std::string& path, const std::vector<NamedTensorRecord>& records);
std::vector<NamedTensorRecord> read_bmft(const std::string& path);

template <typename T>
std::vector<NamedTensorRecord> to_records(const ParamSet<T>& params) {
    std::vector<NamedTensorRecord> out;
    out.reserve(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        NamedTensorRecord rec;
        rec.name = params.name(i);
        for (int64_t d : params.value(i).shape()) rec.dims.push_back((uint32_t)d);
        rec.data.reserve(params.value(i).numel());
        for (T v : params.value(i).data()) rec.data.push_back((float)v);
        out.push_back(std::move(rec));
    }
    return out;
}

// Restores values by name; every parameter must be present with matching shape.
template <typename T>
void load_records(ParamSet<T>& params, const std::vector<NamedTensorRecord>& records) {
    std::unordered_map<std::string, const NamedTensorRecord*> by_name;
    for (const auto& r : records) by_name[r.name] = &r;
    for (size_t i = 0; i < params.size(); ++i) {
        auto it = by_name.find(params.name(i));
        check(it != by_name.end(), "checkpoint: missing tensor '", params.name(i), "'");
        const NamedTensorRecord& rec = *it->second;
        Tensor<T>& p = params.value(i);
        check((int64_t)rec.dims.size() == p.dim(), "checkpoint: rank mismatch for '", rec.name,
              "'");
        for (size_t d = 0; d < rec.dims.size(); ++d)
            check((int64_t)rec.dims[d] == p.shape()[d], "checkpoint: shape mismatch for '",
                  rec.name, "'");
        auto dst = p.raw_data();
        for (int64_t j = 0; j < p.numel(); ++j) dst[j] = (T)rec.data[j];
    }
}

template <typename T>
void save_checkpoint(const std::string& path, const ParamSet<T>& params) {
    write_bmft(path, to_records(params));
}

template <typename T>
void load_checkpoint(const std::string& path, ParamSet<T>& params) {
    load_records(params, read_bmft(path));
}

}  // namespace bmf

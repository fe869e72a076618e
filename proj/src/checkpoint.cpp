#include "bmf/checkpoint.hpp"

#include <fstream>

namespace bmf {

namespace {

const char kMagic[4] = {'B', 'M', 'F', 'T'};
const uint32_t kVersion = 1;

void put_u32(std::string& buf, uint32_t v) {
    buf.push_back((char)(v & 0xff));
    buf.push_back((char)((v >> 8) & 0xff));
    buf.push_back((char)((v >> 16) & 0xff));
    buf.push_back((char)((v >> 24) & 0xff));
}

uint32_t get_u32(const std::string& buf, size_t& pos) {
    check(pos + 4 <= buf.size(), "checkpoint: truncated file");
    uint32_t v = (uint8_t)buf[pos] | ((uint32_t)(uint8_t)buf[pos + 1] << 8) |
                 ((uint32_t)(uint8_t)buf[pos + 2] << 16) | ((uint32_t)(uint8_t)buf[pos + 3] << 24);
    pos += 4;
    return v;
}

}  // namespace

void write_bmft(const std::string& path, const std::vector<NamedTensorRecord>& records) {
    std::string buf;
    buf.append(kMagic, 4);
    put_u32(buf, kVersion);
    for (const auto& rec : records) {
        check((int64_t)rec.data.size() == rec.numel(), "checkpoint: record '", rec.name,
              "' payload does not match dims");
        put_u32(buf, (uint32_t)rec.name.size());
        buf.append(rec.name);
        put_u32(buf, (uint32_t)rec.dims.size());
        for (uint32_t d : rec.dims) put_u32(buf, d);
        for (float f : rec.data) {
            uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put_u32(buf, bits);
        }
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    check(out.good(), "checkpoint: cannot open '", path, "' for writing");
    out.write(buf.data(), (std::streamsize)buf.size());
    check(out.good(), "checkpoint: write to '", path, "' failed");
}

std::vector<NamedTensorRecord> read_bmft(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "checkpoint: cannot open '", path, "'");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    check(buf.size() >= 8 && std::memcmp(buf.data(), kMagic, 4) == 0,
          "checkpoint: '", path, "' is not a BMFT file");
    size_t pos = 4;
    uint32_t version = get_u32(buf, pos);
    check(version == kVersion, "checkpoint: unsupported format version ", version);
    std::vector<NamedTensorRecord> records;
    while (pos < buf.size()) {
        NamedTensorRecord rec;
        uint32_t name_len = get_u32(buf, pos);
        check(pos + name_len <= buf.size(), "checkpoint: truncated name");
        rec.name.assign(buf, pos, name_len);
        pos += name_len;
        uint32_t rank = get_u32(buf, pos);
        rec.dims.resize(rank);
        for (uint32_t i = 0; i < rank; ++i) rec.dims[i] = get_u32(buf, pos);
        int64_t n = rec.numel();
        rec.data.resize(n);
        for (int64_t i = 0; i < n; ++i) {
            uint32_t bits = get_u32(buf, pos);
            std::memcpy(&rec.data[i], &bits, 4);
        }
        records.push_back(std::move(rec));
    }
    return records;
}

}  // namespace bmf

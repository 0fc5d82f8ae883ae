#include "core/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include "core/errors.hpp"

namespace epimerge {

namespace {

constexpr char     magic[4]       = {'E', 'P', 'M', 'C'};
constexpr uint32_t format_version = 1;

void put_bytes(std::vector<uint8_t> & out, const void * src, size_t n) {
    const auto * p = static_cast<const uint8_t *>(src);
    out.insert(out.end(), p, p + n);
}

template <typename T>
void put_le(std::vector<uint8_t> & out, T value) {
    static_assert(std::is_unsigned_v<T>);
    for (size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<uint8_t>(value >> (8 * i)));
    }
}

struct cursor {
    const std::vector<uint8_t> & buf;
    size_t                       pos = 0;
    const std::string &          origin;

    void need(size_t n, const char * what) const {
        if (pos + n > buf.size()) {
            fail_data(origin + ": truncated container (while reading " + what + ")");
        }
    }
    template <typename T>
    T get_le(const char * what) {
        static_assert(std::is_unsigned_v<T>);
        need(sizeof(T), what);
        T v = 0;
        for (size_t i = 0; i < sizeof(T); ++i) {
            v |= static_cast<T>(buf[pos + i]) << (8 * i);
        }
        pos += sizeof(T);
        return v;
    }
    std::string get_string(size_t n, const char * what) {
        need(n, what);
        std::string s(reinterpret_cast<const char *>(buf.data() + pos), n);
        pos += n;
        return s;
    }
};

size_t dtype_size(dtype d) { return d == dtype::f32 ? 4 : 8; }

} // namespace

std::vector<uint8_t> encode_checkpoint(const parameter_set & params) {
    if (params.size() > std::numeric_limits<uint32_t>::max()) {
        fail_data("too many tensors for container format");
    }
    std::vector<uint8_t> out;
    put_bytes(out, magic, 4);
    put_le<uint32_t>(out, format_version);
    put_le<uint32_t>(out, static_cast<uint32_t>(params.size()));

    uint64_t offset = 0;
    for (const auto & [name, t] : params.entries) {
        if (name.empty()) fail_data("tensor with empty name cannot be written");
        if (name.size() > std::numeric_limits<uint16_t>::max()) {
            fail_data("tensor name too long: '" + name.substr(0, 32) + "...'");
        }
        if (t.shape.size() > 255) fail_data("tensor '" + name + "' has too many dimensions");
        if (t.numel() != t.data.size()) {
            fail_data("tensor '" + name + "' shape/data size mismatch");
        }
        put_le<uint16_t>(out, static_cast<uint16_t>(name.size()));
        put_bytes(out, name.data(), name.size());
        out.push_back(static_cast<uint8_t>(t.stored));
        out.push_back(static_cast<uint8_t>(t.shape.size()));
        for (uint64_t d : t.shape) put_le<uint64_t>(out, d);
        put_le<uint64_t>(out, offset);
        offset += static_cast<uint64_t>(t.numel()) * dtype_size(t.stored);
    }

    for (const auto & [name, t] : params.entries) {
        (void) name;
        if (t.stored == dtype::f32) {
            for (double x : t.data) {
                put_le<uint32_t>(out, std::bit_cast<uint32_t>(static_cast<float>(x)));
            }
        } else {
            for (double x : t.data) {
                put_le<uint64_t>(out, std::bit_cast<uint64_t>(x));
            }
        }
    }
    return out;
}

parameter_set decode_checkpoint(const std::vector<uint8_t> & bytes, const std::string & origin) {
    cursor cur{bytes, 0, origin};

    cur.need(4, "magic");
    if (std::memcmp(bytes.data(), magic, 4) != 0) {
        fail_data(origin + ": bad magic, not an EPMC container");
    }
    cur.pos = 4;
    const uint32_t version = cur.get_le<uint32_t>("version");
    if (version != format_version) {
        fail_data(origin + ": unsupported container version " + std::to_string(version));
    }
    const uint32_t count = cur.get_le<uint32_t>("tensor count");

    struct record {
        std::string           name;
        dtype                 d;
        std::vector<uint64_t> shape;
        uint64_t              offset;
        size_t                numel;
    };
    std::vector<record> records;
    records.reserve(count);

    for (uint32_t i = 0; i < count; ++i) {
        record r;
        const uint16_t name_len = cur.get_le<uint16_t>("name length");
        r.name = cur.get_string(name_len, "tensor name");
        if (r.name.empty()) fail_data(origin + ": tensor record with empty name");
        const uint8_t dt = cur.get_le<uint8_t>("dtype");
        if (dt > 1) {
            fail_data(origin + ": invalid dtype " + std::to_string(dt) + " for tensor '" + r.name + "'");
        }
        r.d = static_cast<dtype>(dt);
        const uint8_t ndim = cur.get_le<uint8_t>("ndim");
        r.shape.resize(ndim);
        size_t numel = 1;
        for (uint8_t k = 0; k < ndim; ++k) {
            r.shape[k] = cur.get_le<uint64_t>("dims");
            if (r.shape[k] != 0 && numel > std::numeric_limits<size_t>::max() / r.shape[k]) {
                fail_data(origin + ": tensor '" + r.name + "' dimension overflow");
            }
            numel *= static_cast<size_t>(r.shape[k]);
        }
        r.numel  = numel;
        r.offset = cur.get_le<uint64_t>("offset");
        if (!records.empty()) {
            if (records.back().name == r.name) {
                fail_data(origin + ": duplicate tensor name '" + r.name + "'");
            }
            if (records.back().name > r.name) {
                fail_data(origin + ": tensor records not sorted by name ('" + r.name + "' after '" +
                          records.back().name + "')");
            }
        }
        records.push_back(std::move(r));
    }

    const size_t data_start = cur.pos;
    const size_t region     = bytes.size() - data_start;

    parameter_set out;
    for (const record & r : records) {
        const size_t bytes_needed = r.numel * dtype_size(r.d);
        if (r.offset > region || bytes_needed > region - r.offset) {
            fail_data(origin + ": tensor '" + r.name + "' data exceeds the data region (offset/shape mismatch)");
        }
        tensor t;
        t.stored = r.d;
        t.shape  = r.shape;
        t.data.resize(r.numel);
        const uint8_t * src = bytes.data() + data_start + r.offset;
        if (r.d == dtype::f32) {
            for (size_t i = 0; i < r.numel; ++i) {
                uint32_t u = 0;
                for (size_t b = 0; b < 4; ++b) u |= static_cast<uint32_t>(src[4 * i + b]) << (8 * b);
                t.data[i] = static_cast<double>(std::bit_cast<float>(u));
            }
        } else {
            for (size_t i = 0; i < r.numel; ++i) {
                uint64_t u = 0;
                for (size_t b = 0; b < 8; ++b) u |= static_cast<uint64_t>(src[8 * i + b]) << (8 * b);
                t.data[i] = std::bit_cast<double>(u);
            }
        }
        out.entries.emplace(r.name, std::move(t));
    }
    return out;
}

parameter_set read_checkpoint(const std::string & path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail_data("cannot open '" + path + "' for reading");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (f.bad()) fail_data("read error on '" + path + "'");
    return decode_checkpoint(bytes, path);
}

void write_checkpoint(const parameter_set & params, const std::string & path) {
    const std::vector<uint8_t> bytes = encode_checkpoint(params);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) fail_data("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) fail_data("write error on '" + path + "'");
}

metadata read_metadata(const std::string & path) {
    std::ifstream f(path);
    if (!f) fail_data("cannot open '" + path + "' for reading");
    metadata    meta;
    std::string line;
    size_t      lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            fail_data(path + ":" + std::to_string(lineno) + ": expected key=value");
        }
        meta.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return meta;
}

void write_metadata(const metadata & meta, const std::string & path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) fail_data("cannot open '" + path + "' for writing");
    for (const auto & [k, v] : meta) {
        f << k << '=' << v << '\n';
    }
    if (!f) fail_data("write error on '" + path + "'");
}

const std::string * find_meta(const metadata & meta, const std::string & key) {
    for (const auto & [k, v] : meta) {
        if (k == key) return &v;
    }
    return nullptr;
}

} // namespace epimerge

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "core/tensor.hpp"

namespace epimerge {

// Container format ("EPMC" v1), little-endian throughout:
//   magic 'EPMC' | u32 version=1 | u32 tensor count N
//   N records, sorted by name ascending:
//     u16 name length | name bytes (UTF-8) | u8 dtype (0=f32, 1=f64)
//     u8 ndim | ndim x u64 dims | u64 byte offset into the data region
//   data region: contiguous tensor payloads
// The writer packs payloads in record order with no gaps, so identical sets
// produce identical bytes.
parameter_set read_checkpoint(const std::string & path);
void          write_checkpoint(const parameter_set & params, const std::string & path);

std::vector<uint8_t> encode_checkpoint(const parameter_set & params);
parameter_set        decode_checkpoint(const std::vector<uint8_t> & bytes, const std::string & origin);

// Plain-text sidecar: one key=value per line, order preserved.
using metadata = std::vector<std::pair<std::string, std::string>>;
metadata read_metadata(const std::string & path);
void     write_metadata(const metadata & meta, const std::string & path);
const std::string * find_meta(const metadata & meta, const std::string & key);

} // namespace epimerge

#pragma once

#include <string>

#include "eigenkv/model.hpp"

namespace eigenkv {

struct Checkpoint {
    TransformerWeights model;
    Tokenizer tokenizer;
};

// Single-file container: 8-byte magic "EKVCKPT1", little-endian u64 header
// length, UTF-8 JSON header, then raw tensor payloads. The header carries
// the model spec, the tokenizer vocabulary, per-layer attention metadata
// (standard, or compressed with r_k / r_v / pos_mode), and a tensor
// directory of (name, shape, byte offset into the payload). Payloads are
// row-major little-endian 32-bit floats, so saving is lossy in the last
// bits of a double but load(save(x)) is a fixed point.
void save_checkpoint(const std::string& path, const TransformerWeights& model,
                     const Tokenizer& tokenizer);

// Throws std::runtime_error on missing files, bad magic, version or shape
// mismatches, and out-of-range directory offsets.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace eigenkv

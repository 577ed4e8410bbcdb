#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "eigenkv/allot.hpp"
#include "eigenkv/model.hpp"

namespace eigenkv {

// Grouping orientation over a rows-are-tokens matrix: channel groups run
// down a column (consecutive tokens of one channel, the key convention),
// token groups run along a row (consecutive channels of one token, the
// value convention).
enum class QuantAxis { channel, token };

struct QuantConfig {
    std::size_t bits = 4;
    std::size_t group_size = 32;
    QuantAxis axis = QuantAxis::channel;

    // bits in [2, 15]; group_size >= 1. A group_size that does not divide
    // the grouped axis length leaves a short final group.
    void validate() const;
};

// Asymmetric affine codes: value ~ scale * (code - zero_point) with
// scale = (max - min) / (2^bits - 1) and zero_point = round(-min / scale)
// per group. A constant group stores scale = 0 as a sentinel and carries
// the constant itself in the zero-point slot, so it dequantizes exactly.
// Dequantized values stay within each group's [min, max] envelope up to
// half a quantization step.
struct QuantizedTensor {
    std::vector<std::uint16_t> codes;  // row-major, one per element
    std::vector<double> scales;        // per group
    std::vector<double> zero_points;   // per group; the constant when scale == 0
    std::size_t rows = 0;
    std::size_t cols = 0;
    QuantConfig cfg;
};

QuantizedTensor quantize(const Matrix& t, const QuantConfig& cfg);
Matrix dequantize(const QuantizedTensor& q);

// Wire image used for byte accounting: codes bit-packed LSB-first into
// ceil(numel * bits / 8) bytes, then one 16-bit scale and one 16-bit
// zero-point per group (floats truncated to their top half). Nothing reads
// this back; it pins the size that quantized_bytes must predict.
std::string serialize_quantized(const QuantizedTensor& q);

// Exact size of serialize_quantized for a rows x cols tensor.
std::size_t quantized_bytes(std::size_t rows, std::size_t cols, const QuantConfig& cfg);

// Cache bytes for n cached positions under a (key, value) quantization
// pair, uniform ranks across layers. bits >= 16 means unquantized storage
// at bits/8 bytes per element with no group overhead, so the 16-bit case
// reduces to 2 b n r h L * 2 bytes.
std::uint64_t kv_bytes(std::size_t r_k, std::size_t r_v, const QuantConfig& key_cfg,
                       const QuantConfig& value_cfg, std::size_t n, std::size_t batch,
                       std::size_t n_layers, std::size_t n_heads);

// Same accounting but reading each layer's actual cache width off the
// model (compressed layers contribute their reduced ranks).
std::uint64_t model_kv_bytes(const TransformerWeights& model, const QuantConfig& key_cfg,
                             const QuantConfig& value_cfg, std::size_t n,
                             std::size_t batch);

// Cache-write hook that replaces every appended chunk with its quantized
// round trip (keys per channel, values per token). bits >= 16 yields an
// identity hook.
KvTransform quantizing_transform(const QuantConfig& key_cfg, const QuantConfig& value_cfg);

// One (config, family) measurement of the stacked pipeline.
struct StackedPoint {
    std::string family;  // "standard" or "eigen"
    std::size_t bits = 0;
    std::size_t group_size = 0;
    std::uint64_t cache_bytes = 0;
    double ppl = 0.0;
};

// Compresses the model toward target_ratio (budget chosen by sweeping
// budget_grid), then measures perplexity for both the standard and the
// compressed model under every (bits, group_size) grid entry. The corpus
// is split: the leading calibration slice feeds the threshold search, the
// remainder is the held-out perplexity slice. Cache bytes are quoted at
// n = max_seq, batch 1.
std::vector<StackedPoint> eval_stacked(const TransformerWeights& model,
                                       double target_ratio,
                                       const std::vector<std::pair<std::size_t, std::size_t>>& quant_grid,
                                       const std::vector<int>& corpus_ids,
                                       const AllotmentConfig& allot_base,
                                       const std::vector<double>& budget_grid);

// CSV with columns family,bits,group_size,kv_bytes,ppl.
std::string stacked_csv(const std::vector<StackedPoint>& points);

}  // namespace eigenkv

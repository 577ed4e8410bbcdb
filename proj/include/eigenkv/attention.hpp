#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "eigenkv/linalg.hpp"

namespace eigenkv {

enum class PosMode { learned, alibi, rope };

std::string to_string(PosMode mode);
PosMode pos_mode_from_string(const std::string& name);

// Shape parameters for one attention layer. kv_rank is the width of the
// cached key/value embeddings; standard attention uses kv_rank == d_head.
// The softmax scale is always 1/sqrt(d_head) regardless of kv_rank, so a
// reduced-rank layer approximates the original dot products rather than
// renormalizing them.
struct AttentionConfig {
    std::size_t d_model = 0;
    std::size_t n_heads = 0;
    std::size_t d_head = 0;
    std::size_t kv_rank = 0;
    PosMode pos_mode = PosMode::learned;

    // Throws std::invalid_argument on violation of
    // d_model == n_heads * d_head, 1 <= kv_rank <= d_head,
    // or an odd d_head in rope mode.
    void validate() const;
};

// Per-head projection weights. wq and wk map d_model -> key rank, wv maps
// d_model -> value rank, and wo maps value rank -> d_model; the per-head
// outputs are summed, which is the row-block decomposition of the usual
// concat-then-project output matrix. Standard attention has both ranks
// equal to d_head.
struct AttentionWeights {
    std::vector<Matrix> wq;
    std::vector<Matrix> wk;
    std::vector<Matrix> wv;
    std::vector<Matrix> wo;
};

// Growing per-(layer, head) key/value store for autoregressive decoding.
// One instance tracks one sequence; `batch` is an accounting multiplier
// for identical independent sequences (the math never crosses sequences).
struct KvCache {
    struct HeadState {
        Matrix keys;    // seq_len x r_k
        Matrix values;  // seq_len x r_v
    };

    std::vector<std::vector<HeadState>> layers;
    std::size_t seq_len = 0;
    std::size_t batch = 1;
    std::size_t precision_bits = 16;

    static KvCache make(std::size_t n_layers, std::size_t n_heads,
                        std::size_t batch = 1, std::size_t precision_bits = 16);

    void clear();

    // Rows already cached for a layer (all heads agree; empty layer -> 0).
    std::size_t layer_len(std::size_t layer) const;

    // Total cache size in bits: batch * n * (r_k + r_v) * p summed over
    // every (layer, head). Integer arithmetic; equals 2*b*n*r*h*L*p when
    // all ranks are equal.
    std::uint64_t bits() const;
};

// MAC counts split by accounting category. `core` covers the four
// projections and the two cache dot products (the generation-cost
// convention); `lift` covers the rope-mode key unprojection, which is
// reported as its own line item.
struct AttnCounters {
    MacCounter core;
    MacCounter lift;
};

// Applied to each new key/value chunk right before it is appended to the
// cache, i.e. to exactly the numbers that would sit in cache memory
// (post-rotation keys in standard rope, pre-rotation reduced keys in the
// reduced-rank rope path). Lets evaluation run with lossy cache storage.
using KvTransform =
    std::function<void(Matrix& k_chunk, Matrix& v_chunk, std::size_t layer,
                       std::size_t head)>;

// Head-specific slopes 2^(-8(k+1)/h) for the linear distance penalty.
std::vector<double> alibi_slopes(std::size_t n_heads);

// Rotates each row of x in place by its absolute position start_pos + i,
// pairing columns (2j, 2j+1) with angle pos * base^(-2j/cols). Row width
// must be even.
void rope_rotate_rows(Matrix& x, std::size_t start_pos, double base = 10000.0);

// Softmax attention for one head over an explicit key/value store.
// q is m x dq with absolute query positions q_start..q_start+m-1, k is
// n x dq covering positions 0..n-1, v is n x r_v. Causal: query at
// position t sees keys 0..t. alibi_slope, when present, adds
// -slope * (t_q - t_k) to the visible scores. Returns m x r_v.
Matrix attend_head(const Matrix& q, const Matrix& k, const Matrix& v,
                   double scale, std::size_t q_start,
                   std::optional<double> alibi_slope = std::nullopt,
                   MacCounter* macs = nullptr);

// Runs attention for a chunk of m new tokens (x is m x d_model) against
// cache layer `layer`, appending the chunk's keys/values. Prefill is the
// empty-cache case, decoding is m == 1. Advances cache.seq_len to the
// layer's new length.
Matrix attend_chunk(const Matrix& x, const AttentionConfig& cfg,
                    const AttentionWeights& w, KvCache& cache,
                    std::size_t layer, AttnCounters* counters = nullptr,
                    const KvTransform* kv_transform = nullptr);

Matrix prefill(const Matrix& x, const AttentionConfig& cfg,
               const AttentionWeights& w, KvCache& cache,
               std::size_t layer = 0, AttnCounters* counters = nullptr,
               const KvTransform* kv_transform = nullptr);

Matrix decode_step(const Matrix& x_t, const AttentionConfig& cfg,
                   const AttentionWeights& w, KvCache& cache,
                   std::size_t layer = 0, AttnCounters* counters = nullptr,
                   const KvTransform* kv_transform = nullptr);

}  // namespace eigenkv

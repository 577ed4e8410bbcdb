#pragma once

#include <cstddef>
#include <optional>

#include "eigenkv/attention.hpp"
#include "eigenkv/basis.hpp"

namespace eigenkv {

// Attention layer with the eigenbases folded into its projections.
// Non-rope modes: wq/wk map d_model -> r_k, wv maps d_model -> r_v, wo maps
// r_v -> d_model, and the score dot product runs entirely in r_k space.
// Rope mode: queries stay full rank (wq is d_model -> d_head), the cache
// holds r_k-dim pre-rotation keys, and key_unproject ((U^K)^T, r_k x d_head,
// shared across heads) lifts them back to d_head at attention time so the
// position rotation can be applied.
struct CompressedLayer {
    AttentionWeights w;
    std::optional<Matrix> key_unproject;
    std::size_t r_k = 0;
    std::size_t r_v = 0;
    bool shared_key_basis = false;
    PosMode pos_mode = PosMode::learned;
};

// Folds layer `layer_idx` of the basis into the given per-head weights:
// wq' = wq U^K, wk' = wk U^K, wv' = wv U^V, wo' = (U^V)^T wo. In rope mode
// wq is kept untouched and key_unproject is populated instead (requires a
// shared key basis). Throws std::invalid_argument on shape or mode
// mismatches.
CompressedLayer merge_basis(const AttentionWeights& w, const EigenBasis& basis,
                            std::size_t layer_idx, PosMode pos_mode);

// Attention over a compressed layer for a chunk of new tokens, appending
// r-dim keys/values to the cache. Dispatches to the rope path when the
// layer was merged in rope mode. cfg carries d_model/n_heads/d_head and the
// position mode; ranks come from the layer itself.
Matrix compressed_attention_forward(const Matrix& x, const AttentionConfig& cfg,
                                    const CompressedLayer& layer, KvCache& cache,
                                    std::size_t layer_idx,
                                    AttnCounters* counters = nullptr,
                                    const KvTransform* kv_transform = nullptr);

// Non-rope path: standard attention over the merged skinny projections.
Matrix eigen_attention_forward(const Matrix& x, const AttentionConfig& cfg,
                               const CompressedLayer& layer, KvCache& cache,
                               std::size_t layer_idx, AttnCounters* counters = nullptr,
                               const KvTransform* kv_transform = nullptr);

// Rope path: full-rank rotated queries against cached low-rank keys lifted
// through key_unproject and rotated per position. Lift MACs are tallied in
// counters->lift, everything else follows the usual convention.
Matrix rope_eigen_forward(const Matrix& x, const AttentionConfig& cfg,
                          const CompressedLayer& layer, KvCache& cache,
                          std::size_t layer_idx, AttnCounters* counters = nullptr,
                          const KvTransform* kv_transform = nullptr);

}  // namespace eigenkv

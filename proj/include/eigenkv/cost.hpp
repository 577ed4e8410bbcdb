#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eigenkv/model.hpp"

namespace eigenkv {

struct RankPair {
    std::size_t r_k = 0;
    std::size_t r_v = 0;
    // A layer left in its original form. Must be full rank; pays no key
    // lift and carries no lift matrix even in rotary mode.
    bool standard = false;
};

// Analytic per-token generation costs. The core counting convention covers
// the four projections and the two cache dot products; at r_k = r_v = r in
// a non-rotary layer it reduces to 4 d r + 2 n r per head, the headline
// form. Rewritten rotary layers keep full-rank queries, score in d_head
// space, and pay an extra n r_k d_head key lift per head per step, reported
// separately so the headline comparison stays clean. kv_bytes assumes
// 16-bit entries. Ratios are against the standard model of the same spec.
struct CostReport {
    struct LayerCost {
        std::size_t layer = 0;
        std::size_t r_k = 0;
        std::size_t r_v = 0;
        std::uint64_t kv_elements = 0;
        std::uint64_t kv_bytes = 0;
        std::uint64_t attn_params = 0;
        std::uint64_t gen_flops_per_token = 0;
        std::uint64_t lift_flops_per_token = 0;
    };
    std::vector<LayerCost> layers;
    std::uint64_t kv_elements = 0;
    std::uint64_t kv_bytes = 0;
    std::uint64_t attn_params = 0;
    std::uint64_t gen_flops_per_token = 0;
    std::uint64_t lift_flops_per_token = 0;

    // ratios against the same spec at full rank (core convention)
    double kv_ratio = 1.0;
    double param_ratio = 1.0;
    double flops_ratio = 1.0;

    // context echoed for compatibility checks
    std::size_t n = 0;
    std::size_t d_model = 0;
    std::size_t n_heads = 0;
    std::size_t n_layers = 0;
    std::size_t d_head = 0;
    PosMode pos_mode = PosMode::learned;
};

// ranks_per_layer must have one entry per layer with 1 <= r <= d_head.
// n is the cached context length the per-token costs are quoted at.
CostReport analytic_costs(const ModelSpec& spec,
                          const std::vector<RankPair>& ranks_per_layer, std::size_t n);

// Reads each layer's ranks off the model (standard layers count d_head).
std::vector<RankPair> model_ranks(const TransformerWeights& model);

// eigen kv_bytes over standard kv_bytes. Both reports must describe the
// same shape and context length.
double compression_ratio(const CostReport& eigen_report, const CostReport& std_report);

std::string cost_to_json(const CostReport& report);

// Side-by-side per-layer and total table for a compressed configuration
// against its full-rank baseline.
std::string cost_table(const CostReport& eigen_report, const CostReport& std_report);

}  // namespace eigenkv

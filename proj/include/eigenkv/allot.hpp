#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "eigenkv/model.hpp"

namespace eigenkv {

// Knobs for the layer-wise threshold search. error_budget bounds the
// relative squared output error a compressed layer may introduce; the
// candidate thresholds walk 1.0, 1.0 - step_size, ... down to eps_floor.
// The remaining fields describe the calibration slice handed to
// representation collection.
struct AllotmentConfig {
    double error_budget = 0.0;
    double step_size = 0.02;
    double eps_floor = 0.02;
    std::size_t n_samples = 8;
    std::size_t seq_len = 32;
    std::size_t averaging_factor = 1;
    std::size_t row_cap = 0;

    void validate() const;
};

struct AllotmentResult {
    struct LayerRecord {
        std::size_t layer = 0;
        double eps_th = 1.0;
        std::size_t r_k = 0;
        std::size_t r_v = 0;
        double error = 0.0;  // pooled relative squared error at acceptance
        bool compressed = false;
    };
    std::vector<LayerRecord> layers;
    double kv_ratio = 1.0;  // sum of (r_k + r_v) over 2 L d_head
    double mean_r_k = 0.0;
    double mean_r_v = 0.0;
};

// Walks the layers in order. Each layer's calibration inputs are the
// outputs of the already-processed (possibly compressed) prefix. Candidate
// thresholds share one set of per-head singular value decompositions; the
// accepted threshold is the last one in budget before the first failure.
// A layer whose eps = 1.0 candidate already exceeds the budget stays
// standard and is flagged uncompressed.
std::pair<TransformerWeights, AllotmentResult> allot(const TransformerWeights& model,
                                                     const std::vector<int>& corpus_ids,
                                                     const AllotmentConfig& cfg);

// One row of the budget-to-compression table.
struct BudgetSweepRow {
    double error_budget = 0.0;
    double kv_ratio = 1.0;
    std::size_t kv_elems_per_token = 0;  // cached scalars per generated token
    AllotmentResult result;
};

// Runs allot once per grid budget (ascending) on the same model/corpus.
std::vector<BudgetSweepRow> budget_sweep(const TransformerWeights& model,
                                         const std::vector<int>& corpus_ids,
                                         const AllotmentConfig& base,
                                         const std::vector<double>& budget_grid);

// Smallest budget whose achieved ratio is at or below the target; when the
// target is unreachable, falls back to the row with the best (smallest)
// ratio. The sweep must not be empty.
AllotmentConfig choose_budget(const std::vector<BudgetSweepRow>& sweep,
                              const AllotmentConfig& base, double target_ratio);

// CSV with columns model,compression,kv_size,e_b (kv_size counts cached
// scalars per generated token).
std::string targeting_csv(const std::string& model_label,
                          const std::vector<BudgetSweepRow>& sweep);

// CSV with columns layer,r_k,r_v,eps_th,e.
std::string rank_csv(const AllotmentResult& result);

std::string allotment_to_json(const AllotmentResult& result, const AllotmentConfig& cfg);
AllotmentResult allotment_from_json(const std::string& text);

}  // namespace eigenkv

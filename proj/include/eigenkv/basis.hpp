#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "eigenkv/linalg.hpp"

namespace eigenkv {

struct TransformerWeights;
struct ModelSpec;
struct DecoderLayer;

// Calibration-time activation stacks. For layer l and head i, q/k/v hold
// the raw per-head projections of the layer input (before any position
// rotation), stacked over samples: (n_samples / averaging_factor) * seq_len
// rows, d_head columns.
struct RepresentationSet {
    struct HeadReps {
        Matrix q;
        Matrix k;
        Matrix v;
    };
    std::vector<std::vector<HeadReps>> layers;  // [layer][head]
    std::size_t n_samples = 0;
    std::size_t seq_len = 0;
    std::size_t averaging_factor = 1;
};

// Orthonormal bases for one model. u_k spans key/query space, u_v spans
// value space; d_head x r columns each. Ranks are uniform across heads
// within a layer (widened to the per-layer maximum). When shared is set
// the layer carries a single u_k used by every head.
struct EigenBasis {
    struct LayerBasis {
        std::vector<Matrix> u_k;  // one per head, or a single shared entry
        std::vector<Matrix> u_v;  // one per head
        std::size_t r_k = 0;
        std::size_t r_v = 0;
        double eps_th = 1.0;
        bool shared_key_basis = false;
    };
    std::vector<LayerBasis> layers;
};

// Minimal rank r whose leading singular values hold at least eps_th of the
// total squared-singular-value energy. values must be sorted non-increasing;
// eps_th in (0, 1]. eps_th == 1 returns the count of nonzero values.
std::size_t rank_for_threshold(const std::vector<double>& singular_values, double eps_th);

// Runs calib sequences through the model, stacking per-(layer, head)
// q/k/v projections. averaging_factor a stores the element-wise mean of
// each consecutive group of a samples instead of all of them, bounding
// memory; row_cap, when nonzero, escalates a automatically until the
// stacked row count fits.
RepresentationSet collect_representations(const TransformerWeights& model,
                                          const std::vector<int>& corpus_ids,
                                          std::size_t n_samples, std::size_t seq_len,
                                          std::size_t averaging_factor = 1,
                                          std::size_t row_cap = 0);

// Same stacking for a single standard layer over explicit per-sample layer
// inputs. The threshold search drives this directly because its inputs come
// from already-compressed earlier layers rather than the pristine model.
std::vector<RepresentationSet::HeadReps> collect_layer_reps(
    const ModelSpec& spec, const DecoderLayer& layer,
    const std::vector<Matrix>& sample_inputs, std::size_t averaging_factor = 1);

// Extracts bases at per-layer energy thresholds. Key/query bases come from
// the stacked [q; k] representation, value bases from v. Within a layer the
// rank is the maximum over heads and each head keeps its own leading
// vectors widened to that rank; share_key_basis instead computes one key
// basis from all heads' stacked rows (required by the reduced-rank rope
// path).
EigenBasis build_basis(const RepresentationSet& reps,
                       const std::vector<double>& eps_th_per_layer,
                       bool share_key_basis = false);

// One cumulative energy curve: fractions are non-decreasing, end at 1,
// and rank90 is the smallest rank reaching 0.9 energy.
struct SpectrumCurve {
    std::size_t layer = 0;
    std::size_t head = 0;
    std::string kind;  // "kq" or "v"
    std::vector<double> cumulative_energy;
    std::size_t rank90 = 0;
};

std::vector<SpectrumCurve> spectrum_report(const RepresentationSet& reps);

// CSV with columns layer,head,kind,index,cumulative_energy.
std::string spectrum_csv(const std::vector<SpectrumCurve>& curves);

}  // namespace eigenkv

#include "eigenkv/rewrite.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace eigenkv {

CompressedLayer merge_basis(const AttentionWeights& w, const EigenBasis& basis,
                            std::size_t layer_idx, PosMode pos_mode) {
    if (layer_idx >= basis.layers.size()) {
        throw std::invalid_argument("merge_basis: layer " + std::to_string(layer_idx) +
                                    " beyond basis with " +
                                    std::to_string(basis.layers.size()) + " layers");
    }
    const auto& lb = basis.layers[layer_idx];
    const std::size_t heads = w.wq.size();
    if (lb.u_v.size() != heads) {
        throw std::invalid_argument("merge_basis: value basis head count mismatch");
    }
    if (pos_mode == PosMode::rope && !lb.shared_key_basis) {
        throw std::invalid_argument(
            "merge_basis: rope mode requires a shared key basis");
    }
    if (!lb.shared_key_basis && lb.u_k.size() != heads) {
        throw std::invalid_argument("merge_basis: key basis head count mismatch");
    }
    if (lb.shared_key_basis && lb.u_k.size() != 1) {
        throw std::invalid_argument("merge_basis: shared key basis must be a single matrix");
    }

    CompressedLayer out;
    out.r_k = lb.r_k;
    out.r_v = lb.r_v;
    out.shared_key_basis = lb.shared_key_basis;
    out.pos_mode = pos_mode;
    for (std::size_t i = 0; i < heads; ++i) {
        const Matrix& uk = lb.shared_key_basis ? lb.u_k[0] : lb.u_k[i];
        const Matrix& uv = lb.u_v[i];
        const std::size_t dh = w.wq[i].cols();
        if (uk.rows() != dh || uk.cols() != lb.r_k || uv.rows() != dh ||
            uv.cols() != lb.r_v) {
            throw std::invalid_argument("merge_basis: head " + std::to_string(i) +
                                        " basis shape mismatch");
        }
        if (pos_mode == PosMode::rope) {
            out.w.wq.push_back(w.wq[i]);  // queries stay full rank
        } else {
            out.w.wq.push_back(matmul(w.wq[i], uk));
        }
        out.w.wk.push_back(matmul(w.wk[i], uk));
        out.w.wv.push_back(matmul(w.wv[i], uv));
        out.w.wo.push_back(matmul_tn(uv, w.wo[i]));
    }
    if (pos_mode == PosMode::rope) {
        out.key_unproject = transpose(lb.u_k[0]);
    }
    return out;
}

Matrix compressed_attention_forward(const Matrix& x, const AttentionConfig& cfg,
                                    const CompressedLayer& layer, KvCache& cache,
                                    std::size_t layer_idx, AttnCounters* counters,
                                    const KvTransform* kv_transform) {
    if (layer.pos_mode == PosMode::rope) {
        return rope_eigen_forward(x, cfg, layer, cache, layer_idx, counters,
                                  kv_transform);
    }
    return eigen_attention_forward(x, cfg, layer, cache, layer_idx, counters,
                                   kv_transform);
}

Matrix eigen_attention_forward(const Matrix& x, const AttentionConfig& cfg,
                               const CompressedLayer& layer, KvCache& cache,
                               std::size_t layer_idx, AttnCounters* counters,
                               const KvTransform* kv_transform) {
    if (layer.pos_mode == PosMode::rope) {
        throw std::invalid_argument(
            "eigen_attention_forward: rope layers use the lifted path");
    }
    AttentionConfig c = cfg;
    c.kv_rank = layer.r_k;
    c.pos_mode = layer.pos_mode;
    return attend_chunk(x, c, layer.w, cache, layer_idx, counters, kv_transform);
}

Matrix rope_eigen_forward(const Matrix& x, const AttentionConfig& cfg,
                          const CompressedLayer& layer, KvCache& cache,
                          std::size_t layer_idx, AttnCounters* counters,
                          const KvTransform* kv_transform) {
    if (layer.pos_mode != PosMode::rope || !layer.key_unproject ||
        !layer.shared_key_basis) {
        throw std::invalid_argument(
            "rope_eigen_forward: needs rope mode with a shared key basis");
    }
    AttentionConfig c = cfg;
    c.kv_rank = layer.r_k;
    c.pos_mode = PosMode::rope;
    c.validate();
    if (x.cols() != c.d_model) {
        throw std::invalid_argument("rope_eigen_forward: input width mismatch");
    }
    const Matrix& lift = *layer.key_unproject;  // r_k x d_head
    if (lift.rows() != layer.r_k || lift.cols() != c.d_head) {
        throw std::invalid_argument("rope_eigen_forward: key_unproject shape mismatch");
    }

    const std::size_t start = cache.layer_len(layer_idx);
    const std::size_t m = x.rows();
    const double scale = 1.0 / std::sqrt(static_cast<double>(c.d_head));
    MacCounter* core = counters ? &counters->core : nullptr;
    MacCounter* lift_macs = counters ? &counters->lift : nullptr;

    Matrix y(m, c.d_model);
    for (std::size_t i = 0; i < c.n_heads; ++i) {
        Matrix q = matmul(x, layer.w.wq[i], core);  // full d_head columns
        Matrix kn = matmul(x, layer.w.wk[i], core);  // r_k, not yet rotated
        Matrix vn = matmul(x, layer.w.wv[i], core);
        if (kv_transform && *kv_transform) (*kv_transform)(kn, vn, layer_idx, i);
        auto& state = cache.layers[layer_idx][i];
        append_rows(state.keys, kn);
        append_rows(state.values, vn);

        // The cache stays r_k wide; every call pays the lift over the whole
        // key store, which is the latency cost this mode trades for memory.
        Matrix k_lift = matmul(state.keys, lift, lift_macs);
        rope_rotate_rows(k_lift, 0);
        rope_rotate_rows(q, start);
        Matrix head_out =
            attend_head(q, k_lift, state.values, scale, start, std::nullopt, core);
        y = add(y, matmul(head_out, layer.w.wo[i], core));
    }
    cache.seq_len = std::max(cache.seq_len, start + m);
    return y;
}

}  // namespace eigenkv

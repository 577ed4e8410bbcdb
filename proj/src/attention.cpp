#include "eigenkv/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace eigenkv {

std::string to_string(PosMode mode) {
    switch (mode) {
        case PosMode::learned: return "learned";
        case PosMode::alibi: return "alibi";
        case PosMode::rope: return "rope";
    }
    return "unknown";
}

PosMode pos_mode_from_string(const std::string& name) {
    if (name == "learned") return PosMode::learned;
    if (name == "alibi") return PosMode::alibi;
    if (name == "rope") return PosMode::rope;
    throw std::invalid_argument("unknown position mode: " + name);
}

void AttentionConfig::validate() const {
    if (d_model == 0 || n_heads == 0 || d_head == 0) {
        throw std::invalid_argument("attention config: zero dimension");
    }
    if (d_model != n_heads * d_head) {
        throw std::invalid_argument("attention config: d_model " + std::to_string(d_model) +
                                    " != n_heads * d_head " +
                                    std::to_string(n_heads * d_head));
    }
    if (kv_rank < 1 || kv_rank > d_head) {
        throw std::invalid_argument("attention config: kv_rank " + std::to_string(kv_rank) +
                                    " outside [1, " + std::to_string(d_head) + "]");
    }
    if (pos_mode == PosMode::rope && d_head % 2 != 0) {
        throw std::invalid_argument("attention config: rope needs even d_head, got " +
                                    std::to_string(d_head));
    }
}

KvCache KvCache::make(std::size_t n_layers, std::size_t n_heads, std::size_t batch,
                      std::size_t precision_bits) {
    KvCache cache;
    cache.layers.assign(n_layers, std::vector<HeadState>(n_heads));
    cache.batch = batch;
    cache.precision_bits = precision_bits;
    return cache;
}

void KvCache::clear() {
    for (auto& layer : layers) {
        for (auto& head : layer) {
            head.keys = Matrix();
            head.values = Matrix();
        }
    }
    seq_len = 0;
}

std::size_t KvCache::layer_len(std::size_t layer) const {
    if (layer >= layers.size() || layers[layer].empty()) {
        throw std::invalid_argument("cache layer index out of range");
    }
    return layers[layer][0].keys.rows();
}

std::uint64_t KvCache::bits() const {
    std::uint64_t total = 0;
    for (const auto& layer : layers) {
        for (const auto& head : layer) {
            const std::uint64_t n = head.keys.rows();
            const std::uint64_t width = head.keys.cols() + head.values.cols();
            total += static_cast<std::uint64_t>(batch) * n * width * precision_bits;
        }
    }
    return total;
}

std::vector<double> alibi_slopes(std::size_t n_heads) {
    std::vector<double> slopes(n_heads);
    for (std::size_t k = 0; k < n_heads; ++k) {
        slopes[k] = std::pow(2.0, -8.0 * static_cast<double>(k + 1) /
                                      static_cast<double>(n_heads));
    }
    return slopes;
}

void rope_rotate_rows(Matrix& x, std::size_t start_pos, double base) {
    if (x.cols() % 2 != 0) {
        throw std::invalid_argument("rope rotation needs even width, got " +
                                    std::to_string(x.cols()));
    }
    const std::size_t half = x.cols() / 2;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double pos = static_cast<double>(start_pos + i);
        double* row = x.row(i);
        for (std::size_t j = 0; j < half; ++j) {
            const double theta =
                pos * std::pow(base, -2.0 * static_cast<double>(j) /
                                         static_cast<double>(x.cols()));
            const double c = std::cos(theta);
            const double s = std::sin(theta);
            const double a = row[2 * j];
            const double b = row[2 * j + 1];
            row[2 * j] = a * c - b * s;
            row[2 * j + 1] = a * s + b * c;
        }
    }
}

Matrix attend_head(const Matrix& q, const Matrix& k, const Matrix& v, double scale,
                   std::size_t q_start, std::optional<double> alibi_slope,
                   MacCounter* macs) {
    if (q.cols() != k.cols() || k.rows() != v.rows()) {
        throw std::invalid_argument("attend_head: shape mismatch");
    }
    const std::size_t m = q.rows();
    const std::size_t n = k.rows();
    if (q_start + m > n) {
        throw std::invalid_argument("attend_head: query positions extend past key store");
    }

    Matrix scores = matmul_nt(q, k, macs);
    const double neg_inf = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t pos = q_start + i;
        double* row = scores.row(i);
        for (std::size_t j = 0; j < n; ++j) {
            if (j > pos) {
                row[j] = neg_inf;
            } else {
                row[j] *= scale;
                if (alibi_slope) {
                    row[j] -= *alibi_slope * static_cast<double>(pos - j);
                }
            }
        }
    }
    Matrix attn = softmax_rows(scores);
    return matmul(attn, v, macs);
}

Matrix attend_chunk(const Matrix& x, const AttentionConfig& cfg, const AttentionWeights& w,
                    KvCache& cache, std::size_t layer, AttnCounters* counters,
                    const KvTransform* kv_transform) {
    cfg.validate();
    if (x.cols() != cfg.d_model) {
        throw std::invalid_argument("attend_chunk: input width " + std::to_string(x.cols()) +
                                    " != d_model " + std::to_string(cfg.d_model));
    }
    if (w.wq.size() != cfg.n_heads || w.wk.size() != cfg.n_heads ||
        w.wv.size() != cfg.n_heads || w.wo.size() != cfg.n_heads) {
        throw std::invalid_argument("attend_chunk: weight head count mismatch");
    }
    const std::size_t start = cache.layer_len(layer);
    const std::size_t m = x.rows();
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
    MacCounter* core = counters ? &counters->core : nullptr;

    std::vector<double> slopes;
    if (cfg.pos_mode == PosMode::alibi) slopes = alibi_slopes(cfg.n_heads);

    Matrix y(m, cfg.d_model);
    for (std::size_t i = 0; i < cfg.n_heads; ++i) {
        if (w.wq[i].rows() != cfg.d_model || w.wk[i].rows() != cfg.d_model ||
            w.wv[i].rows() != cfg.d_model || w.wq[i].cols() != w.wk[i].cols() ||
            w.wo[i].rows() != w.wv[i].cols() || w.wo[i].cols() != cfg.d_model) {
            throw std::invalid_argument("attend_chunk: head " + std::to_string(i) +
                                        " weight shapes inconsistent");
        }
        Matrix q = matmul(x, w.wq[i], core);
        Matrix kn = matmul(x, w.wk[i], core);
        Matrix vn = matmul(x, w.wv[i], core);
        if (cfg.pos_mode == PosMode::rope) {
            // Keys are cached post-rotation here; the reduced-rank rope
            // variant lives elsewhere and caches pre-rotation keys.
            rope_rotate_rows(q, start);
            rope_rotate_rows(kn, start);
        }
        if (kv_transform && *kv_transform) (*kv_transform)(kn, vn, layer, i);
        auto& state = cache.layers[layer][i];
        append_rows(state.keys, kn);
        append_rows(state.values, vn);

        std::optional<double> slope;
        if (cfg.pos_mode == PosMode::alibi) slope = slopes[i];
        Matrix head_out =
            attend_head(q, state.keys, state.values, scale, start, slope, core);
        y = add(y, matmul(head_out, w.wo[i], core));
    }
    cache.seq_len = std::max(cache.seq_len, start + m);
    return y;
}

Matrix prefill(const Matrix& x, const AttentionConfig& cfg, const AttentionWeights& w,
               KvCache& cache, std::size_t layer, AttnCounters* counters,
               const KvTransform* kv_transform) {
    if (cache.layer_len(layer) != 0) {
        throw std::invalid_argument("prefill: cache layer not empty");
    }
    return attend_chunk(x, cfg, w, cache, layer, counters, kv_transform);
}

Matrix decode_step(const Matrix& x_t, const AttentionConfig& cfg, const AttentionWeights& w,
                   KvCache& cache, std::size_t layer, AttnCounters* counters,
                   const KvTransform* kv_transform) {
    if (x_t.rows() != 1) {
        throw std::invalid_argument("decode_step: expected a single row, got " +
                                    std::to_string(x_t.rows()));
    }
    return attend_chunk(x_t, cfg, w, cache, layer, counters, kv_transform);
}

}  // namespace eigenkv

#include "eigenkv/quant.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace eigenkv {

namespace {

// Visits each group as a list of flat element indices, in storage order.
template <typename Fn>
void for_each_group(std::size_t rows, std::size_t cols, const QuantConfig& cfg, Fn&& fn) {
    std::vector<std::size_t> idx;
    if (cfg.axis == QuantAxis::channel) {
        for (std::size_t j = 0; j < cols; ++j) {
            for (std::size_t i0 = 0; i0 < rows; i0 += cfg.group_size) {
                const std::size_t end = std::min(rows, i0 + cfg.group_size);
                idx.clear();
                for (std::size_t i = i0; i < end; ++i) idx.push_back(i * cols + j);
                fn(idx);
            }
        }
    } else {
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j0 = 0; j0 < cols; j0 += cfg.group_size) {
                const std::size_t end = std::min(cols, j0 + cfg.group_size);
                idx.clear();
                for (std::size_t j = j0; j < end; ++j) idx.push_back(i * cols + j);
                fn(idx);
            }
        }
    }
}

std::size_t group_count(std::size_t rows, std::size_t cols, const QuantConfig& cfg) {
    const std::size_t grouped = cfg.axis == QuantAxis::channel ? rows : cols;
    const std::size_t other = cfg.axis == QuantAxis::channel ? cols : rows;
    return other * ((grouped + cfg.group_size - 1) / cfg.group_size);
}

void append_u16_le(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>(v >> 8));
}

std::uint16_t f32_top_half(double v) {
    return static_cast<std::uint16_t>(std::bit_cast<std::uint32_t>(static_cast<float>(v)) >> 16);
}

}  // namespace

void QuantConfig::validate() const {
    if (bits < 2 || bits > 15) {
        throw std::invalid_argument("quantization bits must lie in [2, 15]");
    }
    if (group_size == 0) {
        throw std::invalid_argument("group size must be positive");
    }
}

QuantizedTensor quantize(const Matrix& t, const QuantConfig& cfg) {
    cfg.validate();
    if (!all_finite(t)) {
        throw std::invalid_argument("cannot quantize non-finite values");
    }
    QuantizedTensor q;
    q.rows = t.rows();
    q.cols = t.cols();
    q.cfg = cfg;
    q.codes.assign(t.size(), 0);
    const double levels = static_cast<double>((1u << cfg.bits) - 1);
    for_each_group(t.rows(), t.cols(), cfg, [&](const std::vector<std::size_t>& idx) {
        double lo = t.data()[idx[0]], hi = lo;
        for (std::size_t e : idx) {
            lo = std::min(lo, t.data()[e]);
            hi = std::max(hi, t.data()[e]);
        }
        if (hi == lo) {
            q.scales.push_back(0.0);
            q.zero_points.push_back(lo);  // sentinel form: the constant itself
            return;
        }
        const double scale = (hi - lo) / levels;
        const double zp = std::round(-lo / scale);
        for (std::size_t e : idx) {
            const double code = std::round(t.data()[e] / scale + zp);
            q.codes[e] =
                static_cast<std::uint16_t>(std::clamp(code, 0.0, levels));
        }
        q.scales.push_back(scale);
        q.zero_points.push_back(zp);
    });
    return q;
}

Matrix dequantize(const QuantizedTensor& q) {
    Matrix out(q.rows, q.cols);
    std::size_t g = 0;
    for_each_group(q.rows, q.cols, q.cfg, [&](const std::vector<std::size_t>& idx) {
        const double scale = q.scales[g];
        const double zp = q.zero_points[g];
        ++g;
        for (std::size_t e : idx) {
            out.data()[e] = scale == 0.0
                                ? zp
                                : scale * (static_cast<double>(q.codes[e]) - zp);
        }
    });
    return out;
}

std::string serialize_quantized(const QuantizedTensor& q) {
    std::string out;
    out.reserve(quantized_bytes(q.rows, q.cols, q.cfg));
    std::uint32_t acc = 0;
    std::size_t acc_bits = 0;
    for (std::uint16_t code : q.codes) {
        acc |= static_cast<std::uint32_t>(code) << acc_bits;
        acc_bits += q.cfg.bits;
        while (acc_bits >= 8) {
            out.push_back(static_cast<char>(acc & 0xff));
            acc >>= 8;
            acc_bits -= 8;
        }
    }
    if (acc_bits > 0) out.push_back(static_cast<char>(acc & 0xff));
    for (std::size_t g = 0; g < q.scales.size(); ++g) {
        append_u16_le(out, f32_top_half(q.scales[g]));
        append_u16_le(out, f32_top_half(q.zero_points[g]));
    }
    return out;
}

std::size_t quantized_bytes(std::size_t rows, std::size_t cols, const QuantConfig& cfg) {
    const std::size_t code_bytes = (rows * cols * cfg.bits + 7) / 8;
    return code_bytes + 4 * group_count(rows, cols, cfg);
}

std::uint64_t kv_bytes(std::size_t r_k, std::size_t r_v, const QuantConfig& key_cfg,
                       const QuantConfig& value_cfg, std::size_t n, std::size_t batch,
                       std::size_t n_layers, std::size_t n_heads) {
    const auto tensor_bytes = [n](std::size_t r, const QuantConfig& cfg) -> std::uint64_t {
        if (cfg.bits >= 16) return static_cast<std::uint64_t>(n) * r * cfg.bits / 8;
        return quantized_bytes(n, r, cfg);
    };
    return static_cast<std::uint64_t>(batch) * n_layers * n_heads *
           (tensor_bytes(r_k, key_cfg) + tensor_bytes(r_v, value_cfg));
}

std::uint64_t model_kv_bytes(const TransformerWeights& model, const QuantConfig& key_cfg,
                             const QuantConfig& value_cfg, std::size_t n,
                             std::size_t batch) {
    std::uint64_t total = 0;
    const std::size_t dh = model.spec.d_head();
    for (std::size_t l = 0; l < model.spec.n_layers; ++l) {
        std::size_t r_k = dh, r_v = dh;
        if (const auto* cl = std::get_if<CompressedLayer>(&model.layers[l].attn)) {
            r_k = cl->r_k;
            r_v = cl->r_v;
        }
        total += kv_bytes(r_k, r_v, key_cfg, value_cfg, n, batch, 1,
                          model.spec.n_heads);
    }
    return total;
}

KvTransform quantizing_transform(const QuantConfig& key_cfg, const QuantConfig& value_cfg) {
    if (key_cfg.bits >= 16 && value_cfg.bits >= 16) {
        return KvTransform();  // empty hook, caller treats it as identity
    }
    return [key_cfg, value_cfg](Matrix& k_chunk, Matrix& v_chunk, std::size_t,
                                std::size_t) {
        if (key_cfg.bits < 16) k_chunk = dequantize(quantize(k_chunk, key_cfg));
        if (value_cfg.bits < 16) v_chunk = dequantize(quantize(v_chunk, value_cfg));
    };
}

std::vector<StackedPoint> eval_stacked(const TransformerWeights& model,
                                       double target_ratio,
                                       const std::vector<std::pair<std::size_t, std::size_t>>& quant_grid,
                                       const std::vector<int>& corpus_ids,
                                       const AllotmentConfig& allot_base,
                                       const std::vector<double>& budget_grid) {
    const std::size_t calib_len = allot_base.n_samples * allot_base.seq_len;
    if (corpus_ids.size() < calib_len + 2) {
        throw std::invalid_argument("corpus too short to calibrate and evaluate");
    }
    const std::vector<int> calib(corpus_ids.begin(), corpus_ids.begin() + calib_len);
    const std::vector<int> eval_ids(corpus_ids.begin() + calib_len, corpus_ids.end());

    auto sweep = budget_sweep(model, calib, allot_base, budget_grid);
    auto chosen = choose_budget(sweep, allot_base, target_ratio);
    auto [eigen_model, result] = allot(model, calib, chosen);
    (void)result;

    std::vector<StackedPoint> points;
    const std::size_t n = model.spec.max_seq;
    for (const auto& [bits, group] : quant_grid) {
        QuantConfig key_cfg{bits, group, QuantAxis::channel};
        QuantConfig value_cfg{bits, group, QuantAxis::token};
        const KvTransform kvt = quantizing_transform(key_cfg, value_cfg);
        const KvTransform* hook = kvt ? &kvt : nullptr;
        for (const auto* fam : {"standard", "eigen"}) {
            const TransformerWeights& m =
                std::string(fam) == "standard" ? model : eigen_model;
            StackedPoint p;
            p.family = fam;
            p.bits = bits;
            p.group_size = group;
            p.cache_bytes = model_kv_bytes(m, key_cfg, value_cfg, n, 1);
            p.ppl = perplexity(m, eval_ids, hook);
            points.push_back(std::move(p));
        }
    }
    return points;
}

std::string stacked_csv(const std::vector<StackedPoint>& points) {
    std::ostringstream out;
    out << "family,bits,group_size,kv_bytes,ppl\n";
    out << std::setprecision(10);
    for (const auto& p : points) {
        out << p.family << ',' << p.bits << ',' << p.group_size << ','
            << p.cache_bytes << ',' << p.ppl << '\n';
    }
    return out.str();
}

}  // namespace eigenkv

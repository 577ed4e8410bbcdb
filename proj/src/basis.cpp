#include "eigenkv/basis.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "eigenkv/model.hpp"

namespace eigenkv {

namespace {

// First k columns of v.
Matrix column_prefix(const Matrix& v, std::size_t k) {
    Matrix out(v.rows(), k);
    for (std::size_t i = 0; i < v.rows(); ++i)
        for (std::size_t j = 0; j < k; ++j) out(i, j) = v(i, j);
    return out;
}

std::vector<double> cumulative_energy(const std::vector<double>& sv) {
    std::vector<double> cum(sv.size());
    double run = 0.0;
    for (std::size_t i = 0; i < sv.size(); ++i) {
        run += sv[i] * sv[i];
        cum[i] = run;
    }
    return cum;
}

struct LayerSpectra {
    // one entry per head; shared key handling collapses kq to one entry
    std::vector<RightSingularBasis> kq;
    std::vector<RightSingularBasis> v;
};

}  // namespace

std::size_t rank_for_threshold(const std::vector<double>& singular_values,
                               double eps_th) {
    if (!(eps_th > 0.0) || eps_th > 1.0) {
        throw std::invalid_argument("energy threshold must lie in (0, 1], got " +
                                    std::to_string(eps_th));
    }
    const auto cum = cumulative_energy(singular_values);
    if (cum.empty()) return 0;
    // The target uses the same running sum that produced cum, so eps_th == 1
    // asks for exact equality with the total and lands on the last nonzero
    // value rather than suffering round-off.
    const double target = eps_th * cum.back();
    for (std::size_t r = 0; r < cum.size(); ++r) {
        if (cum[r] >= target) return r + 1;
    }
    return cum.size();
}

std::vector<RepresentationSet::HeadReps> collect_layer_reps(
    const ModelSpec& spec, const DecoderLayer& layer,
    const std::vector<Matrix>& sample_inputs, std::size_t averaging_factor) {
    const auto* aw = std::get_if<AttentionWeights>(&layer.attn);
    if (!aw) {
        throw std::invalid_argument(
            "representation collection needs a standard (uncompressed) layer");
    }
    if (averaging_factor == 0 || sample_inputs.size() % averaging_factor != 0) {
        throw std::invalid_argument("averaging factor " +
                                    std::to_string(averaging_factor) +
                                    " must divide the sample count " +
                                    std::to_string(sample_inputs.size()));
    }
    std::vector<RepresentationSet::HeadReps> heads(spec.n_heads);
    const double inv_a = 1.0 / static_cast<double>(averaging_factor);
    std::size_t in_group = 0;
    std::vector<Matrix> group_q(spec.n_heads), group_k(spec.n_heads),
        group_v(spec.n_heads);
    for (const Matrix& x : sample_inputs) {
        Matrix a = layer_norm(x, layer.ln1);
        for (std::size_t i = 0; i < spec.n_heads; ++i) {
            // raw projections, before any position rotation: the basis must
            // span the space the merged weights will project into
            Matrix q = matmul(a, aw->wq[i]);
            Matrix k = matmul(a, aw->wk[i]);
            Matrix v = matmul(a, aw->wv[i]);
            if (in_group == 0) {
                group_q[i] = scale(q, inv_a);
                group_k[i] = scale(k, inv_a);
                group_v[i] = scale(v, inv_a);
            } else {
                group_q[i] = add(group_q[i], scale(q, inv_a));
                group_k[i] = add(group_k[i], scale(k, inv_a));
                group_v[i] = add(group_v[i], scale(v, inv_a));
            }
        }
        if (++in_group == averaging_factor) {
            for (std::size_t i = 0; i < spec.n_heads; ++i) {
                append_rows(heads[i].q, group_q[i]);
                append_rows(heads[i].k, group_k[i]);
                append_rows(heads[i].v, group_v[i]);
            }
            in_group = 0;
        }
    }
    return heads;
}

RepresentationSet collect_representations(const TransformerWeights& model,
                                          const std::vector<int>& corpus_ids,
                                          std::size_t n_samples, std::size_t seq_len,
                                          std::size_t averaging_factor,
                                          std::size_t row_cap) {
    const auto& spec = model.spec;
    if (n_samples == 0 || seq_len == 0) {
        throw std::invalid_argument("calibration needs positive sample count and length");
    }
    const std::size_t needed = n_samples * seq_len;
    if (corpus_ids.size() < needed) {
        throw std::invalid_argument("calibration corpus has " +
                                    std::to_string(corpus_ids.size()) +
                                    " tokens, needs " + std::to_string(needed));
    }
    if (seq_len > spec.max_seq) {
        throw std::invalid_argument("calibration length exceeds max_seq");
    }
    std::size_t a = averaging_factor == 0 ? 1 : averaging_factor;
    if (n_samples % a != 0) {
        throw std::invalid_argument("averaging factor must divide n_samples");
    }
    if (row_cap > 0) {
        // escalate by doubling while the stack would overflow the cap;
        // fall back to one averaged block if doubling stops dividing evenly
        while ((n_samples / a) * seq_len > row_cap) {
            if (a == n_samples) break;
            const std::size_t doubled = a * 2;
            a = (n_samples % doubled == 0) ? doubled : n_samples;
        }
    }

    // consecutive non-overlapping windows keep collection deterministic
    std::vector<Matrix> inputs;
    for (std::size_t s = 0; s < n_samples; ++s) {
        std::vector<int> window(corpus_ids.begin() + s * seq_len,
                                corpus_ids.begin() + (s + 1) * seq_len);
        inputs.push_back(embed(model, window, 0));
    }

    RepresentationSet reps;
    reps.n_samples = n_samples;
    reps.seq_len = seq_len;
    reps.averaging_factor = a;
    reps.layers.resize(spec.n_layers);
    for (std::size_t l = 0; l < spec.n_layers; ++l) {
        reps.layers[l] = collect_layer_reps(spec, model.layers[l], inputs, a);
        for (auto& x : inputs) x = layer_forward(spec, model.layers[l], x);
    }
    return reps;
}

EigenBasis build_basis(const RepresentationSet& reps,
                       const std::vector<double>& eps_th_per_layer,
                       bool share_key_basis) {
    if (eps_th_per_layer.size() != reps.layers.size()) {
        throw std::invalid_argument("need one threshold per layer: " +
                                    std::to_string(eps_th_per_layer.size()) + " vs " +
                                    std::to_string(reps.layers.size()));
    }
    EigenBasis basis;
    for (std::size_t l = 0; l < reps.layers.size(); ++l) {
        const auto& heads = reps.layers[l];
        const double eps = eps_th_per_layer[l];
        EigenBasis::LayerBasis lb;
        lb.eps_th = eps;
        lb.shared_key_basis = share_key_basis;

        std::vector<RightSingularBasis> kq_decomp;
        std::vector<RightSingularBasis> v_decomp;
        try {
            if (share_key_basis) {
                Matrix all;
                for (const auto& h : heads) {
                    append_rows(all, h.q);
                    append_rows(all, h.k);
                }
                kq_decomp.push_back(right_singular_basis(all));
            } else {
                for (const auto& h : heads) {
                    Matrix stack = h.q;
                    append_rows(stack, h.k);
                    kq_decomp.push_back(right_singular_basis(stack));
                }
            }
            for (const auto& h : heads) {
                v_decomp.push_back(right_singular_basis(h.v));
            }
        } catch (const std::exception& e) {
            throw std::runtime_error("basis extraction failed at layer " +
                                     std::to_string(l) + ": " + e.what());
        }

        std::size_t r_k = 0;
        for (const auto& d : kq_decomp) {
            r_k = std::max(r_k, rank_for_threshold(d.singular_values, eps));
        }
        std::size_t r_v = 0;
        for (const auto& d : v_decomp) {
            r_v = std::max(r_v, rank_for_threshold(d.singular_values, eps));
        }
        // degenerate all-zero stacks still need one column for the shapes
        r_k = std::max<std::size_t>(r_k, 1);
        r_v = std::max<std::size_t>(r_v, 1);
        for (const auto& d : kq_decomp) r_k = std::min(r_k, d.v.cols());
        for (const auto& d : v_decomp) r_v = std::min(r_v, d.v.cols());

        for (const auto& d : kq_decomp) lb.u_k.push_back(column_prefix(d.v, r_k));
        for (const auto& d : v_decomp) lb.u_v.push_back(column_prefix(d.v, r_v));
        lb.r_k = r_k;
        lb.r_v = r_v;
        basis.layers.push_back(std::move(lb));
    }
    return basis;
}

std::vector<SpectrumCurve> spectrum_report(const RepresentationSet& reps) {
    std::vector<SpectrumCurve> curves;
    for (std::size_t l = 0; l < reps.layers.size(); ++l) {
        for (std::size_t h = 0; h < reps.layers[l].size(); ++h) {
            const auto& head = reps.layers[l][h];
            auto emit = [&](const Matrix& stack, const std::string& kind) {
                SpectrumCurve c;
                c.layer = l;
                c.head = h;
                c.kind = kind;
                const auto sv = right_singular_basis(stack).singular_values;
                const auto cum = cumulative_energy(sv);
                const double total = cum.empty() ? 0.0 : cum.back();
                c.cumulative_energy.resize(cum.size());
                for (std::size_t i = 0; i < cum.size(); ++i) {
                    c.cumulative_energy[i] = total > 0.0 ? cum[i] / total : 1.0;
                }
                c.rank90 = rank_for_threshold(sv, 0.9);
                curves.push_back(std::move(c));
            };
            Matrix kq = head.q;
            append_rows(kq, head.k);
            emit(kq, "kq");
            emit(head.v, "v");
        }
    }
    return curves;
}

std::string spectrum_csv(const std::vector<SpectrumCurve>& curves) {
    std::ostringstream out;
    out << "layer,head,kind,index,cumulative_energy\n";
    out.precision(17);
    for (const auto& c : curves) {
        for (std::size_t i = 0; i < c.cumulative_energy.size(); ++i) {
            out << c.layer << ',' << c.head << ',' << c.kind << ',' << (i + 1) << ','
                << c.cumulative_energy[i] << '\n';
        }
    }
    return out.str();
}

}  // namespace eigenkv

#include "eigenkv/allot.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "eigenkv/basis.hpp"
#include "eigenkv/rewrite.hpp"

namespace eigenkv {

namespace {

struct LayerDecomps {
    std::vector<RightSingularBasis> kq;  // one per head, or a single shared entry
    std::vector<RightSingularBasis> v;   // one per head
};

LayerDecomps decompose_layer(const std::vector<RepresentationSet::HeadReps>& heads,
                             bool share_key_basis) {
    LayerDecomps d;
    if (share_key_basis) {
        Matrix stack;
        for (const auto& h : heads) {
            append_rows(stack, h.q);
            append_rows(stack, h.k);
        }
        d.kq.push_back(right_singular_basis(stack));
    } else {
        for (const auto& h : heads) {
            Matrix stack = h.q;
            append_rows(stack, h.k);
            d.kq.push_back(right_singular_basis(stack));
        }
    }
    for (const auto& h : heads) d.v.push_back(right_singular_basis(h.v));
    return d;
}

std::size_t rank_at(const std::vector<RightSingularBasis>& decomps, double eps,
                    std::size_t d_head) {
    std::size_t r = 1;
    for (const auto& d : decomps)
        r = std::max(r, rank_for_threshold(d.singular_values, eps));
    return std::min(r, d_head);
}

Matrix leading_columns(const Matrix& v, std::size_t r) {
    Matrix out(v.rows(), r);
    for (std::size_t i = 0; i < v.rows(); ++i)
        for (std::size_t j = 0; j < r; ++j) out(i, j) = v(i, j);
    return out;
}

EigenBasis basis_at(const LayerDecomps& d, double eps, std::size_t r_k, std::size_t r_v,
                    bool share_key_basis) {
    EigenBasis b;
    b.layers.resize(1);
    auto& lb = b.layers[0];
    lb.r_k = r_k;
    lb.r_v = r_v;
    lb.eps_th = eps;
    lb.shared_key_basis = share_key_basis;
    for (const auto& dec : d.kq) lb.u_k.push_back(leading_columns(dec.v, r_k));
    for (const auto& dec : d.v) lb.u_v.push_back(leading_columns(dec.v, r_v));
    return b;
}

double squared_frobenius(const Matrix& m) {
    const double f = frobenius_norm(m);
    return f * f;
}

}  // namespace

void AllotmentConfig::validate() const {
    if (!(step_size > 0.0 && step_size < 1.0)) {
        throw std::invalid_argument("step size must lie in (0, 1)");
    }
    if (error_budget < 0.0) {
        throw std::invalid_argument("error budget must be non-negative");
    }
    if (eps_floor < step_size || eps_floor > 1.0) {
        throw std::invalid_argument("eps floor must lie in [step_size, 1]");
    }
    if (n_samples == 0 || seq_len == 0) {
        throw std::invalid_argument("calibration needs positive sample count and length");
    }
    if (n_samples % (averaging_factor == 0 ? 1 : averaging_factor) != 0) {
        throw std::invalid_argument("averaging factor must divide n_samples");
    }
}

std::pair<TransformerWeights, AllotmentResult> allot(const TransformerWeights& model,
                                                     const std::vector<int>& corpus_ids,
                                                     const AllotmentConfig& cfg) {
    cfg.validate();
    const auto& spec = model.spec;
    spec.validate();
    for (std::size_t l = 0; l < spec.n_layers; ++l) {
        if (model.layer_compressed(l)) {
            throw std::invalid_argument("threshold search needs an uncompressed model");
        }
    }
    const std::size_t needed = cfg.n_samples * cfg.seq_len;
    if (corpus_ids.size() < needed) {
        throw std::invalid_argument("calibration corpus has " +
                                    std::to_string(corpus_ids.size()) +
                                    " tokens, needs " + std::to_string(needed));
    }
    if (cfg.seq_len > spec.max_seq) {
        throw std::invalid_argument("calibration length exceeds max_seq");
    }

    std::size_t a = cfg.averaging_factor == 0 ? 1 : cfg.averaging_factor;
    if (cfg.row_cap > 0) {
        while ((cfg.n_samples / a) * cfg.seq_len > cfg.row_cap) {
            if (a == cfg.n_samples) break;
            const std::size_t doubled = a * 2;
            a = (cfg.n_samples % doubled == 0) ? doubled : cfg.n_samples;
        }
    }

    std::vector<Matrix> xs;
    for (std::size_t s = 0; s < cfg.n_samples; ++s) {
        std::vector<int> window(corpus_ids.begin() + s * cfg.seq_len,
                                corpus_ids.begin() + (s + 1) * cfg.seq_len);
        xs.push_back(embed(model, window, 0));
    }

    const bool share = spec.pos_mode == PosMode::rope;
    const std::size_t dh = spec.d_head();
    TransformerWeights out = model;
    AllotmentResult res;

    for (std::size_t l = 0; l < spec.n_layers; ++l) {
        const DecoderLayer& orig = model.layers[l];
        std::vector<Matrix> ref(cfg.n_samples);
        double ref_energy = 0.0;
        for (std::size_t s = 0; s < cfg.n_samples; ++s) {
            ref[s] = layer_forward(spec, orig, xs[s]);
            ref_energy += squared_frobenius(ref[s]);
        }
        const auto decomps =
            decompose_layer(collect_layer_reps(spec, orig, xs, a), share);
        const auto& w = std::get<AttentionWeights>(orig.attn);

        AllotmentResult::LayerRecord rec;
        rec.layer = l;
        rec.r_k = dh;
        rec.r_v = dh;
        DecoderLayer accepted;
        std::vector<Matrix> accepted_out;
        bool have = false;
        std::size_t prev_rk = 0, prev_rv = 0;

        for (std::size_t k = 0;; ++k) {
            const double eps = 1.0 - static_cast<double>(k) * cfg.step_size;
            if (eps < cfg.eps_floor - 1e-12) break;
            const std::size_t r_k = rank_at(decomps.kq, eps, dh);
            const std::size_t r_v = rank_at(decomps.v, eps, dh);
            if (have && r_k == prev_rk && r_v == prev_rv) {
                rec.eps_th = eps;  // same prefix, same layer, same error
                continue;
            }
            DecoderLayer cand = orig;
            cand.attn = merge_basis(w, basis_at(decomps, eps, r_k, r_v, share), 0,
                                    spec.pos_mode);
            double err_energy = 0.0;
            std::vector<Matrix> outs(cfg.n_samples);
            for (std::size_t s = 0; s < cfg.n_samples; ++s) {
                outs[s] = layer_forward(spec, cand, xs[s]);
                err_energy += squared_frobenius(sub(outs[s], ref[s]));
            }
            const double e =
                ref_energy > 0.0
                    ? err_energy / ref_energy
                    : (err_energy == 0.0 ? 0.0
                                         : std::numeric_limits<double>::infinity());
            if (e > cfg.error_budget) break;
            rec.eps_th = eps;
            rec.r_k = r_k;
            rec.r_v = r_v;
            rec.error = e;
            rec.compressed = true;
            accepted = std::move(cand);
            accepted_out = std::move(outs);
            have = true;
            prev_rk = r_k;
            prev_rv = r_v;
        }

        if (have) {
            out.layers[l] = accepted;
            xs = std::move(accepted_out);
        } else {
            rec.eps_th = 1.0;
            rec.r_k = dh;
            rec.r_v = dh;
            rec.error = 0.0;
            rec.compressed = false;
            xs = std::move(ref);
        }
        res.layers.push_back(rec);
    }

    double rank_sum = 0.0, rk_sum = 0.0, rv_sum = 0.0;
    for (const auto& rec : res.layers) {
        rank_sum += static_cast<double>(rec.r_k + rec.r_v);
        rk_sum += static_cast<double>(rec.r_k);
        rv_sum += static_cast<double>(rec.r_v);
    }
    const double L = static_cast<double>(spec.n_layers);
    res.kv_ratio = rank_sum / (2.0 * L * static_cast<double>(dh));
    res.mean_r_k = rk_sum / L;
    res.mean_r_v = rv_sum / L;
    return {std::move(out), std::move(res)};
}

std::vector<BudgetSweepRow> budget_sweep(const TransformerWeights& model,
                                         const std::vector<int>& corpus_ids,
                                         const AllotmentConfig& base,
                                         const std::vector<double>& budget_grid) {
    if (budget_grid.empty()) {
        throw std::invalid_argument("budget grid must not be empty");
    }
    std::vector<double> grid = budget_grid;
    std::sort(grid.begin(), grid.end());
    std::vector<BudgetSweepRow> rows;
    for (double e_b : grid) {
        AllotmentConfig cfg = base;
        cfg.error_budget = e_b;
        auto [compressed, result] = allot(model, corpus_ids, cfg);
        (void)compressed;
        BudgetSweepRow row;
        row.error_budget = e_b;
        row.kv_ratio = result.kv_ratio;
        std::size_t elems = 0;
        for (const auto& rec : result.layers) elems += rec.r_k + rec.r_v;
        row.kv_elems_per_token = elems * model.spec.n_heads;
        row.result = std::move(result);
        rows.push_back(std::move(row));
    }
    return rows;
}

AllotmentConfig choose_budget(const std::vector<BudgetSweepRow>& sweep,
                              const AllotmentConfig& base, double target_ratio) {
    if (sweep.empty()) {
        throw std::invalid_argument("cannot choose a budget from an empty sweep");
    }
    const BudgetSweepRow* pick = nullptr;
    for (const auto& row : sweep) {
        if (row.kv_ratio <= target_ratio && (!pick || row.error_budget < pick->error_budget)) {
            pick = &row;
        }
    }
    if (!pick) {
        // unreachable target: report the best ratio achieved, preferring
        // the smaller budget on ties
        for (const auto& row : sweep) {
            if (!pick || row.kv_ratio < pick->kv_ratio) pick = &row;
        }
    }
    AllotmentConfig cfg = base;
    cfg.error_budget = pick->error_budget;
    return cfg;
}

std::string targeting_csv(const std::string& model_label,
                          const std::vector<BudgetSweepRow>& sweep) {
    std::ostringstream out;
    out << "model,compression,kv_size,e_b\n";
    out << std::setprecision(10);
    for (const auto& row : sweep) {
        out << model_label << ',' << row.kv_ratio << ',' << row.kv_elems_per_token
            << ',' << row.error_budget << '\n';
    }
    return out.str();
}

std::string rank_csv(const AllotmentResult& result) {
    std::ostringstream out;
    out << "layer,r_k,r_v,eps_th,e\n";
    out << std::setprecision(10);
    for (const auto& rec : result.layers) {
        out << rec.layer << ',' << rec.r_k << ',' << rec.r_v << ',' << rec.eps_th
            << ',' << rec.error << '\n';
    }
    return out.str();
}

std::string allotment_to_json(const AllotmentResult& result, const AllotmentConfig& cfg) {
    nlohmann::json j;
    j["config"] = {{"error_budget", cfg.error_budget},
                   {"step_size", cfg.step_size},
                   {"eps_floor", cfg.eps_floor},
                   {"n_samples", cfg.n_samples},
                   {"seq_len", cfg.seq_len},
                   {"averaging_factor", cfg.averaging_factor},
                   {"row_cap", cfg.row_cap}};
    j["kv_ratio"] = result.kv_ratio;
    j["mean_r_k"] = result.mean_r_k;
    j["mean_r_v"] = result.mean_r_v;
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& rec : result.layers) {
        layers.push_back({{"layer", rec.layer},
                          {"eps_th", rec.eps_th},
                          {"r_k", rec.r_k},
                          {"r_v", rec.r_v},
                          {"error", rec.error},
                          {"compressed", rec.compressed}});
    }
    j["layers"] = std::move(layers);
    return j.dump(2);
}

AllotmentResult allotment_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("allotment report is not valid JSON: " +
                                 std::string(e.what()));
    }
    AllotmentResult res;
    res.kv_ratio = j.at("kv_ratio").get<double>();
    res.mean_r_k = j.at("mean_r_k").get<double>();
    res.mean_r_v = j.at("mean_r_v").get<double>();
    for (const auto& e : j.at("layers")) {
        AllotmentResult::LayerRecord rec;
        rec.layer = e.at("layer").get<std::size_t>();
        rec.eps_th = e.at("eps_th").get<double>();
        rec.r_k = e.at("r_k").get<std::size_t>();
        rec.r_v = e.at("r_v").get<std::size_t>();
        rec.error = e.at("error").get<double>();
        rec.compressed = e.at("compressed").get<bool>();
        res.layers.push_back(rec);
    }
    return res;
}

}  // namespace eigenkv

#include "eigenkv/cost.hpp"

#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace eigenkv {

namespace {

CostReport::LayerCost layer_cost(const ModelSpec& spec, std::size_t layer,
                                 const RankPair& r, std::size_t n) {
    const std::uint64_t d = spec.d_model;
    const std::uint64_t h = spec.n_heads;
    const std::uint64_t dh = spec.d_head();
    const std::uint64_t rk = r.r_k;
    const std::uint64_t rv = r.r_v;

    CostReport::LayerCost c;
    c.layer = layer;
    c.r_k = r.r_k;
    c.r_v = r.r_v;
    c.kv_elements = static_cast<std::uint64_t>(n) * (rk + rv) * h;
    c.kv_bytes = c.kv_elements * 2;
    if (spec.pos_mode == PosMode::rope && r.standard) {
        // keys are cached post-rotation in head space; nothing to lift
        c.attn_params = h * 4 * d * dh;
        c.gen_flops_per_token = h * (4 * d * dh + 2 * n * dh);
        c.lift_flops_per_token = 0;
    } else if (spec.pos_mode == PosMode::rope) {
        // full-rank queries, shared key lift, scores in d_head space
        c.attn_params = h * (d * dh + d * rk + 2 * d * rv) + rk * dh;
        c.gen_flops_per_token =
            h * (d * dh + d * rk + 2 * d * rv + n * (dh + rv));
        c.lift_flops_per_token = h * n * rk * dh;
    } else {
        c.attn_params = h * 2 * d * (rk + rv);
        c.gen_flops_per_token = h * (2 * d * (rk + rv) + n * (rk + rv));
        c.lift_flops_per_token = 0;
    }
    return c;
}

}  // namespace

CostReport analytic_costs(const ModelSpec& spec,
                          const std::vector<RankPair>& ranks_per_layer, std::size_t n) {
    spec.validate();
    if (ranks_per_layer.size() != spec.n_layers) {
        throw std::invalid_argument("need one rank pair per layer");
    }
    const std::size_t dh = spec.d_head();
    for (const auto& r : ranks_per_layer) {
        if (r.r_k < 1 || r.r_k > dh || r.r_v < 1 || r.r_v > dh) {
            throw std::invalid_argument("ranks must lie in [1, d_head]");
        }
        if (r.standard && (r.r_k != dh || r.r_v != dh)) {
            throw std::invalid_argument("standard layers are full rank");
        }
    }

    CostReport rep;
    rep.n = n;
    rep.d_model = spec.d_model;
    rep.n_heads = spec.n_heads;
    rep.n_layers = spec.n_layers;
    rep.d_head = dh;
    rep.pos_mode = spec.pos_mode;

    CostReport::LayerCost base_total;
    for (std::size_t l = 0; l < spec.n_layers; ++l) {
        auto c = layer_cost(spec, l, ranks_per_layer[l], n);
        rep.kv_elements += c.kv_elements;
        rep.kv_bytes += c.kv_bytes;
        rep.attn_params += c.attn_params;
        rep.gen_flops_per_token += c.gen_flops_per_token;
        rep.lift_flops_per_token += c.lift_flops_per_token;
        rep.layers.push_back(std::move(c));

        auto b = layer_cost(spec, l, RankPair{dh, dh, true}, n);
        base_total.kv_elements += b.kv_elements;
        base_total.attn_params += b.attn_params;
        base_total.gen_flops_per_token += b.gen_flops_per_token;
    }
    rep.kv_ratio = static_cast<double>(rep.kv_elements) /
                   static_cast<double>(base_total.kv_elements);
    rep.param_ratio = static_cast<double>(rep.attn_params) /
                      static_cast<double>(base_total.attn_params);
    rep.flops_ratio = static_cast<double>(rep.gen_flops_per_token) /
                      static_cast<double>(base_total.gen_flops_per_token);
    return rep;
}

std::vector<RankPair> model_ranks(const TransformerWeights& model) {
    std::vector<RankPair> ranks;
    const std::size_t dh = model.spec.d_head();
    for (const auto& layer : model.layers) {
        if (const auto* cl = std::get_if<CompressedLayer>(&layer.attn)) {
            ranks.push_back({cl->r_k, cl->r_v, false});
        } else {
            ranks.push_back({dh, dh, true});
        }
    }
    return ranks;
}

double compression_ratio(const CostReport& eigen_report, const CostReport& std_report) {
    if (eigen_report.d_model != std_report.d_model ||
        eigen_report.n_heads != std_report.n_heads ||
        eigen_report.n_layers != std_report.n_layers ||
        eigen_report.n != std_report.n ||
        eigen_report.pos_mode != std_report.pos_mode) {
        throw std::invalid_argument("cost reports describe different configurations");
    }
    return static_cast<double>(eigen_report.kv_bytes) /
           static_cast<double>(std_report.kv_bytes);
}

std::string cost_to_json(const CostReport& report) {
    nlohmann::json j;
    j["context_length"] = report.n;
    j["d_model"] = report.d_model;
    j["n_heads"] = report.n_heads;
    j["n_layers"] = report.n_layers;
    j["d_head"] = report.d_head;
    j["pos_mode"] = to_string(report.pos_mode);
    j["totals"] = {{"kv_elements", report.kv_elements},
                   {"kv_bytes", report.kv_bytes},
                   {"attn_params", report.attn_params},
                   {"gen_flops_per_token", report.gen_flops_per_token},
                   {"lift_flops_per_token", report.lift_flops_per_token}};
    j["ratios"] = {{"kv", report.kv_ratio},
                   {"params", report.param_ratio},
                   {"gen_flops", report.flops_ratio}};
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& c : report.layers) {
        layers.push_back({{"layer", c.layer},
                          {"r_k", c.r_k},
                          {"r_v", c.r_v},
                          {"kv_elements", c.kv_elements},
                          {"kv_bytes", c.kv_bytes},
                          {"attn_params", c.attn_params},
                          {"gen_flops_per_token", c.gen_flops_per_token},
                          {"lift_flops_per_token", c.lift_flops_per_token}});
    }
    j["layers"] = std::move(layers);
    return j.dump(2);
}

std::string cost_table(const CostReport& eigen_report, const CostReport& std_report) {
    compression_ratio(eigen_report, std_report);  // shape check
    std::ostringstream out;
    out << "layer  r_k  r_v  kv_elems      params        flops/token   lift/token\n";
    for (std::size_t l = 0; l < eigen_report.layers.size(); ++l) {
        const auto& c = eigen_report.layers[l];
        out << std::left << std::setw(7) << c.layer << std::setw(5) << c.r_k
            << std::setw(5) << c.r_v << std::setw(14) << c.kv_elements
            << std::setw(14) << c.attn_params << std::setw(14)
            << c.gen_flops_per_token << c.lift_flops_per_token << '\n';
    }
    out << std::setprecision(4);
    out << "total kv " << eigen_report.kv_bytes << " B vs " << std_report.kv_bytes
        << " B (" << compression_ratio(eigen_report, std_report) << "x), params "
        << eigen_report.attn_params << " vs " << std_report.attn_params
        << ", flops/token " << eigen_report.gen_flops_per_token << " vs "
        << std_report.gen_flops_per_token;
    if (eigen_report.lift_flops_per_token > 0) {
        out << " (+" << eigen_report.lift_flops_per_token << " lift)";
    }
    out << '\n';
    return out.str();
}

}  // namespace eigenkv

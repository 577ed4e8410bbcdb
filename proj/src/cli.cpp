#include "eigenkv/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"

#include "eigenkv/allot.hpp"
#include "eigenkv/basis.hpp"
#include "eigenkv/checkpoint.hpp"
#include "eigenkv/cost.hpp"
#include "eigenkv/model.hpp"
#include "eigenkv/quant.hpp"

namespace eigenkv::cli {

namespace {

namespace fs = std::filesystem;

// Anything thrown as std::invalid_argument maps to exit code 2; everything
// else that escapes a command is treated as a numeric failure (exit 3).

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("cannot read " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void spill(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::invalid_argument("cannot write " + path);
    out << text;
    if (!out) throw std::invalid_argument("cannot write " + path);
}

Checkpoint load_or_config_error(const std::string& path) {
    try {
        return load_checkpoint(path);
    } catch (const std::exception& e) {
        throw std::invalid_argument("loading " + path + ": " + e.what());
    }
}

PosMode parse_pos_mode(const std::string& name) {
    if (name == "learned") return PosMode::learned;
    if (name == "alibi") return PosMode::alibi;
    if (name == "rope") return PosMode::rope;
    throw std::invalid_argument("unknown position mode " + name);
}

void ensure_out_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::invalid_argument("cannot create output directory " + dir);
}

std::string join_path(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

// "4:32,3:128" -> {(4,32), (3,128)}
std::vector<std::pair<std::size_t, std::size_t>> parse_quant_grid(const std::string& s) {
    std::vector<std::pair<std::size_t, std::size_t>> grid;
    std::istringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) {
            throw std::invalid_argument("quant grid entries are BITS:GROUP, got " + item);
        }
        try {
            const std::size_t bits = std::stoul(item.substr(0, colon));
            const std::size_t group = std::stoul(item.substr(colon + 1));
            grid.emplace_back(bits, group);
        } catch (const std::exception&) {
            throw std::invalid_argument("bad quant grid entry " + item);
        }
    }
    if (grid.empty()) throw std::invalid_argument("empty quant grid");
    return grid;
}

struct TrainArgs {
    std::string corpus;
    std::string out_dir = ".";
    std::size_t d_model = 64;
    std::size_t n_heads = 2;
    std::size_t n_layers = 2;
    std::size_t d_ffn = 0;  // 0 -> 4 * d_model
    std::size_t max_seq = 64;
    std::string pos_mode = "learned";
    std::size_t steps = 200;
    std::size_t seq_len = 48;
    std::size_t batch_size = 4;
    double lr = 3e-3;
    std::uint64_t seed = 1;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
    const std::string text = slurp(a.corpus);
    auto tok = Tokenizer::from_corpus(text);
    const auto ids = tok.encode(text);

    ModelSpec spec;
    spec.vocab_size = tok.size();
    spec.d_model = a.d_model;
    spec.n_heads = a.n_heads;
    spec.n_layers = a.n_layers;
    spec.d_ffn = a.d_ffn == 0 ? 4 * a.d_model : a.d_ffn;
    spec.max_seq = a.max_seq;
    spec.pos_mode = parse_pos_mode(a.pos_mode);
    spec.validate();

    TrainConfig tc;
    tc.steps = a.steps;
    tc.seq_len = a.seq_len;
    tc.batch_size = a.batch_size;
    tc.lr = a.lr;
    tc.seed = a.seed;

    auto model = init_model(spec, a.seed);
    std::vector<double> losses;
    model = train_tiny(std::move(model), ids, tc, &losses);

    ensure_out_dir(a.out_dir);
    const std::string ckpt = join_path(a.out_dir, "model.ckpt");
    save_checkpoint(ckpt, model, tok);

    std::ostringstream csv;
    csv << "step,loss\n" << std::setprecision(10);
    for (std::size_t i = 0; i < losses.size(); ++i) {
        csv << i << ',' << losses[i] << '\n';
    }
    spill(join_path(a.out_dir, "loss_curve.csv"), csv.str());

    out << "trained d_model=" << spec.d_model << " heads=" << spec.n_heads
        << " layers=" << spec.n_layers << " pos=" << a.pos_mode
        << " vocab=" << spec.vocab_size << " seed=" << a.seed << '\n';
    if (!losses.empty()) {
        out << "loss " << losses.front() << " -> " << losses.back() << " over "
            << losses.size() << " steps\n";
    }
    out << "wrote " << ckpt << " and loss_curve.csv\n";
    return 0;
}

struct CompressArgs {
    std::string model;
    std::string corpus;
    std::string out_dir = ".";
    AllotmentConfig base;
    double target_ratio = 0.0;  // 0 -> no grid search
    std::vector<double> budget_grid = {0.0, 0.01, 0.02, 0.05, 0.1};
};

int cmd_compress(const CompressArgs& a, std::ostream& out, std::ostream& err) {
    auto ckpt = load_or_config_error(a.model);
    const auto ids = ckpt.tokenizer.encode(slurp(a.corpus));
    a.base.validate();

    ensure_out_dir(a.out_dir);

    AllotmentConfig chosen = a.base;
    if (a.target_ratio > 0.0) {
        auto sweep = budget_sweep(ckpt.model, ids, a.base, a.budget_grid);
        spill(join_path(a.out_dir, "targeting.csv"),
              targeting_csv(fs::path(a.model).stem().string(), sweep));
        chosen = choose_budget(sweep, a.base, a.target_ratio);
        const double best = std::min_element(sweep.begin(), sweep.end(),
                                             [](const auto& x, const auto& y) {
                                                 return x.kv_ratio < y.kv_ratio;
                                             })
                                ->kv_ratio;
        if (best > a.target_ratio) {
            err << "warning: target ratio " << a.target_ratio
                << " unreachable on the budget grid; best effort " << best << '\n';
        }
        out << "target " << a.target_ratio << " -> error budget "
            << chosen.error_budget << '\n';
    }

    auto [compressed, result] = allot(ckpt.model, ids, chosen);
    for (const auto& rec : result.layers) {
        if (!rec.compressed) {
            err << "warning: layer " << rec.layer
                << " exceeds the budget even at full rank; left standard\n";
        }
    }

    save_checkpoint(join_path(a.out_dir, "compressed.ckpt"), compressed,
                    ckpt.tokenizer);
    spill(join_path(a.out_dir, "allotment.json"), allotment_to_json(result, chosen));
    spill(join_path(a.out_dir, "ranks.csv"), rank_csv(result));

    auto reps = collect_representations(ckpt.model, ids, chosen.n_samples,
                                        chosen.seq_len, chosen.averaging_factor,
                                        chosen.row_cap);
    spill(join_path(a.out_dir, "spectrum.csv"), spectrum_csv(spectrum_report(reps)));

    out << "kv ratio " << result.kv_ratio << " (mean r_k " << result.mean_r_k
        << ", mean r_v " << result.mean_r_v << ")\n";
    for (const auto& rec : result.layers) {
        out << "layer " << rec.layer << ": r_k " << rec.r_k << " r_v " << rec.r_v
            << " eps_th " << rec.eps_th << " e " << rec.error
            << (rec.compressed ? "" : " (standard)") << '\n';
    }
    out << "wrote compressed.ckpt, allotment.json, ranks.csv, spectrum.csv\n";
    return 0;
}

struct EvalArgs {
    std::string standard_path;
    std::string eigen_path;
    std::string corpus;
    std::string out_dir = ".";
    std::string quant_grid;  // empty -> 16-bit only
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    std::vector<std::pair<std::size_t, std::size_t>> grid;
    if (!a.quant_grid.empty()) grid = parse_quant_grid(a.quant_grid);

    auto std_ckpt = load_or_config_error(a.standard_path);
    auto eig_ckpt = load_or_config_error(a.eigen_path);
    if (std_ckpt.tokenizer.vocab != eig_ckpt.tokenizer.vocab) {
        throw std::invalid_argument(
            "checkpoints were trained with different vocabularies");
    }
    const auto ids = std_ckpt.tokenizer.encode(slurp(a.corpus));
    if (ids.size() < 2) throw std::invalid_argument("corpus too short to score");

    const std::size_t n = std_ckpt.model.spec.max_seq;

    std::vector<StackedPoint> points;
    auto measure = [&](const std::string& family, const TransformerWeights& m,
                       std::size_t bits, std::size_t group) {
        QuantConfig kc, vc;
        kc.bits = vc.bits = bits;
        kc.group_size = vc.group_size = group;
        kc.axis = QuantAxis::channel;
        vc.axis = QuantAxis::token;
        auto hook = quantizing_transform(kc, vc);
        const KvTransform* hp = hook ? &hook : nullptr;
        StackedPoint p;
        p.family = family;
        p.bits = bits;
        p.group_size = group;
        p.cache_bytes = model_kv_bytes(m, kc, vc, n, 1);
        p.ppl = perplexity(m, ids, hp);
        points.push_back(std::move(p));
    };

    measure("standard", std_ckpt.model, 16, 32);
    measure("eigen", eig_ckpt.model, 16, 32);
    const double base_ppl = points[0].ppl;

    for (const auto& [bits, group] : grid) {
        measure("standard", std_ckpt.model, bits, group);
        measure("eigen", eig_ckpt.model, bits, group);
    }

    ensure_out_dir(a.out_dir);
    std::ostringstream csv;
    csv << "config,kv_bytes,ppl,delta_ppl\n" << std::setprecision(10);
    for (const auto& p : points) {
        csv << p.family << '@' << p.bits << 'b' << p.group_size << 'g' << ','
            << p.cache_bytes << ',' << p.ppl << ',' << (p.ppl - base_ppl) << '\n';
    }
    spill(join_path(a.out_dir, "eval.csv"), csv.str());
    if (!grid.empty()) {
        spill(join_path(a.out_dir, "stacked.csv"), stacked_csv(points));
    }

    out << "scored " << ids.size() << " tokens\n";
    for (const auto& p : points) {
        out << p.family << " @ " << p.bits << "-bit/g" << p.group_size << ": ppl "
            << p.ppl << ", cache " << p.cache_bytes << " B\n";
    }
    out << "wrote eval.csv" << (a.quant_grid.empty() ? "" : " and stacked.csv") << '\n';
    return 0;
}

struct ReportArgs {
    std::string model;
    std::string out_dir = ".";
    std::size_t context = 128;
};

int cmd_report(const ReportArgs& a, std::ostream& out) {
    auto ckpt = load_or_config_error(a.model);
    if (a.context == 0) throw std::invalid_argument("context must be positive");

    const auto& spec = ckpt.model.spec;
    auto eigen_rep = analytic_costs(spec, model_ranks(ckpt.model), a.context);
    const std::vector<RankPair> full(spec.n_layers, {spec.d_head(), spec.d_head(), true});
    auto std_rep = analytic_costs(spec, full, a.context);

    ensure_out_dir(a.out_dir);
    spill(join_path(a.out_dir, "costs.json"), cost_to_json(eigen_rep));
    out << cost_table(eigen_rep, std_rep);
    out << "wrote costs.json\n";
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"kv-cache compression in a low-rank attention eigenbasis", "eigenkv"};
    app.require_subcommand(1);

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "train a toy decoder on a text corpus");
    train->add_option("--corpus", ta.corpus, "plain-text training corpus")->required();
    train->add_option("--out", ta.out_dir, "output directory");
    train->add_option("--d-model", ta.d_model);
    train->add_option("--heads", ta.n_heads);
    train->add_option("--layers", ta.n_layers);
    train->add_option("--d-ffn", ta.d_ffn, "feed-forward width (default 4*d_model)");
    train->add_option("--max-seq", ta.max_seq);
    train->add_option("--pos", ta.pos_mode, "learned | alibi | rope");
    train->add_option("--steps", ta.steps);
    train->add_option("--seq-len", ta.seq_len);
    train->add_option("--batch", ta.batch_size);
    train->add_option("--lr", ta.lr);
    train->add_option("--seed", ta.seed);

    CompressArgs ca;
    auto* compress =
        app.add_subcommand("compress", "calibrate and rewrite attention layers");
    compress->add_option("--model", ca.model, "trained checkpoint")->required();
    compress->add_option("--corpus", ca.corpus, "calibration text")->required();
    compress->add_option("--out", ca.out_dir, "output directory");
    compress->add_option("--error-budget", ca.base.error_budget);
    compress->add_option("--step-size", ca.base.step_size);
    compress->add_option("--eps-floor", ca.base.eps_floor);
    compress->add_option("--n-samples", ca.base.n_samples);
    compress->add_option("--seq-len", ca.base.seq_len);
    compress->add_option("--averaging", ca.base.averaging_factor);
    compress->add_option("--row-cap", ca.base.row_cap);
    compress->add_option("--target-ratio", ca.target_ratio,
                         "search the budget grid for this kv ratio");
    compress->add_option("--budget-grid", ca.budget_grid, "budgets to sweep")
        ->delimiter(',');

    EvalArgs ea;
    auto* eval = app.add_subcommand("eval", "compare perplexity and cache size");
    eval->add_option("--model", ea.standard_path, "standard checkpoint")->required();
    eval->add_option("--eigen", ea.eigen_path, "compressed checkpoint")->required();
    eval->add_option("--corpus", ea.corpus, "evaluation text")->required();
    eval->add_option("--out", ea.out_dir, "output directory");
    eval->add_option("--quant", ea.quant_grid,
                     "cache quantization grid, e.g. 4:32,3:128");

    ReportArgs ra;
    auto* report = app.add_subcommand("report", "analytic cost table for a checkpoint");
    report->add_option("--model", ra.model, "checkpoint to cost")->required();
    report->add_option("--out", ra.out_dir, "output directory");
    report->add_option("--context", ra.context, "cached context length");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }

    try {
        if (train->parsed()) return cmd_train(ta, out);
        if (compress->parsed()) return cmd_compress(ca, out, err);
        if (eval->parsed()) return cmd_eval(ea, out);
        return cmd_report(ra, out);
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "numeric failure: " << e.what() << '\n';
        return 3;
    }
}

}  // namespace eigenkv::cli

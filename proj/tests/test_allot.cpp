#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>
#include <vector>

#include "eigenkv/allot.hpp"
#include "eigenkv/rng.hpp"
#include "test_util.hpp"

using eigenkv::AllotmentConfig;
using eigenkv::AllotmentResult;
using eigenkv::Matrix;
using eigenkv::ModelSpec;
using eigenkv::PosMode;

namespace {

ModelSpec allot_spec(PosMode mode, std::size_t L = 2) {
    ModelSpec s;
    s.vocab_size = 19;
    s.d_model = 16;
    s.n_heads = 2;
    s.n_layers = L;
    s.d_ffn = 24;
    s.max_seq = 32;
    s.pos_mode = mode;
    return s;
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
    eigenkv::Rng rng(seed);
    std::vector<int> out(n);
    for (auto& t : out) t = static_cast<int>(rng.below(vocab));
    return out;
}

AllotmentConfig small_cfg(double e_b) {
    AllotmentConfig cfg;
    cfg.error_budget = e_b;
    cfg.n_samples = 4;
    cfg.seq_len = 12;
    return cfg;
}

}  // namespace

TEST_CASE("config invariants are enforced") {
    AllotmentConfig cfg = small_cfg(0.05);
    CHECK_NOTHROW(cfg.validate());
    cfg.step_size = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = small_cfg(-0.1);
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = small_cfg(0.05);
    cfg.eps_floor = 0.01;  // below the step size
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = small_cfg(0.05);
    cfg.averaging_factor = 3;  // does not divide 4 samples
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("zero budget leaves every layer standard") {
    auto spec = allot_spec(PosMode::alibi);
    auto m = eigenkv::init_model(spec, 3);
    auto corpus = random_tokens(64, spec.vocab_size, 5);
    auto [cm, res] = eigenkv::allot(m, corpus, small_cfg(0.0));

    for (const auto& rec : res.layers) {
        CHECK(!rec.compressed);
        CHECK(rec.r_k == spec.d_head());
        CHECK(rec.r_v == spec.d_head());
    }
    CHECK(res.kv_ratio == doctest::Approx(1.0));
    for (std::size_t l = 0; l < spec.n_layers; ++l) CHECK(!cm.layer_compressed(l));
    auto ids = random_tokens(14, spec.vocab_size, 7);
    CHECK(eigenkv::max_abs_diff(eigenkv::forward(m, ids), eigenkv::forward(cm, ids)) ==
          0.0);
}

TEST_CASE("an unconstrained budget drives every layer to the floor") {
    auto spec = allot_spec(PosMode::learned);
    auto m = eigenkv::init_model(spec, 11);
    auto corpus = random_tokens(64, spec.vocab_size, 13);
    AllotmentConfig cfg = small_cfg(10.0);
    auto [cm, res] = eigenkv::allot(m, corpus, cfg);

    for (const auto& rec : res.layers) {
        CHECK(rec.compressed);
        CHECK(rec.eps_th == doctest::Approx(cfg.eps_floor).epsilon(1e-9));
        CHECK(rec.error <= 10.0);
    }
    CHECK(res.kv_ratio < 1.0);
    for (std::size_t l = 0; l < spec.n_layers; ++l) CHECK(cm.layer_compressed(l));
}

TEST_CASE("accepted layers respect the budget and the threshold grid") {
    auto spec = allot_spec(PosMode::alibi);
    auto m = eigenkv::init_model(spec, 17);
    auto corpus = random_tokens(64, spec.vocab_size, 19);
    AllotmentConfig cfg = small_cfg(0.05);
    cfg.step_size = 0.1;
    cfg.eps_floor = 0.3;
    auto [cm, res] = eigenkv::allot(m, corpus, cfg);
    (void)cm;

    for (const auto& rec : res.layers) {
        if (!rec.compressed) continue;
        CHECK(rec.error <= cfg.error_budget);
        CHECK(rec.eps_th >= cfg.eps_floor - 1e-12);
        // chosen threshold sits on the arithmetic candidate grid
        const double steps = (1.0 - rec.eps_th) / cfg.step_size;
        CHECK(std::abs(steps - std::round(steps)) < 1e-9);
        CHECK(rec.r_k >= 1);
        CHECK(rec.r_k <= spec.d_head());
        CHECK(rec.r_v >= 1);
        CHECK(rec.r_v <= spec.d_head());
    }
}

TEST_CASE("the compressed prefix feeds the next layer's calibration") {
    // with a permissive budget the second layer is calibrated on compressed
    // first-layer outputs; the pipeline must still produce a usable model
    auto spec = allot_spec(PosMode::rope, 3);
    auto m = eigenkv::init_model(spec, 23);
    auto corpus = random_tokens(64, spec.vocab_size, 29);
    auto [cm, res] = eigenkv::allot(m, corpus, small_cfg(0.5));

    std::size_t n_compressed = 0;
    for (const auto& rec : res.layers) n_compressed += rec.compressed ? 1 : 0;
    CHECK(n_compressed == spec.n_layers);
    auto ids = random_tokens(16, spec.vocab_size, 31);
    Matrix logits = eigenkv::forward(cm, ids);
    CHECK(eigenkv::all_finite(logits));
    // rope layers carry the shared unprojection seam
    for (std::size_t l = 0; l < spec.n_layers; ++l) {
        const auto& cl = std::get<eigenkv::CompressedLayer>(cm.layers[l].attn);
        CHECK(cl.shared_key_basis);
        CHECK(cl.key_unproject.has_value());
    }
}

TEST_CASE("budget sweep compresses monotonically and respects budgets") {
    auto spec = allot_spec(PosMode::learned);
    auto m = eigenkv::init_model(spec, 37);
    auto corpus = random_tokens(64, spec.vocab_size, 41);
    auto sweep = eigenkv::budget_sweep(m, corpus, small_cfg(0.0),
                                       {0.0, 0.02, 0.1, 0.5, 2.0});
    REQUIRE(sweep.size() == 5);
    for (std::size_t i = 1; i < sweep.size(); ++i) {
        CHECK(sweep[i].error_budget >= sweep[i - 1].error_budget);
        CHECK(sweep[i].kv_ratio <= sweep[i - 1].kv_ratio + 1e-12);
    }
    CHECK(sweep.front().kv_ratio == doctest::Approx(1.0));
    CHECK(sweep.back().kv_ratio < 1.0);
    for (const auto& row : sweep) {
        for (const auto& rec : row.result.layers) {
            if (rec.compressed) CHECK(rec.error <= row.error_budget);
        }
        CHECK(row.kv_elems_per_token ==
              spec.n_heads * (row.result.layers[0].r_k + row.result.layers[0].r_v +
                              row.result.layers[1].r_k + row.result.layers[1].r_v));
    }
}

TEST_CASE("budget selection prefers the smallest budget that reaches the target") {
    auto spec = allot_spec(PosMode::learned);
    auto m = eigenkv::init_model(spec, 43);
    auto corpus = random_tokens(64, spec.vocab_size, 47);
    auto base = small_cfg(0.0);
    auto sweep = eigenkv::budget_sweep(m, corpus, base, {0.0, 0.05, 0.5, 2.0});

    // a 1.0x target is satisfied by the zero budget
    CHECK(eigenkv::choose_budget(sweep, base, 1.0).error_budget == 0.0);
    // targets between rows pick the first budget whose ratio reaches them
    const double mid = sweep.back().kv_ratio;
    auto cfg = eigenkv::choose_budget(sweep, base, mid);
    bool found = false;
    for (const auto& row : sweep) {
        if (row.kv_ratio <= mid) {
            CHECK(cfg.error_budget == row.error_budget);
            found = true;
            break;
        }
    }
    CHECK(found);
    // an unreachable target falls back to the best achieved ratio
    auto fallback = eigenkv::choose_budget(sweep, base, 1e-6);
    double best = 2.0;
    double best_budget = -1.0;
    for (const auto& row : sweep) {
        if (row.kv_ratio < best) {
            best = row.kv_ratio;
            best_budget = row.error_budget;
        }
    }
    CHECK(fallback.error_budget == best_budget);
}

TEST_CASE("reports are deterministic and round-trip through json") {
    auto spec = allot_spec(PosMode::alibi);
    auto m = eigenkv::init_model(spec, 53);
    auto corpus = random_tokens(64, spec.vocab_size, 59);
    AllotmentConfig cfg = small_cfg(0.2);
    auto [cm1, res1] = eigenkv::allot(m, corpus, cfg);
    auto [cm2, res2] = eigenkv::allot(m, corpus, cfg);
    (void)cm1;
    (void)cm2;
    CHECK(eigenkv::allotment_to_json(res1, cfg) == eigenkv::allotment_to_json(res2, cfg));

    auto parsed = eigenkv::allotment_from_json(eigenkv::allotment_to_json(res1, cfg));
    REQUIRE(parsed.layers.size() == res1.layers.size());
    CHECK(parsed.kv_ratio == res1.kv_ratio);
    CHECK(parsed.mean_r_k == res1.mean_r_k);
    for (std::size_t l = 0; l < parsed.layers.size(); ++l) {
        CHECK(parsed.layers[l].eps_th == res1.layers[l].eps_th);
        CHECK(parsed.layers[l].r_k == res1.layers[l].r_k);
        CHECK(parsed.layers[l].r_v == res1.layers[l].r_v);
        CHECK(parsed.layers[l].error == res1.layers[l].error);
        CHECK(parsed.layers[l].compressed == res1.layers[l].compressed);
    }
    CHECK_THROWS_AS(eigenkv::allotment_from_json("not json"), std::runtime_error);
}

TEST_CASE("csv reports carry the pinned schemas") {
    auto spec = allot_spec(PosMode::learned);
    auto m = eigenkv::init_model(spec, 61);
    auto corpus = random_tokens(64, spec.vocab_size, 67);
    auto sweep = eigenkv::budget_sweep(m, corpus, small_cfg(0.0), {0.0, 1.0});

    auto tcsv = eigenkv::targeting_csv("toy-16", sweep);
    CHECK(tcsv.rfind("model,compression,kv_size,e_b\n", 0) == 0);
    CHECK(std::count(tcsv.begin(), tcsv.end(), '\n') == 3);

    auto rcsv = eigenkv::rank_csv(sweep.front().result);
    CHECK(rcsv.rfind("layer,r_k,r_v,eps_th,e\n", 0) == 0);
    CHECK(std::count(rcsv.begin(), rcsv.end(), '\n') == 3);
    // the zero-budget row is all full rank
    const std::string full_row = "0," + std::to_string(spec.d_head()) + "," +
                                 std::to_string(spec.d_head()) + ",1,0\n";
    CHECK(rcsv.find(full_row) != std::string::npos);
}

TEST_CASE("already-compressed models are refused") {
    auto spec = allot_spec(PosMode::learned);
    auto m = eigenkv::init_model(spec, 71);
    auto corpus = random_tokens(64, spec.vocab_size, 73);
    auto [cm, res] = eigenkv::allot(m, corpus, small_cfg(2.0));
    REQUIRE(res.layers[0].compressed);
    CHECK_THROWS_AS(eigenkv::allot(cm, corpus, small_cfg(2.0)), std::invalid_argument);
}

TEST_CASE("too little calibration data is refused") {
    auto spec = allot_spec(PosMode::learned);
    auto m = eigenkv::init_model(spec, 79);
    auto corpus = random_tokens(20, spec.vocab_size, 83);
    CHECK_THROWS_AS(eigenkv::allot(m, corpus, small_cfg(0.1)), std::invalid_argument);
}

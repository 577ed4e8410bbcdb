#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <optional>
#include <vector>

#include "eigenkv/model.hpp"
#include "eigenkv/rewrite.hpp"
#include "eigenkv/rng.hpp"
#include "test_util.hpp"

using eigenkv::AttentionConfig;
using eigenkv::AttentionWeights;
using eigenkv::AttnCounters;
using eigenkv::CompressedLayer;
using eigenkv::EigenBasis;
using eigenkv::KvCache;
using eigenkv::Matrix;
using eigenkv::ModelSpec;
using eigenkv::PosMode;

namespace {

AttentionConfig make_cfg(std::size_t d, std::size_t h, PosMode mode) {
    AttentionConfig cfg;
    cfg.d_model = d;
    cfg.n_heads = h;
    cfg.d_head = d / h;
    cfg.kv_rank = cfg.d_head;
    cfg.pos_mode = mode;
    return cfg;
}

AttentionWeights random_weights(const AttentionConfig& cfg, std::uint64_t seed) {
    AttentionWeights w;
    for (std::size_t i = 0; i < cfg.n_heads; ++i) {
        w.wq.push_back(testutil::random_matrix(cfg.d_model, cfg.d_head, seed + 11 * i));
        w.wk.push_back(testutil::random_matrix(cfg.d_model, cfg.d_head, seed + 11 * i + 3));
        w.wv.push_back(testutil::random_matrix(cfg.d_model, cfg.d_head, seed + 11 * i + 5));
        w.wo.push_back(testutil::random_matrix(cfg.d_head, cfg.d_model, seed + 11 * i + 7));
    }
    return w;
}

// basis with explicit per-head frames, uniform ranks
EigenBasis explicit_basis(std::size_t heads, std::size_t d_head, std::size_t r_k,
                          std::size_t r_v, std::uint64_t seed, bool shared = false) {
    EigenBasis b;
    b.layers.resize(1);
    auto& lb = b.layers[0];
    lb.r_k = r_k;
    lb.r_v = r_v;
    lb.shared_key_basis = shared;
    const std::size_t nk = shared ? 1 : heads;
    for (std::size_t i = 0; i < nk; ++i)
        lb.u_k.push_back(testutil::random_orthonormal(d_head, r_k, seed + 2 * i));
    for (std::size_t i = 0; i < heads; ++i)
        lb.u_v.push_back(testutil::random_orthonormal(d_head, r_v, seed + 100 + 2 * i));
    return b;
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
    eigenkv::Rng rng(seed);
    std::vector<int> out(n);
    for (auto& t : out) t = static_cast<int>(rng.below(vocab));
    return out;
}

ModelSpec small_spec(PosMode mode, std::size_t L = 2) {
    ModelSpec s;
    s.vocab_size = 17;
    s.d_model = 16;
    s.n_heads = 2;
    s.n_layers = L;
    s.d_ffn = 20;
    s.max_seq = 40;
    s.pos_mode = mode;
    return s;
}

// swaps every attention block for its merged form at the given thresholds
eigenkv::TransformerWeights compress_model(const eigenkv::TransformerWeights& m,
                                           const std::vector<double>& eps,
                                           const std::vector<int>& calib,
                                           std::size_t n_samples, std::size_t seq_len) {
    auto reps = eigenkv::collect_representations(m, calib, n_samples, seq_len);
    const bool share = m.spec.pos_mode == PosMode::rope;
    auto basis = eigenkv::build_basis(reps, eps, share);
    auto out = m;
    for (std::size_t l = 0; l < m.spec.n_layers; ++l) {
        const auto& aw = std::get<AttentionWeights>(m.layers[l].attn);
        out.layers[l].attn = eigenkv::merge_basis(aw, basis, l, m.spec.pos_mode);
    }
    return out;
}

}  // namespace

TEST_CASE("merged projections have the reduced shapes and parameter count") {
    auto cfg = make_cfg(64, 1, PosMode::learned);
    auto w = random_weights(cfg, 7);
    auto basis = explicit_basis(1, 64, 16, 16, 9);
    auto layer = eigenkv::merge_basis(w, basis, 0, PosMode::learned);

    CHECK(layer.w.wq[0].cols() == 16);
    CHECK(layer.w.wk[0].cols() == 16);
    CHECK(layer.w.wv[0].cols() == 16);
    CHECK(layer.w.wo[0].rows() == 16);
    CHECK(layer.w.wo[0].cols() == 64);
    const std::size_t merged = layer.w.wq[0].size() + layer.w.wk[0].size() +
                               layer.w.wv[0].size() + layer.w.wo[0].size();
    const std::size_t original =
        w.wq[0].size() + w.wk[0].size() + w.wv[0].size() + w.wo[0].size();
    CHECK(merged == 4 * 64 * 16);  // 4 d r
    CHECK(original == 16384);
    CHECK(!layer.key_unproject.has_value());
}

TEST_CASE("square orthonormal bases reproduce standard attention exactly") {
    for (PosMode mode : {PosMode::learned, PosMode::alibi}) {
        CAPTURE(eigenkv::to_string(mode));
        auto cfg = make_cfg(12, 3, mode);
        auto w = random_weights(cfg, 17);
        auto basis = explicit_basis(3, 4, 4, 4, 23);
        auto layer = eigenkv::merge_basis(w, basis, 0, mode);
        Matrix x = testutil::random_matrix(9, 12, 29);

        auto cache_a = KvCache::make(1, 3);
        Matrix ref = eigenkv::attend_chunk(x, cfg, w, cache_a, 0);
        auto cache_b = KvCache::make(1, 3);
        Matrix got = eigenkv::compressed_attention_forward(x, cfg, layer, cache_b, 0);
        CHECK(eigenkv::max_abs_diff(ref, got) < 1e-9);
    }
}

TEST_CASE("merged weights equal the explicit project-then-attend route") {
    auto cfg = make_cfg(10, 2, PosMode::alibi);
    auto w = random_weights(cfg, 31);
    const std::size_t r_k = 3, r_v = 4;
    auto basis = explicit_basis(2, 5, r_k, r_v, 37);
    auto layer = eigenkv::merge_basis(w, basis, 0, PosMode::alibi);
    Matrix x = testutil::random_matrix(7, 10, 41);

    auto cache = KvCache::make(1, 2);
    Matrix got = eigenkv::eigen_attention_forward(x, cfg, layer, cache, 0);

    auto slopes = eigenkv::alibi_slopes(2);
    Matrix want(7, 10);
    for (std::size_t h = 0; h < 2; ++h) {
        Matrix qp = eigenkv::matmul(eigenkv::matmul(x, w.wq[h]), basis.layers[0].u_k[h]);
        Matrix kp = eigenkv::matmul(eigenkv::matmul(x, w.wk[h]), basis.layers[0].u_k[h]);
        Matrix vp = eigenkv::matmul(eigenkv::matmul(x, w.wv[h]), basis.layers[0].u_v[h]);
        Matrix out = eigenkv::attend_head(qp, kp, vp, 1.0 / std::sqrt(5.0), 0, slopes[h]);
        Matrix proj = eigenkv::matmul(out, eigenkv::matmul_tn(basis.layers[0].u_v[h], w.wo[h]));
        want = eigenkv::add(want, proj);
    }
    CHECK(eigenkv::max_abs_diff(got, want) < 1e-9);
    CHECK(cache.layers[0][0].keys.cols() == r_k);
    CHECK(cache.layers[0][1].values.cols() == r_v);
}

TEST_CASE("cache accounting tracks asymmetric key and value ranks") {
    auto cfg = make_cfg(10, 2, PosMode::learned);
    auto w = random_weights(cfg, 43);
    auto basis = explicit_basis(2, 5, 3, 5, 47);
    auto layer = eigenkv::merge_basis(w, basis, 0, PosMode::learned);
    auto cache = KvCache::make(1, 2, 2, 8);  // batch 2, 8-bit entries
    Matrix x = testutil::random_matrix(7, 10, 53);
    eigenkv::compressed_attention_forward(x, cfg, layer, cache, 0);
    CHECK(cache.seq_len == 7);
    CHECK(cache.bits() == 2ull * 7 * (3 + 5) * 2 * 8);  // batch n (r_k+r_v) heads p
}

TEST_CASE("full-rank rope lift matches standard rope attention") {
    auto cfg = make_cfg(16, 2, PosMode::rope);
    auto w = random_weights(cfg, 59);
    auto basis = explicit_basis(2, 8, 8, 8, 61, true);
    auto layer = eigenkv::merge_basis(w, basis, 0, PosMode::rope);
    REQUIRE(layer.key_unproject.has_value());
    CHECK(layer.key_unproject->rows() == 8);
    CHECK(layer.key_unproject->cols() == 8);

    Matrix x = testutil::random_matrix(11, 16, 67);
    auto cache_a = KvCache::make(1, 2);
    Matrix ref = eigenkv::attend_chunk(x, cfg, w, cache_a, 0);
    auto cache_b = KvCache::make(1, 2);
    Matrix got = eigenkv::compressed_attention_forward(x, cfg, layer, cache_b, 0);
    CHECK(eigenkv::max_abs_diff(ref, got) < 1e-9);

    // stepwise decode agrees with the one-shot rows
    auto cache_c = KvCache::make(1, 2);
    for (std::size_t t = 0; t < 11; ++t) {
        Matrix row(1, 16);
        for (std::size_t j = 0; j < 16; ++j) row(0, j) = x(t, j);
        Matrix step = eigenkv::rope_eigen_forward(row, cfg, layer, cache_c, 0);
        for (std::size_t j = 0; j < 16; ++j)
            CHECK(std::abs(step(0, j) - got(t, j)) < 1e-9);
    }
    // the reduced-key store is what standard rope would cache, unrotated
    CHECK(cache_c.layers[0][0].keys.rows() == 11);
    CHECK(cache_c.layers[0][0].keys.cols() == 8);
}

TEST_CASE("at position zero the lifted rope path equals the plain merged path") {
    auto cfg_rope = make_cfg(12, 2, PosMode::rope);
    auto cfg_flat = make_cfg(12, 2, PosMode::learned);
    auto w = random_weights(cfg_rope, 71);
    auto basis = explicit_basis(2, 6, 3, 4, 73, true);
    auto rope_layer = eigenkv::merge_basis(w, basis, 0, PosMode::rope);
    auto flat_layer = eigenkv::merge_basis(w, basis, 0, PosMode::learned);

    Matrix x = testutil::random_matrix(1, 12, 79);
    auto cache_a = KvCache::make(1, 2);
    Matrix a = eigenkv::rope_eigen_forward(x, cfg_rope, rope_layer, cache_a, 0);
    auto cache_b = KvCache::make(1, 2);
    Matrix b = eigenkv::eigen_attention_forward(x, cfg_flat, flat_layer, cache_b, 0);
    CHECK(eigenkv::max_abs_diff(a, b) < 1e-10);
}

TEST_CASE("rope decode counters split core from lift") {
    const std::size_t d = 12, h = 2, dh = 6, r_k = 3, r_v = 4;
    auto cfg = make_cfg(d, h, PosMode::rope);
    auto w = random_weights(cfg, 83);
    auto basis = explicit_basis(h, dh, r_k, r_v, 89, true);
    auto layer = eigenkv::merge_basis(w, basis, 0, PosMode::rope);

    auto cache = KvCache::make(1, h);
    Matrix prompt = testutil::random_matrix(9, d, 97);
    eigenkv::rope_eigen_forward(prompt, cfg, layer, cache, 0);

    AttnCounters c;
    Matrix xt = testutil::random_matrix(1, d, 101);
    eigenkv::rope_eigen_forward(xt, cfg, layer, cache, 0, &c);
    const std::uint64_t n = 10;
    const std::uint64_t core_per_head =
        d * dh + d * r_k + d * r_v + n * dh + n * r_v + r_v * d;
    CHECK(c.core.macs == h * core_per_head);
    CHECK(c.lift.macs == h * n * r_k * dh);
}

TEST_CASE("mode and shape violations are rejected") {
    auto cfg = make_cfg(12, 2, PosMode::rope);
    auto w = random_weights(cfg, 103);
    auto per_head = explicit_basis(2, 6, 3, 3, 107, false);
    CHECK_THROWS_AS(eigenkv::merge_basis(w, per_head, 0, PosMode::rope),
                    std::invalid_argument);
    CHECK_THROWS_AS(eigenkv::merge_basis(w, per_head, 1, PosMode::learned),
                    std::invalid_argument);

    auto shared = explicit_basis(2, 6, 3, 3, 109, true);
    auto rope_layer = eigenkv::merge_basis(w, shared, 0, PosMode::rope);
    auto cache = KvCache::make(1, 2);
    Matrix x = testutil::random_matrix(4, 12, 113);
    CHECK_THROWS_AS(eigenkv::eigen_attention_forward(x, cfg, rope_layer, cache, 0),
                    std::invalid_argument);

    auto flat_layer = eigenkv::merge_basis(w, shared, 0, PosMode::learned);
    CHECK_THROWS_AS(eigenkv::rope_eigen_forward(x, cfg, flat_layer, cache, 0),
                    std::invalid_argument);

    CompressedLayer broken = rope_layer;
    broken.key_unproject.reset();
    CHECK_THROWS_AS(eigenkv::rope_eigen_forward(x, cfg, broken, cache, 0),
                    std::invalid_argument);

    auto wrong_heads = explicit_basis(3, 6, 3, 3, 127, false);
    CHECK_THROWS_AS(eigenkv::merge_basis(w, wrong_heads, 0, PosMode::learned),
                    std::invalid_argument);
}

TEST_CASE("calibrated full-preservation rewrite reproduces model logits") {
    for (PosMode mode : {PosMode::learned, PosMode::alibi, PosMode::rope}) {
        CAPTURE(eigenkv::to_string(mode));
        auto spec = small_spec(mode);
        auto m = eigenkv::init_model(spec, 131);
        auto calib = random_tokens(3 * 12, spec.vocab_size, 137);
        auto cm = compress_model(m, {1.0, 1.0}, calib, 3, 12);

        for (std::size_t l = 0; l < spec.n_layers; ++l) {
            const auto& cl = std::get<CompressedLayer>(cm.layers[l].attn);
            CHECK(cl.r_k == spec.d_head());  // random weights fill every direction
            CHECK(cl.r_v == spec.d_head());
        }
        auto ids = random_tokens(15, spec.vocab_size, 139);
        Matrix ref = eigenkv::forward(m, ids);
        Matrix got = eigenkv::forward(cm, ids);
        CHECK(eigenkv::max_abs_diff(ref, got) < 1e-6);
    }
}

TEST_CASE("compressed models decode token by token consistently") {
    for (PosMode mode : {PosMode::learned, PosMode::alibi, PosMode::rope}) {
        CAPTURE(eigenkv::to_string(mode));
        auto spec = small_spec(mode);
        auto m = eigenkv::init_model(spec, 149);
        auto calib = random_tokens(4 * 10, spec.vocab_size, 151);
        auto cm = compress_model(m, {0.9, 0.9}, calib, 4, 10);

        auto ids = random_tokens(12, spec.vocab_size, 157);
        Matrix oneshot = eigenkv::forward(cm, ids);

        auto cache = eigenkv::make_cache(cm);
        std::vector<int> prompt(ids.begin(), ids.begin() + 5);
        Matrix pre = eigenkv::forward_prefill(cm, prompt, cache);
        for (std::size_t j = 0; j < spec.vocab_size; ++j)
            CHECK(std::abs(pre(4, j) - oneshot(4, j)) < 1e-9);
        for (std::size_t t = 5; t < ids.size(); ++t) {
            Matrix step = eigenkv::forward_step(cm, ids[t], cache);
            for (std::size_t j = 0; j < spec.vocab_size; ++j)
                CHECK(std::abs(step(0, j) - oneshot(t, j)) < 1e-9);
        }
        // reduced ranks shrink the cache footprint relative to full width
        const auto& cl0 = std::get<CompressedLayer>(cm.layers[0].attn);
        CHECK(cl0.r_k <= spec.d_head());
        CHECK(cache.layers[0][0].keys.cols() == cl0.r_k);
    }
}

TEST_CASE("tighter energy thresholds give no worse layer output error") {
    auto spec = small_spec(PosMode::alibi, 1);
    auto m = eigenkv::init_model(spec, 163);
    auto calib = random_tokens(4 * 12, spec.vocab_size, 167);
    auto reps = eigenkv::collect_representations(m, calib, 4, 12);

    auto ids = random_tokens(14, spec.vocab_size, 173);
    Matrix ref = eigenkv::forward(m, ids);
    double prev_err = std::numeric_limits<double>::infinity();
    for (double eps : {0.5, 0.8, 0.95, 1.0}) {
        auto basis = eigenkv::build_basis(reps, {eps});
        auto cm = m;
        cm.layers[0].attn = eigenkv::merge_basis(
            std::get<AttentionWeights>(m.layers[0].attn), basis, 0, spec.pos_mode);
        Matrix got = eigenkv::forward(cm, ids);
        Matrix diff = eigenkv::sub(got, ref);
        const double err = eigenkv::frobenius_norm(diff) / eigenkv::frobenius_norm(ref);
        CHECK(err <= prev_err + 1e-9);
        prev_err = err;
    }
    CHECK(prev_err < 1e-7);  // the eps = 1 endpoint is exact
}

#include "eigenkv/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>

#include "eigenkv/rng.hpp"

namespace eigenkv {

namespace {

constexpr double kLnEps = 1e-5;

// Inverse of the attention-side rotation: same angles, opposite sign.
void rotate_rows_back(Matrix& x, std::size_t start_pos, double base = 10000.0) {
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
            row[2 * j] = a * c + b * s;
            row[2 * j + 1] = -a * s + b * c;
        }
    }
}

struct LnCache {
    Matrix xhat;
    std::vector<double> inv_std;
};

Matrix ln_forward(const Matrix& x, const LayerNormParams& p, LnCache* cache) {
    Matrix y(x.rows(), x.cols());
    if (cache) {
        cache->xhat = Matrix(x.rows(), x.cols());
        cache->inv_std.assign(x.rows(), 0.0);
    }
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double* row = x.row(i);
        double mean = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) mean += row[j];
        mean /= static_cast<double>(x.cols());
        double var = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(x.cols());
        const double inv_std = 1.0 / std::sqrt(var + kLnEps);
        if (cache) cache->inv_std[i] = inv_std;
        for (std::size_t j = 0; j < x.cols(); ++j) {
            const double xhat = (row[j] - mean) * inv_std;
            if (cache) cache->xhat(i, j) = xhat;
            y(i, j) = p.gamma[j] * xhat + p.beta[j];
        }
    }
    return y;
}

Matrix ln_backward(const Matrix& dy, const LnCache& c, const LayerNormParams& p,
                   LayerNormParams& dp) {
    const std::size_t n = dy.rows();
    const std::size_t d = dy.cols();
    Matrix dx(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        double mean_dxhat = 0.0;
        double mean_dxhat_xhat = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double g = dy(i, j);
            dp.gamma[j] += g * c.xhat(i, j);
            dp.beta[j] += g;
            const double dxhat = g * p.gamma[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * c.xhat(i, j);
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
            const double dxhat = dy(i, j) * p.gamma[j];
            dx(i, j) = c.inv_std[i] *
                       (dxhat - mean_dxhat - c.xhat(i, j) * mean_dxhat_xhat);
        }
    }
    return dx;
}

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_grad(double x) {
    const double phi_big = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
    const double phi_small = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return phi_big + x * phi_small;
}

void add_row_bias(Matrix& x, const std::vector<double>& b) {
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) x(i, j) += b[j];
}

Matrix layer_attention(const ModelSpec& spec, const DecoderLayer& layer,
                       const Matrix& x_norm, KvCache& cache, std::size_t idx,
                       AttnCounters* counters, const KvTransform* kvt) {
    if (const auto* std_w = std::get_if<AttentionWeights>(&layer.attn)) {
        auto cfg = attention_config(spec, spec.d_head());
        return attend_chunk(x_norm, cfg, *std_w, cache, idx, counters, kvt);
    }
    const auto& cl = std::get<CompressedLayer>(layer.attn);
    auto cfg = attention_config(spec, cl.r_k);
    return compressed_attention_forward(x_norm, cfg, cl, cache, idx, counters, kvt);
}

std::vector<std::vector<double>*> collect_tensors(TransformerWeights& w) {
    std::vector<std::vector<double>*> out;
    out.push_back(&w.token_embedding.data());
    if (!w.pos_embedding.empty()) out.push_back(&w.pos_embedding.data());
    for (auto& layer : w.layers) {
        out.push_back(&layer.ln1.gamma);
        out.push_back(&layer.ln1.beta);
        auto& aw = std::get<AttentionWeights>(layer.attn);
        for (auto& m : aw.wq) out.push_back(&m.data());
        for (auto& m : aw.wk) out.push_back(&m.data());
        for (auto& m : aw.wv) out.push_back(&m.data());
        for (auto& m : aw.wo) out.push_back(&m.data());
        out.push_back(&layer.ln2.gamma);
        out.push_back(&layer.ln2.beta);
        out.push_back(&layer.ffn.w1.data());
        out.push_back(&layer.ffn.b1);
        out.push_back(&layer.ffn.w2.data());
        out.push_back(&layer.ffn.b2);
    }
    out.push_back(&w.ln_final.gamma);
    out.push_back(&w.ln_final.beta);
    out.push_back(&w.lm_head.data());
    return out;
}

TransformerWeights zeros_like(const TransformerWeights& w) {
    TransformerWeights z = w;
    for (auto* t : collect_tensors(z)) std::fill(t->begin(), t->end(), 0.0);
    return z;
}

// Activation record for one training window.
struct HeadActs {
    Matrix q, k, v;  // post-rotation where applicable
    Matrix probs;
    Matrix ctx;
};

struct LayerActs {
    Matrix x_in;
    LnCache ln1;
    Matrix a;
    std::vector<HeadActs> heads;
    Matrix x2;
    LnCache ln2;
    Matrix b;
    Matrix z1;
    Matrix g;
};

struct ForwardActs {
    Matrix x0;
    std::vector<LayerActs> layers;
    LnCache lnf;
    Matrix h;
    Matrix logits;
};

void train_forward(const TransformerWeights& m, const std::vector<int>& tokens,
                   ForwardActs& acts) {
    const auto& spec = m.spec;
    const std::size_t n = tokens.size();
    const double scale = 1.0 / std::sqrt(static_cast<double>(spec.d_head()));
    acts.x0 = embed(m, tokens, 0);
    Matrix x = acts.x0;
    acts.layers.assign(spec.n_layers, LayerActs{});
    std::vector<double> slopes;
    if (spec.pos_mode == PosMode::alibi) slopes = alibi_slopes(spec.n_heads);

    for (std::size_t l = 0; l < spec.n_layers; ++l) {
        auto& la = acts.layers[l];
        const auto& layer = m.layers[l];
        const auto& aw = std::get<AttentionWeights>(layer.attn);
        la.x_in = x;
        la.a = ln_forward(x, layer.ln1, &la.ln1);
        la.heads.assign(spec.n_heads, HeadActs{});
        Matrix attn_out(n, spec.d_model);
        for (std::size_t i = 0; i < spec.n_heads; ++i) {
            auto& ha = la.heads[i];
            ha.q = matmul(la.a, aw.wq[i]);
            ha.k = matmul(la.a, aw.wk[i]);
            ha.v = matmul(la.a, aw.wv[i]);
            if (spec.pos_mode == PosMode::rope) {
                rope_rotate_rows(ha.q, 0);
                rope_rotate_rows(ha.k, 0);
            }
            Matrix scores = matmul_nt(ha.q, ha.k);
            const double neg_inf = -std::numeric_limits<double>::infinity();
            for (std::size_t r = 0; r < n; ++r) {
                for (std::size_t c = 0; c < n; ++c) {
                    if (c > r) {
                        scores(r, c) = neg_inf;
                    } else {
                        scores(r, c) *= scale;
                        if (spec.pos_mode == PosMode::alibi)
                            scores(r, c) -= slopes[i] * static_cast<double>(r - c);
                    }
                }
            }
            ha.probs = softmax_rows(scores);
            ha.ctx = matmul(ha.probs, ha.v);
            attn_out = add(attn_out, matmul(ha.ctx, aw.wo[i]));
        }
        la.x2 = add(la.x_in, attn_out);
        la.b = ln_forward(la.x2, layer.ln2, &la.ln2);
        la.z1 = matmul(la.b, layer.ffn.w1);
        add_row_bias(la.z1, layer.ffn.b1);
        la.g = Matrix(n, spec.d_ffn);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < spec.d_ffn; ++c)
                la.g(r, c) = gelu_scalar(la.z1(r, c));
        Matrix f = matmul(la.g, layer.ffn.w2);
        add_row_bias(f, layer.ffn.b2);
        x = add(la.x2, f);
    }
    acts.h = ln_forward(x, m.ln_final, &acts.lnf);
    acts.logits = matmul(acts.h, m.lm_head);
}

// Returns the window's mean cross-entropy; accumulates parameter gradients
// scaled by grad_scale (the caller averages over the batch).
double train_backward(const TransformerWeights& m, const std::vector<int>& inputs,
                      const std::vector<int>& targets, const ForwardActs& acts,
                      double grad_scale, TransformerWeights& grads) {
    const auto& spec = m.spec;
    const std::size_t n = targets.size();
    const std::size_t v = spec.vocab_size;
    const double scale = 1.0 / std::sqrt(static_cast<double>(spec.d_head()));

    Matrix probs = softmax_rows(acts.logits);
    double loss = 0.0;
    Matrix dlogits(n, v);
    const double w = grad_scale / static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r) {
        loss -= std::log(std::max(probs(r, static_cast<std::size_t>(targets[r])),
                                  1e-300));
        for (std::size_t c = 0; c < v; ++c) dlogits(r, c) = probs(r, c) * w;
        dlogits(r, static_cast<std::size_t>(targets[r])) -= w;
    }
    loss /= static_cast<double>(n);

    Matrix& dlm = grads.lm_head;
    dlm = add(dlm, matmul_tn(acts.h, dlogits));
    Matrix dh = matmul_nt(dlogits, m.lm_head);
    Matrix dx = ln_backward(dh, acts.lnf, m.ln_final, grads.ln_final);

    for (std::size_t l = spec.n_layers; l-- > 0;) {
        const auto& layer = m.layers[l];
        const auto& aw = std::get<AttentionWeights>(layer.attn);
        auto& gl = grads.layers[l];
        auto& gw = std::get<AttentionWeights>(gl.attn);
        const auto& la = acts.layers[l];

        // FFN branch: dx is the gradient at the layer output x3 = x2 + f.
        Matrix dg = matmul_nt(dx, layer.ffn.w2);
        gl.ffn.w2 = add(gl.ffn.w2, matmul_tn(la.g, dx));
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < spec.d_model; ++c)
                gl.ffn.b2[c] += dx(r, c);
        Matrix dz(n, spec.d_ffn);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < spec.d_ffn; ++c)
                dz(r, c) = dg(r, c) * gelu_grad(la.z1(r, c));
        gl.ffn.w1 = add(gl.ffn.w1, matmul_tn(la.b, dz));
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < spec.d_ffn; ++c) gl.ffn.b1[c] += dz(r, c);
        Matrix db = matmul_nt(dz, layer.ffn.w1);
        Matrix dx2 = add(dx, ln_backward(db, la.ln2, layer.ln2, gl.ln2));

        // Attention branch: dx2 is also the gradient of the attention output.
        Matrix da(n, spec.d_model);
        for (std::size_t i = 0; i < spec.n_heads; ++i) {
            const auto& ha = la.heads[i];
            Matrix dctx = matmul_nt(dx2, aw.wo[i]);
            gw.wo[i] = add(gw.wo[i], matmul_tn(ha.ctx, dx2));
            Matrix dprobs = matmul_nt(dctx, ha.v);
            Matrix dv = matmul_tn(ha.probs, dctx);
            Matrix dscores(n, n);
            for (std::size_t r = 0; r < n; ++r) {
                double dot = 0.0;
                for (std::size_t c = 0; c < n; ++c)
                    dot += dprobs(r, c) * ha.probs(r, c);
                for (std::size_t c = 0; c < n; ++c)
                    dscores(r, c) = ha.probs(r, c) * (dprobs(r, c) - dot) * scale;
            }
            Matrix dq = matmul(dscores, ha.k);
            Matrix dk = matmul_tn(dscores, ha.q);
            if (spec.pos_mode == PosMode::rope) {
                // rotation is orthogonal per position, so its adjoint is
                // the reverse rotation; values are never rotated
                rotate_rows_back(dq, 0);
                rotate_rows_back(dk, 0);
            }
            gw.wq[i] = add(gw.wq[i], matmul_tn(la.a, dq));
            gw.wk[i] = add(gw.wk[i], matmul_tn(la.a, dk));
            gw.wv[i] = add(gw.wv[i], matmul_tn(la.a, dv));
            da = add(da, matmul_nt(dq, aw.wq[i]));
            da = add(da, matmul_nt(dk, aw.wk[i]));
            da = add(da, matmul_nt(dv, aw.wv[i]));
        }
        dx = add(dx2, ln_backward(da, la.ln1, layer.ln1, gl.ln1));
    }

    // Embedding scatter: dx is now the gradient at the embedding output.
    for (std::size_t r = 0; r < n; ++r) {
        const auto tok = static_cast<std::size_t>(inputs[r]);
        for (std::size_t c = 0; c < spec.d_model; ++c) {
            grads.token_embedding(tok, c) += dx(r, c);
            if (spec.pos_mode == PosMode::learned) grads.pos_embedding(r, c) += dx(r, c);
        }
    }
    return loss;
}

}  // namespace

Tokenizer Tokenizer::from_corpus(const std::string& text) {
    std::set<char> chars(text.begin(), text.end());
    std::vector<std::string> vocab;
    vocab.push_back("<unk>");
    for (char c : chars) vocab.push_back(std::string(1, c));
    return from_vocab(std::move(vocab));
}

Tokenizer Tokenizer::from_vocab(std::vector<std::string> vocab_entries) {
    Tokenizer t;
    t.vocab = std::move(vocab_entries);
    for (std::size_t i = 0; i < t.vocab.size(); ++i) {
        if (t.vocab[i].size() == 1) t.to_id[t.vocab[i][0]] = static_cast<int>(i);
    }
    return t;
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> out;
    out.reserve(text.size());
    for (char c : text) {
        auto it = to_id.find(c);
        out.push_back(it == to_id.end() ? 0 : it->second);
    }
    return out;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (id >= 0 && static_cast<std::size_t>(id) < vocab.size() &&
            vocab[id].size() == 1) {
            out += vocab[id];
        } else {
            out += '?';
        }
    }
    return out;
}

void ModelSpec::validate() const {
    if (vocab_size < 2 || d_model == 0 || n_heads == 0 || n_layers == 0 ||
        d_ffn == 0 || max_seq == 0) {
        throw std::invalid_argument("model spec: all dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
        throw std::invalid_argument("model spec: d_model " + std::to_string(d_model) +
                                    " not divisible by n_heads " +
                                    std::to_string(n_heads));
    }
    attention_config(*this, d_head()).validate();
}

Matrix layer_norm(const Matrix& x, const LayerNormParams& p) {
    return ln_forward(x, p, nullptr);
}

Matrix gelu(const Matrix& x) {
    Matrix y(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) y.data()[i] = gelu_scalar(x.data()[i]);
    return y;
}

Matrix ffn_forward(const Matrix& x, const FfnWeights& f) {
    Matrix z = matmul(x, f.w1);
    add_row_bias(z, f.b1);
    Matrix g = gelu(z);
    Matrix out = matmul(g, f.w2);
    add_row_bias(out, f.b2);
    return out;
}

AttentionConfig attention_config(const ModelSpec& spec, std::size_t kv_rank) {
    AttentionConfig cfg;
    cfg.d_model = spec.d_model;
    cfg.n_heads = spec.n_heads;
    cfg.d_head = spec.d_head();
    cfg.kv_rank = kv_rank;
    cfg.pos_mode = spec.pos_mode;
    return cfg;
}

TransformerWeights init_model(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    const double sigma = 0.02;
    const double out_sigma =
        sigma / std::sqrt(2.0 * static_cast<double>(spec.n_layers));
    auto fill = [&](Matrix& m, double s) {
        for (double& x : m.data()) x = rng.normal() * s;
    };

    TransformerWeights w;
    w.spec = spec;
    w.token_embedding = Matrix(spec.vocab_size, spec.d_model);
    fill(w.token_embedding, sigma);
    if (spec.pos_mode == PosMode::learned) {
        w.pos_embedding = Matrix(spec.max_seq, spec.d_model);
        fill(w.pos_embedding, sigma);
    }
    const std::size_t dh = spec.d_head();
    for (std::size_t l = 0; l < spec.n_layers; ++l) {
        DecoderLayer layer;
        layer.ln1.gamma.assign(spec.d_model, 1.0);
        layer.ln1.beta.assign(spec.d_model, 0.0);
        AttentionWeights aw;
        for (std::size_t i = 0; i < spec.n_heads; ++i) {
            aw.wq.emplace_back(spec.d_model, dh);
            fill(aw.wq.back(), sigma);
            aw.wk.emplace_back(spec.d_model, dh);
            fill(aw.wk.back(), sigma);
            aw.wv.emplace_back(spec.d_model, dh);
            fill(aw.wv.back(), sigma);
            aw.wo.emplace_back(dh, spec.d_model);
            fill(aw.wo.back(), out_sigma);
        }
        layer.attn = std::move(aw);
        layer.ln2.gamma.assign(spec.d_model, 1.0);
        layer.ln2.beta.assign(spec.d_model, 0.0);
        layer.ffn.w1 = Matrix(spec.d_model, spec.d_ffn);
        fill(layer.ffn.w1, sigma);
        layer.ffn.b1.assign(spec.d_ffn, 0.0);
        layer.ffn.w2 = Matrix(spec.d_ffn, spec.d_model);
        fill(layer.ffn.w2, out_sigma);
        layer.ffn.b2.assign(spec.d_model, 0.0);
        w.layers.push_back(std::move(layer));
    }
    w.ln_final.gamma.assign(spec.d_model, 1.0);
    w.ln_final.beta.assign(spec.d_model, 0.0);
    w.lm_head = Matrix(spec.d_model, spec.vocab_size);
    fill(w.lm_head, sigma);
    return w;
}

Matrix embed(const TransformerWeights& m, const std::vector<int>& tokens,
             std::size_t start_pos) {
    const auto& spec = m.spec;
    Matrix x(tokens.size(), spec.d_model);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const int t = tokens[i];
        if (t < 0 || static_cast<std::size_t>(t) >= spec.vocab_size) {
            throw std::invalid_argument("token id " + std::to_string(t) +
                                        " outside vocab of " +
                                        std::to_string(spec.vocab_size));
        }
        const std::size_t pos = start_pos + i;
        for (std::size_t j = 0; j < spec.d_model; ++j) {
            double val = m.token_embedding(static_cast<std::size_t>(t), j);
            if (spec.pos_mode == PosMode::learned) val += m.pos_embedding(pos, j);
            x(i, j) = val;
        }
    }
    return x;
}

Matrix layer_forward(const ModelSpec& spec, const DecoderLayer& layer, const Matrix& x) {
    KvCache scratch = KvCache::make(1, spec.n_heads);
    Matrix a = ln_forward(x, layer.ln1, nullptr);
    Matrix attn_out = layer_attention(spec, layer, a, scratch, 0, nullptr, nullptr);
    Matrix x2 = add(x, attn_out);
    Matrix f = ffn_forward(ln_forward(x2, layer.ln2, nullptr), layer.ffn);
    return add(x2, f);
}

KvCache make_cache(const TransformerWeights& m, std::size_t precision_bits) {
    return KvCache::make(m.spec.n_layers, m.spec.n_heads, 1, precision_bits);
}

Matrix forward_prefill(const TransformerWeights& m, const std::vector<int>& tokens,
                       KvCache& cache, const KvTransform* kv_transform) {
    const auto& spec = m.spec;
    if (tokens.empty()) throw std::invalid_argument("forward: empty token span");
    const std::size_t start = cache.seq_len;
    if (start + tokens.size() > spec.max_seq) {
        throw std::invalid_argument("forward: span ends at " +
                                    std::to_string(start + tokens.size()) +
                                    " beyond max_seq " + std::to_string(spec.max_seq));
    }
    Matrix x = embed(m, tokens, start);
    for (std::size_t l = 0; l < spec.n_layers; ++l) {
        const auto& layer = m.layers[l];
        Matrix a = ln_forward(x, layer.ln1, nullptr);
        Matrix attn_out = layer_attention(spec, layer, a, cache, l, nullptr, kv_transform);
        Matrix x2 = add(x, attn_out);
        Matrix f = ffn_forward(ln_forward(x2, layer.ln2, nullptr), layer.ffn);
        x = add(x2, f);
    }
    Matrix h = ln_forward(x, m.ln_final, nullptr);
    return matmul(h, m.lm_head);
}

Matrix forward_step(const TransformerWeights& m, int token, KvCache& cache,
                    const KvTransform* kv_transform) {
    return forward_prefill(m, std::vector<int>{token}, cache, kv_transform);
}

Matrix forward(const TransformerWeights& m, const std::vector<int>& tokens,
               const KvTransform* kv_transform) {
    KvCache cache = make_cache(m);
    return forward_prefill(m, tokens, cache, kv_transform);
}

TransformerWeights train_tiny(TransformerWeights m, const std::vector<int>& corpus_ids,
                              const TrainConfig& cfg,
                              std::vector<double>* loss_curve) {
    for (std::size_t l = 0; l < m.spec.n_layers; ++l) {
        if (m.layer_compressed(l)) {
            throw std::invalid_argument("train: layer " + std::to_string(l) +
                                        " is compressed; only standard models train");
        }
    }
    if (cfg.seq_len + 1 > corpus_ids.size()) {
        throw std::invalid_argument("train: corpus of " +
                                    std::to_string(corpus_ids.size()) +
                                    " tokens too short for sequence length " +
                                    std::to_string(cfg.seq_len));
    }
    if (cfg.seq_len > m.spec.max_seq) {
        throw std::invalid_argument("train: seq_len exceeds max_seq");
    }
    if (loss_curve) loss_curve->clear();
    if (cfg.steps == 0) return m;

    Rng rng(cfg.seed);
    auto tensors = collect_tensors(m);
    std::vector<std::vector<double>> m1(tensors.size()), m2(tensors.size());
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        m1[i].assign(tensors[i]->size(), 0.0);
        m2[i].assign(tensors[i]->size(), 0.0);
    }
    const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    const std::size_t max_offset = corpus_ids.size() - cfg.seq_len - 1;

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        TransformerWeights grads = zeros_like(m);
        double loss = 0.0;
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const std::size_t off = rng.below(max_offset + 1);
            std::vector<int> inputs(corpus_ids.begin() + off,
                                    corpus_ids.begin() + off + cfg.seq_len);
            std::vector<int> targets(corpus_ids.begin() + off + 1,
                                     corpus_ids.begin() + off + cfg.seq_len + 1);
            ForwardActs acts;
            train_forward(m, inputs, acts);
            loss += train_backward(m, inputs, targets, acts,
                                   1.0 / static_cast<double>(cfg.batch_size), grads) /
                    static_cast<double>(cfg.batch_size);
        }
        if (!std::isfinite(loss)) {
            throw std::runtime_error("training diverged at step " + std::to_string(step));
        }
        if (loss_curve) loss_curve->push_back(loss);

        auto gtensors = collect_tensors(grads);
        const double t = static_cast<double>(step + 1);
        const double bc1 = 1.0 - std::pow(beta1, t);
        const double bc2 = 1.0 - std::pow(beta2, t);
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            auto& w = *tensors[i];
            auto& g = *gtensors[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                m1[i][j] = beta1 * m1[i][j] + (1.0 - beta1) * g[j];
                m2[i][j] = beta2 * m2[i][j] + (1.0 - beta2) * g[j] * g[j];
                const double mhat = m1[i][j] / bc1;
                const double vhat = m2[i][j] / bc2;
                w[j] -= cfg.lr * mhat / (std::sqrt(vhat) + adam_eps);
            }
        }
    }
    return m;
}

std::pair<double, TransformerWeights> loss_and_gradients(
    const TransformerWeights& m, const std::vector<int>& inputs,
    const std::vector<int>& targets) {
    if (inputs.size() != targets.size() || inputs.empty()) {
        throw std::invalid_argument("loss_and_gradients: inputs and targets must be "
                                    "equal-length and non-empty");
    }
    TransformerWeights grads = zeros_like(m);
    ForwardActs acts;
    train_forward(m, inputs, acts);
    const double loss = train_backward(m, inputs, targets, acts, 1.0, grads);
    return {loss, std::move(grads)};
}

double perplexity(const TransformerWeights& m, const std::vector<int>& ids,
                  const KvTransform* kv_transform) {
    if (ids.size() < 2) {
        throw std::invalid_argument("perplexity needs at least 2 tokens, got " +
                                    std::to_string(ids.size()));
    }
    const std::size_t window = m.spec.max_seq;
    double ce_sum = 0.0;
    std::size_t pairs = 0;
    std::size_t start = 0;
    while (start + 1 < ids.size()) {
        const std::size_t len = std::min(window, ids.size() - start);
        std::vector<int> span(ids.begin() + start, ids.begin() + start + len);
        Matrix logits = forward(m, span, kv_transform);
        for (std::size_t r = 0; r + 1 < len; ++r) {
            const double* row = logits.row(r);
            double mx = row[0];
            for (std::size_t c = 1; c < m.spec.vocab_size; ++c) mx = std::max(mx, row[c]);
            double denom = 0.0;
            for (std::size_t c = 0; c < m.spec.vocab_size; ++c)
                denom += std::exp(row[c] - mx);
            const std::size_t target = static_cast<std::size_t>(span[r + 1]);
            ce_sum -= (row[target] - mx) - std::log(denom);
            ++pairs;
        }
        start += len - 1;
    }
    return std::exp(ce_sum / static_cast<double>(pairs));
}

}  // namespace eigenkv

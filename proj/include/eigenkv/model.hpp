#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "eigenkv/attention.hpp"
#include "eigenkv/rewrite.hpp"

namespace eigenkv {

// Byte-level tokenizer. Vocabulary is id 0 = <unk> followed by the sorted
// distinct bytes of the corpus it was built from, so the mapping is a pure
// function of the corpus.
struct Tokenizer {
    std::vector<std::string> vocab;
    std::unordered_map<char, int> to_id;

    static Tokenizer from_corpus(const std::string& text);
    static Tokenizer from_vocab(std::vector<std::string> vocab_entries);

    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;
    std::size_t size() const { return vocab.size(); }
};

struct ModelSpec {
    std::size_t vocab_size = 0;
    std::size_t d_model = 0;
    std::size_t n_heads = 0;
    std::size_t n_layers = 0;
    std::size_t d_ffn = 0;
    std::size_t max_seq = 0;
    PosMode pos_mode = PosMode::learned;

    std::size_t d_head() const { return d_model / n_heads; }
    void validate() const;
};

struct LayerNormParams {
    std::vector<double> gamma;
    std::vector<double> beta;
};

struct FfnWeights {
    Matrix w1;               // d_model x d_ffn
    std::vector<double> b1;
    Matrix w2;               // d_ffn x d_model
    std::vector<double> b2;
};

// Pre-norm residual block: x + attn(ln1(x)), then x + ffn(ln2(x)).
struct DecoderLayer {
    LayerNormParams ln1;
    std::variant<AttentionWeights, CompressedLayer> attn;
    LayerNormParams ln2;
    FfnWeights ffn;
};

struct TransformerWeights {
    ModelSpec spec;
    Matrix token_embedding;  // vocab x d_model
    Matrix pos_embedding;    // max_seq x d_model; empty unless learned mode
    std::vector<DecoderLayer> layers;
    LayerNormParams ln_final;
    Matrix lm_head;          // d_model x vocab

    bool layer_compressed(std::size_t l) const {
        return std::holds_alternative<CompressedLayer>(layers[l].attn);
    }
};

Matrix layer_norm(const Matrix& x, const LayerNormParams& p);
Matrix gelu(const Matrix& x);
Matrix ffn_forward(const Matrix& x, const FfnWeights& f);

// Attention shape parameters for one layer of the model; kv_rank reflects
// the layer's cached key width.
AttentionConfig attention_config(const ModelSpec& spec, std::size_t kv_rank);

// Deterministic N(0, 0.02) init (output-side projections additionally
// scaled by 1/sqrt(2L)), unit gain / zero bias norms.
TransformerWeights init_model(const ModelSpec& spec, std::uint64_t seed);

// Embedding rows for a token span starting at absolute position start_pos
// (position rows added in learned mode).
Matrix embed(const TransformerWeights& m, const std::vector<int>& tokens,
             std::size_t start_pos = 0);

// One decoder layer over a full sequence (scratch cache inside). Used by
// calibration and the threshold search, which walk the stack layer by
// layer.
Matrix layer_forward(const ModelSpec& spec, const DecoderLayer& layer, const Matrix& x);

// Teacher-forced forward: tokens -> logits (n x vocab). kv_transform, when
// given, is applied to every cached key/value chunk (see attention.hpp).
Matrix forward(const TransformerWeights& m, const std::vector<int>& tokens,
               const KvTransform* kv_transform = nullptr);

// Stateful decoding split into prompt ingestion and single-token steps.
// The cache must come from make_cache(m). Returns logits for the consumed
// tokens.
KvCache make_cache(const TransformerWeights& m, std::size_t precision_bits = 16);
Matrix forward_prefill(const TransformerWeights& m, const std::vector<int>& tokens,
                       KvCache& cache, const KvTransform* kv_transform = nullptr);
Matrix forward_step(const TransformerWeights& m, int token, KvCache& cache,
                    const KvTransform* kv_transform = nullptr);

struct TrainConfig {
    std::size_t steps = 200;
    std::size_t seq_len = 48;
    std::size_t batch_size = 4;
    double lr = 3e-3;
    std::uint64_t seed = 1;
};

// Adam on teacher-forced cross-entropy over windows sampled from the
// corpus. Deterministic for a fixed config. Throws std::runtime_error
// naming the step if the loss turns non-finite. Only standard (not yet
// compressed) models are trainable.
TransformerWeights train_tiny(TransformerWeights m, const std::vector<int>& corpus_ids,
                              const TrainConfig& cfg,
                              std::vector<double>* loss_curve = nullptr);

// Mean cross-entropy of one teacher-forced window plus the full parameter
// gradient (same shapes as the model). One training step is one Adam update
// over a batch of these. Exposed so the backward pass can be checked
// against finite differences.
std::pair<double, TransformerWeights> loss_and_gradients(
    const TransformerWeights& m, const std::vector<int>& inputs,
    const std::vector<int>& targets);

// exp(mean next-token cross-entropy) over the slice, teacher-forced in
// windows of at most max_seq tokens. Needs at least 2 tokens.
double perplexity(const TransformerWeights& m, const std::vector<int>& ids,
                  const KvTransform* kv_transform = nullptr);

}  // namespace eigenkv

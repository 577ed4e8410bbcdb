#include "eigenkv/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace eigenkv {

namespace {

constexpr char kMagic[8] = {'E', 'K', 'V', 'C', 'K', 'P', 'T', '1'};
constexpr int kFormatVersion = 1;

struct TensorRef {
    std::string name;
    std::vector<std::size_t> shape;
    const std::vector<double>* values;
};

void push_matrix(std::vector<TensorRef>& refs, std::string name, const Matrix& m) {
    refs.push_back({std::move(name), {m.rows(), m.cols()}, &m.data()});
}

void push_vector(std::vector<TensorRef>& refs, std::string name,
                 const std::vector<double>& v) {
    refs.push_back({std::move(name), {v.size()}, &v});
}

std::string layer_prefix(std::size_t l) {
    return "layers." + std::to_string(l) + ".";
}

// One fixed enumeration shared by save and load so the directory order is
// deterministic and completeness checks are just a count comparison.
std::vector<TensorRef> enumerate_tensors(const TransformerWeights& m) {
    std::vector<TensorRef> refs;
    push_matrix(refs, "token_embedding", m.token_embedding);
    if (!m.pos_embedding.empty()) push_matrix(refs, "pos_embedding", m.pos_embedding);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const auto& layer = m.layers[l];
        const std::string p = layer_prefix(l);
        push_vector(refs, p + "ln1.gamma", layer.ln1.gamma);
        push_vector(refs, p + "ln1.beta", layer.ln1.beta);
        const AttentionWeights* w = nullptr;
        if (const auto* std_w = std::get_if<AttentionWeights>(&layer.attn)) {
            w = std_w;
        } else {
            const auto& cl = std::get<CompressedLayer>(layer.attn);
            w = &cl.w;
            if (cl.key_unproject)
                push_matrix(refs, p + "attn.key_unproject", *cl.key_unproject);
        }
        for (std::size_t h = 0; h < w->wq.size(); ++h) {
            const std::string hs = std::to_string(h);
            push_matrix(refs, p + "attn.wq." + hs, w->wq[h]);
            push_matrix(refs, p + "attn.wk." + hs, w->wk[h]);
            push_matrix(refs, p + "attn.wv." + hs, w->wv[h]);
            push_matrix(refs, p + "attn.wo." + hs, w->wo[h]);
        }
        push_vector(refs, p + "ln2.gamma", layer.ln2.gamma);
        push_vector(refs, p + "ln2.beta", layer.ln2.beta);
        push_matrix(refs, p + "ffn.w1", layer.ffn.w1);
        push_vector(refs, p + "ffn.b1", layer.ffn.b1);
        push_matrix(refs, p + "ffn.w2", layer.ffn.w2);
        push_vector(refs, p + "ffn.b2", layer.ffn.b2);
    }
    push_vector(refs, "ln_final.gamma", m.ln_final.gamma);
    push_vector(refs, "ln_final.beta", m.ln_final.beta);
    push_matrix(refs, "lm_head", m.lm_head);
    return refs;
}

void append_f32_le(std::string& out, double value) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(value));
    out.push_back(static_cast<char>(bits & 0xff));
    out.push_back(static_cast<char>((bits >> 8) & 0xff));
    out.push_back(static_cast<char>((bits >> 16) & 0xff));
    out.push_back(static_cast<char>((bits >> 24) & 0xff));
}

double read_f32_le(const std::string& payload, std::size_t at) {
    std::uint32_t bits = 0;
    for (int b = 3; b >= 0; --b)
        bits = (bits << 8) | static_cast<std::uint8_t>(payload[at + static_cast<std::size_t>(b)]);
    return static_cast<double>(std::bit_cast<float>(bits));
}

void append_u64_le(std::string& out, std::uint64_t v) {
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

struct DirEntry {
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
};

std::size_t numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t s : shape) n *= s;
    return n;
}

std::vector<double> read_tensor(const std::string& payload, const DirEntry& e,
                                const std::string& name,
                                const std::vector<std::size_t>& want_shape) {
    if (e.shape != want_shape) {
        throw std::runtime_error("checkpoint tensor " + name + " has unexpected shape");
    }
    const std::size_t n = numel(e.shape);
    if (e.offset + 4 * n > payload.size()) {
        throw std::runtime_error("checkpoint tensor " + name + " runs past the payload");
    }
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = read_f32_le(payload, e.offset + 4 * i);
    return out;
}

Matrix read_matrix(const std::string& payload,
                   const std::unordered_map<std::string, DirEntry>& dir,
                   const std::string& name, std::size_t rows, std::size_t cols) {
    auto it = dir.find(name);
    if (it == dir.end()) throw std::runtime_error("checkpoint is missing tensor " + name);
    Matrix m(rows, cols);
    m.data() = read_tensor(payload, it->second, name, {rows, cols});
    return m;
}

std::vector<double> read_vector(const std::string& payload,
                                const std::unordered_map<std::string, DirEntry>& dir,
                                const std::string& name, std::size_t n) {
    auto it = dir.find(name);
    if (it == dir.end()) throw std::runtime_error("checkpoint is missing tensor " + name);
    return read_tensor(payload, it->second, name, {n});
}

}  // namespace

void save_checkpoint(const std::string& path, const TransformerWeights& model,
                     const Tokenizer& tokenizer) {
    model.spec.validate();
    if (tokenizer.size() != model.spec.vocab_size) {
        throw std::invalid_argument("tokenizer vocabulary does not match the model spec");
    }
    const auto refs = enumerate_tensors(model);

    nlohmann::json header;
    header["format_version"] = kFormatVersion;
    header["spec"] = {{"vocab_size", model.spec.vocab_size},
                      {"d_model", model.spec.d_model},
                      {"n_heads", model.spec.n_heads},
                      {"n_layers", model.spec.n_layers},
                      {"d_ffn", model.spec.d_ffn},
                      {"max_seq", model.spec.max_seq},
                      {"pos_mode", to_string(model.spec.pos_mode)}};
    header["tokenizer"] = tokenizer.vocab;

    nlohmann::json layer_meta = nlohmann::json::array();
    for (const auto& layer : model.layers) {
        if (const auto* cl = std::get_if<CompressedLayer>(&layer.attn)) {
            layer_meta.push_back({{"type", "compressed"},
                                  {"r_k", cl->r_k},
                                  {"r_v", cl->r_v},
                                  {"pos_mode", to_string(cl->pos_mode)},
                                  {"shared_key_basis", cl->shared_key_basis}});
        } else {
            layer_meta.push_back({{"type", "standard"}});
        }
    }
    header["layers"] = std::move(layer_meta);

    nlohmann::json dir = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& ref : refs) {
        dir.push_back({{"name", ref.name}, {"shape", ref.shape}, {"offset", offset}});
        offset += 4 * ref.values->size();
    }
    header["tensors"] = std::move(dir);

    const std::string header_str = header.dump();
    std::string blob;
    blob.reserve(16 + header_str.size() + offset);
    blob.append(kMagic, sizeof(kMagic));
    append_u64_le(blob, header_str.size());
    blob += header_str;
    for (const auto& ref : refs)
        for (double v : *ref.values) append_f32_le(blob, v);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw std::runtime_error("short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path);
    std::string blob((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());

    if (blob.size() < 16 || blob.compare(0, sizeof(kMagic), kMagic, sizeof(kMagic)) != 0) {
        throw std::runtime_error(path + " is not a checkpoint (bad magic)");
    }
    std::uint64_t header_len = 0;
    for (int b = 7; b >= 0; --b)
        header_len = (header_len << 8) |
                     static_cast<std::uint8_t>(blob[8 + static_cast<std::size_t>(b)]);
    if (16 + header_len > blob.size()) {
        throw std::runtime_error(path + " is truncated inside the header");
    }

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(blob.substr(16, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("checkpoint header is not valid JSON: " +
                                 std::string(e.what()));
    }
    if (header.at("format_version").get<int>() != kFormatVersion) {
        throw std::runtime_error("unsupported checkpoint format version");
    }

    Checkpoint ckpt;
    const auto& js = header.at("spec");
    ModelSpec& spec = ckpt.model.spec;
    spec.vocab_size = js.at("vocab_size").get<std::size_t>();
    spec.d_model = js.at("d_model").get<std::size_t>();
    spec.n_heads = js.at("n_heads").get<std::size_t>();
    spec.n_layers = js.at("n_layers").get<std::size_t>();
    spec.d_ffn = js.at("d_ffn").get<std::size_t>();
    spec.max_seq = js.at("max_seq").get<std::size_t>();
    spec.pos_mode = pos_mode_from_string(js.at("pos_mode").get<std::string>());
    spec.validate();

    ckpt.tokenizer =
        Tokenizer::from_vocab(header.at("tokenizer").get<std::vector<std::string>>());
    if (ckpt.tokenizer.size() != spec.vocab_size) {
        throw std::runtime_error("checkpoint tokenizer size disagrees with the spec");
    }

    std::unordered_map<std::string, DirEntry> dir;
    for (const auto& e : header.at("tensors")) {
        DirEntry d;
        d.shape = e.at("shape").get<std::vector<std::size_t>>();
        d.offset = e.at("offset").get<std::size_t>();
        dir.emplace(e.at("name").get<std::string>(), std::move(d));
    }
    const std::string payload = blob.substr(16 + header_len);

    const std::size_t d = spec.d_model;
    const std::size_t dh = spec.d_head();
    ckpt.model.token_embedding = read_matrix(payload, dir, "token_embedding",
                                             spec.vocab_size, d);
    if (spec.pos_mode == PosMode::learned) {
        ckpt.model.pos_embedding = read_matrix(payload, dir, "pos_embedding",
                                               spec.max_seq, d);
    }

    const auto& layer_meta = header.at("layers");
    if (layer_meta.size() != spec.n_layers) {
        throw std::runtime_error("checkpoint layer metadata count disagrees with the spec");
    }
    for (std::size_t l = 0; l < spec.n_layers; ++l) {
        DecoderLayer layer;
        const std::string p = layer_prefix(l);
        layer.ln1.gamma = read_vector(payload, dir, p + "ln1.gamma", d);
        layer.ln1.beta = read_vector(payload, dir, p + "ln1.beta", d);

        const auto& meta = layer_meta[l];
        const std::string type = meta.at("type").get<std::string>();
        std::size_t q_cols = dh, k_cols = dh, v_cols = dh;
        if (type == "compressed") {
            const auto r_k = meta.at("r_k").get<std::size_t>();
            const auto r_v = meta.at("r_v").get<std::size_t>();
            const auto mode = pos_mode_from_string(meta.at("pos_mode").get<std::string>());
            k_cols = r_k;
            v_cols = r_v;
            q_cols = mode == PosMode::rope ? dh : r_k;
        } else if (type != "standard") {
            throw std::runtime_error("unknown attention layer type " + type);
        }
        AttentionWeights w;
        for (std::size_t h = 0; h < spec.n_heads; ++h) {
            const std::string hs = std::to_string(h);
            w.wq.push_back(read_matrix(payload, dir, p + "attn.wq." + hs, d, q_cols));
            w.wk.push_back(read_matrix(payload, dir, p + "attn.wk." + hs, d, k_cols));
            w.wv.push_back(read_matrix(payload, dir, p + "attn.wv." + hs, d, v_cols));
            w.wo.push_back(read_matrix(payload, dir, p + "attn.wo." + hs, v_cols, d));
        }
        if (type == "compressed") {
            CompressedLayer cl;
            cl.w = std::move(w);
            cl.r_k = meta.at("r_k").get<std::size_t>();
            cl.r_v = meta.at("r_v").get<std::size_t>();
            cl.pos_mode = pos_mode_from_string(meta.at("pos_mode").get<std::string>());
            cl.shared_key_basis = meta.at("shared_key_basis").get<bool>();
            if (cl.pos_mode == PosMode::rope) {
                cl.key_unproject = read_matrix(payload, dir, p + "attn.key_unproject",
                                               cl.r_k, dh);
            }
            layer.attn = std::move(cl);
        } else {
            layer.attn = std::move(w);
        }

        layer.ln2.gamma = read_vector(payload, dir, p + "ln2.gamma", d);
        layer.ln2.beta = read_vector(payload, dir, p + "ln2.beta", d);
        layer.ffn.w1 = read_matrix(payload, dir, p + "ffn.w1", d, spec.d_ffn);
        layer.ffn.b1 = read_vector(payload, dir, p + "ffn.b1", spec.d_ffn);
        layer.ffn.w2 = read_matrix(payload, dir, p + "ffn.w2", spec.d_ffn, d);
        layer.ffn.b2 = read_vector(payload, dir, p + "ffn.b2", d);
        ckpt.model.layers.push_back(std::move(layer));
    }

    ckpt.model.ln_final.gamma = read_vector(payload, dir, "ln_final.gamma", d);
    ckpt.model.ln_final.beta = read_vector(payload, dir, "ln_final.beta", d);
    ckpt.model.lm_head = read_matrix(payload, dir, "lm_head", d, spec.vocab_size);

    const std::size_t expected = enumerate_tensors(ckpt.model).size();
    if (dir.size() != expected) {
        throw std::runtime_error("checkpoint directory lists " +
                                 std::to_string(dir.size()) + " tensors, expected " +
                                 std::to_string(expected));
    }
    return ckpt;
}

}  // namespace eigenkv

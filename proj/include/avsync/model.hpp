#pragma once

#include <atomic>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "avsync/audio.hpp"
#include "avsync/common.hpp"
#include "avsync/encoders.hpp"
#include "avsync/tensor.hpp"

namespace avsync {

enum class Variant { enc, enc_mp, dec };

inline std::string variant_name(Variant v) {
    switch (v) {
        case Variant::enc: return "enc";
        case Variant::enc_mp: return "enc_mp";
        case Variant::dec: return "dec";
    }
    return "?";
}

inline Variant variant_from_name(const std::string& s) {
    if (s == "enc") return Variant::enc;
    if (s == "enc_mp" || s == "enc-mp") return Variant::enc_mp;
    if (s == "dec") return Variant::dec;
    throw ConfigError("unknown variant '" + s + "' (expected enc, enc_mp or dec)");
}

struct ModelConfig {
    Variant variant = Variant::enc_mp;
    int channels = 64;
    int layers = 3;
    int heads = 4;
    int ffn_dim = 128;
    int t_v_max = 20;
    int steps_per_frame = 4;  // audio feature steps per visual frame
    int fps = 5;
    int sample_rate = 16000;
    int stft_window = 320;
    int stft_hop = 40;
    std::vector<int> visual_stage_channels = {16, 32, 64};
    int visual_temporal_kernel = 3;
    int audio_mid_channels = 32;
    int frame_height = 32;
    int frame_width = 32;

    int t_a_max() const { return t_v_max * steps_per_frame; }
    int samples_per_frame() const { return sample_rate / fps; }
    // audio crops carry one extra analysis window minus hop so that a crop of
    // t frames yields exactly t * hops_per_frame spectrogram frames
    int crop_lookahead() const { return stft_window - stft_hop; }
    int hops_per_frame() const { return samples_per_frame() / stft_hop; }
    int feat_h() const { return frame_height >> static_cast<int>(visual_stage_channels.size()); }
    int feat_w() const { return frame_width >> static_cast<int>(visual_stage_channels.size()); }

    VisualEncoderConfig visual_config() const {
        VisualEncoderConfig v;
        v.in_height = frame_height;
        v.in_width = frame_width;
        v.stage_channels = visual_stage_channels;
        v.temporal_kernel = visual_temporal_kernel;
        return v;
    }

    AudioEncoderConfig audio_config() const {
        AudioEncoderConfig a;
        a.bins = stft_window / 2 + 1;
        a.hops_per_frame = hops_per_frame();
        a.steps_per_frame = steps_per_frame;
        a.mid_channels = audio_mid_channels;
        a.out_channels = channels;
        return a;
    }

    void validate() const {
        if (channels < 1 || layers < 1 || heads < 1 || ffn_dim < 1 || t_v_max < 1)
            throw ConfigError("model dims must be positive");
        if (channels % heads != 0)
            throw ConfigError("channels " + std::to_string(channels) + " not divisible by heads " + std::to_string(heads));
        if (visual_stage_channels.empty() || visual_stage_channels.back() != channels)
            throw ConfigError("last visual stage width must equal the model channel width");
        if (sample_rate % (fps * stft_hop) != 0)
            throw ConfigError("sample_rate must be a multiple of fps * stft_hop");
        visual_config().validate();
        audio_config().validate();
    }
};

// token-count formulas of the three variants
inline int64_t token_count(Variant v, int t_v, int t_a, int h, int w) {
    switch (v) {
        case Variant::enc: return 1 + static_cast<int64_t>(h) * w * t_v + t_a;
        case Variant::enc_mp: return 1 + static_cast<int64_t>(t_v) + t_a;
        case Variant::dec: return 1 + static_cast<int64_t>(t_a);  // query stream
    }
    return 0;
}

// bookkeeping estimate of multiply-accumulates spent inside attention
// (score + apply), used for the quadratic-vs-linear scaling check
inline int64_t attention_cost_madds(int layers, int heads, int channels, int64_t len_q, int64_t len_kv) {
    const int64_t dh = channels / heads;
    return static_cast<int64_t>(layers) * heads * 2 * len_q * len_kv * dh;
}

struct TokenLayout {
    int cls_count = 1;
    int visual_tokens = 0;
    int audio_tokens = 0;
    int total() const { return cls_count + visual_tokens + audio_tokens; }
};

struct TokenSequence {
    Tensor tokens;  // [L, c]
    TokenLayout layout;
};

// Learned additive tables: modality (E_m), per-stream temporal (E_t),
// spatial (E_s) and the [CLS] token. Stored row-major as [positions, c].
struct EncodingTables {
    Tensor modality;         // [2, c]: row 0 visual, row 1 audio
    Tensor temporal_visual;  // [t_v_max, c]
    Tensor temporal_audio;   // [t_a_max, c]
    Tensor spatial;          // [h*w, c]; undefined for enc_mp (pooling removes the axes it indexes)
    Tensor cls;              // [1, c]

    // The two temporal tables are independent parameters, but their initial
    // values are drawn around one shared per-frame base vector: an audio step
    // starts near the encoding of the visual frame it is aligned with. Paired
    // with attention projections whose query/key weights start equal, aligned
    // cross-modal positions carry an attention affinity from the first step;
    // with independently initialised tables the synchronisation objective
    // sits on a plateau it does not leave at this scale.
    static EncodingTables init_raw(int channels, int t_v_max, int t_a_max, int spatial_cells, Rng& rng) {
        EncodingTables t;
        const double sd_base = 0.2, sd_jitter = 0.02;
        t.modality = Tensor::randn({2, channels}, rng, sd_jitter);
        Tensor base = Tensor::randn({t_v_max, channels}, rng, sd_base);
        const int steps_per_frame = std::max(1, (t_a_max + t_v_max - 1) / t_v_max);
        t.temporal_visual = Tensor({t_v_max, channels});
        for (int f = 0; f < t_v_max; ++f)
            for (int c = 0; c < channels; ++c)
                t.temporal_visual[static_cast<size_t>(f) * channels + c] =
                    base[static_cast<size_t>(f) * channels + c] + rng.normal(0.0, sd_jitter);
        t.temporal_audio = Tensor({t_a_max, channels});
        for (int s = 0; s < t_a_max; ++s) {
            const int f = std::min(s / steps_per_frame, t_v_max - 1);
            for (int c = 0; c < channels; ++c)
                t.temporal_audio[static_cast<size_t>(s) * channels + c] =
                    base[static_cast<size_t>(f) * channels + c] + rng.normal(0.0, sd_jitter);
        }
        if (spatial_cells > 0) t.spatial = Tensor::randn({spatial_cells, channels}, rng, sd_jitter);
        t.cls = Tensor::randn({1, channels}, rng, sd_jitter);
        return t;
    }

    static EncodingTables init(const ModelConfig& cfg, Rng& rng) {
        const int cells = cfg.variant != Variant::enc_mp ? cfg.feat_h() * cfg.feat_w() : 0;
        return init_raw(cfg.channels, cfg.t_v_max, cfg.t_a_max(), cells, rng);
    }

    void collect_params(std::vector<NamedParam>& out) const {
        out.push_back({"tables.modality", modality});
        out.push_back({"tables.temporal_visual", temporal_visual});
        out.push_back({"tables.temporal_audio", temporal_audio});
        if (spatial.defined()) out.push_back({"tables.spatial", spatial});
        out.push_back({"tables.cls", cls});
    }
};

// per-layer, per-head attention weights saved from the last forward pass
struct AttentionRecord {
    std::vector<std::vector<Tensor>> self_attention;   // [layer][head] -> [Lq, Lq]
    std::vector<std::vector<Tensor>> cross_attention;  // [layer][head] -> [Lq, Lkv], decoder only
};

struct TokenCaps {
    int t_v_max = 0;
    int t_a_max = 0;

    void check(int t_v, int t_a) const {
        if (t_v > t_v_max)
            throw ConfigError("sequence of " + std::to_string(t_v) + " visual frames exceeds table capacity " +
                              std::to_string(t_v_max));
        if (t_a > t_a_max)
            throw ConfigError("sequence of " + std::to_string(t_a) + " audio steps exceeds table capacity " +
                              std::to_string(t_a_max));
    }
};

namespace detail {

// copyable atomic counter so the model stays movable
struct ForwardCounter {
    std::atomic<int64_t> n{0};
    ForwardCounter() = default;
    ForwardCounter(const ForwardCounter& o) : n(o.n.load()) {}
    ForwardCounter& operator=(const ForwardCounter& o) {
        n.store(o.n.load());
        return *this;
    }
};

inline std::vector<int> iota(int n) {
    std::vector<int> v(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) v[static_cast<size_t>(i)] = i;
    return v;
}

inline Tensor linear(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_row_broadcast(tape, matmul(tape, x, w), b);
}

struct AttnParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;

    static AttnParams init(int c, Rng& rng) {
        AttnParams p;
        for (Tensor* w : {&p.wq, &p.wv, &p.wo}) {
            *w = Tensor({c, c});
            kaiming_uniform(*w, c, rng);
        }
        // queries/keys start small so attention opens near-uniform with live
        // gradients, and equal, so q.k = x W W^T y rewards tokens whose
        // encodings are correlated (aligned cross-modal positions)
        for (double& v : p.wq.data()) v *= 0.25;
        p.wk = Tensor::from_values(p.wq.shape(), p.wq.data());
        for (Tensor* b : {&p.bq, &p.bk, &p.bv, &p.bo}) *b = Tensor({c});
        return p;
    }

    void collect(std::vector<NamedParam>& out, const std::string& prefix) const {
        out.push_back({prefix + ".wq", wq});
        out.push_back({prefix + ".bq", bq});
        out.push_back({prefix + ".wk", wk});
        out.push_back({prefix + ".bk", bk});
        out.push_back({prefix + ".wv", wv});
        out.push_back({prefix + ".bv", bv});
        out.push_back({prefix + ".wo", wo});
        out.push_back({prefix + ".bo", bo});
    }
};

// multi-head attention; query and key/value streams may differ
inline Tensor mha(Tape* tape, const Tensor& q_in, const Tensor& kv_in, const AttnParams& p, int heads,
                  std::vector<Tensor>* record) {
    const int c = q_in.dim(1);
    const int dh = c / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor q = linear(tape, q_in, p.wq, p.bq);
    Tensor k = linear(tape, kv_in, p.wk, p.bk);
    Tensor v = linear(tape, kv_in, p.wv, p.bv);
    std::vector<Tensor> head_out;
    head_out.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = take_cols(tape, q, h * dh, dh);
        Tensor kh = take_cols(tape, k, h * dh, dh);
        Tensor vh = take_cols(tape, v, h * dh, dh);
        Tensor scores = scale(tape, matmul(tape, qh, transpose(tape, kh)), inv_sqrt_dh);
        Tensor weights = softmax(tape, scores, 1);
        if (record) record->push_back(Tensor::from_values(weights.shape(), weights.data()));
        head_out.push_back(matmul(tape, weights, vh));
    }
    Tensor merged = heads == 1 ? head_out[0] : concat_cols(tape, head_out);
    return linear(tape, merged, p.wo, p.bo);
}

struct FfnParams {
    Tensor w1, b1, w2, b2;

    static FfnParams init(int c, int hidden, Rng& rng) {
        FfnParams p;
        p.w1 = Tensor({c, hidden});
        kaiming_uniform(p.w1, c, rng);
        p.b1 = Tensor({hidden});
        p.w2 = Tensor({hidden, c});
        kaiming_uniform(p.w2, hidden, rng);
        p.b2 = Tensor({c});
        return p;
    }

    Tensor apply(Tape* tape, const Tensor& x) const {
        return linear(tape, relu(tape, linear(tape, x, w1, b1)), w2, b2);
    }

    void collect(std::vector<NamedParam>& out, const std::string& prefix) const {
        out.push_back({prefix + ".w1", w1});
        out.push_back({prefix + ".b1", b1});
        out.push_back({prefix + ".w2", w2});
        out.push_back({prefix + ".b2", b2});
    }
};

struct NormParams {
    Tensor gamma, beta;

    static NormParams init(int c) {
        NormParams n;
        n.gamma = Tensor({c}, 1.0);
        n.beta = Tensor({c}, 0.0);
        return n;
    }

    Tensor apply(Tape* tape, const Tensor& x) const { return layer_norm(tape, x, gamma, beta, 1e-5); }

    void collect(std::vector<NamedParam>& out, const std::string& prefix) const {
        out.push_back({prefix + ".gamma", gamma});
        out.push_back({prefix + ".beta", beta});
    }
};

}  // namespace detail

// ---- token building ------------------------------------------------------

// flattened spatio-temporal visual grid with modality, temporal and spatial
// encodings added (each broadcast over the axes it does not index)
inline Tensor dense_visual_tokens(Tape* tape, const EncodingTables& tables, const Tensor& vfeat, const TokenCaps& caps) {
    const int t_v = vfeat.dim(1), h = vfeat.dim(2), w = vfeat.dim(3);
    caps.check(t_v, 0);
    if (!tables.spatial.defined() || tables.spatial.dim(0) != h * w)
        throw ConfigError("spatial table does not match feature grid " + std::to_string(h) + "x" + std::to_string(w));
    Tensor tok = flatten_tokens(tape, vfeat);  // [t_v*h*w, c]
    tok = add_row_broadcast(tape, tok, embed_rows(tape, tables.modality, {0}));
    tok = add(tape, tok, repeat_rows(tape, embed_rows(tape, tables.temporal_visual, detail::iota(t_v)), h * w));
    tok = add(tape, tok, tile_rows(tape, tables.spatial, t_v));
    return tok;
}

inline Tensor audio_tokens(Tape* tape, const EncodingTables& tables, const Tensor& afeat, const TokenCaps& caps) {
    const int t_a = afeat.dim(1);
    caps.check(0, t_a);
    Tensor tok = transpose(tape, afeat);  // [t_a, c]
    tok = add_row_broadcast(tape, tok, embed_rows(tape, tables.modality, {1}));
    tok = add(tape, tok, embed_rows(tape, tables.temporal_audio, detail::iota(t_a)));
    return tok;
}

// [CLS; flatten(V)+E; A+E], L = 1 + h*w*t_v + t_a
inline TokenSequence build_tokens_enc(Tape* tape, const EncodingTables& tables, const Tensor& vfeat,
                                      const Tensor& afeat, const TokenCaps& caps) {
    Tensor vis = dense_visual_tokens(tape, tables, vfeat, caps);
    Tensor aud = audio_tokens(tape, tables, afeat, caps);
    TokenSequence seq;
    seq.layout = {1, vis.dim(0), aud.dim(0)};
    seq.tokens = concat_rows(tape, {tables.cls, vis, aud});
    return seq;
}

// [CLS; GMP(V)+E; A+E], L = 1 + t_v + t_a; the spatial table does not apply
// once pooling has removed the axes it indexes
inline TokenSequence build_tokens_mp(Tape* tape, const EncodingTables& tables, const Tensor& vfeat,
                                     const Tensor& afeat, const TokenCaps& caps) {
    const int t_v = vfeat.dim(1);
    caps.check(t_v, 0);
    Tensor pooled = transpose(tape, global_max_pool_spatial(tape, vfeat));  // [t_v, c]
    Tensor vis = add_row_broadcast(tape, pooled, embed_rows(tape, tables.modality, {0}));
    vis = add(tape, vis, embed_rows(tape, tables.temporal_visual, detail::iota(t_v)));
    Tensor aud = audio_tokens(tape, tables, afeat, caps);
    TokenSequence seq;
    seq.layout = {1, t_v, aud.dim(0)};
    seq.tokens = concat_rows(tape, {tables.cls, vis, aud});
    return seq;
}

// decoder query stream: [CLS; A+E]
inline TokenSequence build_query_tokens(Tape* tape, const EncodingTables& tables, const Tensor& afeat,
                                        const TokenCaps& caps) {
    Tensor aud = audio_tokens(tape, tables, afeat, caps);
    TokenSequence seq;
    seq.layout = {1, 0, aud.dim(0)};
    seq.tokens = concat_rows(tape, {tables.cls, aud});
    return seq;
}

// Pre-norm transformer stack. Encoder layers self-attend over the whole token
// sequence; decoder layers self-attend over the query stream and then
// cross-attend into the fixed visual tokens (the same tensor at every layer).
class TransformerStack {
    struct EncLayer {
        detail::NormParams ln1, ln2;
        detail::AttnParams attn;
        detail::FfnParams ffn;
    };
    struct DecLayer {
        detail::NormParams ln1, ln2, ln3;
        detail::AttnParams self_attn, cross_attn;
        detail::FfnParams ffn;
    };

public:
    TransformerStack(int layers, int heads, int channels, int ffn_dim, bool decoder, Rng& rng)
        : heads_(heads), decoder_(decoder) {
        for (int l = 0; l < layers; ++l) {
            if (decoder_) {
                DecLayer d;
                d.ln1 = detail::NormParams::init(channels);
                d.ln2 = detail::NormParams::init(channels);
                d.ln3 = detail::NormParams::init(channels);
                d.self_attn = detail::AttnParams::init(channels, rng);
                d.cross_attn = detail::AttnParams::init(channels, rng);
                d.ffn = detail::FfnParams::init(channels, ffn_dim, rng);
                dec_layers_.push_back(std::move(d));
            } else {
                EncLayer e;
                e.ln1 = detail::NormParams::init(channels);
                e.ln2 = detail::NormParams::init(channels);
                e.attn = detail::AttnParams::init(channels, rng);
                e.ffn = detail::FfnParams::init(channels, ffn_dim, rng);
                enc_layers_.push_back(std::move(e));
            }
        }
    }

    int layer_count() const { return static_cast<int>(decoder_ ? dec_layers_.size() : enc_layers_.size()); }
    int heads() const { return heads_; }

    Tensor encoder_forward(Tape* tape, const Tensor& tokens, AttentionRecord* rec) const {
        if (decoder_) throw ContractError("encoder_forward on a decoder stack");
        Tensor x = tokens;
        for (const auto& layer : enc_layers_) {
            std::vector<Tensor>* slot = nullptr;
            if (rec) {
                rec->self_attention.emplace_back();
                slot = &rec->self_attention.back();
            }
            Tensor n1 = layer.ln1.apply(tape, x);
            x = add(tape, x, detail::mha(tape, n1, n1, layer.attn, heads_, slot));
            x = add(tape, x, layer.ffn.apply(tape, layer.ln2.apply(tape, x)));
        }
        return x;
    }

    Tensor decoder_forward(Tape* tape, const Tensor& queries, const Tensor& visual_tokens, AttentionRecord* rec) const {
        if (!decoder_) throw ContractError("decoder_forward on an encoder stack");
        Tensor x = queries;
        for (const auto& layer : dec_layers_) {
            std::vector<Tensor>*self_slot = nullptr, *cross_slot = nullptr;
            if (rec) {
                rec->self_attention.emplace_back();
                rec->cross_attention.emplace_back();
                self_slot = &rec->self_attention.back();
                cross_slot = &rec->cross_attention.back();
            }
            Tensor n1 = layer.ln1.apply(tape, x);
            x = add(tape, x, detail::mha(tape, n1, n1, layer.self_attn, heads_, self_slot));
            x = add(tape, x, detail::mha(tape, layer.ln2.apply(tape, x), visual_tokens, layer.cross_attn, heads_, cross_slot));
            x = add(tape, x, layer.ffn.apply(tape, layer.ln3.apply(tape, x)));
        }
        return x;
    }

    void collect_params(std::vector<NamedParam>& out) const {
        for (size_t l = 0; l < enc_layers_.size(); ++l) {
            const std::string p = "stack.layer" + std::to_string(l);
            enc_layers_[l].ln1.collect(out, p + ".ln1");
            enc_layers_[l].attn.collect(out, p + ".attn");
            enc_layers_[l].ln2.collect(out, p + ".ln2");
            enc_layers_[l].ffn.collect(out, p + ".ffn");
        }
        for (size_t l = 0; l < dec_layers_.size(); ++l) {
            const std::string p = "stack.layer" + std::to_string(l);
            dec_layers_[l].ln1.collect(out, p + ".ln1");
            dec_layers_[l].self_attn.collect(out, p + ".self_attn");
            dec_layers_[l].ln2.collect(out, p + ".ln2");
            dec_layers_[l].cross_attn.collect(out, p + ".cross_attn");
            dec_layers_[l].ln3.collect(out, p + ".ln3");
            dec_layers_[l].ffn.collect(out, p + ".ffn");
        }
    }

private:
    int heads_;
    bool decoder_;
    std::vector<EncLayer> enc_layers_;
    std::vector<DecLayer> dec_layers_;
};

// MLP head on the CLS-position output token: layer norm, then c -> c -> 1.
// Normalising the head input removes the degenerate descent direction where
// the optimiser shrinks the whole residual stream to flatten score variance.
struct ScoreHead {
    Tensor ln_gamma, ln_beta, w1, b1, w2, b2;

    static ScoreHead init(int c, Rng& rng) {
        ScoreHead h;
        h.ln_gamma = Tensor({c}, 1.0);
        h.ln_beta = Tensor({c}, 0.0);
        h.w1 = Tensor({c, c});
        detail::kaiming_uniform(h.w1, c, rng);
        h.b1 = Tensor({c});
        h.w2 = Tensor({c, 1});
        detail::kaiming_uniform(h.w2, c, rng);
        h.b2 = Tensor({1});
        return h;
    }

    void collect_params(std::vector<NamedParam>& out) const {
        out.push_back({"head.ln_gamma", ln_gamma});
        out.push_back({"head.ln_beta", ln_beta});
        out.push_back({"head.w1", w1});
        out.push_back({"head.b1", b1});
        out.push_back({"head.w2", w2});
        out.push_back({"head.b2", b2});
    }
};

// Reads only the first (CLS-position) output token. The hidden activation is
// leaky: with a hard relu the InfoNCE objective can push every hidden unit
// negative early in training, after which all scores are constant and every
// gradient in the model cancels exactly — an unrecoverable state.
inline Tensor sync_score(Tape* tape, const Tensor& outputs, const ScoreHead& head) {
    Tensor cls_out = layer_norm(tape, take_rows(tape, outputs, 0, 1), head.ln_gamma, head.ln_beta, 1e-5);
    Tensor hidden = leaky_relu(tape, detail::linear(tape, cls_out, head.w1, head.b1), 0.01);
    Tensor score = detail::linear(tape, hidden, head.w2, head.b2);
    return reshape(tape, score, {1});
}

class AvstModel {
public:
    AvstModel(ModelConfig cfg, uint64_t seed)
        : cfg_(validated(std::move(cfg))),
          rng_(mix_seed(seed, 0x6d6f64656cULL)),
          visual_enc_(cfg_.visual_config(), rng_),
          audio_enc_(cfg_.audio_config(), rng_),
          tables_(EncodingTables::init(cfg_, rng_)),
          stack_(cfg_.layers, cfg_.heads, cfg_.channels, cfg_.ffn_dim, cfg_.variant == Variant::dec, rng_),
          head_(ScoreHead::init(cfg_.channels, rng_)) {}

    const ModelConfig& config() const { return cfg_; }
    const EncodingTables& tables() const { return tables_; }
    const TransformerStack& stack() const { return stack_; }
    const ScoreHead& head() const { return head_; }

    std::vector<NamedParam> params() const {
        std::vector<NamedParam> out;
        visual_enc_.collect_params(out, "visual");
        audio_enc_.collect_params(out, "audio");
        tables_.collect_params(out);
        stack_.collect_params(out);
        head_.collect_params(out);
        return out;
    }

    void set_params_require_grad(bool b) {
        for (auto& p : params()) p.tensor.set_requires_grad(b);
    }

    // ---- encoders ----
    Tensor visual_features(Tape* tape, const Tensor& frames) const { return visual_enc_.encode(tape, frames); }

    Tensor audio_features(Tape* tape, const Tensor& log_spec) const { return audio_enc_.encode(tape, log_spec); }

    Tensor prep_audio(const AudioWaveform& wave) const {
        return log_compress(stft_magnitude(wave, cfg_.stft_window, cfg_.stft_hop).values);
    }

    // ---- token building ----
    TokenCaps caps() const { return {cfg_.t_v_max, cfg_.t_a_max()}; }

    TokenSequence build_tokens(Tape* tape, const Tensor& vfeat, const Tensor& afeat) const {
        switch (cfg_.variant) {
            case Variant::enc: return build_tokens_enc(tape, tables_, vfeat, afeat, caps());
            case Variant::enc_mp: return build_tokens_mp(tape, tables_, vfeat, afeat, caps());
            case Variant::dec: return build_query_tokens(tape, tables_, afeat, caps());
        }
        throw ContractError("unreachable");
    }

    // ---- scoring ----
    // one synchronisation-module forward: tokens -> transformer -> head.
    // counted so protocol code can assert how many passes it spent
    Tensor score_from_features(Tape* tape, const Tensor& vfeat, const Tensor& afeat, AttentionRecord* rec = nullptr) const {
        forward_count_.n.fetch_add(1, std::memory_order_relaxed);
        if (cfg_.variant == Variant::dec) {
            TokenSequence q = build_query_tokens(tape, tables_, afeat, caps());
            Tensor visual = dense_visual_tokens(tape, tables_, vfeat, caps());
            Tensor y = stack_.decoder_forward(tape, q.tokens, visual, rec);
            return sync_score(tape, y, head_);
        }
        TokenSequence seq = build_tokens(tape, vfeat, afeat);
        Tensor y = stack_.encoder_forward(tape, seq.tokens, rec);
        return sync_score(tape, y, head_);
    }

    Tensor score_on_tape(Tape* tape, const Tensor& frames, const Tensor& log_spec, AttentionRecord* rec = nullptr) const {
        Tensor vfeat = visual_features(tape, frames);
        Tensor afeat = audio_features(tape, log_spec);
        return score_from_features(tape, vfeat, afeat, rec);
    }

    // media-level forward of the chosen variant
    double score(const VisualClip& clip, const AudioWaveform& wave, AttentionRecord* rec = nullptr) const {
        return score_on_tape(nullptr, clip.frames, prep_audio(wave), rec).scalar_value();
    }

    int64_t forward_count() const { return forward_count_.n.load(); }
    void reset_forward_count() const { forward_count_.n.store(0); }

    // ---- checkpoints ----
    // single file: magic, u64 manifest length, JSON manifest, then raw
    // little-endian f64 parameter blocks in manifest order
    void save_checkpoint(const std::string& path) const {
        nlohmann::json manifest;
        manifest["format"] = "avsync-checkpoint";
        manifest["version"] = 1;
        manifest["variant"] = variant_name(cfg_.variant);
        manifest["config"] = config_json(cfg_);
        auto ps = params();
        for (const auto& p : ps) {
            nlohmann::json entry;
            entry["name"] = p.name;
            entry["shape"] = p.tensor.shape();
            manifest["params"].push_back(entry);
        }
        const std::string text = manifest.dump();
        std::ofstream out(path, std::ios::binary);
        if (!out) throw DataError("cannot write checkpoint " + path);
        out.write("AVSYNC1\n", 8);
        const uint64_t len = text.size();
        out.write(reinterpret_cast<const char*>(&len), 8);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& p : ps)
            out.write(reinterpret_cast<const char*>(p.tensor.data().data()),
                      static_cast<std::streamsize>(p.tensor.data().size() * sizeof(double)));
        if (!out) throw DataError("short write on checkpoint " + path);
    }

    static AvstModel load_checkpoint(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw DataError("cannot read checkpoint " + path);
        char magic[8];
        in.read(magic, 8);
        if (!in || std::string(magic, 8) != "AVSYNC1\n") throw DataError("not an avsync checkpoint: " + path);
        uint64_t len = 0;
        in.read(reinterpret_cast<char*>(&len), 8);
        std::string text(len, '\0');
        in.read(text.data(), static_cast<std::streamsize>(len));
        nlohmann::json manifest = nlohmann::json::parse(text);
        ModelConfig cfg = config_from_json(manifest.at("config"));
        AvstModel model(cfg, 0);
        auto ps = model.params();
        const auto& listed = manifest.at("params");
        if (listed.size() != ps.size()) throw DataError("checkpoint parameter list does not match model");
        for (size_t i = 0; i < ps.size(); ++i) {
            if (listed[i].at("name") != ps[i].name)
                throw DataError("checkpoint parameter order mismatch at " + ps[i].name);
            in.read(reinterpret_cast<char*>(ps[i].tensor.data().data()),
                    static_cast<std::streamsize>(ps[i].tensor.data().size() * sizeof(double)));
        }
        if (!in) throw DataError("checkpoint truncated: " + path);
        return model;
    }

    static nlohmann::json config_json(const ModelConfig& c) {
        nlohmann::json j;
        j["variant"] = variant_name(c.variant);
        j["channels"] = c.channels;
        j["layers"] = c.layers;
        j["heads"] = c.heads;
        j["ffn_dim"] = c.ffn_dim;
        j["t_v_max"] = c.t_v_max;
        j["steps_per_frame"] = c.steps_per_frame;
        j["fps"] = c.fps;
        j["sample_rate"] = c.sample_rate;
        j["stft_window"] = c.stft_window;
        j["stft_hop"] = c.stft_hop;
        j["visual_stage_channels"] = c.visual_stage_channels;
        j["visual_temporal_kernel"] = c.visual_temporal_kernel;
        j["audio_mid_channels"] = c.audio_mid_channels;
        j["frame_height"] = c.frame_height;
        j["frame_width"] = c.frame_width;
        return j;
    }

    static ModelConfig config_from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.variant = variant_from_name(j.at("variant"));
        c.channels = j.at("channels");
        c.layers = j.at("layers");
        c.heads = j.at("heads");
        c.ffn_dim = j.at("ffn_dim");
        c.t_v_max = j.at("t_v_max");
        c.steps_per_frame = j.at("steps_per_frame");
        c.fps = j.at("fps");
        c.sample_rate = j.at("sample_rate");
        c.stft_window = j.at("stft_window");
        c.stft_hop = j.at("stft_hop");
        c.visual_stage_channels = j.at("visual_stage_channels").get<std::vector<int>>();
        c.visual_temporal_kernel = j.at("visual_temporal_kernel");
        c.audio_mid_channels = j.at("audio_mid_channels");
        c.frame_height = j.at("frame_height");
        c.frame_width = j.at("frame_width");
        return c;
    }

private:
    static ModelConfig validated(ModelConfig c) {
        c.validate();
        return c;
    }

    ModelConfig cfg_;
    Rng rng_;
    VisualEncoder visual_enc_;
    AudioEncoder audio_enc_;
    EncodingTables tables_;
    TransformerStack stack_;
    ScoreHead head_;
    mutable detail::ForwardCounter forward_count_;
};

}  // namespace avsync

#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "avsync/model.hpp"
#include "support/oracles.hpp"

using namespace avsync;

namespace {

// small enough that a full finite-difference sweep over every parameter runs
// in well under a second
ModelConfig tiny_config(Variant v) {
    ModelConfig c;
    c.variant = v;
    c.channels = 8;
    c.layers = 1;
    c.heads = 1;
    c.ffn_dim = 8;
    c.t_v_max = 4;
    c.steps_per_frame = 2;
    c.fps = 5;
    c.sample_rate = 800;
    c.stft_window = 32;
    c.stft_hop = 8;
    c.visual_stage_channels = {4, 8};
    c.visual_temporal_kernel = 1;
    c.audio_mid_channels = 4;
    c.frame_height = 8;
    c.frame_width = 8;
    return c;
}

AudioWaveform tiny_wave(const ModelConfig& cfg, int frames, uint64_t seed) {
    Rng rng(seed);
    AudioWaveform w;
    w.sample_rate = cfg.sample_rate;
    w.samples.resize(static_cast<size_t>(frames) * cfg.samples_per_frame() + cfg.crop_lookahead());
    for (auto& v : w.samples) v = rng.normal(0.0, 0.1);
    return w;
}

}  // namespace

TEST_CASE("token-count formulas") {
    // paper-scale dims: h=w=14, t_v=5, t_a=20
    CHECK(token_count(Variant::enc, 5, 20, 14, 14) == 1001);
    CHECK(token_count(Variant::enc_mp, 5, 20, 14, 14) == 26);
    CHECK(token_count(Variant::enc_mp, 30, 120, 14, 14) == 151);
    CHECK(token_count(Variant::enc, 30, 120, 14, 14) == 6001);  // 1 + 14*14*30 + 120

    // built sequences agree with the formulas for random shapes
    Rng rng(21);
    for (int trial = 0; trial < 100; ++trial) {
        const int t_v = rng.uniform_int(1, 6);
        const int t_a = rng.uniform_int(1, 24);
        const int h = rng.uniform_int(1, 5);
        const int w = rng.uniform_int(1, 5);
        const int c = 4;
        EncodingTables tables = EncodingTables::init_raw(c, t_v, t_a, h * w, rng);
        TokenCaps caps{t_v, t_a};
        Tensor vfeat = Tensor::randn({c, t_v, h, w}, rng);
        Tensor afeat = Tensor::randn({c, t_a}, rng);
        TokenSequence enc = build_tokens_enc(nullptr, tables, vfeat, afeat, caps);
        TokenSequence mp = build_tokens_mp(nullptr, tables, vfeat, afeat, caps);
        CHECK(enc.tokens.dim(0) == token_count(Variant::enc, t_v, t_a, h, w));
        CHECK(enc.layout.total() == enc.tokens.dim(0));
        CHECK(mp.tokens.dim(0) == token_count(Variant::enc_mp, t_v, t_a, h, w));
        CHECK(mp.layout.total() == mp.tokens.dim(0));
    }
}

TEST_CASE("token capacity errors") {
    Rng rng(3);
    EncodingTables tables = EncodingTables::init_raw(4, 2, 4, 4, rng);
    TokenCaps caps{2, 4};
    Tensor vfeat = Tensor::randn({4, 3, 2, 2}, rng);  // t_v = 3 > cap 2
    Tensor afeat = Tensor::randn({4, 4}, rng);
    CHECK_THROWS_AS(build_tokens_enc(nullptr, tables, vfeat, afeat, caps), ConfigError);
    Tensor long_audio = Tensor::randn({4, 9}, rng);
    CHECK_THROWS_AS(build_query_tokens(nullptr, tables, long_audio, caps), ConfigError);
}

TEST_CASE("zero features and zero tables leave only the CLS value") {
    Rng rng(4);
    EncodingTables tables = EncodingTables::init_raw(4, 3, 6, 4, rng);
    for (Tensor* t : {&tables.modality, &tables.temporal_visual, &tables.temporal_audio, &tables.spatial})
        for (double& v : t->data()) v = 0.0;
    Tensor vfeat({4, 3, 2, 2}, 0.0);
    Tensor afeat({4, 6}, 0.0);
    TokenSequence seq = build_tokens_enc(nullptr, tables, vfeat, afeat, {3, 6});
    const int c = 4;
    for (int j = 0; j < c; ++j) CHECK(seq.tokens[j] == tables.cls[j]);
    for (int64_t i = c; i < seq.tokens.numel(); ++i) CHECK(seq.tokens[i] == 0.0);
}

TEST_CASE("swapping visual frames permutes the corresponding token blocks") {
    Rng rng(5);
    const int c = 4, t_v = 3, h = 2, w = 2, hw = h * w;
    EncodingTables tables = EncodingTables::init_raw(c, t_v, 4, hw, rng);
    // zero the encodings so raw blocks are directly comparable
    for (Tensor* t : {&tables.modality, &tables.temporal_visual, &tables.spatial})
        for (double& v : t->data()) v = 0.0;
    Tensor a = Tensor::randn({c, t_v, h, w}, rng);
    Tensor b(a.shape());
    for (int ch = 0; ch < c; ++ch)
        for (int f = 0; f < t_v; ++f) {
            const int src = (f == 0) ? 2 : (f == 2) ? 0 : f;
            for (int s = 0; s < hw; ++s)
                b[(static_cast<size_t>(ch) * t_v + f) * hw + s] = a[(static_cast<size_t>(ch) * t_v + src) * hw + s];
        }
    Tensor ta = dense_visual_tokens(nullptr, tables, a, {t_v, 4});
    Tensor tb = dense_visual_tokens(nullptr, tables, b, {t_v, 4});
    for (int f = 0; f < t_v; ++f) {
        const int src = (f == 0) ? 2 : (f == 2) ? 0 : f;
        for (int s = 0; s < hw; ++s)
            for (int ch = 0; ch < c; ++ch)
                CHECK(tb[(static_cast<size_t>(f) * hw + s) * c + ch] == ta[(static_cast<size_t>(src) * hw + s) * c + ch]);
    }
}

TEST_CASE("encoder forward: attention rows are probability distributions") {
    Rng rng(6);
    TransformerStack stack(2, 2, 8, 16, false, rng);
    Tensor tokens = Tensor::randn({7, 8}, rng);
    AttentionRecord rec;
    stack.encoder_forward(nullptr, tokens, &rec);
    REQUIRE(rec.self_attention.size() == 2);
    for (const auto& layer : rec.self_attention) {
        REQUIRE(layer.size() == 2);
        for (const auto& weights : layer) {
            REQUIRE(weights.shape() == Shape{7, 7});
            for (int r = 0; r < 7; ++r) {
                double sum = 0.0;
                for (int j = 0; j < 7; ++j) sum += weights[r * 7 + j];
                CHECK(std::fabs(sum - 1.0) < 1e-10);
            }
        }
    }
}

TEST_CASE("encoder forward with zero attention/FFN weights is the identity") {
    Rng rng(7);
    TransformerStack stack(2, 2, 8, 16, false, rng);
    std::vector<NamedParam> params;
    stack.collect_params(params);
    for (auto& p : params) {
        // keep layer norms at their defaults; zero everything else
        if (p.name.find(".ln") != std::string::npos) continue;
        for (double& v : p.tensor.data()) v = 0.0;
    }
    Tensor tokens = Tensor::randn({5, 8}, rng);
    Tensor out = stack.encoder_forward(nullptr, tokens, nullptr);
    for (int64_t i = 0; i < tokens.numel(); ++i) CHECK(out[i] == tokens[i]);
}

TEST_CASE("self-attention is equivariant to token permutation") {
    Rng rng(8);
    TransformerStack stack(2, 2, 8, 16, false, rng);
    Tensor tokens = Tensor::randn({6, 8}, rng);
    // swap token rows 2 and 4 (encodings live inside the rows)
    Tensor permuted(tokens.shape());
    for (int r = 0; r < 6; ++r) {
        const int src = (r == 2) ? 4 : (r == 4) ? 2 : r;
        for (int j = 0; j < 8; ++j) permuted[r * 8 + j] = tokens[src * 8 + j];
    }
    Tensor out = stack.encoder_forward(nullptr, tokens, nullptr);
    Tensor out_p = stack.encoder_forward(nullptr, permuted, nullptr);
    for (int r = 0; r < 6; ++r) {
        const int src = (r == 2) ? 4 : (r == 4) ? 2 : r;
        for (int j = 0; j < 8; ++j)
            CHECK(out_p[r * 8 + j] == doctest::Approx(out[src * 8 + j]).epsilon(1e-12));
    }
}

TEST_CASE("decoder forward contracts") {
    Rng rng(9);
    TransformerStack stack(2, 2, 8, 16, true, rng);
    Tensor queries = Tensor::randn({5, 8}, rng);  // CLS + 4 audio tokens
    Tensor visual = Tensor::randn({12, 8}, rng);  // h*w*t_v tokens

    SUBCASE("cross-attention rows sum to one; output follows queries") {
        AttentionRecord rec;
        Tensor out = stack.decoder_forward(nullptr, queries, visual, &rec);
        CHECK(out.shape() == Shape{5, 8});
        REQUIRE(rec.cross_attention.size() == 2);
        for (const auto& layer : rec.cross_attention)
            for (const auto& weights : layer) {
                REQUIRE(weights.shape() == Shape{5, 12});
                for (int r = 0; r < 5; ++r) {
                    double sum = 0.0;
                    for (int j = 0; j < 12; ++j) sum += weights[r * 12 + j];
                    CHECK(std::fabs(sum - 1.0) < 1e-10);
                }
            }
    }

    SUBCASE("identical visual tokens collapse the cross-attention value") {
        Tensor uniform_visual({12, 8});
        Rng r2(10);
        std::vector<double> row(8);
        for (auto& v : row) v = r2.normal();
        for (int i = 0; i < 12; ++i)
            for (int j = 0; j < 8; ++j) uniform_visual[i * 8 + j] = row[static_cast<size_t>(j)];
        Tensor base = stack.decoder_forward(nullptr, queries, uniform_visual, nullptr);
        // perturb the cross-attention query projections: the attention
        // distribution changes but a convex combination of equal rows cannot
        std::vector<NamedParam> params;
        stack.collect_params(params);
        for (auto& p : params)
            if (p.name.find("cross_attn.wq") != std::string::npos || p.name.find("cross_attn.bq") != std::string::npos)
                for (double& v : p.tensor.data()) v += r2.normal(0.0, 0.5);
        Tensor perturbed = stack.decoder_forward(nullptr, queries, uniform_visual, nullptr);
        for (int64_t i = 0; i < base.numel(); ++i)
            CHECK(perturbed[i] == doctest::Approx(base[i]).epsilon(1e-12));
    }
}

TEST_CASE("sync_score reads only the CLS-position output") {
    Rng rng(11);
    ScoreHead head = ScoreHead::init(8, rng);
    Tensor outputs = Tensor::randn({6, 8}, rng);
    const double s0 = sync_score(nullptr, outputs, head).scalar_value();
    // perturbing any non-CLS row leaves the score bit-identical
    for (int r = 1; r < 6; ++r)
        for (int j = 0; j < 8; ++j) outputs[r * 8 + j] += 100.0;
    const double s1 = sync_score(nullptr, outputs, head).scalar_value();
    CHECK(s0 == s1);

    SUBCASE("zero CLS output and zero-bias head give score zero") {
        for (double& v : head.b1.data()) v = 0.0;
        for (double& v : head.b2.data()) v = 0.0;
        Tensor zeros({3, 8}, 0.0);
        CHECK(sync_score(nullptr, zeros, head).scalar_value() == 0.0);
    }

    SUBCASE("matches a hand-rolled affine+activation+affine oracle") {
        Tensor cls = Tensor::randn({1, 8}, rng);
        Tensor y({2, 8});
        for (int j = 0; j < 8; ++j) y[j] = cls[j];
        const double got = sync_score(nullptr, y, head).scalar_value();
        long double acc2 = static_cast<long double>(head.b2[0]);
        for (int i = 0; i < 8; ++i) {
            long double pre = static_cast<long double>(head.b1[i]);
            for (int j = 0; j < 8; ++j) pre += static_cast<long double>(cls[j]) * head.w1[j * 8 + i];
            acc2 += (pre > 0.0L ? pre : 0.01L * pre) * head.w2[i];
        }
        CHECK(std::fabs(got - static_cast<double>(acc2)) < 1e-12);
    }
}

TEST_CASE("full forward of every variant") {
    for (Variant v : {Variant::enc, Variant::enc_mp, Variant::dec}) {
        CAPTURE(variant_name(v));
        AvstModel model(tiny_config(v), 77);
        Rng rng(13);
        VisualClip clip{Tensor::rand_uniform({3, 3, 8, 8}, rng, 0.0, 1.0), 5};
        AudioWaveform wave = tiny_wave(model.config(), 3, 14);
        AttentionRecord rec;
        const double s = model.score(clip, wave, &rec);
        CHECK(std::isfinite(s));
        const double s2 = model.score(clip, wave);
        CHECK(s == s2);  // deterministic
        if (v == Variant::dec) {
            REQUIRE(rec.cross_attention.size() == 1);
            REQUIRE(rec.cross_attention[0].size() == 1);
            // layers x heads x (1 + t_a) x (h*w*t_v)
            CHECK(rec.cross_attention[0][0].shape() == Shape{1 + 6, 4 * 3});
        }
    }
}

TEST_CASE("variable-length inputs need no re-instantiation") {
    AvstModel model(tiny_config(Variant::enc_mp), 31);
    for (int frames : {1, 2, 4}) {
        Rng rng(40 + static_cast<uint64_t>(frames));
        VisualClip clip{Tensor::rand_uniform({3, frames, 8, 8}, rng, 0.0, 1.0), 5};
        const double s = model.score(clip, tiny_wave(model.config(), frames, 50 + static_cast<uint64_t>(frames)));
        CHECK(std::isfinite(s));
    }
}

TEST_CASE("every parameter tensor receives gradient") {
    for (Variant v : {Variant::enc, Variant::enc_mp, Variant::dec}) {
        CAPTURE(variant_name(v));
        AvstModel model(tiny_config(v), 99);
        model.set_params_require_grad(true);
        Rng rng(15);
        Tensor frames = Tensor::rand_uniform({3, 2, 8, 8}, rng, 0.0, 1.0);
        AudioWaveform wave = tiny_wave(model.config(), 2, 16);
        Tape tape;
        Tensor score = model.score_on_tape(&tape, frames, model.prep_audio(wave));
        tape.backward(score);
        for (const auto& p : model.params()) {
            CAPTURE(p.name);
            REQUIRE(p.tensor.grad_allocated());
            double norm = 0.0;
            for (double g : p.tensor.grad()) norm += g * g;
            CHECK(norm > 0.0);
        }
    }
}

TEST_CASE("full tiny-model gradients match finite differences") {
    for (uint64_t seed : {201ULL, 202ULL}) {
        AvstModel model(tiny_config(Variant::enc_mp), seed);
        model.set_params_require_grad(true);
        Rng rng(seed + 1);
        Tensor frames = Tensor::rand_uniform({3, 2, 8, 8}, rng, 0.0, 1.0);
        AudioWaveform wave = tiny_wave(model.config(), 2, seed + 2);
        Tensor spec = model.prep_audio(wave);
        std::vector<Tensor> tensors;
        for (auto& p : model.params()) tensors.push_back(p.tensor);
        auto build = [&](Tape* t) { return model.score_on_tape(t, frames, spec); };
        CHECK(oracles::grad_check_max_rel_err(build, tensors, 1e-6) < 1e-3);
    }
}

TEST_CASE("checkpoint round trip preserves behaviour") {
    AvstModel model(tiny_config(Variant::dec), 123);
    Rng rng(17);
    VisualClip clip{Tensor::rand_uniform({3, 2, 8, 8}, rng, 0.0, 1.0), 5};
    AudioWaveform wave = tiny_wave(model.config(), 2, 18);
    const double before = model.score(clip, wave);

    const std::string path = "/tmp/avsync_ckpt_test.bin";
    model.save_checkpoint(path);
    AvstModel loaded = AvstModel::load_checkpoint(path);
    CHECK(loaded.config().variant == Variant::dec);
    const double after = loaded.score(clip, wave);
    CHECK(before == after);

    auto a = model.params();
    auto b = loaded.params();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].name == b[i].name);
        CHECK(a[i].tensor.data() == b[i].tensor.data());
    }
    std::remove(path.c_str());
}

TEST_CASE("attention cost bookkeeping follows the quadratic relationship") {
    const int t_v = 5, t_a = 20, h = 4, w = 4;
    const int64_t len_enc = token_count(Variant::enc, t_v, t_a, h, w);
    const int64_t len_mp = token_count(Variant::enc_mp, t_v, t_a, h, w);
    const int64_t cost_enc = attention_cost_madds(3, 4, 64, len_enc, len_enc);
    const int64_t cost_mp = attention_cost_madds(3, 4, 64, len_mp, len_mp);
    CHECK(cost_enc * len_mp * len_mp == cost_mp * len_enc * len_enc);
}

#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "avsync/config.hpp"
#include "avsync/eval.hpp"

using namespace avsync;

namespace {

ModelConfig tiny_eval_model(Variant v) {
    ModelConfig c;
    c.variant = v;
    c.channels = 8;
    c.layers = 2;
    c.heads = 2;
    c.ffn_dim = 8;
    c.t_v_max = 6;
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

GeneratorConfig tiny_eval_gen() {
    GeneratorConfig g;
    g.fps = 5;
    g.sample_rate = 800;
    g.frame_height = 8;
    g.frame_width = 8;
    g.clip_frames = 20;
    g.max_offset_frames = 6;
    g.stft_window = 32;
    g.stft_hop = 8;
    return g;
}

const std::string& tiny_eval_dataset() {
    static const std::string dir = [] {
        const std::string d = "/tmp/avsync_eval_test_data";
        std::filesystem::remove_all(d);
        generate_dataset(default_event_classes(), tiny_eval_gen(), 4, 30, 99, d);
        return d;
    }();
    return dir;
}

EvalOptions tiny_options() {
    EvalOptions opt;
    opt.grid.max = 6;
    opt.tolerance = 1;
    opt.lengths = {2, 4};
    opt.threads = 2;
    return opt;
}

}  // namespace

TEST_CASE("offset grid") {
    OffsetGrid grid;
    auto offs = grid.offsets();
    CHECK(offs.size() == 31);
    CHECK(offs.front() == -15);
    CHECK(offs.back() == 15);
    CHECK(std::count(offs.begin(), offs.end(), 0) == 1);
    auto pref = grid.tie_preference_order();
    CHECK(pref[0] == 0);
    CHECK(pref[1] == -1);
    CHECK(pref[2] == 1);
    CHECK(pref.size() == 31);
}

TEST_CASE("is_correct tolerance rules") {
    CHECK(is_correct(-4, 0, 5));       // within the +/-5 general-class window
    CHECK_FALSE(is_correct(2, 0, 1));  // outside the +/-1 speech window
    CHECK(is_correct(3, 3, 0));
    CHECK_THROWS_AS(is_correct(0, 0, -1), ContractError);
}

TEST_CASE("score_offsets protocol") {
    DatasetSplit test = load_split(tiny_eval_dataset() + "/test");
    SyntheticClip clip = load_clip(test, test.clips[0]);
    OffsetGrid grid{6};

    SUBCASE("one score per grid offset") {
        NegAbsOffsetScorer stub;
        SyncScoreMatrix sm = score_offsets(clip, stub, grid, 4);
        CHECK(sm.scores.size() == 13);
        CHECK(sm.offsets.size() == 13);
        CHECK(sm.predicted_offset == 0);  // stub peaks at offset zero
        CHECK(sm.true_offset == clip.true_offset_frames);
    }

    SUBCASE("constant scores predict zero via the tie rule") {
        ConstantScorer stub;
        CHECK(score_offsets(clip, stub, grid, 4).predicted_offset == 0);
    }

    SUBCASE("ties prefer smaller magnitude, then negative") {
        struct TieScorer : PairScorer {
            double score_offset(const EvalPairView& p) override { return std::abs(p.candidate_offset) == 3 ? 1.0 : 0.0; }
        } stub;
        CHECK(score_offsets(clip, stub, grid, 4).predicted_offset == -3);
    }

    SUBCASE("clip too short names the required length") {
        ConstantScorer stub;
        CHECK_THROWS_WITH_AS(score_offsets(clip, stub, OffsetGrid{6}, 10),
                             doctest::Contains("requires 22"), DataError);
    }
}

TEST_CASE("evaluate aggregates accuracies") {
    DatasetSplit test = load_split(tiny_eval_dataset() + "/test");
    EvalOptions opt = tiny_options();

    SUBCASE("constant scorer matches the manifest chance rate exactly") {
        for (int tol : {0, 1, 3}) {
            EvalOptions o = opt;
            o.tolerance = tol;
            EvalReport r = evaluate(test, [] { return std::make_unique<ConstantScorer>(); }, o);
            CHECK(r.overall == constant_score_accuracy(test, tol));
        }
    }

    SUBCASE("per-class counts partition the split") {
        EvalReport r = evaluate(test, [] { return std::make_unique<ConstantScorer>(); }, opt);
        int total = 0;
        for (const auto& [name, count] : r.per_class_count) total += count;
        CHECK(total == static_cast<int>(test.clips.size()));
        CHECK(r.clip_count == static_cast<int>(test.clips.size()));
    }

    SUBCASE("accuracy is monotone in tolerance") {
        double prev = -1.0;
        for (int tol : {0, 1, 2, 3, 4, 5, 6}) {
            EvalOptions o = opt;
            o.tolerance = tol;
            EvalReport r = evaluate(test, [] { return std::make_unique<RandomScorer>(17); }, o);
            CHECK(r.overall >= prev);
            prev = r.overall;
        }
    }

    SUBCASE("deterministic and thread-count independent") {
        EvalOptions o1 = tiny_options();
        o1.threads = 1;
        EvalOptions o2 = tiny_options();
        o2.threads = 2;
        EvalReport a = evaluate(test, [] { return std::make_unique<RandomScorer>(3); }, o1);
        EvalReport b = evaluate(test, [] { return std::make_unique<RandomScorer>(3); }, o2);
        CHECK(a.dump() == b.dump());
    }
}

TEST_CASE("model scorer equals the naive per-offset crop path") {
    AvstModel model(tiny_eval_model(Variant::enc_mp), 7);
    DatasetSplit test = load_split(tiny_eval_dataset() + "/test");
    SyntheticClip clip = load_clip(test, test.clips[1]);

    struct NaiveScorer : PairScorer {
        const AvstModel& model;
        const SyntheticClip* clip = nullptr;
        explicit NaiveScorer(const AvstModel& m) : model(m) {}
        void begin_window(const SyntheticClip& c, int, int) override { clip = &c; }
        double score_offset(const EvalPairView& p) override {
            VisualClip window{crop_visual(*clip, p.window_start, p.length), model.config().fps};
            AudioWaveform audio =
                crop_audio(*clip, p.window_start + p.candidate_offset, p.length, model.config().crop_lookahead());
            return model.score(window, audio);
        }
    };

    OffsetGrid grid{6};
    ModelScorer fast(model);
    NaiveScorer naive(model);
    for (int len : {2, 4}) {
        SyncScoreMatrix a = score_offsets(clip, fast, grid, len);
        SyncScoreMatrix b = score_offsets(clip, naive, grid, len);
        for (size_t i = 0; i < a.scores.size(); ++i) CHECK(a.scores[i] == b.scores[i]);
        CHECK(a.predicted_offset == b.predicted_offset);
    }
}

TEST_CASE("robustness sweep") {
    DatasetSplit test = load_split(tiny_eval_dataset() + "/test");
    EvalOptions opt = tiny_options();
    auto factory = [] { return std::make_unique<RandomScorer>(11); };

    SUBCASE("mask length zero reproduces the unmasked report") {
        EvalReport plain = evaluate(test, factory, opt);
        RobustnessReport sweep = robustness_sweep(test, factory, opt, {MaskModality::both}, {0}, 5);
        const EvalReport& cell = sweep.find(MaskModality::both, 0);
        CHECK(cell.overall == plain.overall);
        CHECK(cell.per_length == plain.per_length);
    }

    SUBCASE("csv table has one row per cell and one column per length") {
        RobustnessReport sweep =
            robustness_sweep(test, factory, opt, {MaskModality::audio, MaskModality::visual}, {0, 1}, 5);
        const std::string csv = sweep.to_csv(opt.lengths);
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);  // header + 4 cells
        CHECK(csv.find("len_2") != std::string::npos);
        CHECK(csv.find("len_4") != std::string::npos);
    }

    SUBCASE("mask longer than the shortest length is rejected") {
        CHECK_THROWS_AS(robustness_sweep(test, factory, opt, {MaskModality::both}, {2}, 5), ConfigError);
    }
}

TEST_CASE("heatmap export") {
    AvstModel model(tiny_eval_model(Variant::dec), 13);
    DatasetSplit test = load_split(tiny_eval_dataset() + "/test");
    SyntheticClip clip = load_clip(test, test.clips[2]);
    const std::string out_dir = "/tmp/avsync_heatmap_test";
    std::filesystem::remove_all(out_dir);

    HeatmapSet set = export_heatmaps(clip, model, out_dir, 4, true);
    REQUIRE(set.layers.size() == 2);
    const int h = model.config().feat_h(), w = model.config().feat_w();
    for (const auto& layer : set.layers) {
        CHECK(layer.shape() == Shape{4, h, w});
        for (int f = 0; f < 4; ++f) {
            double mx = 0.0;
            for (int s = 0; s < h * w; ++s) {
                const double v = layer[static_cast<size_t>(f) * h * w + s];
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
                mx = std::max(mx, v);
            }
            CHECK(mx == 1.0);  // min-max normalised per frame
        }
    }

    // one CSV per (layer, frame) with h rows and w columns
    std::ifstream csv(out_dir + "/" + clip.clip_id + "_layer0_frame0.csv");
    REQUIRE(csv.good());
    std::string line;
    int rows = 0;
    while (std::getline(csv, line)) {
        CHECK(std::count(line.begin(), line.end(), ',') == w - 1);
        ++rows;
    }
    CHECK(rows == h);
    CHECK(std::filesystem::exists(out_dir + "/" + clip.clip_id + "_layer1_frame3.csv"));
    CHECK(std::filesystem::exists(out_dir + "/" + clip.clip_id + "_layer0_frame0.png"));

    SUBCASE("non-decoder variants are rejected") {
        AvstModel enc_model(tiny_eval_model(Variant::enc_mp), 13);
        CHECK_THROWS_AS(export_heatmaps(clip, enc_model, "", 4, false), ConfigError);
    }
    std::filesystem::remove_all(out_dir);
}

TEST_CASE("depth ablation produces one row per depth on the same split") {
    DatasetSplit train = load_split(tiny_eval_dataset() + "/train");
    DatasetSplit test = load_split(tiny_eval_dataset() + "/test");
    CurriculumConfig cc;
    cc.stage1_epochs = 1;
    cc.stage2_epochs = 1;
    cc.steps_per_epoch = 2;
    cc.batch_size = 2;
    cc.lr = 1e-3;
    cc.train_lengths = {2};
    cc.max_offset_frames = 6;
    cc.seed = 3;
    EvalOptions opt = tiny_options();

    AblationTable table = run_depth_ablation(tiny_eval_model(Variant::enc_mp), cc, train, test, opt, {1, 2}, 5);
    REQUIRE(table.rows.size() == 2);
    CHECK(table.rows[0].depth == 1);
    CHECK(table.rows[1].depth == 2);
    for (const auto& row : table.rows) {
        CHECK(row.accuracy_by_length.count(2) == 1);
        CHECK(row.accuracy_by_length.count(4) == 1);
    }
    CHECK(table.test_manifest_hash == manifest_hash(test));
    const std::string csv = table.to_csv(opt.lengths);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    CHECK(table.to_json().contains("longest_length_trend_nondecreasing"));
}

TEST_CASE("toml config parsing") {
    const std::string text = R"(
# desk experiment
[model]
variant = "dec"      # decoder variant
channels = 16
visual_stage_channels = [8, 16]

[data]
fps = 5
sample_rate = 800
frame_height = 8
frame_width = 8
clip_frames = 20
max_offset_frames = 6
stft_window = 32
stft_hop = 8
n_train = 10
n_test = 5
seed = 77

[train]
lr = 2e-3
lengths = [2, 4]

[eval]
grid_max = 6
tolerance = 1
lengths = [2, 4]
)";
    ExperimentConfig cfg = ExperimentConfig::from_toml(TomlFile::parse(text));
    CHECK(cfg.model.variant == Variant::dec);
    CHECK(cfg.model.channels == 16);
    CHECK(cfg.model.visual_stage_channels == std::vector<int>{8, 16});
    CHECK(cfg.model.fps == 5);  // propagated from [data]
    CHECK(cfg.generator.clip_frames == 20);
    CHECK(cfg.curriculum.lr == doctest::Approx(2e-3));
    CHECK(cfg.curriculum.max_offset_frames == 6);
    CHECK(cfg.curriculum.seed == 77);
    CHECK(cfg.eval.lengths == std::vector<int>{2, 4});
    CHECK(cfg.n_train == 10);

    SUBCASE("round trip through the resolved form") {
        ExperimentConfig again = ExperimentConfig::from_toml(TomlFile::parse(cfg.to_toml()));
        CHECK(again.hash() == cfg.hash());
        CHECK(again.to_toml() == cfg.to_toml());
    }

    SUBCASE("malformed values raise config errors") {
        CHECK_THROWS_AS(TomlFile::parse("[model\nchannels = 3"), ConfigError);
        CHECK_THROWS_AS(TomlFile::parse("channels 3"), ConfigError);
        TomlFile bad = TomlFile::parse("[model]\nchannels = many");
        CHECK_THROWS_AS(bad.get_int("model", "channels", 0), ConfigError);
        CHECK_THROWS_AS(ExperimentConfig::from_file("/nonexistent/path.toml"), ConfigError);
    }

    SUBCASE("incoherent geometry is rejected") {
        std::string broken = text;
        broken += "\n[eval]\nlengths = [10]\n";  // 10 + 2*6 > 20 frames
        CHECK_THROWS_AS(ExperimentConfig::from_toml(TomlFile::parse(broken)), ConfigError);
    }
}

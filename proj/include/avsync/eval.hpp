#pragma once

#include <atomic>
#include <filesystem>
#include <limits>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "avsync/model.hpp"
#include "avsync/png.hpp"
#include "avsync/synthdata.hpp"
#include "avsync/training.hpp"

namespace avsync {

// candidate frame offsets [-max .. +max], always containing 0
struct OffsetGrid {
    int max = 15;

    std::vector<int> offsets() const {
        std::vector<int> out;
        for (int d = -max; d <= max; ++d) out.push_back(d);
        return out;
    }
    int size() const { return 2 * max + 1; }

    // argmax preference on ties: smallest |offset| first, negative before
    // positive
    std::vector<int> tie_preference_order() const {
        std::vector<int> out{0};
        for (int d = 1; d <= max; ++d) {
            out.push_back(-d);
            out.push_back(d);
        }
        return out;
    }

    void validate() const {
        if (max < 1) throw ConfigError("offset grid needs max >= 1");
    }
};

inline bool is_correct(int pred_offset, int true_offset, int tolerance_frames) {
    if (tolerance_frames < 0) throw ContractError("tolerance must be nonnegative");
    return std::abs(pred_offset - true_offset) <= tolerance_frames;
}

struct SyncScoreMatrix {
    std::string clip_id;
    std::vector<int> offsets;
    std::vector<double> scores;
    int predicted_offset = 0;
    int true_offset = 0;
};

// One (clip, length, candidate offset) scoring instance. Stub scorers for
// calibration read the candidate offset; the model scorer ignores it beyond
// selecting the audio window.
struct EvalPairView {
    const SyntheticClip* clip = nullptr;
    int window_start = 0;
    int length = 0;
    int candidate_offset = 0;
};

class PairScorer {
public:
    virtual ~PairScorer() = default;
    virtual void begin_window(const SyntheticClip& clip, int window_start, int length) {
        (void)clip;
        (void)window_start;
        (void)length;
    }
    virtual double score_offset(const EvalPairView& pair) = 0;
};

using ScorerFactory = std::function<std::unique_ptr<PairScorer>()>;

// Scores a model over the offset grid. The visual window is encoded once per
// (clip, length); audio features are computed once over the whole clip and
// sliced per offset, which is exact because the audio encoder is built from
// block convolutions (verified by test).
class ModelScorer : public PairScorer {
public:
    explicit ModelScorer(const AvstModel& model) : model_(model) {}

    void begin_window(const SyntheticClip& clip, int window_start, int length) override {
        if (clip.clip_id != audio_clip_id_) {
            Tensor spec = model_.prep_audio(clip.audio);
            audio_full_ = model_.audio_features(nullptr, spec);
            audio_clip_id_ = clip.clip_id;
        }
        vfeat_ = model_.visual_features(nullptr, crop_visual(clip, window_start, length));
    }

    double score_offset(const EvalPairView& pair) override {
        const int steps = model_.config().steps_per_frame;
        const int start = (pair.window_start + pair.candidate_offset) * steps;
        const int count = pair.length * steps;
        if (start < 0 || start + count > audio_full_.dim(1))
            throw DataError("audio slice for offset " + std::to_string(pair.candidate_offset) + " falls outside clip " +
                            pair.clip->clip_id);
        Tensor afeat = slice_cols(audio_full_, start, count);
        return model_.score_from_features(nullptr, vfeat_, afeat).scalar_value();
    }

private:
    static Tensor slice_cols(const Tensor& m, int start, int count) {
        const int rows = m.dim(0), cols = m.dim(1);
        Tensor out({rows, count});
        for (int r = 0; r < rows; ++r)
            std::copy(m.data().begin() + static_cast<size_t>(r) * cols + start,
                      m.data().begin() + static_cast<size_t>(r) * cols + start + count,
                      out.data().begin() + static_cast<size_t>(r) * count);
        return out;
    }

    const AvstModel& model_;
    Tensor vfeat_;
    Tensor audio_full_;
    std::string audio_clip_id_;
};

// deterministic per-(clip, offset) pseudo-random scores; uniform argmax
class RandomScorer : public PairScorer {
public:
    explicit RandomScorer(uint64_t seed) : seed_(seed) {}
    double score_offset(const EvalPairView& pair) override {
        uint64_t s = mix_seed(seed_, fnv1a(pair.clip->clip_id));
        s = mix_seed(s, static_cast<uint64_t>(pair.candidate_offset + 1000));
        s = mix_seed(s, static_cast<uint64_t>(pair.length));
        return Rng(s).uniform();
    }

private:
    uint64_t seed_;
};

class ConstantScorer : public PairScorer {
public:
    double score_offset(const EvalPairView&) override { return 0.0; }
};

// test stub from the protocol contract: score = -|candidate offset|
class NegAbsOffsetScorer : public PairScorer {
public:
    double score_offset(const EvalPairView& pair) override { return -std::abs(pair.candidate_offset); }
};

// centered evaluation window for a clip of T frames
inline int eval_window_start(int clip_frames, int length) { return (clip_frames - length) / 2; }

// Dense offset-grid scoring of one clip at one window length.
inline SyncScoreMatrix score_offsets(const SyntheticClip& clip, PairScorer& scorer, const OffsetGrid& grid,
                                     int length) {
    grid.validate();
    const int T = clip.visual.frame_count();
    const int required = length + 2 * grid.max;
    if (T < required)
        throw DataError("clip " + clip.clip_id + " has " + std::to_string(T) + " frames; the +/-" +
                        std::to_string(grid.max) + " grid at length " + std::to_string(length) + " requires " +
                        std::to_string(required));
    const int start = eval_window_start(T, length);
    scorer.begin_window(clip, start, length);

    SyncScoreMatrix result;
    result.clip_id = clip.clip_id;
    result.true_offset = clip.true_offset_frames;
    result.offsets = grid.offsets();
    result.scores.resize(result.offsets.size());
    for (size_t i = 0; i < result.offsets.size(); ++i) {
        EvalPairView pair{&clip, start, length, result.offsets[i]};
        result.scores[i] = scorer.score_offset(pair);
    }
    double best = -std::numeric_limits<double>::infinity();
    for (int d : grid.tie_preference_order()) {
        const double s = result.scores[static_cast<size_t>(d + grid.max)];
        if (s > best) {
            best = s;
            result.predicted_offset = d;
        }
    }
    return result;
}

struct EvalOptions {
    OffsetGrid grid;
    int tolerance = 1;
    std::vector<int> lengths = {8, 12, 16, 20};
    int threads = 0;  // 0 = hardware concurrency
    std::string context;  // folded into the config hash (checkpoint, split, ...)
};

struct EvalReport {
    double overall = 0.0;
    std::map<std::string, double> per_class;
    std::map<std::string, int> per_class_count;       // clips per class
    std::map<int, double> per_length;
    std::map<std::string, double> per_category;
    std::map<std::string, std::map<int, double>> per_category_length;
    int tolerance = 0;
    int clip_count = 0;
    std::string config_hash;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["overall"] = overall;
        j["tolerance"] = tolerance;
        j["clip_count"] = clip_count;
        j["config_hash"] = config_hash;
        for (const auto& [k, v] : per_class) j["per_class"][k] = v;
        for (const auto& [k, v] : per_class_count) j["per_class_count"][k] = v;
        for (const auto& [k, v] : per_length) j["per_length"][std::to_string(k)] = v;
        for (const auto& [k, v] : per_category) j["per_category"][k] = v;
        for (const auto& [cat, lens] : per_category_length)
            for (const auto& [len, acc] : lens) j["per_category_length"][cat][std::to_string(len)] = acc;
        return j;
    }

    std::string dump() const { return to_json().dump(2) + "\n"; }
};

// Dense-grid evaluation of a whole split: every clip at every requested
// length. Parallel across clips with per-thread scorers; aggregation is a
// deterministic in-order reduce, so reports are byte-identical across runs.
inline EvalReport evaluate(const DatasetSplit& split, const ScorerFactory& make_scorer, const EvalOptions& opt,
                           std::vector<SyncScoreMatrix>* matrices_out = nullptr) {
    if (split.clips.empty()) throw DataError("empty split in " + split.dir);
    if (opt.lengths.empty()) throw ConfigError("evaluate needs at least one clip length");
    opt.grid.validate();

    const int n = static_cast<int>(split.clips.size());
    const int n_lengths = static_cast<int>(opt.lengths.size());
    // results[clip][length] = correct?
    std::vector<std::vector<SyncScoreMatrix>> results(static_cast<size_t>(n));

    int threads = opt.threads > 0 ? opt.threads : static_cast<int>(std::thread::hardware_concurrency());
    threads = std::max(1, std::min(threads, n));
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(threads));
    for (int t = 0; t < threads; ++t)
        pool.emplace_back([&, t] {
            try {
                auto scorer = make_scorer();
                while (true) {
                    const int i = next.fetch_add(1);
                    if (i >= n) break;
                    SyntheticClip clip = load_clip(split, split.clips[static_cast<size_t>(i)]);
                    auto& row = results[static_cast<size_t>(i)];
                    row.reserve(static_cast<size_t>(n_lengths));
                    for (int len : opt.lengths) row.push_back(score_offsets(clip, *scorer, opt.grid, len));
                }
            } catch (...) {
                errors[static_cast<size_t>(t)] = std::current_exception();
                next.store(n);
            }
        });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);

    EvalReport report;
    report.tolerance = opt.tolerance;
    report.clip_count = n;
    std::map<std::string, std::pair<int, int>> class_hits;          // class -> (correct, total)
    std::map<int, std::pair<int, int>> length_hits;                 // length -> (correct, total)
    std::map<std::string, std::pair<int, int>> category_hits;       // category -> (correct, total)
    std::map<std::string, std::map<int, std::pair<int, int>>> cat_len_hits;
    int correct_total = 0, total = 0;
    for (int i = 0; i < n; ++i) {
        const auto& rec = split.clips[static_cast<size_t>(i)];
        const EventClass& cls = split.class_of(rec.class_id);
        const std::string cat = category_name(cls.category);
        report.per_class_count[cls.name] += 1;
        for (int li = 0; li < n_lengths; ++li) {
            const auto& sm = results[static_cast<size_t>(i)][static_cast<size_t>(li)];
            const bool ok = is_correct(sm.predicted_offset, sm.true_offset, opt.tolerance);
            correct_total += ok;
            ++total;
            auto& ch = class_hits[cls.name];
            ch.first += ok;
            ch.second += 1;
            auto& lh = length_hits[opt.lengths[static_cast<size_t>(li)]];
            lh.first += ok;
            lh.second += 1;
            auto& gh = category_hits[cat];
            gh.first += ok;
            gh.second += 1;
            auto& gl = cat_len_hits[cat][opt.lengths[static_cast<size_t>(li)]];
            gl.first += ok;
            gl.second += 1;
            if (matrices_out) matrices_out->push_back(sm);
        }
    }
    report.overall = total ? static_cast<double>(correct_total) / total : 0.0;
    for (const auto& [k, v] : class_hits) report.per_class[k] = static_cast<double>(v.first) / v.second;
    for (const auto& [k, v] : length_hits) report.per_length[k] = static_cast<double>(v.first) / v.second;
    for (const auto& [k, v] : category_hits) report.per_category[k] = static_cast<double>(v.first) / v.second;
    for (const auto& [cat, lens] : cat_len_hits)
        for (const auto& [len, v] : lens)
            report.per_category_length[cat][len] = static_cast<double>(v.first) / v.second;

    std::string hash_src = opt.context + "|grid=" + std::to_string(opt.grid.max) + "|tol=" + std::to_string(opt.tolerance);
    for (int len : opt.lengths) hash_src += "|L" + std::to_string(len);
    hash_src += "|split=" + split.dir + "|clips=" + std::to_string(n);
    report.config_hash = hex64(fnv1a(hash_src));
    return report;
}

// exact accuracy of an all-ties (constant-score) model: the tie rule predicts
// offset 0, so accuracy is the manifest fraction with |true_offset| <= tol
inline double constant_score_accuracy(const DatasetSplit& split, int tolerance) {
    int correct = 0;
    for (const auto& c : split.clips) correct += std::abs(c.true_offset_frames) <= tolerance;
    return static_cast<double>(correct) / static_cast<double>(split.clips.size());
}

// ---- robustness sweep -------------------------------------------------------

// wraps another scorer, masking a frame run inside the evaluation window
// (deterministic per clip/length) before scoring
class MaskingScorer : public PairScorer {
public:
    MaskingScorer(std::unique_ptr<PairScorer> inner, MaskModality modality, int n_frames, int fps)
        : inner_(std::move(inner)), modality_(modality), n_frames_(n_frames), fps_(fps) {}

    void begin_window(const SyntheticClip& clip, int window_start, int length) override {
        masked_ = clip;
        if (n_frames_ > 0) {
            uint64_t s = mix_seed(fnv1a(clip.clip_id), static_cast<uint64_t>(length * 64 + n_frames_));
            s = mix_seed(s, static_cast<uint64_t>(static_cast<int>(modality_)));
            Rng rng(s);
            const int start = window_start + rng.uniform_int(0, std::max(0, length - n_frames_));
            masked_ = mask_frames(clip, modality_, n_frames_, rng, start);
        }
        inner_->begin_window(masked_, window_start, length);
    }

    double score_offset(const EvalPairView& pair) override {
        EvalPairView p = pair;
        p.clip = &masked_;
        return inner_->score_offset(p);
    }

private:
    std::unique_ptr<PairScorer> inner_;
    MaskModality modality_;
    int n_frames_;
    int fps_;
    SyntheticClip masked_;
};

struct RobustnessCell {
    MaskModality modality;
    int mask_frames;
    EvalReport report;
};

struct RobustnessReport {
    std::vector<RobustnessCell> cells;

    const EvalReport& find(MaskModality m, int n) const {
        for (const auto& c : cells)
            if (c.modality == m && c.mask_frames == n) return c.report;
        throw DataError("robustness sweep has no cell (" + mask_modality_name(m) + ", " + std::to_string(n) + ")");
    }

    // rows (modality, mask length) x columns (clip length), accuracies
    std::string to_csv(const std::vector<int>& lengths) const {
        std::string out = "modality,mask_frames";
        for (int len : lengths) out += ",len_" + std::to_string(len);
        out += "\n";
        for (const auto& c : cells) {
            out += mask_modality_name(c.modality) + "," + std::to_string(c.mask_frames);
            for (int len : lengths) {
                char buf[32];
                std::snprintf(buf, sizeof(buf), ",%.4f", c.report.per_length.at(len));
                out += buf;
            }
            out += "\n";
        }
        return out;
    }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& c : cells) {
            nlohmann::json cell;
            cell["modality"] = mask_modality_name(c.modality);
            cell["mask_frames"] = c.mask_frames;
            cell["report"] = c.report.to_json();
            j.push_back(cell);
        }
        return j;
    }
};

inline RobustnessReport robustness_sweep(const DatasetSplit& split, const ScorerFactory& make_scorer,
                                         const EvalOptions& opt, const std::vector<MaskModality>& modalities,
                                         const std::vector<int>& mask_lengths, int fps) {
    for (int n : mask_lengths)
        for (int len : opt.lengths)
            if (n >= len)
                throw ConfigError("mask of " + std::to_string(n) + " frames does not fit evaluation length " +
                                  std::to_string(len));
    RobustnessReport out;
    for (MaskModality m : modalities)
        for (int n : mask_lengths) {
            ScorerFactory masked_factory = [&make_scorer, m, n, fps]() -> std::unique_ptr<PairScorer> {
                return std::make_unique<MaskingScorer>(make_scorer(), m, n, fps);
            };
            EvalOptions cell_opt = opt;
            cell_opt.context = opt.context + "|mask=" + mask_modality_name(m) + ":" + std::to_string(n);
            out.cells.push_back({m, n, evaluate(split, masked_factory, cell_opt)});
        }
    return out;
}

// ---- attention heatmaps ------------------------------------------------------

struct HeatmapSet {
    // one [t_v, h, w] tensor per decoder layer, min-max normalised per frame
    std::vector<Tensor> layers;
};

// Cross-attention heatmaps of the decoder variant: averaged over heads and
// audio query positions per layer, reshaped to the visual grid and min-max
// normalised per frame. Writes one CSV grid per (layer, frame) and optional
// PNG renderings.
inline HeatmapSet export_heatmaps(const SyntheticClip& clip, const AvstModel& model, const std::string& out_dir,
                                  int length, bool write_png = false) {
    if (model.config().variant != Variant::dec)
        throw ConfigError("heatmap export needs the decoder variant (cross-attention); model is " +
                          variant_name(model.config().variant));
    const int T = clip.visual.frame_count();
    if (length > T) throw DataError("heatmap window longer than clip " + clip.clip_id);
    const int start = eval_window_start(T, length);

    // aligned audio window: undo the stored offset
    const int audio_start = start + clip.true_offset_frames;
    Tensor frames = crop_visual(clip, start, length);
    AudioWaveform audio = crop_audio(clip, audio_start, length, model.config().crop_lookahead());

    AttentionRecord rec;
    model.score_on_tape(nullptr, frames, model.prep_audio(audio), &rec);

    const int h = model.config().feat_h(), w = model.config().feat_w();
    const int hw = h * w;
    std::error_code ec;
    if (!out_dir.empty()) std::filesystem::create_directories(out_dir, ec);

    HeatmapSet set;
    for (size_t layer = 0; layer < rec.cross_attention.size(); ++layer) {
        const auto& heads = rec.cross_attention[layer];
        const int lq = heads[0].dim(0), lkv = heads[0].dim(1);
        if (lkv != length * hw) throw ContractError("cross-attention width does not match the visual grid");
        std::vector<double> mean(static_cast<size_t>(lkv), 0.0);
        for (const auto& head : heads)
            for (int q = 0; q < lq; ++q)
                for (int kv = 0; kv < lkv; ++kv)
                    mean[static_cast<size_t>(kv)] += head[static_cast<size_t>(q) * lkv + kv];
        for (auto& v : mean) v /= static_cast<double>(heads.size() * lq);

        Tensor grid({length, h, w});
        for (int f = 0; f < length; ++f) {
            double lo = mean[static_cast<size_t>(f) * hw], hi = lo;
            for (int s = 0; s < hw; ++s) {
                lo = std::min(lo, mean[static_cast<size_t>(f) * hw + s]);
                hi = std::max(hi, mean[static_cast<size_t>(f) * hw + s]);
            }
            const double span = hi > lo ? hi - lo : 1.0;
            for (int s = 0; s < hw; ++s)
                grid[static_cast<size_t>(f) * hw + s] = (mean[static_cast<size_t>(f) * hw + s] - lo) / span;
        }
        set.layers.push_back(grid);

        if (!out_dir.empty()) {
            for (int f = 0; f < length; ++f) {
                const std::string base =
                    out_dir + "/" + clip.clip_id + "_layer" + std::to_string(layer) + "_frame" + std::to_string(f);
                std::ofstream csv(base + ".csv");
                if (!csv) throw DataError("cannot write heatmap csv " + base);
                for (int y = 0; y < h; ++y) {
                    for (int x = 0; x < w; ++x) {
                        if (x) csv << ',';
                        csv << grid[(static_cast<size_t>(f) * h + y) * w + x];
                    }
                    csv << '\n';
                }
                if (write_png) {
                    std::vector<double> pixels(grid.data().begin() + static_cast<size_t>(f) * hw,
                                               grid.data().begin() + static_cast<size_t>(f + 1) * hw);
                    png::write_gray(base + ".png", pixels, w, h, 32);
                }
            }
        }
    }
    return set;
}

// true when the heatmap argmax of the final layer lies inside the blob's
// bounding box, mapped onto the feature grid
inline bool heatmap_hits_blob(const Tensor& layer_grid, int frame, const SyntheticClip& clip, int frame_h,
                              int frame_w) {
    const int h = layer_grid.dim(1), w = layer_grid.dim(2);
    const int hw = h * w;
    int arg = 0;
    for (int s = 1; s < hw; ++s)
        if (layer_grid[static_cast<size_t>(frame) * hw + s] > layer_grid[static_cast<size_t>(frame) * hw + arg]) arg = s;
    const int ay = arg / w, ax = arg % w;
    // feature cell (ay, ax) covers a block of pixels; blob bbox in pixels
    const double cell_h = static_cast<double>(frame_h) / h, cell_w = static_cast<double>(frame_w) / w;
    const double x0 = clip.blob_cx - clip.blob_radius, x1 = clip.blob_cx + clip.blob_radius;
    const double y0 = clip.blob_cy - clip.blob_radius, y1 = clip.blob_cy + clip.blob_radius;
    const double px0 = ax * cell_w, px1 = (ax + 1) * cell_w;
    const double py0 = ay * cell_h, py1 = (ay + 1) * cell_h;
    return px1 > x0 && px0 < x1 && py1 > y0 && py0 < y1;
}

// ---- depth ablation ----------------------------------------------------------

struct AblationRow {
    int depth = 0;
    std::map<int, double> accuracy_by_length;
};

struct AblationTable {
    std::vector<AblationRow> rows;
    std::string test_manifest_hash;  // identical for every row by construction
    bool longest_length_trend_nondecreasing = false;

    std::string to_csv(const std::vector<int>& lengths) const {
        std::string out = "depth";
        for (int len : lengths) out += ",len_" + std::to_string(len);
        out += "\n";
        for (const auto& r : rows) {
            out += std::to_string(r.depth);
            for (int len : lengths) {
                char buf[32];
                std::snprintf(buf, sizeof(buf), ",%.4f", r.accuracy_by_length.at(len));
                out += buf;
            }
            out += "\n";
        }
        return out;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["test_manifest_hash"] = test_manifest_hash;
        j["longest_length_trend_nondecreasing"] = longest_length_trend_nondecreasing;
        for (const auto& r : rows) {
            nlohmann::json row;
            row["depth"] = r.depth;
            for (const auto& [len, acc] : r.accuracy_by_length) row["accuracy"][std::to_string(len)] = acc;
            j["rows"].push_back(row);
        }
        return j;
    }
};

inline std::string manifest_hash(const DatasetSplit& split) {
    std::ifstream in(split.dir + "/manifest.json", std::ios::binary);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return hex64(fnv1a(text));
}

// Trains one model per transformer depth under identical seeds and data and
// evaluates each on the same test split. The depth trend at the longest
// length is reported, not asserted.
inline AblationTable run_depth_ablation(const ModelConfig& base_model, const CurriculumConfig& base_curriculum,
                                        const DatasetSplit& train, const DatasetSplit& test, const EvalOptions& opt,
                                        const std::vector<int>& depths, uint64_t seed) {
    if (depths.empty()) throw ConfigError("depth ablation needs at least one depth");
    for (int d : depths)
        if (d < 1) throw ConfigError("transformer depth must be >= 1");
    AblationTable table;
    table.test_manifest_hash = manifest_hash(test);
    for (int depth : depths) {
        ModelConfig cfg = base_model;
        cfg.layers = depth;
        AvstModel model(cfg, seed);
        run_curriculum(base_curriculum, train, model);
        EvalOptions row_opt = opt;
        row_opt.context = opt.context + "|depth=" + std::to_string(depth);
        EvalReport report = evaluate(
            test, [&model]() -> std::unique_ptr<PairScorer> { return std::make_unique<ModelScorer>(model); }, row_opt);
        AblationRow row;
        row.depth = depth;
        for (const auto& [len, acc] : report.per_length) row.accuracy_by_length[len] = acc;
        table.rows.push_back(std::move(row));
    }
    const int longest = *std::max_element(opt.lengths.begin(), opt.lengths.end());
    table.longest_length_trend_nondecreasing = true;
    for (size_t i = 1; i < table.rows.size(); ++i)
        if (table.rows[i].accuracy_by_length.at(longest) < table.rows[i - 1].accuracy_by_length.at(longest))
            table.longest_length_trend_nondecreasing = false;
    return table;
}

}  // namespace avsync

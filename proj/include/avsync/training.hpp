#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "avsync/model.hpp"
#include "avsync/synthdata.hpp"

namespace avsync {

struct BatchItem {
    Tensor frames;        // visual crop [3, t_v, H, W]
    AudioWaveform audio;  // the crop's own (aligned) audio
    std::string source_id;
    int offset_frames = 0;  // anchor offset within the source video (stage 2)
};

struct MiniBatch {
    std::vector<BatchItem> items;
    int stage = 1;
    int k() const { return static_cast<int>(items.size()); }
};

// paper batch sizes 4 / 16 / 12 scaled to desk configs, keeping the ordering
// (enc pays the quadratic token cost, enc_mp is cheapest per pair)
inline int default_batch_size(Variant v) {
    switch (v) {
        case Variant::enc: return 4;
        case Variant::enc_mp: return 8;
        case Variant::dec: return 6;
    }
    return 4;
}

// ---- crops -----------------------------------------------------------------

inline Tensor crop_visual(const SyntheticClip& clip, int start_frame, int frames) {
    const Tensor& all = clip.visual.frames;
    const int T = all.dim(1), H = all.dim(2), W = all.dim(3);
    if (start_frame < 0 || start_frame + frames > T)
        throw DataError("visual crop [" + std::to_string(start_frame) + "," + std::to_string(start_frame + frames) +
                        ") outside clip of " + std::to_string(T) + " frames");
    Tensor out({3, frames, H, W});
    const int64_t fsz = static_cast<int64_t>(H) * W;
    for (int c = 0; c < 3; ++c)
        std::copy(all.data().begin() + (static_cast<size_t>(c) * T + start_frame) * fsz,
                  all.data().begin() + (static_cast<size_t>(c) * T + start_frame + frames) * fsz,
                  out.data().begin() + static_cast<size_t>(c) * frames * fsz);
    return out;
}

// audio for frames [start, start+frames) plus the analysis lookahead
inline AudioWaveform crop_audio(const SyntheticClip& clip, int start_frame, int frames, int lookahead) {
    const int64_t per = static_cast<int64_t>(clip.audio.sample_rate) / clip.visual.fps;
    const int64_t begin = static_cast<int64_t>(start_frame) * per;
    const int64_t end = begin + static_cast<int64_t>(frames) * per + lookahead;
    if (begin < 0 || end > static_cast<int64_t>(clip.audio.samples.size()))
        throw DataError("audio crop for frames [" + std::to_string(start_frame) + "," +
                        std::to_string(start_frame + frames) + ") outside clip audio");
    AudioWaveform out;
    out.sample_rate = clip.audio.sample_rate;
    out.samples.assign(clip.audio.samples.begin() + static_cast<size_t>(begin),
                       clip.audio.samples.begin() + static_cast<size_t>(end));
    return out;
}

// ---- batch sampling --------------------------------------------------------

// stage 1: aligned pairs from k different videos (correspondence negatives)
inline MiniBatch sample_stage1_batch(const DatasetSplit& split, int k, int t_v, int lookahead, Rng& rng) {
    if (static_cast<int>(split.clips.size()) < k)
        throw DataError("split has " + std::to_string(split.clips.size()) + " clips, batch needs " + std::to_string(k));
    MiniBatch batch;
    batch.stage = 1;
    std::vector<int> chosen;
    while (static_cast<int>(chosen.size()) < k) {
        const int idx = rng.uniform_int(0, static_cast<int>(split.clips.size()) - 1);
        bool dup = false;
        for (int c : chosen) dup |= (c == idx);
        if (!dup) chosen.push_back(idx);
    }
    for (int idx : chosen) {
        SyntheticClip clip = load_clip(split, split.clips[static_cast<size_t>(idx)]);
        const int T = clip.visual.frame_count();
        if (T < t_v) throw DataError("clip " + clip.clip_id + " shorter than requested window");
        const int start = rng.uniform_int(0, T - t_v);
        BatchItem item;
        item.frames = crop_visual(clip, start, t_v);
        item.audio = crop_audio(clip, start, t_v, lookahead);
        item.source_id = clip.clip_id;
        item.offset_frames = 0;
        batch.items.push_back(std::move(item));
    }
    return batch;
}

// draws k-1 distinct nonzero offsets plus the zero-offset positive
inline std::vector<int> sample_stage2_offsets(int k, int max_offset_frames, Rng& rng) {
    if (k < 2) throw ContractError("stage-2 batch needs k >= 2");
    if (k - 1 > 2 * max_offset_frames)
        throw DataError("cannot draw " + std::to_string(k - 1) + " distinct nonzero offsets within +/-" +
                        std::to_string(max_offset_frames));
    std::vector<int> pool;
    for (int o = -max_offset_frames; o <= max_offset_frames; ++o)
        if (o != 0) pool.push_back(o);
    std::vector<int> offsets{0};
    for (int i = 0; i < k - 1; ++i) {
        const int j = rng.uniform_int(i, static_cast<int>(pool.size()) - 1);
        std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
        offsets.push_back(pool[static_cast<size_t>(i)]);
    }
    return offsets;
}

// stage 2: k aligned crops of the same video at one anchor plus k-1 distinct
// nonzero anchor offsets; the score matrix then pairs every visual window
// with every audio window, so off-diagonal entries are temporal-shift
// (synchronisation) negatives of up to twice the offset range
inline MiniBatch sample_stage2_batch(const DatasetSplit& split, int clip_index, int k, int t_v, int max_offset_frames,
                                     int lookahead, Rng& rng) {
    SyntheticClip clip = load_clip(split, split.clips[static_cast<size_t>(clip_index)]);
    const int T = clip.visual.frame_count();
    if (T < t_v + 2 * max_offset_frames)
        throw DataError("clip " + clip.clip_id + " of " + std::to_string(T) + " frames cannot host a " +
                        std::to_string(t_v) + "-frame window with +/-" + std::to_string(max_offset_frames) +
                        " offsets");
    const std::vector<int> offsets = sample_stage2_offsets(k, max_offset_frames, rng);
    const int anchor = rng.uniform_int(max_offset_frames, T - t_v - max_offset_frames);
    MiniBatch batch;
    batch.stage = 2;
    for (int o : offsets) {
        BatchItem item;
        item.frames = crop_visual(clip, anchor + o, t_v);
        item.audio = crop_audio(clip, anchor + o, t_v, lookahead);
        item.source_id = clip.clip_id;
        item.offset_frames = o;
        batch.items.push_back(std::move(item));
    }
    return batch;
}

// ---- loss ------------------------------------------------------------------

// entry (i, j) = score of visual i with audio j; k^2 synchronisation-module
// passes (scores are joint, never a dot product of per-item embeddings)
inline Tensor score_matrix(Tape* tape, const MiniBatch& batch, const AvstModel& model) {
    const int k = batch.k();
    if (k < 2) throw ContractError("score_matrix needs k >= 2");
    std::vector<Tensor> vfeat, afeat;
    vfeat.reserve(static_cast<size_t>(k));
    afeat.reserve(static_cast<size_t>(k));
    for (const auto& item : batch.items) {
        vfeat.push_back(model.visual_features(tape, item.frames));
        afeat.push_back(model.audio_features(tape, model.prep_audio(item.audio)));
    }
    std::vector<Tensor> scalars;
    scalars.reserve(static_cast<size_t>(k) * k);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j)
            scalars.push_back(model.score_from_features(tape, vfeat[static_cast<size_t>(i)], afeat[static_cast<size_t>(j)]));
    return stack_scalars(tape, scalars, {k, k});
}

// InfoNCE over a k x k score matrix: mean over rows of the negative
// log-softmax of the diagonal, via stabilised log-sum-exp
inline Tensor info_nce(Tape* tape, const Tensor& scores) {
    if (scores.rank() != 2 || scores.dim(0) != scores.dim(1))
        throw ShapeError("info_nce expects a square matrix, got " + shape_str(scores.shape()));
    const int k = scores.dim(0);
    if (k < 2) throw ContractError("info_nce needs k >= 2");
    std::vector<Tensor> row_losses;
    row_losses.reserve(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        Tensor row = take_rows(tape, scores, i, 1);  // [1, k]
        double mx = row[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        Tensor lse = add_scalar(tape, elem_log(tape, sum_all(tape, elem_exp(tape, add_scalar(tape, row, -mx)))), mx);
        Tensor diag = reshape(tape, take_cols(tape, row, i, 1), {1});
        row_losses.push_back(sub(tape, lse, diag));
    }
    return scale(tape, sum_all(tape, stack_scalars(tape, row_losses, {k})), 1.0 / k);
}

// ---- optimiser -------------------------------------------------------------

struct AdamConfig {
    double lr = 1e-4;  // paper default; experiment configs may override
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam(std::vector<NamedParam> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (const auto& p : params_) {
            m_.emplace_back(p.tensor.shape(), 0.0);
            v_.emplace_back(p.tensor.shape(), 0.0);
        }
    }

    int64_t step_count() const { return steps_; }
    double learning_rate() const { return cfg_.lr; }
    const std::vector<NamedParam>& params() const { return params_; }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    // global-norm gradient clipping; returns the pre-clip norm
    double clip_grad_norm(double max_norm) {
        double total = 0.0;
        for (auto& p : params_) {
            if (!p.tensor.grad_allocated()) continue;
            for (double g : p.tensor.grad()) total += g * g;
        }
        total = std::sqrt(total);
        if (max_norm > 0.0 && total > max_norm) {
            const double s = max_norm / total;
            for (auto& p : params_)
                if (p.tensor.grad_allocated())
                    for (double& g : p.tensor.grad()) g *= s;
        }
        return total;
    }

    void step() {
        ++steps_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
        for (size_t pi = 0; pi < params_.size(); ++pi) {
            Tensor& p = params_[pi].tensor;
            if (!p.grad_allocated()) continue;
            auto& pv = p.data();
            const auto& g = p.grad();
            auto& m = m_[pi].data();
            auto& v = v_[pi].data();
            for (size_t i = 0; i < pv.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                pv[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

private:
    std::vector<NamedParam> params_;
    AdamConfig cfg_;
    std::vector<Tensor> m_, v_;
    int64_t steps_ = 0;
};

// ---- training step and curriculum ------------------------------------------

struct TrainStepStats {
    double loss = 0.0;
    double grad_norm = 0.0;
};

// score matrix -> InfoNCE -> backward -> clipped Adam update; returns the
// pre-update loss
inline TrainStepStats train_step(const MiniBatch& batch, const AvstModel& model, Adam& opt, double grad_clip = 5.0) {
    Tape tape;
    Tensor scores = score_matrix(&tape, batch, model);
    const int k = batch.k();
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) {
            const double s = scores[static_cast<size_t>(i) * k + j];
            if (!std::isfinite(s))
                throw NumericError("non-finite score " + std::to_string(s) + " for pair (visual " + std::to_string(i) +
                                   ", audio " + std::to_string(j) + ") of sources " + batch.items[static_cast<size_t>(i)].source_id +
                                   " / " + batch.items[static_cast<size_t>(j)].source_id);
        }
    Tensor loss = info_nce(&tape, scores);
    if (!std::isfinite(loss.scalar_value())) throw NumericError("non-finite InfoNCE loss");
    opt.zero_grad();
    tape.backward(loss);
    TrainStepStats stats;
    stats.loss = loss.scalar_value();
    stats.grad_norm = opt.clip_grad_norm(grad_clip);
    opt.step();
    return stats;
}

struct CurriculumConfig {
    int stage1_epochs = 1;
    int stage2_epochs = 1;
    int steps_per_epoch = 250;
    int batch_size = 0;  // 0 = per-variant default
    double lr = 1e-4;
    double grad_clip = 5.0;
    std::vector<int> train_lengths = {8, 12, 16, 20};
    int max_offset_frames = 15;
    uint64_t seed = 0;
    int mask_n_frames = 0;  // robustness training: frames masked per item
    MaskModality mask_modality = MaskModality::both;
    std::string log_path;        // JSONL, one line per step; empty = no log
    std::string checkpoint_dir;  // per-epoch checkpoints; empty = none
};

using BatchObserver = std::function<void(int step, int stage, const MiniBatch&)>;

// Two-stage curriculum: cross-video correspondence batches, then same-video
// synchronisation batches. Writes a checkpoint per epoch when a directory is
// configured and returns the final checkpoint path (empty when not persisted).
inline std::string run_curriculum(const CurriculumConfig& cc, const DatasetSplit& train, AvstModel& model,
                                  const BatchObserver& observer = {}) {
    if (cc.train_lengths.empty()) throw ConfigError("curriculum needs at least one training length");
    model.set_params_require_grad(true);
    Adam opt(model.params(), AdamConfig{cc.lr, 0.9, 0.999, 1e-8});
    const int k = cc.batch_size > 0 ? cc.batch_size : default_batch_size(model.config().variant);
    const int lookahead = model.config().crop_lookahead();
    Rng rng(mix_seed(cc.seed, 0x637572725fULL));

    std::ofstream log;
    if (!cc.log_path.empty()) {
        log.open(cc.log_path);
        if (!log) throw DataError("cannot open training log " + cc.log_path);
    }
    std::error_code ec;
    if (!cc.checkpoint_dir.empty()) std::filesystem::create_directories(cc.checkpoint_dir, ec);

    int step = 0;
    std::string last_ckpt;
    const int total_epochs = cc.stage1_epochs + cc.stage2_epochs;
    for (int epoch = 0; epoch < total_epochs; ++epoch) {
        const int stage = epoch < cc.stage1_epochs ? 1 : 2;
        for (int s = 0; s < cc.steps_per_epoch; ++s, ++step) {
            const int t_v = cc.train_lengths[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(cc.train_lengths.size()) - 1))];
            MiniBatch batch;
            if (stage == 1) {
                batch = sample_stage1_batch(train, k, t_v, lookahead, rng);
            } else {
                const int clip_index = rng.uniform_int(0, static_cast<int>(train.clips.size()) - 1);
                batch = sample_stage2_batch(train, clip_index, k, t_v, cc.max_offset_frames, lookahead, rng);
            }
            if (cc.mask_n_frames > 0) {
                for (size_t bi = 0; bi < batch.items.size(); ++bi) {
                    auto& item = batch.items[bi];
                    SyntheticClip view;
                    view.visual.frames = item.frames;
                    view.visual.fps = model.config().fps;
                    view.audio = item.audio;
                    Rng mrng = rng.fork(0x6d61736bULL + static_cast<uint64_t>(step) * 64 + bi);
                    view = mask_frames(view, cc.mask_modality, cc.mask_n_frames, mrng);
                    item.frames = view.visual.frames;
                    item.audio = view.audio;
                }
            }
            if (observer) observer(step, stage, batch);
            const auto t0 = std::chrono::steady_clock::now();
            TrainStepStats stats = train_step(batch, model, opt, cc.grad_clip);
            const auto t1 = std::chrono::steady_clock::now();
            if (log) {
                nlohmann::json line;
                line["step"] = step;
                line["stage"] = stage;
                line["loss"] = stats.loss;
                line["lr"] = cc.lr;
                line["wall_ms"] = std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count();
                log << line.dump() << '\n';
            }
        }
        if (!cc.checkpoint_dir.empty()) {
            last_ckpt = cc.checkpoint_dir + "/epoch_" + std::to_string(epoch) + ".ckpt";
            model.save_checkpoint(last_ckpt);
        }
    }
    if (!cc.checkpoint_dir.empty()) {
        last_ckpt = cc.checkpoint_dir + "/final.ckpt";
        model.save_checkpoint(last_ckpt);
    }
    return last_ckpt;
}

}  // namespace avsync

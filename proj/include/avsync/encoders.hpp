#pragma once

#include <string>
#include <vector>

#include "avsync/audio.hpp"
#include "avsync/common.hpp"
#include "avsync/tensor.hpp"

namespace avsync {

struct NamedParam {
    std::string name;
    Tensor tensor;
};

struct VisualClip {
    Tensor frames;  // [3, T, H, W], values in [0, 1]
    int fps = 5;
    int frame_count() const { return frames.dim(1); }
};

struct VisualFeature {
    Tensor values;  // [c, t_v, h, w]
};

struct AudioFeature {
    Tensor values;  // [c, t_a]
};

namespace detail {

inline void kaiming_uniform(Tensor& w, int fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / fan_in);
    for (double& v : w.data()) v = rng.uniform(-bound, bound);
}

// conv biases start at zero: a random bias floor turns into a uniform
// post-relu background that buries sparse localised responses within a few
// stages (the event contrast is the entire learning signal here)
inline void bias_zero(Tensor& b) {
    for (double& v : b.data()) v = 0.0;
}

}  // namespace detail

// Stand-in for the ResNet18 2D+3D visual backbone: a stack of stride-2 2-D
// conv stages followed by one temporal 3-D conv. Every stage halves the
// spatial resolution, so the downsampling factor is 2^stages; the temporal
// axis is preserved (one feature step per input frame).
struct VisualEncoderConfig {
    int in_height = 32;
    int in_width = 32;
    std::vector<int> stage_channels = {16, 32, 64};  // last entry = model width c
    int temporal_kernel = 3;                         // odd; 1 makes the encoder frame-local

    int channels() const { return stage_channels.back(); }
    int out_height() const { return in_height >> static_cast<int>(stage_channels.size()); }
    int out_width() const { return in_width >> static_cast<int>(stage_channels.size()); }

    void validate() const {
        if (stage_channels.empty()) throw ConfigError("visual encoder needs at least one conv stage");
        if (temporal_kernel < 1 || temporal_kernel % 2 == 0)
            throw ConfigError("visual temporal kernel must be odd, got " + std::to_string(temporal_kernel));
        if (out_height() < 1 || out_width() < 1)
            throw ConfigError("visual encoder downsamples " + std::to_string(in_height) + "x" +
                              std::to_string(in_width) + " below 1x1");
    }
};

class VisualEncoder {
public:
    VisualEncoder(VisualEncoderConfig config, Rng& rng) : cfg_(std::move(config)) {
        cfg_.validate();
        int cin = 3;
        for (size_t s = 0; s < cfg_.stage_channels.size(); ++s) {
            const int cout = cfg_.stage_channels[s];
            Tensor w({cout, cin, 3, 3});
            Tensor b({cout});
            detail::kaiming_uniform(w, cin * 9, rng);
            detail::bias_zero(b);
            stage_w_.push_back(w);
            stage_b_.push_back(b);
            cin = cout;
        }
        const int c = cfg_.channels();
        const int kt = cfg_.temporal_kernel;
        temporal_w_ = Tensor({c, c, kt, 3, 3});
        temporal_b_ = Tensor({c});
        // identity plus small noise: random spatio-temporal mixing at init
        // averages away the sparse event contrast that the contrastive
        // objective needs to get started
        detail::kaiming_uniform(temporal_w_, c * kt * 9, rng);
        for (double& v : temporal_w_.data()) v *= 0.25;
        for (int ch = 0; ch < c; ++ch)
            temporal_w_[(((static_cast<size_t>(ch) * c + ch) * kt + kt / 2) * 3 + 1) * 3 + 1] += 1.0;
        detail::bias_zero(temporal_b_);
    }

    const VisualEncoderConfig& config() const { return cfg_; }

    // [3, T, H, W] -> [c, T, h, w]
    Tensor encode(Tape* tape, const Tensor& frames) const {
        if (frames.rank() != 4 || frames.dim(0) != 3 || frames.dim(2) != cfg_.in_height || frames.dim(3) != cfg_.in_width)
            throw ConfigError("visual encoder configured for 3x" + std::to_string(cfg_.in_height) + "x" +
                              std::to_string(cfg_.in_width) + " frames, got " + shape_str(frames.shape()));
        Tensor x = frames;
        for (size_t s = 0; s < stage_w_.size(); ++s)
            x = relu(tape, conv2d(tape, x, stage_w_[s], stage_b_[s], 2, 2, 1, 1));
        const int pt = cfg_.temporal_kernel / 2;
        // the last layer stays linear: a trailing relu can be driven fully
        // negative by the contrastive objective, freezing the features at
        // exactly zero with no gradient back in
        return conv3d(tape, x, temporal_w_, temporal_b_, pt, 1, 1);
    }

    void collect_params(std::vector<NamedParam>& out, const std::string& prefix) const {
        for (size_t s = 0; s < stage_w_.size(); ++s) {
            out.push_back({prefix + ".stage" + std::to_string(s) + ".w", stage_w_[s]});
            out.push_back({prefix + ".stage" + std::to_string(s) + ".b", stage_b_[s]});
        }
        out.push_back({prefix + ".temporal.w", temporal_w_});
        out.push_back({prefix + ".temporal.b", temporal_b_});
    }

private:
    VisualEncoderConfig cfg_;
    std::vector<Tensor> stage_w_, stage_b_;
    Tensor temporal_w_, temporal_b_;
};

// Audio encoder: collapses the frequency axis with one full-height conv, then
// strides time down to steps_per_frame feature steps per visual frame. All
// kernels equal their strides (non-overlapping blocks), so features of a
// cropped spectrogram are exactly a slice of the full-span features — the
// dense offset-grid evaluation relies on that.
struct AudioEncoderConfig {
    int bins = 161;            // stft window / 2 + 1
    int hops_per_frame = 80;   // spectrogram frames per visual frame: sample_rate / (fps * hop)
    int steps_per_frame = 4;   // audio feature steps per visual frame
    int mid_channels = 32;
    int out_channels = 64;     // model width c

    void validate() const {
        if (bins < 1 || hops_per_frame < 1 || steps_per_frame < 1)
            throw ConfigError("audio encoder dims must be positive");
        if (hops_per_frame % steps_per_frame != 0)
            throw ConfigError("hops_per_frame " + std::to_string(hops_per_frame) +
                              " must be a multiple of steps_per_frame " + std::to_string(steps_per_frame));
    }

    int block() const { return hops_per_frame / steps_per_frame; }  // stft frames per feature step

    // near-square factoring of the block into the two conv strides
    std::pair<int, int> stride_split() const {
        const int q = block();
        int s2 = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(q))));
        while (q % s2 != 0) ++s2;
        return {q / s2, s2};
    }
};

class AudioEncoder {
public:
    AudioEncoder(AudioEncoderConfig config, Rng& rng) : cfg_(config) {
        cfg_.validate();
        auto [s1, s2] = cfg_.stride_split();
        s1_ = s1;
        s2_ = s2;
        freq_w_ = Tensor({cfg_.mid_channels, 1, cfg_.bins, s1_});
        freq_b_ = Tensor({cfg_.mid_channels});
        detail::kaiming_uniform(freq_w_, cfg_.bins * s1_, rng);
        detail::bias_zero(freq_b_);
        time_w_ = Tensor({cfg_.out_channels, cfg_.mid_channels, 1, s2_});
        time_b_ = Tensor({cfg_.out_channels});
        detail::kaiming_uniform(time_w_, cfg_.mid_channels * s2_, rng);
        detail::bias_zero(time_b_);
        point_w_ = Tensor({cfg_.out_channels, cfg_.out_channels, 1, 1});
        point_b_ = Tensor({cfg_.out_channels});
        // identity plus noise, as in the visual temporal conv
        detail::kaiming_uniform(point_w_, cfg_.out_channels, rng);
        for (double& v : point_w_.data()) v *= 0.25;
        for (int ch = 0; ch < cfg_.out_channels; ++ch)
            point_w_[static_cast<size_t>(ch) * cfg_.out_channels + ch] += 1.0;
        detail::bias_zero(point_b_);
    }

    const AudioEncoderConfig& config() const { return cfg_; }

    int steps_for(int spectrogram_frames) const {
        const int blocks = (spectrogram_frames + cfg_.hops_per_frame - 1) / cfg_.hops_per_frame;
        return blocks * cfg_.steps_per_frame;
    }

    // log-compressed magnitude spectrogram [1, bins, W_a] -> [c, t_a]
    Tensor encode(Tape* tape, const Tensor& spec) const {
        if (spec.rank() != 3 || spec.dim(0) != 1 || spec.dim(1) != cfg_.bins)
            throw ConfigError("audio encoder configured for " + std::to_string(cfg_.bins) + " bins, got " +
                              shape_str(spec.shape()));
        const int wa = spec.dim(2);
        const int padded = steps_for(wa) * cfg_.block();
        Tensor x;
        if (padded == wa) {
            x = reshape(tape, spec, {1, 1, cfg_.bins, wa});
        } else {
            // zero-pad trailing frames up to a whole number of blocks
            Tensor p({1, 1, cfg_.bins, padded});
            const auto& sv = spec.data();
            auto& pv = p.data();
            for (int b = 0; b < cfg_.bins; ++b)
                std::copy(sv.begin() + static_cast<size_t>(b) * wa, sv.begin() + static_cast<size_t>(b + 1) * wa,
                          pv.begin() + static_cast<size_t>(b) * padded);
            x = p;
        }
        x = relu(tape, conv2d(tape, x, freq_w_, freq_b_, cfg_.bins, s1_, 0, 0));  // [mid, 1, 1, padded/s1]
        x = reshape(tape, x, {cfg_.mid_channels, 1, 1, padded / s1_});
        x = relu(tape, conv2d(tape, x, time_w_, time_b_, 1, s2_, 0, 0));          // [c, 1, 1, t_a]
        x = conv2d(tape, x, point_w_, point_b_, 1, 1, 0, 0);  // linear final layer, see visual encoder
        return reshape(tape, x, {cfg_.out_channels, padded / (s1_ * s2_)});
    }

    void collect_params(std::vector<NamedParam>& out, const std::string& prefix) const {
        out.push_back({prefix + ".freq.w", freq_w_});
        out.push_back({prefix + ".freq.b", freq_b_});
        out.push_back({prefix + ".time.w", time_w_});
        out.push_back({prefix + ".time.b", time_b_});
        out.push_back({prefix + ".point.w", point_w_});
        out.push_back({prefix + ".point.b", point_b_});
    }

private:
    AudioEncoderConfig cfg_;
    int s1_ = 1, s2_ = 1;
    Tensor freq_w_, freq_b_, time_w_, time_b_, point_w_, point_b_;
};

}  // namespace avsync

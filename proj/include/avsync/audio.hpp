#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include "avsync/common.hpp"
#include "avsync/tensor.hpp"

namespace avsync {

namespace fft {

using cd = std::complex<double>;

// iterative radix-2 FFT, length a power of two; wl holds W_L^k for k < L/2
inline void fft_pow2(cd* a, int len, const cd* wl) {
    for (int i = 1, j = 0; i < len; ++i) {
        int bit = len >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (int size = 2; size <= len; size <<= 1) {
        const int half = size >> 1;
        const int step = len / size;
        for (int i = 0; i < len; i += size)
            for (int k = 0; k < half; ++k) {
                const cd w = wl[static_cast<size_t>(k) * step];
                const cd u = a[i + k];
                const cd v = a[i + k + half] * w;
                a[i + k] = u + v;
                a[i + k + half] = u - v;
            }
    }
}

// mixed-radix plan for n = odd * 2^m; odd parts are combined with a direct
// small-radix pass, so common analysis windows (320 = 5 * 64) stay fast.
// Sizes with a large odd part fall back to the direct transform.
struct Plan {
    int n = 0, odd = 1, pow2 = 1;
    bool direct = false;
    std::vector<cd> w_n;     // W_n^k, k < n
    std::vector<cd> w_pow2;  // W_pow2^k, k < pow2/2

    explicit Plan(int size) : n(size) {
        odd = n;
        while (odd % 2 == 0) odd /= 2;
        pow2 = n / odd;
        direct = odd > 15;
        w_n.resize(static_cast<size_t>(n));
        for (int k = 0; k < n; ++k) w_n[static_cast<size_t>(k)] = std::polar(1.0, -2.0 * M_PI * k / n);
        if (!direct && pow2 >= 2) {
            w_pow2.resize(static_cast<size_t>(pow2 / 2));
            for (int k = 0; k < pow2 / 2; ++k)
                w_pow2[static_cast<size_t>(k)] = std::polar(1.0, -2.0 * M_PI * k / pow2);
        }
    }

    // forward DFT of `in` (length n) into `out`; `scratch` must hold n values
    void forward(const cd* in, cd* out, cd* scratch) const {
        if (direct) {
            for (int k = 0; k < n; ++k) {
                cd acc{0.0, 0.0};
                for (int i = 0; i < n; ++i) acc += in[i] * w_n[static_cast<size_t>((static_cast<int64_t>(k) * i) % n)];
                out[k] = acc;
            }
            return;
        }
        if (odd == 1) {
            std::copy(in, in + n, out);
            fft_pow2(out, n, w_pow2.data());
            return;
        }
        // decimate by the odd factor, transform each strand, then combine
        for (int r = 0; r < odd; ++r) {
            cd* strand = scratch + static_cast<size_t>(r) * pow2;
            for (int j = 0; j < pow2; ++j) strand[j] = in[static_cast<size_t>(j) * odd + r];
            fft_pow2(strand, pow2, w_pow2.data());
        }
        for (int q = 0; q < odd; ++q)
            for (int k = 0; k < pow2; ++k) {
                const int64_t idx = q * pow2 + k;
                cd acc{0.0, 0.0};
                for (int r = 0; r < odd; ++r)
                    acc += scratch[static_cast<size_t>(r) * pow2 + k] *
                           w_n[static_cast<size_t>((static_cast<int64_t>(r) * idx) % n)];
                out[idx] = acc;
            }
    }
};

}  // namespace fft

struct AudioWaveform {
    std::vector<double> samples;
    int sample_rate = 16000;
};

// Magnitude spectrogram, values >= 0, shape [1, bins, frames].
struct Spectrogram {
    Tensor values;
    int bins() const { return values.dim(1); }
    int frames() const { return values.dim(2); }
};

inline int stft_frame_count(int64_t num_samples, int window, int hop) {
    return static_cast<int>((num_samples - window) / hop) + 1;
}

inline std::vector<double> hann_window(int n) {
    std::vector<double> w(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) w[static_cast<size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / n);
    return w;
}

// Hann-windowed DFT magnitudes. Frame f covers samples [f*hop, f*hop+window);
// bins 0..window/2 (window/2 + 1 of them).
inline Spectrogram stft_magnitude(const AudioWaveform& wave, int window, int hop) {
    if (hop < 1 || window < 2) throw ConfigError("stft_magnitude: window/hop must be positive");
    const int64_t n = static_cast<int64_t>(wave.samples.size());
    if (n < window)
        throw DataError("stft_magnitude: waveform of " + std::to_string(n) + " samples is shorter than window " +
                        std::to_string(window));
    const int frames = stft_frame_count(n, window, hop);
    const int bins = window / 2 + 1;
    const std::vector<double> win = hann_window(window);

    const fft::Plan plan(window);
    std::vector<fft::cd> buf(static_cast<size_t>(window));
    std::vector<fft::cd> spectrum(static_cast<size_t>(window));
    std::vector<fft::cd> scratch(static_cast<size_t>(window));

    Tensor out({1, bins, frames});
    auto& ov = out.data();
    for (int f = 0; f < frames; ++f) {
        const double* x = wave.samples.data() + static_cast<size_t>(f) * hop;
        for (int i = 0; i < window; ++i) buf[static_cast<size_t>(i)] = {x[i] * win[static_cast<size_t>(i)], 0.0};
        plan.forward(buf.data(), spectrum.data(), scratch.data());
        for (int b = 0; b < bins; ++b) ov[static_cast<size_t>(b) * frames + f] = std::abs(spectrum[static_cast<size_t>(b)]);
    }
    return {out};
}

// log(1 + x) compression applied before the audio encoder
inline Tensor log_compress(const Tensor& spec) {
    Tensor out(spec.shape());
    const auto& sv = spec.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::log1p(sv[i]);
    return out;
}

}  // namespace avsync

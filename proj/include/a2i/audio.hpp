#pragma once

#include "a2i/common.hpp"

#include <string>
#include <vector>

namespace a2i {

struct AudioClip {
    std::vector<float> waveform;  // amplitudes in [-1, 1]
    int sample_rate = 16000;
    int class_id = -1;

    double duration() const {
        return sample_rate > 0 ? double(waveform.size()) / sample_rate : 0.0;
    }
};

struct MelSpectrogram {
    std::vector<float> values;  // [n_mels, frames] row-major, log scale
    int n_mels = 0;
    int frames = 0;
    int hop = 0;
    int window = 0;

    float at(int mel, int frame) const { return values[(size_t)mel * frames + frame]; }
};

struct MelParams {
    int hop = 320;      // samples
    int window = 1024;  // samples
    int n_mels = 64;
    double fmin = 0.0;
    double fmax = -1.0;  // <= 0 means Nyquist
};

// log(mel_filterbank(|STFT|^2) + eps_floor), eps_floor = 1e-10.
// Hann window, no padding: frames = floor((len - window)/hop) + 1.
MelSpectrogram compute_logmel(const AudioClip& clip, const MelParams& p = {});

// triangular mel filterbank rows [n_mels, n_fft/2 + 1]
std::vector<double> mel_filterbank(int n_mels, int n_fft, double sample_rate, double fmin,
                                   double fmax);

double hz_to_mel(double f);
double mel_to_hz(double m);

// center frequency (Hz) of a mel filter
double mel_bin_center_hz(int bin, int n_mels, double sample_rate, double fmin, double fmax);

// 16-bit PCM mono
void write_wav(const std::string& path, const AudioClip& clip);
AudioClip read_wav(const std::string& path);

}  // namespace a2i

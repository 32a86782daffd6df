#include "a2i/audio.hpp"

#include <fftw3.h>

#include <cstdio>
#include <cstring>
#include <mutex>

namespace a2i {

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

static std::vector<double> mel_points(int n_mels, double sample_rate, double fmin, double fmax) {
    if (fmax <= 0) fmax = sample_rate / 2.0;
    double lo = hz_to_mel(fmin), hi = hz_to_mel(fmax);
    std::vector<double> pts(n_mels + 2);
    for (int i = 0; i < n_mels + 2; ++i)
        pts[i] = mel_to_hz(lo + (hi - lo) * i / double(n_mels + 1));
    return pts;
}

double mel_bin_center_hz(int bin, int n_mels, double sample_rate, double fmin, double fmax) {
    auto pts = mel_points(n_mels, sample_rate, fmin, fmax);
    return pts[bin + 1];
}

std::vector<double> mel_filterbank(int n_mels, int n_fft, double sample_rate, double fmin,
                                   double fmax) {
    int n_bins = n_fft / 2 + 1;
    auto pts = mel_points(n_mels, sample_rate, fmin, fmax);
    std::vector<double> fb((size_t)n_mels * n_bins, 0.0);
    for (int m = 0; m < n_mels; ++m) {
        double f_lo = pts[m], f_c = pts[m + 1], f_hi = pts[m + 2];
        for (int b = 0; b < n_bins; ++b) {
            double f = b * sample_rate / double(n_fft);
            double w = 0.0;
            if (f > f_lo && f < f_c)
                w = (f - f_lo) / (f_c - f_lo);
            else if (f >= f_c && f < f_hi)
                w = (f_hi - f) / (f_hi - f_c);
            fb[(size_t)m * n_bins + b] = w;
        }
    }
    return fb;
}

// fftw plan creation is not thread-safe
static std::mutex g_fftw_mutex;

MelSpectrogram compute_logmel(const AudioClip& clip, const MelParams& p) {
    check_arg(p.window > 0 && p.hop > 0 && p.n_mels > 0, "compute_logmel: bad parameters");
    check_arg((size_t)p.window <= clip.waveform.size(),
              "compute_logmel: clip shorter than analysis window");
    const int n_fft = p.window;
    const int n_bins = n_fft / 2 + 1;
    const int frames = int((clip.waveform.size() - p.window) / p.hop) + 1;

    std::vector<double> hann(p.window);
    for (int i = 0; i < p.window; ++i)
        hann[i] = 0.5 * (1.0 - std::cos(2.0 * M_PI * i / p.window));

    auto fb = mel_filterbank(p.n_mels, n_fft, clip.sample_rate, p.fmin, p.fmax);

    std::vector<double> in(n_fft);
    std::vector<double> power((size_t)frames * n_bins);
    {
        fftw_complex* out;
        fftw_plan plan;
        {
            std::lock_guard<std::mutex> lock(g_fftw_mutex);
            out = fftw_alloc_complex(n_bins);
            plan = fftw_plan_dft_r2c_1d(n_fft, in.data(), out, FFTW_ESTIMATE);
        }
        for (int f = 0; f < frames; ++f) {
            const float* src = clip.waveform.data() + (size_t)f * p.hop;
            for (int i = 0; i < n_fft; ++i) in[i] = src[i] * hann[i];
            fftw_execute(plan);
            for (int b = 0; b < n_bins; ++b)
                power[(size_t)f * n_bins + b] = out[b][0] * out[b][0] + out[b][1] * out[b][1];
        }
        {
            std::lock_guard<std::mutex> lock(g_fftw_mutex);
            fftw_destroy_plan(plan);
            fftw_free(out);
        }
    }

    constexpr double eps_floor = 1e-10;
    MelSpectrogram mel;
    mel.n_mels = p.n_mels;
    mel.frames = frames;
    mel.hop = p.hop;
    mel.window = p.window;
    mel.values.resize((size_t)p.n_mels * frames);
    for (int m = 0; m < p.n_mels; ++m) {
        const double* filt = fb.data() + (size_t)m * n_bins;
        for (int f = 0; f < frames; ++f) {
            double acc = 0.0;
            const double* pw = power.data() + (size_t)f * n_bins;
            for (int b = 0; b < n_bins; ++b) acc += filt[b] * pw[b];
            mel.values[(size_t)m * frames + f] = float(std::log(acc + eps_floor));
        }
    }
    return mel;
}

// ------------------------------------------------------------------- WAV IO

static void put_u32(std::vector<uint8_t>& b, uint32_t v) {
    b.push_back(v & 0xff);
    b.push_back((v >> 8) & 0xff);
    b.push_back((v >> 16) & 0xff);
    b.push_back((v >> 24) & 0xff);
}
static void put_u16(std::vector<uint8_t>& b, uint16_t v) {
    b.push_back(v & 0xff);
    b.push_back((v >> 8) & 0xff);
}

void write_wav(const std::string& path, const AudioClip& clip) {
    const uint32_t n = (uint32_t)clip.waveform.size();
    std::vector<uint8_t> buf;
    buf.reserve(44 + 2 * n);
    auto tag = [&](const char* t) { buf.insert(buf.end(), t, t + 4); };
    tag("RIFF");
    put_u32(buf, 36 + 2 * n);
    tag("WAVE");
    tag("fmt ");
    put_u32(buf, 16);
    put_u16(buf, 1);  // PCM
    put_u16(buf, 1);  // mono
    put_u32(buf, (uint32_t)clip.sample_rate);
    put_u32(buf, (uint32_t)clip.sample_rate * 2);
    put_u16(buf, 2);
    put_u16(buf, 16);
    tag("data");
    put_u32(buf, 2 * n);
    for (uint32_t i = 0; i < n; ++i) {
        float x = clamp(clip.waveform[i], -1.0f, 1.0f);
        int16_t s = (int16_t)std::lrint(x * 32767.0f);
        put_u16(buf, (uint16_t)s);
    }
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("write_wav: cannot open " + path);
    std::fwrite(buf.data(), 1, buf.size(), f);
    std::fclose(f);
}

AudioClip read_wav(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw std::runtime_error("read_wav: cannot open " + path);
    auto rd_u32 = [&]() {
        uint8_t b[4];
        if (std::fread(b, 1, 4, f) != 4) throw std::runtime_error("read_wav: truncated " + path);
        return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
               (uint32_t(b[3]) << 24);
    };
    auto rd_u16 = [&]() {
        uint8_t b[2];
        if (std::fread(b, 1, 2, f) != 2) throw std::runtime_error("read_wav: truncated " + path);
        return uint16_t(b[0]) | (uint16_t(b[1]) << 8);
    };
    char tag[5] = {0};
    if (std::fread(tag, 1, 4, f) != 4 || std::strcmp(tag, "RIFF") != 0)
        throw std::runtime_error("read_wav: not a RIFF file: " + path);
    rd_u32();
    if (std::fread(tag, 1, 4, f) != 4 || std::strcmp(tag, "WAVE") != 0)
        throw std::runtime_error("read_wav: not a WAVE file: " + path);

    AudioClip clip;
    uint16_t channels = 1, bits = 16;
    while (std::fread(tag, 1, 4, f) == 4) {
        uint32_t sz = rd_u32();
        if (std::strcmp(tag, "fmt ") == 0) {
            rd_u16();  // format
            channels = rd_u16();
            clip.sample_rate = (int)rd_u32();
            rd_u32();
            rd_u16();
            bits = rd_u16();
            if (sz > 16) std::fseek(f, sz - 16, SEEK_CUR);
        } else if (std::strcmp(tag, "data") == 0) {
            check_arg(bits == 16 && channels == 1, "read_wav: only 16-bit mono supported");
            uint32_t n = sz / 2;
            clip.waveform.resize(n);
            for (uint32_t i = 0; i < n; ++i)
                clip.waveform[i] = float(int16_t(rd_u16())) / 32767.0f;
            break;
        } else {
            std::fseek(f, sz, SEEK_CUR);
        }
    }
    std::fclose(f);
    return clip;
}

}  // namespace a2i

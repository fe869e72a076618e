#pragma once

#include <array>
#include <optional>

#include "bmf/common.hpp"

namespace bmf::signals {

constexpr int kEegChannels = 21;
constexpr int kEegRate = 256;          // Hz at acquisition
constexpr int kEegDurationS = 30;      // seconds per parallel recording
constexpr int kEegRawLen = kEegRate * kEegDurationS;
constexpr int kModelRate = 128;        // Hz after downsampling
constexpr int kWindowLen = 2 * kModelRate;  // 2 s windows
constexpr int kEnoseSensors = 10;
constexpr int kEnoseLen = 90;          // seconds at 1 Hz
constexpr int kOdors = 4;
constexpr int kParallels = 6;
constexpr int kWindowsPerParallel = 10;
constexpr int kSamplesPerSubject = kOdors * kParallels * kWindowsPerParallel;  // 240

// 30 s of 21-channel scalp potentials at 256 Hz, one odor stimulus.
struct EegRecording {
    int subject_id = 0;
    int odor_id = 0;
    int parallel_id = 0;
    std::vector<double> samples;  // kEegChannels x kEegRawLen, row-major, microvolts
};

// 90 s of 10-sensor conductivity ratios (G/G0) at 1 Hz.
struct EnoseRecording {
    int subject_id = 0;
    int odor_id = 0;
    int parallel_id = 0;
    int repetition_id = 0;
    std::vector<double> conductivity;  // kEnoseSensors x kEnoseLen, row-major, > 0
};

// Per-subject odor preference; label 1 = happy, 0 = disgust.
struct PreferenceProfile {
    int subject_id = 0;
    std::array<int, kOdors> preference{};
};

// One paired training example.
struct MultimodalSample {
    std::vector<float> eeg;    // kEegChannels x kWindowLen
    std::vector<float> enose;  // kEnoseSensors x kEnoseLen
    int subject_id = 0;
    int odor_id = 0;
    int label = 0;
};

struct FoldPlan {
    struct Fold {
        int test_subject = 0;
        std::vector<int> train_subjects;
    };
    std::vector<Fold> folds;
    bool degenerate = false;  // set when a fold has an empty train side
};

// Knobs of the synthetic acquisition paradigm.
struct SignalConfig {
    int n_subjects = 8;
    int minority_count = 2;  // subjects whose preferences disagree with the majority
    uint64_t seed = 0;

    // E-nose response model: 1 + gain * (1 - exp(-t/tau)) + noise
    double enose_noise = 0.02;
    std::array<std::array<double, kOdors>, kEnoseSensors> enose_gain;
    std::array<double, kEnoseSensors> enose_tau;

    // EEG composition, microvolt scale
    double odor_amp = 4.0;
    double pref_amp = 3.0;
    double noise_amp = 1.5;
    double subject_mix = 0.35;  // strength of the per-subject channel mixing
    std::array<std::array<double, 2>, kOdors> odor_freqs;  // Hz, two oscillators per odor
    double happy_freq = 10.0;    // Hz, preference band for label 1
    double disgust_freq = 22.0;  // Hz, preference band for label 0

    SignalConfig();
};

// Majority pattern {happy, disgust, disgust, happy}; the last `minority_count`
// subjects flip two odors each.
std::vector<PreferenceProfile> default_profiles(int n_subjects, int minority_count);

EnoseRecording synth_enose(const SignalConfig& cfg, int odor_id, int subject_id, int parallel_id,
                           int repetition_id);
EegRecording synth_eeg(const SignalConfig& cfg, int odor_id, int subject_id, int parallel_id,
                       const PreferenceProfile& profile);

// Zero-phase 4th-order Butterworth band-pass, applied per channel.
std::vector<double> bandpass(const std::vector<double>& data, int n_channels, double fs,
                             double low_hz = 0.5, double high_hz = 45.0);
// Decimation by 2 (keeps even indices); T must be even.
std::vector<double> downsample2(const std::vector<double>& data, int n_channels);
// Drops second 0 and everything after 21 s, splits the retained 20 s into
// ten 2 s windows. Input must be 30 s at kModelRate.
std::vector<std::vector<float>> window_samples(const std::vector<double>& data, int n_channels);

FoldPlan make_loso_folds(int n_subjects);

struct Dataset {
    SignalConfig cfg;
    std::vector<PreferenceProfile> profiles;
    std::vector<MultimodalSample> samples;
    FoldPlan folds;
};

Dataset build_dataset(const SignalConfig& cfg, const std::vector<PreferenceProfile>& profiles);
Dataset build_dataset(const SignalConfig& cfg);  // with default_profiles

// Manifest (JSON) plus raw tensors in the binary checkpoint container.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

// One row per second, columns sensor_1..sensor_10.
void write_enose_csv(const EnoseRecording& rec, const std::string& path);

}  // namespace bmf::signals

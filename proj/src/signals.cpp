#include "bmf/signals.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "bmf/checkpoint.hpp"

namespace bmf::signals {

namespace {

// Seed-path tags so the derived RNG streams never collide.
constexpr uint64_t kTagEnose = 0xE05E;
constexpr uint64_t kTagEegNoise = 0xEE61;
constexpr uint64_t kTagEegPhase = 0xEE62;
constexpr uint64_t kTagSubjectMix = 0x5B1C;
constexpr uint64_t kTagPattern = 0xBA5E;

}  // namespace

SignalConfig::SignalConfig() {
    // Sensor odor gains, loosely one or two dominant odors per sensor.
    enose_gain = {{{1.8, 0.2, 0.3, 1.2},
                   {0.3, 2.2, 0.8, 0.2},
                   {1.5, 1.0, 0.5, 0.8},
                   {0.2, 0.4, 0.3, 0.3},
                   {1.1, 0.3, 0.7, 1.4},
                   {0.6, 1.2, 1.5, 0.9},
                   {0.3, 2.5, 1.8, 0.2},
                   {0.9, 0.7, 0.6, 1.7},
                   {0.8, 1.9, 2.1, 0.5},
                   {0.4, 0.6, 1.1, 1.2}}};
    enose_tau = {12, 8, 15, 20, 10, 14, 7, 18, 9, 16};
    odor_freqs = {{{6.0, 14.0}, {8.0, 19.0}, {11.5, 26.0}, {4.5, 31.0}}};
}

std::vector<PreferenceProfile> default_profiles(int n_subjects, int minority_count) {
    check(n_subjects >= 1, "default_profiles: need at least one subject");
    check(minority_count >= 0 && minority_count <= n_subjects,
          "default_profiles: bad minority count");
    const std::array<int, kOdors> majority{1, 0, 0, 1};
    std::vector<PreferenceProfile> out(n_subjects);
    for (int s = 0; s < n_subjects; ++s) {
        out[s].subject_id = s;
        out[s].preference = majority;
        if (s >= n_subjects - minority_count) {
            int j = s - (n_subjects - minority_count);
            out[s].preference[j % kOdors] ^= 1;
            out[s].preference[(j + 1) % kOdors] ^= 1;
        }
    }
    return out;
}

EnoseRecording synth_enose(const SignalConfig& cfg, int odor_id, int subject_id, int parallel_id,
                           int repetition_id) {
    check(odor_id >= 0 && odor_id < kOdors, "synth_enose: odor_id out of range");
    check(subject_id >= 0, "synth_enose: bad subject_id");
    EnoseRecording rec;
    rec.subject_id = subject_id;
    rec.odor_id = odor_id;
    rec.parallel_id = parallel_id;
    rec.repetition_id = repetition_id;
    rec.conductivity.resize(kEnoseSensors * kEnoseLen);
    Rng rng = make_rng(cfg.seed, {kTagEnose, (uint64_t)subject_id, (uint64_t)odor_id,
                                  (uint64_t)parallel_id, (uint64_t)repetition_id});
    std::normal_distribution<double> noise{0.0, 1.0};
    for (int s = 0; s < kEnoseSensors; ++s) {
        double gain = cfg.enose_gain[s][odor_id];
        double tau = cfg.enose_tau[s];
        for (int t = 0; t < kEnoseLen; ++t) {
            double v = 1.0 + gain * (1.0 - std::exp(-double(t) / tau));
            if (cfg.enose_noise > 0) v += cfg.enose_noise * noise(rng);
            rec.conductivity[s * kEnoseLen + t] = std::max(v, 1e-3);
        }
    }
    return rec;
}

namespace {

// Fixed per-config channel weight patterns; shared by every subject so odor
// and preference content stays consistent across the population.
std::vector<double> channel_pattern(const SignalConfig& cfg, uint64_t key, int count) {
    Rng rng = make_rng(cfg.seed, {kTagPattern, key});
    std::uniform_real_distribution<double> u{0.4, 1.0};
    std::uniform_int_distribution<int> sgn{0, 1};
    std::vector<double> w(count);
    for (auto& v : w) v = u(rng) * (sgn(rng) ? 1.0 : -1.0);
    return w;
}

// Row-normalized (I + s*G); identity when s == 0.
std::vector<double> subject_mixing(const SignalConfig& cfg, int subject_id) {
    const int n = kEegChannels;
    Rng rng = make_rng(cfg.seed, {kTagSubjectMix, (uint64_t)subject_id});
    std::normal_distribution<double> g{0.0, 1.0 / std::sqrt(double(n))};
    std::vector<double> m(n * n, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) m[i * n + j] = cfg.subject_mix * g(rng);
        m[i * n + i] += 1.0;
        double norm = 0;
        for (int j = 0; j < n; ++j) norm += m[i * n + j] * m[i * n + j];
        norm = std::sqrt(norm);
        for (int j = 0; j < n; ++j) m[i * n + j] /= norm;
    }
    return m;
}

// Voss-McCartney style octave-held noise, roughly 1/f.
struct PinkNoise {
    std::array<double, 6> rows{};
    std::normal_distribution<double> dist{0.0, 1.0};
    int counter = 0;

    double next(Rng& rng) {
        for (size_t k = 0; k < rows.size(); ++k)
            if (counter % (1 << k) == 0) rows[k] = dist(rng);
        ++counter;
        double s = 0;
        for (double v : rows) s += v;
        return s / std::sqrt(double(rows.size()));
    }
};

}  // namespace

EegRecording synth_eeg(const SignalConfig& cfg, int odor_id, int subject_id, int parallel_id,
                       const PreferenceProfile& profile) {
    check(odor_id >= 0 && odor_id < kOdors, "synth_eeg: odor_id out of range");
    check(profile.subject_id == subject_id, "synth_eeg: profile subject mismatch");
    EegRecording rec;
    rec.subject_id = subject_id;
    rec.odor_id = odor_id;
    rec.parallel_id = parallel_id;

    const int T = kEegRawLen;
    const double fs = kEegRate;
    int label = profile.preference[odor_id];
    double pref_freq = label == 1 ? cfg.happy_freq : cfg.disgust_freq;
    double pref_sign = label == 1 ? 1.0 : -1.0;

    auto w_odor0 = channel_pattern(cfg, 100 + odor_id * 2, kEegChannels);
    auto w_odor1 = channel_pattern(cfg, 101 + odor_id * 2, kEegChannels);
    auto w_pref = channel_pattern(cfg, 777, kEegChannels);

    Rng phase_rng = make_rng(cfg.seed, {kTagEegPhase, (uint64_t)odor_id, (uint64_t)parallel_id});
    std::uniform_real_distribution<double> ph{0.0, 2.0 * M_PI};
    double phi0 = ph(phase_rng), phi1 = ph(phase_rng), psi = ph(phase_rng);

    // the oscillators are shared across channels; only the weights differ
    double f0 = cfg.odor_freqs[odor_id][0], f1 = cfg.odor_freqs[odor_id][1];
    std::vector<double> osc0(T), osc1(T), oscp(T);
    for (int t = 0; t < T; ++t) {
        double tt = double(t) / fs;
        osc0[t] = std::sin(2 * M_PI * f0 * tt + phi0);
        osc1[t] = std::sin(2 * M_PI * f1 * tt + phi1);
        oscp[t] = std::sin(2 * M_PI * pref_freq * tt + psi);
    }

    // pre-mix composition
    std::vector<double> x(kEegChannels * T);
    for (int ch = 0; ch < kEegChannels; ++ch) {
        double a0 = cfg.odor_amp * w_odor0[ch];
        double a1 = cfg.odor_amp * w_odor1[ch];
        double ap = pref_sign * cfg.pref_amp * w_pref[ch];
        double* row = x.data() + (size_t)ch * T;
        for (int t = 0; t < T; ++t) row[t] = a0 * osc0[t] + a1 * osc1[t] + ap * oscp[t];
    }

    // subject-specific channel mixing
    auto mix = subject_mixing(cfg, subject_id);
    rec.samples.assign(kEegChannels * (size_t)T, 0.0);
    for (int i = 0; i < kEegChannels; ++i) {
        double* out = rec.samples.data() + (size_t)i * T;
        for (int j = 0; j < kEegChannels; ++j) {
            double m = mix[i * kEegChannels + j];
            if (m == 0.0) continue;
            const double* src = x.data() + (size_t)j * T;
            for (int t = 0; t < T; ++t) out[t] += m * src[t];
        }
    }

    if (cfg.noise_amp > 0) {
        Rng noise_rng = make_rng(cfg.seed, {kTagEegNoise, (uint64_t)subject_id, (uint64_t)odor_id,
                                            (uint64_t)parallel_id});
        for (int ch = 0; ch < kEegChannels; ++ch) {
            PinkNoise pink;
            double* row = rec.samples.data() + (size_t)ch * T;
            for (int t = 0; t < T; ++t) row[t] += cfg.noise_amp * pink.next(noise_rng);
        }
    }
    return rec;
}

// ---------------------------------------------------------------------------
// preprocessing
// ---------------------------------------------------------------------------

namespace {

struct Biquad {
    double b0, b1, b2, a1, a2;

    void apply(std::vector<double>& x) const {
        double z1 = 0, z2 = 0;
        for (double& v : x) {
            double in = v;
            double out = b0 * in + z1;
            z1 = b1 * in - a1 * out + z2;
            z2 = b2 * in - a2 * out;
            v = out;
        }
    }
};

// 4th-order Butterworth sections: Q = 1/(2 cos(pi/8)), 1/(2 cos(3pi/8)).
constexpr double kButterQ4[2] = {0.5411961001461969, 1.3065629648763764};

Biquad biquad_lowpass(double fc, double fs, double q) {
    double w0 = 2.0 * M_PI * fc / fs;
    double alpha = std::sin(w0) / (2.0 * q);
    double cw = std::cos(w0);
    double a0 = 1 + alpha;
    return {(1 - cw) / 2 / a0, (1 - cw) / a0, (1 - cw) / 2 / a0, -2 * cw / a0, (1 - alpha) / a0};
}

Biquad biquad_highpass(double fc, double fs, double q) {
    double w0 = 2.0 * M_PI * fc / fs;
    double alpha = std::sin(w0) / (2.0 * q);
    double cw = std::cos(w0);
    double a0 = 1 + alpha;
    return {(1 + cw) / 2 / a0, -(1 + cw) / a0, (1 + cw) / 2 / a0, -2 * cw / a0, (1 - alpha) / a0};
}

constexpr int kFiltPad = 384;  // odd-reflection padding per side

std::vector<double> filtfilt(const std::vector<double>& x, const std::vector<Biquad>& sections) {
    const int64_t n = (int64_t)x.size();
    const int64_t pad = kFiltPad;
    std::vector<double> ext;
    ext.reserve(n + 2 * pad);
    for (int64_t i = pad; i >= 1; --i) ext.push_back(2 * x[0] - x[i]);
    ext.insert(ext.end(), x.begin(), x.end());
    for (int64_t i = 1; i <= pad; ++i) ext.push_back(2 * x[n - 1] - x[n - 1 - i]);

    for (const Biquad& s : sections) s.apply(ext);
    std::reverse(ext.begin(), ext.end());
    for (const Biquad& s : sections) s.apply(ext);
    std::reverse(ext.begin(), ext.end());

    return {ext.begin() + pad, ext.begin() + pad + n};
}

}  // namespace

std::vector<double> bandpass(const std::vector<double>& data, int n_channels, double fs,
                             double low_hz, double high_hz) {
    check(n_channels > 0 && data.size() % n_channels == 0, "bandpass: bad layout");
    int64_t T = (int64_t)data.size() / n_channels;
    check(T > 2 * kFiltPad, "bandpass: signal length ", T, " below filter warm-up ",
          2 * kFiltPad + 1);
    std::vector<Biquad> sections{
        biquad_lowpass(high_hz, fs, kButterQ4[0]), biquad_lowpass(high_hz, fs, kButterQ4[1]),
        biquad_highpass(low_hz, fs, kButterQ4[0]), biquad_highpass(low_hz, fs, kButterQ4[1])};
    std::vector<double> out(data.size());
    for (int ch = 0; ch < n_channels; ++ch) {
        std::vector<double> row(data.begin() + (size_t)ch * T, data.begin() + (size_t)(ch + 1) * T);
        auto filtered = filtfilt(row, sections);
        std::copy(filtered.begin(), filtered.end(), out.begin() + (size_t)ch * T);
    }
    return out;
}

std::vector<double> downsample2(const std::vector<double>& data, int n_channels) {
    check(n_channels > 0 && data.size() % n_channels == 0, "downsample2: bad layout");
    int64_t T = (int64_t)data.size() / n_channels;
    check(T % 2 == 0, "downsample2: odd length ", T);
    std::vector<double> out((size_t)n_channels * (T / 2));
    for (int ch = 0; ch < n_channels; ++ch)
        for (int64_t t = 0; t < T / 2; ++t)
            out[(size_t)ch * (T / 2) + t] = data[(size_t)ch * T + 2 * t];
    return out;
}

std::vector<std::vector<float>> window_samples(const std::vector<double>& data, int n_channels) {
    check(n_channels > 0 && data.size() % n_channels == 0, "window_samples: bad layout");
    int64_t T = (int64_t)data.size() / n_channels;
    check(T == (int64_t)kModelRate * kEegDurationS, "window_samples: expected ",
          kModelRate * kEegDurationS, " samples per channel at ", kModelRate, " Hz, got ", T);
    std::vector<std::vector<float>> windows(kWindowsPerParallel);
    for (int w = 0; w < kWindowsPerParallel; ++w) {
        int64_t start = kModelRate * (1 + 2 * w);  // skip the first second
        auto& win = windows[w];
        win.resize((size_t)n_channels * kWindowLen);
        for (int ch = 0; ch < n_channels; ++ch)
            for (int64_t t = 0; t < kWindowLen; ++t)
                win[(size_t)ch * kWindowLen + t] = (float)data[(size_t)ch * T + start + t];
    }
    return windows;
}

FoldPlan make_loso_folds(int n_subjects) {
    check(n_subjects >= 1, "make_loso_folds: need at least one subject");
    FoldPlan plan;
    for (int s = 0; s < n_subjects; ++s) {
        FoldPlan::Fold f;
        f.test_subject = s;
        for (int t = 0; t < n_subjects; ++t)
            if (t != s) f.train_subjects.push_back(t);
        if (f.train_subjects.empty()) plan.degenerate = true;
        plan.folds.push_back(std::move(f));
    }
    return plan;
}

Dataset build_dataset(const SignalConfig& cfg, const std::vector<PreferenceProfile>& profiles) {
    check((int)profiles.size() == cfg.n_subjects, "build_dataset: ", profiles.size(),
          " profiles for ", cfg.n_subjects, " subjects");
    Dataset ds;
    ds.cfg = cfg;
    ds.profiles = profiles;
    ds.samples.reserve((size_t)cfg.n_subjects * kSamplesPerSubject);
    for (int subj = 0; subj < cfg.n_subjects; ++subj) {
        const PreferenceProfile& prof = profiles[subj];
        check(prof.subject_id == subj, "build_dataset: profile ", subj, " has subject_id ",
              prof.subject_id);
        for (int odor = 0; odor < kOdors; ++odor) {
            int label = prof.preference[odor];
            for (int par = 0; par < kParallels; ++par) {
                EegRecording rec = synth_eeg(cfg, odor, subj, par, prof);
                auto filtered = bandpass(rec.samples, kEegChannels, kEegRate);
                auto down = downsample2(filtered, kEegChannels);
                auto windows = window_samples(down, kEegChannels);
                for (int rep = 0; rep < kWindowsPerParallel; ++rep) {
                    EnoseRecording er = synth_enose(cfg, odor, subj, par, rep);
                    MultimodalSample s;
                    s.eeg = std::move(windows[rep]);
                    s.enose.resize(er.conductivity.size());
                    for (size_t i = 0; i < er.conductivity.size(); ++i)
                        s.enose[i] = (float)er.conductivity[i];
                    s.subject_id = subj;
                    s.odor_id = odor;
                    s.label = label;
                    ds.samples.push_back(std::move(s));
                }
            }
        }
    }
    ds.folds = make_loso_folds(cfg.n_subjects);
    return ds;
}

Dataset build_dataset(const SignalConfig& cfg) {
    return build_dataset(cfg, default_profiles(cfg.n_subjects, cfg.minority_count));
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

void save_dataset(const Dataset& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    std::vector<NamedTensorRecord> tensors;
    tensors.reserve(ds.samples.size() * 2);
    nlohmann::json meta = nlohmann::json::array();
    for (size_t i = 0; i < ds.samples.size(); ++i) {
        const auto& s = ds.samples[i];
        std::string base = "s" + std::to_string(i);
        tensors.push_back({base + "/eeg", {kEegChannels, kWindowLen},
                           s.eeg});
        tensors.push_back({base + "/enose", {kEnoseSensors, kEnoseLen}, s.enose});
        meta.push_back({{"subject", s.subject_id}, {"odor", s.odor_id}, {"label", s.label}});
    }
    write_bmft(dir + "/dataset.bmft", tensors);

    nlohmann::json profiles = nlohmann::json::array();
    for (const auto& p : ds.profiles)
        profiles.push_back({{"subject", p.subject_id}, {"preference", p.preference}});

    nlohmann::json manifest{
        {"seed", ds.cfg.seed},
        {"n_subjects", ds.cfg.n_subjects},
        {"minority_count", ds.cfg.minority_count},
        {"odors", kOdors},
        {"parallels", kParallels},
        {"windows_per_parallel", kWindowsPerParallel},
        {"sample_count", ds.samples.size()},
        {"tensor_file", "dataset.bmft"},
        {"profiles", profiles},
        {"samples", meta},
        {"generator",
         {{"enose_noise", ds.cfg.enose_noise},
          {"odor_amp", ds.cfg.odor_amp},
          {"pref_amp", ds.cfg.pref_amp},
          {"noise_amp", ds.cfg.noise_amp},
          {"subject_mix", ds.cfg.subject_mix}}},
    };
    std::ofstream out(dir + "/manifest.json");
    check(out.good(), "save_dataset: cannot write manifest in ", dir);
    out << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream in(dir + "/manifest.json");
    check(in.good(), "load_dataset: missing manifest in ", dir);
    nlohmann::json manifest = nlohmann::json::parse(in);

    Dataset ds;
    ds.cfg.seed = manifest.at("seed").get<uint64_t>();
    ds.cfg.n_subjects = manifest.at("n_subjects").get<int>();
    ds.cfg.minority_count = manifest.at("minority_count").get<int>();
    if (manifest.contains("generator")) {
        const auto& g = manifest["generator"];
        ds.cfg.enose_noise = g.value("enose_noise", ds.cfg.enose_noise);
        ds.cfg.odor_amp = g.value("odor_amp", ds.cfg.odor_amp);
        ds.cfg.pref_amp = g.value("pref_amp", ds.cfg.pref_amp);
        ds.cfg.noise_amp = g.value("noise_amp", ds.cfg.noise_amp);
        ds.cfg.subject_mix = g.value("subject_mix", ds.cfg.subject_mix);
    }
    for (const auto& p : manifest.at("profiles")) {
        PreferenceProfile prof;
        prof.subject_id = p.at("subject").get<int>();
        auto pref = p.at("preference");
        for (int i = 0; i < kOdors; ++i) prof.preference[i] = pref.at(i).get<int>();
        ds.profiles.push_back(prof);
    }

    auto records = read_bmft(dir + "/" + manifest.at("tensor_file").get<std::string>());
    std::unordered_map<std::string, const NamedTensorRecord*> by_name;
    for (const auto& r : records) by_name[r.name] = &r;

    const auto& meta = manifest.at("samples");
    ds.samples.resize(meta.size());
    for (size_t i = 0; i < meta.size(); ++i) {
        MultimodalSample& s = ds.samples[i];
        s.subject_id = meta[i].at("subject").get<int>();
        s.odor_id = meta[i].at("odor").get<int>();
        s.label = meta[i].at("label").get<int>();
        std::string base = "s" + std::to_string(i);
        auto eeg = by_name.find(base + "/eeg");
        auto enose = by_name.find(base + "/enose");
        check(eeg != by_name.end() && enose != by_name.end(),
              "load_dataset: missing tensors for sample ", i);
        s.eeg = eeg->second->data;
        s.enose = enose->second->data;
    }
    ds.folds = make_loso_folds(ds.cfg.n_subjects);
    return ds;
}

void write_enose_csv(const EnoseRecording& rec, const std::string& path) {
    std::ofstream out(path);
    check(out.good(), "write_enose_csv: cannot open ", path);
    for (int s = 0; s < kEnoseSensors; ++s) out << (s ? "," : "") << "sensor_" << (s + 1);
    out << "\n";
    for (int t = 0; t < kEnoseLen; ++t) {
        for (int s = 0; s < kEnoseSensors; ++s)
            out << (s ? "," : "") << rec.conductivity[s * kEnoseLen + t];
        out << "\n";
    }
}

}  // namespace bmf::signals

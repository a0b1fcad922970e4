#include "stfusion/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "stfusion/errors.hpp"
#include "stfusion/random.hpp"

namespace stf {

std::string to_string(SynthMode mode) {
    switch (mode) {
        case SynthMode::spatial_only: return "spatial_only";
        case SynthMode::temporal_only: return "temporal_only";
        case SynthMode::mixed: return "mixed";
    }
    return "?";
}

SynthMode parse_synth_mode(const std::string& name) {
    if (name == "spatial_only") return SynthMode::spatial_only;
    if (name == "temporal_only") return SynthMode::temporal_only;
    if (name == "mixed") return SynthMode::mixed;
    throw ConfigError("data.mode: unknown mode '" + name + "' (spatial_only, temporal_only, mixed)");
}

// ---------------------------------------------------------------------------
// Glyphs and profiles

namespace {

using Glyph = std::array<std::uint8_t, 25>;

// clang-format off
const std::array<Glyph, 10> kClassGlyphs = {{
    {0,0,1,0,0, 0,0,1,0,0, 0,0,1,0,0, 0,0,1,0,0, 0,0,1,0,0},  // vertical bar
    {0,0,0,0,0, 0,0,0,0,0, 1,1,1,1,1, 0,0,0,0,0, 0,0,0,0,0},  // horizontal bar
    {1,0,0,0,0, 0,1,0,0,0, 0,0,1,0,0, 0,0,0,1,0, 0,0,0,0,1},  // diagonal
    {0,0,0,0,1, 0,0,0,1,0, 0,0,1,0,0, 0,1,0,0,0, 1,0,0,0,0},  // anti-diagonal
    {1,1,1,1,1, 1,0,0,0,1, 1,0,0,0,1, 1,0,0,0,1, 1,1,1,1,1},  // ring
    {1,0,0,0,1, 0,1,0,1,0, 0,0,1,0,0, 0,1,0,1,0, 1,0,0,0,1},  // cross
    {1,1,1,1,1, 0,0,1,0,0, 0,0,1,0,0, 0,0,1,0,0, 0,0,1,0,0},  // tee
    {1,0,0,0,0, 1,0,0,0,0, 1,0,0,0,0, 1,0,0,0,0, 1,1,1,1,1},  // ell
    {1,0,1,0,1, 0,1,0,1,0, 1,0,1,0,1, 0,1,0,1,0, 1,0,1,0,1},  // checker
    {0,0,0,0,0, 0,1,1,1,0, 0,1,1,1,0, 0,1,1,1,0, 0,0,0,0,0},  // block
}};
const Glyph kNeutralGlyph = {0,0,1,0,0, 0,0,1,0,0, 1,1,1,1,1, 0,0,1,0,0, 0,0,1,0,0};  // plus
// clang-format on

constexpr double kGlyphAmplitude = 0.5;
constexpr double kSpatialLevel = 0.5;

std::size_t factorial_capped(std::size_t n, std::size_t cap) {
    std::size_t f = 1;
    for (std::size_t i = 2; i <= n && f <= cap; ++i) f *= i;
    return f;
}

std::vector<std::size_t> profile_permutation(std::size_t index, std::size_t frames) {
    std::vector<std::size_t> perm(frames);
    for (std::size_t t = 0; t < frames; ++t) perm[t] = t;
    if (index == 0) return perm;
    if (index == 1) {
        std::reverse(perm.begin(), perm.end());
        return perm;
    }
    // Rise then fall: even levels ascending, odd levels descending.
    std::vector<std::size_t> arch;
    for (std::size_t t = 0; t < frames; t += 2) arch.push_back(t);
    for (std::size_t t = frames; t-- > 0;) {
        if (t % 2 == 1) arch.push_back(t);
    }
    if (index == 2) return arch;
    if (index == 3) {
        for (auto& v : arch) v = frames - 1 - v;
        return arch;
    }
    // Further classes: fixed pseudo-random permutations distinct from all
    // lower-indexed ones.
    std::set<std::vector<std::size_t>> seen;
    for (std::size_t k = 0; k < std::min<std::size_t>(index, 4); ++k) seen.insert(profile_permutation(k, frames));
    Rng rng(0x57F0u, 0);
    std::vector<std::size_t> current;
    for (std::size_t k = 4; k <= index;) {
        current = perm;
        for (std::size_t i = frames; i > 1; --i) std::swap(current[i - 1], current[rng.below(i)]);
        if (seen.insert(current).second) ++k;
    }
    return current;
}

}  // namespace

std::size_t glyph_count() { return kClassGlyphs.size(); }

const std::array<std::uint8_t, 25>& class_glyph(std::size_t index) { return kClassGlyphs.at(index); }

const std::array<std::uint8_t, 25>& neutral_glyph() { return kNeutralGlyph; }

std::vector<double> temporal_profile(std::size_t index, std::size_t frames) {
    const auto perm = profile_permutation(index, frames);
    std::vector<double> profile(frames);
    for (std::size_t t = 0; t < frames; ++t) {
        profile[t] = 0.2 + 0.6 * static_cast<double>(perm[t]) / static_cast<double>(frames - 1);
    }
    return profile;
}

// ---------------------------------------------------------------------------
// Spec

void SynthSpec::validate() const {
    if (classes < 2) throw ConfigError("data.classes must be at least 2");
    if (clips_per_class < 1) throw ConfigError("data.clips_per_class must be at least 1");
    if (clip_shape.channels < 1 || clip_shape.time < 1) throw ConfigError("data.clip_shape: C and T must be positive");
    if (clip_shape.height < kGlyphSize || clip_shape.width < kGlyphSize) {
        throw ConfigError("data.clip_shape: H and W must be at least " + std::to_string(kGlyphSize));
    }
    if (!(noise_sigma >= 0.0)) throw ConfigError("data.noise_sigma must be non-negative");
    std::size_t spatial = 1, temporal = 1;
    switch (mode) {
        case SynthMode::spatial_only: spatial = classes; break;
        case SynthMode::temporal_only: temporal = classes; break;
        case SynthMode::mixed: std::tie(spatial, temporal) = mixed_factors(); break;
    }
    if (mode != SynthMode::spatial_only && clip_shape.time < 4) {
        throw ConfigError("data.clip_shape: T must be at least 4 for temporal modes");
    }
    if (spatial > glyph_count()) {
        throw ConfigError("data.classes: at most " + std::to_string(glyph_count()) + " spatial classes available");
    }
    if (temporal > factorial_capped(clip_shape.time, temporal)) {
        throw ConfigError("data.classes: T=" + std::to_string(clip_shape.time) + " frames cannot encode " +
                          std::to_string(temporal) + " distinct temporal profiles");
    }
}

std::pair<std::size_t, std::size_t> SynthSpec::mixed_factors() const {
    std::size_t ks = 1;
    for (std::size_t d = 2; d * d <= classes; ++d) {
        if (classes % d == 0) ks = d;
    }
    if (ks < 2) {
        throw ConfigError("data.classes: mixed mode needs classes = k_s * k_t with both factors >= 2, got " +
                          std::to_string(classes));
    }
    return {ks, classes / ks};
}

nlohmann::json SynthSpec::to_json() const {
    return {{"mode", to_string(mode)},
            {"classes", classes},
            {"clips_per_class", clips_per_class},
            {"clip_shape", {clip_shape.channels, clip_shape.time, clip_shape.height, clip_shape.width}},
            {"noise_sigma", noise_sigma}};
}

SynthSpec SynthSpec::from_json(const nlohmann::json& j) {
    SynthSpec s;
    s.mode = parse_synth_mode(j.at("mode").get<std::string>());
    s.classes = j.at("classes").get<std::size_t>();
    s.clips_per_class = j.at("clips_per_class").get<std::size_t>();
    const auto shape = j.at("clip_shape").get<std::vector<std::size_t>>();
    if (shape.size() != 4) throw ConfigError("data.clip_shape must list C, T, H, W");
    s.clip_shape = {shape[0], shape[1], shape[2], shape[3]};
    s.noise_sigma = j.at("noise_sigma").get<double>();
    return s;
}

// ---------------------------------------------------------------------------
// Generation

ClipShape ClipDataset::clip_shape() const { return {clips.dim(1), clips.dim(2), clips.dim(3), clips.dim(4)}; }

std::size_t ClipDataset::num_classes() const {
    if (manifest.contains("spec")) return manifest["spec"].at("classes").get<std::size_t>();
    int mx = 0;
    for (int l : labels) mx = std::max(mx, l);
    return static_cast<std::size_t>(mx) + 1;
}

ClipDataset generate_synthetic(const SynthSpec& spec, std::uint64_t seed) {
    spec.validate();
    const auto& cs = spec.clip_shape;
    const std::size_t n = spec.classes * spec.clips_per_class;
    const std::size_t plane = cs.height * cs.width;
    std::vector<double> values(n * cs.volume());
    std::vector<int> labels(n);

    std::size_t temporal_classes = 1;
    if (spec.mode == SynthMode::temporal_only) temporal_classes = spec.classes;
    if (spec.mode == SynthMode::mixed) temporal_classes = spec.mixed_factors().second;

    Rng rng(seed);
    std::vector<double> stamp(plane);
    for (std::size_t c = 0; c < spec.classes; ++c) {
        std::size_t spatial_idx = 0, temporal_idx = 0;
        switch (spec.mode) {
            case SynthMode::spatial_only: spatial_idx = c; break;
            case SynthMode::temporal_only: temporal_idx = c; break;
            case SynthMode::mixed:
                spatial_idx = c / temporal_classes;
                temporal_idx = c % temporal_classes;
                break;
        }
        const Glyph& glyph = spec.mode == SynthMode::temporal_only ? kNeutralGlyph : kClassGlyphs[spatial_idx];
        const std::vector<double> profile = spec.mode == SynthMode::spatial_only
                                                 ? std::vector<double>(cs.time, kSpatialLevel)
                                                 : temporal_profile(temporal_idx, cs.time);
        for (std::size_t k = 0; k < spec.clips_per_class; ++k) {
            const std::size_t idx = c * spec.clips_per_class + k;
            labels[idx] = static_cast<int>(c);
            const std::size_t y0 = rng.below(cs.height - kGlyphSize + 1);
            const std::size_t x0 = rng.below(cs.width - kGlyphSize + 1);
            std::fill(stamp.begin(), stamp.end(), 0.0);
            double on = 0.0;
            for (std::size_t gy = 0; gy < kGlyphSize; ++gy) {
                for (std::size_t gx = 0; gx < kGlyphSize; ++gx) {
                    if (glyph[gy * kGlyphSize + gx]) {
                        stamp[(y0 + gy) * cs.width + x0 + gx] = 1.0;
                        on += 1.0;
                    }
                }
            }
            const double mean_stamp = on / static_cast<double>(plane);
            double* clip = values.data() + idx * cs.volume();
            for (std::size_t ch = 0; ch < cs.channels; ++ch) {
                for (std::size_t t = 0; t < cs.time; ++t) {
                    double* frame = clip + (ch * cs.time + t) * plane;
                    for (std::size_t p = 0; p < plane; ++p) {
                        double v = profile[t] + kGlyphAmplitude * (stamp[p] - mean_stamp);
                        if (spec.noise_sigma > 0.0) v += rng.normal(0.0, spec.noise_sigma);
                        frame[p] = static_cast<double>(static_cast<float>(v));
                    }
                }
            }
        }
    }
    ClipDataset data;
    data.clips = Tensor::from({n, cs.channels, cs.time, cs.height, cs.width}, std::move(values));
    data.labels = std::move(labels);
    data.manifest = {{"spec", spec.to_json()}, {"seed", seed}, {"split", "full"}};
    return data;
}

// ---------------------------------------------------------------------------
// Split, subset, batching

ClipDataset subset(const ClipDataset& data, std::span<const std::size_t> indices, const std::string& tag) {
    Batch b = gather(data, indices);
    ClipDataset out;
    out.clips = b.clips;
    out.labels = std::move(b.labels);
    out.manifest = data.manifest;
    out.manifest["split"] = tag;
    return out;
}

std::pair<ClipDataset, ClipDataset> split(const ClipDataset& data, double train_frac, std::uint64_t seed) {
    if (!(train_frac > 0.0 && train_frac < 1.0)) {
        throw ContractError("split: train_frac must lie in (0, 1), got " + std::to_string(train_frac));
    }
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);
    Rng rng(seed, 0x5B17);
    std::vector<std::size_t> train, val;
    for (auto& [label, idx] : by_class) {
        if (idx.size() < 2) {
            throw ContractError("split: class " + std::to_string(label) + " has " + std::to_string(idx.size()) +
                                " clip(s); at least 2 are needed");
        }
        for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
        auto n_train = static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(idx.size())));
        n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
        train.insert(train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
        val.insert(val.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    }
    std::sort(train.begin(), train.end());
    std::sort(val.begin(), val.end());
    auto tr = subset(data, train, "train");
    auto va = subset(data, val, "val");
    for (auto* d : {&tr, &va}) {
        d->manifest["split_seed"] = seed;
        d->manifest["train_frac"] = train_frac;
    }
    return {std::move(tr), std::move(va)};
}

Batch gather(const ClipDataset& data, std::span<const std::size_t> indices) {
    const ClipShape cs = data.clip_shape();
    const std::size_t vol = cs.volume();
    std::vector<double> values(indices.size() * vol);
    std::vector<int> labels(indices.size());
    const double* src = data.clips.data().data();
    for (std::size_t k = 0; k < indices.size(); ++k) {
        if (indices[k] >= data.size()) throw IndexError("gather: index " + std::to_string(indices[k]) + " out of range");
        std::copy(src + indices[k] * vol, src + (indices[k] + 1) * vol, values.data() + k * vol);
        labels[k] = data.labels[indices[k]];
    }
    Batch b;
    b.clips = Tensor::from({indices.size(), cs.channels, cs.time, cs.height, cs.width}, std::move(values));
    b.labels = std::move(labels);
    return b;
}

BatchIterator::BatchIterator(const ClipDataset& data, std::size_t batch_size, std::uint64_t seed, std::size_t epoch)
    : data_(&data), batch_size_(batch_size) {
    if (batch_size == 0) throw ContractError("batches: batch_size must be at least 1");
    order_.resize(data.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    Rng rng(seed, 0xBA7C0000u + epoch);
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.below(i)]);
}

std::optional<Batch> BatchIterator::next() {
    if (cursor_ >= order_.size()) return std::nullopt;
    const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
    std::span<const std::size_t> idx(order_.data() + cursor_, end - cursor_);
    cursor_ = end;
    return gather(*data_, idx);
}

std::vector<Batch> sequential_batches(const ClipDataset& data, std::size_t batch_size) {
    if (batch_size == 0) throw ContractError("batches: batch_size must be at least 1");
    std::vector<Batch> out;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        idx.clear();
        for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
        out.push_back(gather(data, idx));
    }
    return out;
}

// ---------------------------------------------------------------------------
// STFD file format (little endian)

namespace {

constexpr char kMagic[4] = {'S', 'T', 'F', 'D'};
constexpr std::uint32_t kVersion = 1;

template <class T>
T swap_bytes(T value) {
    char b[sizeof(T)];
    std::memcpy(b, &value, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&value, b, sizeof(T));
    return value;
}

template <class T>
void put(std::string& out, T value) {
    if constexpr (std::endian::native == std::endian::big) value = swap_bytes(value);
    char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    out.append(bytes, sizeof(T));
}

class Reader {
public:
    explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

    template <class T>
    T get() {
        need(sizeof(T));
        T value;
        std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        if constexpr (std::endian::native == std::endian::big) value = swap_bytes(value);
        return value;
    }
    std::string take(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw FormatError("dataset file truncated at byte " + std::to_string(pos_));
    }
    std::string bytes_;
    std::size_t pos_ = 0;
};

std::uint32_t checked_u32(std::size_t v, const char* what) {
    if (v > 0xFFFFFFFFull) throw FormatError(std::string("dataset ") + what + " exceeds uint32");
    return static_cast<std::uint32_t>(v);
}

}  // namespace

void save_dataset(const ClipDataset& data, const std::filesystem::path& path) {
    const ClipShape cs = data.clip_shape();
    std::string out(kMagic, 4);
    put<std::uint32_t>(out, kVersion);
    for (std::size_t v : {data.size(), cs.channels, cs.time, cs.height, cs.width}) put<std::uint32_t>(out, checked_u32(v, "extent"));
    for (double v : data.clips.data()) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    for (int l : data.labels) put<std::uint32_t>(out, static_cast<std::uint32_t>(l));
    const std::string manifest = data.manifest.dump();
    put<std::uint32_t>(out, checked_u32(manifest.size(), "manifest"));
    out += manifest;

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open '" + path.string() + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw FormatError("failed writing '" + path.string() + "'");
}

ClipDataset load_dataset(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open dataset '" + path.string() + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r(std::move(bytes));
    if (r.take(4) != std::string(kMagic, 4)) throw FormatError("'" + path.string() + "' is not an STFD dataset");
    const auto version = r.get<std::uint32_t>();
    if (version != kVersion) throw FormatError("unsupported STFD version " + std::to_string(version));
    std::size_t dims[5];
    for (auto& d : dims) d = r.get<std::uint32_t>();
    const std::size_t count = dims[0] * dims[1] * dims[2] * dims[3] * dims[4];
    std::vector<double> values(count);
    for (auto& v : values) v = static_cast<double>(std::bit_cast<float>(r.get<std::uint32_t>()));
    std::vector<int> labels(dims[0]);
    for (auto& l : labels) l = static_cast<int>(r.get<std::uint32_t>());
    const auto len = r.get<std::uint32_t>();
    const std::string manifest = r.take(len);
    if (!r.done()) throw FormatError("trailing bytes after STFD manifest");

    ClipDataset data;
    try {
        data.manifest = nlohmann::json::parse(manifest);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("STFD manifest: ") + e.what());
    }
    if (dims[0] == 0) throw FormatError("STFD dataset holds no clips");
    data.clips = Tensor::from({dims[0], dims[1], dims[2], dims[3], dims[4]}, std::move(values));
    data.labels = std::move(labels);
    return data;
}

}  // namespace stf

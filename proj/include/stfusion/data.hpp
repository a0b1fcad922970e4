#pragma once

// Synthetic labelled video clips with controllable spatial / temporal class
// structure, plus the STFD file format and batching.
//
// Every frame is   profile[t] + 0.5 * (glyph(x) - mean(glyph)) + noise
// so the frame mean is the temporal profile value and the glyph carries the
// spatial content.
//   spatial_only   class picks the glyph; profile is constant 0.5
//   temporal_only  fixed neutral glyph; class picks a permutation of T
//                  evenly spaced levels in [0.2, 0.8]
//   mixed          label = spatial_index * k_t + temporal_index

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stfusion/clip_shape.hpp"
#include "stfusion/tensor.hpp"

namespace stf {

enum class SynthMode { spatial_only, temporal_only, mixed };

std::string to_string(SynthMode mode);
SynthMode parse_synth_mode(const std::string& name);

struct SynthSpec {
    SynthMode mode = SynthMode::mixed;
    std::size_t classes = 4;
    std::size_t clips_per_class = 64;
    ClipShape clip_shape{};
    double noise_sigma = 0.05;

    // Throws ConfigError naming the violated constraint.
    void validate() const;
    // Mixed-mode factorization classes = k_s * k_t with k_s <= k_t.
    std::pair<std::size_t, std::size_t> mixed_factors() const;

    nlohmann::json to_json() const;
    static SynthSpec from_json(const nlohmann::json& j);
};

inline constexpr std::size_t kGlyphSize = 5;
// Number of distinct class glyphs available for spatial labelling.
std::size_t glyph_count();
// 5x5 row-major 0/1 mask of class glyph `index`.
const std::array<std::uint8_t, 25>& class_glyph(std::size_t index);
const std::array<std::uint8_t, 25>& neutral_glyph();

// Intensity per frame for temporal class `index` (a permutation of the levels).
std::vector<double> temporal_profile(std::size_t index, std::size_t frames);

struct ClipDataset {
    Tensor clips;  // N x C x T x H x W
    std::vector<int> labels;
    nlohmann::json manifest;

    std::size_t size() const { return labels.size(); }
    ClipShape clip_shape() const;
    std::size_t num_classes() const;
};

ClipDataset generate_synthetic(const SynthSpec& spec, std::uint64_t seed);

// Stratified, disjoint split; each class keeps at least one clip per side.
std::pair<ClipDataset, ClipDataset> split(const ClipDataset& data, double train_frac, std::uint64_t seed);

// Subset in the given index order.
ClipDataset subset(const ClipDataset& data, std::span<const std::size_t> indices, const std::string& tag);

void save_dataset(const ClipDataset& data, const std::filesystem::path& path);
ClipDataset load_dataset(const std::filesystem::path& path);

struct Batch {
    Tensor clips;
    std::vector<int> labels;
};

// Visits a per-epoch permutation keyed by (seed, epoch); the last batch may
// be partial.
class BatchIterator {
public:
    BatchIterator(const ClipDataset& data, std::size_t batch_size, std::uint64_t seed, std::size_t epoch);
    std::optional<Batch> next();
    const std::vector<std::size_t>& order() const { return order_; }

private:
    const ClipDataset* data_;
    std::size_t batch_size_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

// Sequential batches without shuffling.
std::vector<Batch> sequential_batches(const ClipDataset& data, std::size_t batch_size);

Batch gather(const ClipDataset& data, std::span<const std::size_t> indices);

}  // namespace stf

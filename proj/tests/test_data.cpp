#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "stfusion/data.hpp"
#include "stfusion/errors.hpp"

using namespace stf;

namespace {

SynthSpec small_spec(SynthMode mode, std::size_t classes, std::size_t per_class, double noise = 0.0) {
    SynthSpec s;
    s.mode = mode;
    s.classes = classes;
    s.clips_per_class = per_class;
    s.clip_shape = {1, 6, 8, 8};
    s.noise_sigma = noise;
    return s;
}

std::map<int, std::size_t> label_counts(const std::vector<int>& labels) {
    std::map<int, std::size_t> m;
    for (int l : labels) ++m[l];
    return m;
}

const double* clip_ptr(const ClipDataset& d, std::size_t i) {
    return d.clips.data().data() + i * d.clip_shape().volume();
}

double frame_mean(const ClipDataset& d, std::size_t i, std::size_t ch, std::size_t t) {
    const ClipShape cs = d.clip_shape();
    const std::size_t plane = cs.height * cs.width;
    const double* f = clip_ptr(d, i) + (ch * cs.time + t) * plane;
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += f[p];
    return s / static_cast<double>(plane);
}

// Thresholds a noiseless frame and reports whether the bright pixels form
// `glyph` at some placement.
bool frame_shows_glyph(const ClipDataset& d, std::size_t i, std::size_t t, const std::array<std::uint8_t, 25>& glyph) {
    const ClipShape cs = d.clip_shape();
    const double* f = clip_ptr(d, i) + t * cs.height * cs.width;
    const double m = frame_mean(d, i, 0, t);
    for (std::size_t y0 = 0; y0 + kGlyphSize <= cs.height; ++y0) {
        for (std::size_t x0 = 0; x0 + kGlyphSize <= cs.width; ++x0) {
            bool ok = true;
            for (std::size_t y = 0; y < cs.height && ok; ++y) {
                for (std::size_t x = 0; x < cs.width && ok; ++x) {
                    bool inside = y >= y0 && y < y0 + kGlyphSize && x >= x0 && x < x0 + kGlyphSize;
                    bool on = inside && glyph[(y - y0) * kGlyphSize + (x - x0)];
                    ok = (f[y * cs.width + x] > m) == on;
                }
            }
            if (ok) return true;
        }
    }
    return false;
}

std::filesystem::path temp_file(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("stfusion_test_data_" + name);
}

}  // namespace

TEST_CASE("generation counts and balanced labels") {
    auto d = generate_synthetic(small_spec(SynthMode::temporal_only, 2, 10), 3);
    CHECK(d.size() == 20);
    CHECK(d.clips.shape() == Shape{20, 1, 6, 8, 8});
    auto counts = label_counts(d.labels);
    CHECK(counts.size() == 2);
    CHECK(counts[0] == 10);
    CHECK(counts[1] == 10);
    CHECK(d.num_classes() == 2);

    for (auto mode : {SynthMode::spatial_only, SynthMode::mixed}) {
        auto e = generate_synthetic(small_spec(mode, 4, 7), 5);
        auto c = label_counts(e.labels);
        CHECK(c.size() == 4);
        for (auto& [label, n] : c) CHECK(n == 7);
    }
}

TEST_CASE("spatial_only frames are identical and carry the class glyph") {
    auto d = generate_synthetic(small_spec(SynthMode::spatial_only, 4, 3), 11);
    const ClipShape cs = d.clip_shape();
    const std::size_t plane = cs.height * cs.width;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double* c = clip_ptr(d, i);
        // Every frame equals the first, so any frame permutation leaves the clip unchanged.
        for (std::size_t t = 1; t < cs.time; ++t) {
            CHECK(std::equal(c, c + plane, c + t * plane));
        }
        const auto label = static_cast<std::size_t>(d.labels[i]);
        CHECK(frame_shows_glyph(d, i, 0, class_glyph(label)));
        for (std::size_t other = 0; other < 4; ++other) {
            if (other != label) CHECK_FALSE(frame_shows_glyph(d, i, 0, class_glyph(other)));
        }
    }
}

TEST_CASE("temporal_only frame means follow the class profile") {
    auto d = generate_synthetic(small_spec(SynthMode::temporal_only, 4, 3), 13);
    const ClipShape cs = d.clip_shape();
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto profile = temporal_profile(static_cast<std::size_t>(d.labels[i]), cs.time);
        for (std::size_t t = 0; t < cs.time; ++t) {
            CHECK(std::abs(frame_mean(d, i, 0, t) - profile[t]) < 1e-6);
            CHECK(frame_shows_glyph(d, i, t, neutral_glyph()));
        }
    }
}

TEST_CASE("temporal profiles are distinct permutations of the same levels") {
    const std::size_t frames = 6;
    std::set<std::vector<double>> seen;
    std::vector<double> levels0 = temporal_profile(0, frames);
    std::sort(levels0.begin(), levels0.end());
    for (std::size_t k = 0; k < 8; ++k) {
        auto p = temporal_profile(k, frames);
        CHECK(seen.insert(p).second);
        std::sort(p.begin(), p.end());
        CHECK(p == levels0);
    }
    CHECK(levels0.front() == doctest::Approx(0.2));
    CHECK(levels0.back() == doctest::Approx(0.8));
}

TEST_CASE("mixed labels combine spatial and temporal indices") {
    auto spec = small_spec(SynthMode::mixed, 4, 2);
    CHECK(spec.mixed_factors() == std::pair<std::size_t, std::size_t>{2, 2});
    auto d = generate_synthetic(spec, 17);
    const ClipShape cs = d.clip_shape();
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto label = static_cast<std::size_t>(d.labels[i]);
        const auto profile = temporal_profile(label % 2, cs.time);
        CHECK(frame_shows_glyph(d, i, 0, class_glyph(label / 2)));
        for (std::size_t t = 0; t < cs.time; ++t) CHECK(std::abs(frame_mean(d, i, 0, t) - profile[t]) < 1e-6);
    }
    CHECK(small_spec(SynthMode::mixed, 6, 1).mixed_factors() == std::pair<std::size_t, std::size_t>{2, 3});
    CHECK(small_spec(SynthMode::mixed, 9, 1).mixed_factors() == std::pair<std::size_t, std::size_t>{3, 3});
    CHECK_THROWS_AS(small_spec(SynthMode::mixed, 5, 1).validate(), ConfigError);
}

TEST_CASE("generation is deterministic in the seed") {
    auto spec = small_spec(SynthMode::mixed, 4, 5, 0.05);
    auto a = generate_synthetic(spec, 21);
    auto b = generate_synthetic(spec, 21);
    auto c = generate_synthetic(spec, 22);
    CHECK(std::ranges::equal(a.clips.data(), b.clips.data()));
    CHECK(a.labels == b.labels);
    CHECK(a.manifest == b.manifest);
    CHECK_FALSE(std::ranges::equal(a.clips.data(), c.clips.data()));
}

TEST_CASE("noise has the requested scale") {
    // Clean spatial_only frames are identical, so frame differences are pure
    // noise with variance 2 sigma^2.
    auto d = generate_synthetic(small_spec(SynthMode::spatial_only, 2, 20, 0.1), 9);
    const ClipShape cs = d.clip_shape();
    const std::size_t plane = cs.height * cs.width;
    double s = 0.0, ss = 0.0, n = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double* c = clip_ptr(d, i);
        for (std::size_t t = 1; t < cs.time; ++t) {
            for (std::size_t p = 0; p < plane; ++p) {
                const double diff = c[t * plane + p] - c[p];
                s += diff;
                ss += diff * diff;
                n += 1.0;
            }
        }
    }
    CHECK(std::abs(s / n) < 0.01);
    CHECK(std::sqrt(ss / n / 2.0) == doctest::Approx(0.1).epsilon(0.05));
}

TEST_CASE("spec validation") {
    auto bad = [](auto mutate) {
        SynthSpec s = small_spec(SynthMode::mixed, 4, 2);
        mutate(s);
        return s;
    };
    CHECK_THROWS_AS(bad([](SynthSpec& s) { s.classes = 1; }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](SynthSpec& s) { s.clips_per_class = 0; }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](SynthSpec& s) { s.clip_shape.height = 4; }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](SynthSpec& s) { s.clip_shape.time = 3; }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](SynthSpec& s) { s.noise_sigma = -0.1; }).validate(), ConfigError);
    CHECK_THROWS_AS(bad([](SynthSpec& s) {
                        s.mode = SynthMode::spatial_only;
                        s.classes = glyph_count() + 1;
                    }).validate(),
                    ConfigError);
    CHECK_THROWS_AS(bad([](SynthSpec& s) {
                        s.mode = SynthMode::temporal_only;
                        s.clip_shape.time = 4;
                        s.classes = 25;
                    }).validate(),
                    ConfigError);
    CHECK_NOTHROW(bad([](SynthSpec& s) {
                      s.mode = SynthMode::temporal_only;
                      s.clip_shape.time = 4;
                      s.classes = 24;
                  }).validate());
    CHECK_NOTHROW(bad([](SynthSpec& s) {
                      s.mode = SynthMode::spatial_only;
                      s.clip_shape.time = 1;
                  }).validate());
    CHECK_THROWS_AS(parse_synth_mode("both"), ConfigError);
    CHECK_THROWS_AS(generate_synthetic(bad([](SynthSpec& s) { s.classes = 1; }), 1), ConfigError);

    auto s = small_spec(SynthMode::temporal_only, 3, 4, 0.02);
    auto r = SynthSpec::from_json(s.to_json());
    CHECK(r.mode == s.mode);
    CHECK(r.classes == s.classes);
    CHECK(r.clips_per_class == s.clips_per_class);
    CHECK(r.clip_shape == s.clip_shape);
    CHECK(r.noise_sigma == s.noise_sigma);
}

TEST_CASE("stratified split") {
    auto d = generate_synthetic(small_spec(SynthMode::temporal_only, 2, 20), 4);
    auto [tr, va] = split(d, 0.5, 8);
    CHECK(tr.size() == 20);
    CHECK(va.size() == 20);
    CHECK(label_counts(tr.labels) == std::map<int, std::size_t>{{0, 10}, {1, 10}});
    CHECK(label_counts(va.labels) == std::map<int, std::size_t>{{0, 10}, {1, 10}});

    auto e = generate_synthetic(small_spec(SynthMode::temporal_only, 2, 10), 4);
    auto [tr2, va2] = split(e, 0.5, 8);
    CHECK(label_counts(tr2.labels) == std::map<int, std::size_t>{{0, 5}, {1, 5}});
    CHECK(label_counts(va2.labels) == std::map<int, std::size_t>{{0, 5}, {1, 5}});

    // Extreme fractions still leave one clip of each class on either side.
    auto [tr3, va3] = split(e, 0.99, 8);
    CHECK(label_counts(va3.labels) == std::map<int, std::size_t>{{0, 1}, {1, 1}});

    CHECK_THROWS_AS(split(e, 0.0, 1), ContractError);
    CHECK_THROWS_AS(split(e, 1.0, 1), ContractError);
}

TEST_CASE("split is a deterministic partition") {
    auto d = generate_synthetic(small_spec(SynthMode::mixed, 4, 6, 0.05), 2);
    const std::size_t vol = d.clip_shape().volume();
    auto [a_tr, a_va] = split(d, 0.5, 30);
    auto [b_tr, b_va] = split(d, 0.5, 30);
    CHECK(std::ranges::equal(a_tr.clips.data(), b_tr.clips.data()));
    CHECK(std::ranges::equal(a_va.clips.data(), b_va.clips.data()));

    // Every source clip appears exactly once across the two sides.
    std::multiset<std::vector<double>> source, parts;
    for (std::size_t i = 0; i < d.size(); ++i) source.insert({clip_ptr(d, i), clip_ptr(d, i) + vol});
    for (auto* part : {&a_tr, &a_va}) {
        for (std::size_t i = 0; i < part->size(); ++i) parts.insert({clip_ptr(*part, i), clip_ptr(*part, i) + vol});
    }
    CHECK(source == parts);
    CHECK(a_tr.manifest["split"] == "train");
    CHECK(a_va.manifest["split"] == "val");

    auto [c_tr, c_va] = split(d, 0.5, 31);
    CHECK_FALSE(std::ranges::equal(a_tr.clips.data(), c_tr.clips.data()));
}

TEST_CASE("split rejects classes with fewer than two clips") {
    auto d = generate_synthetic(small_spec(SynthMode::spatial_only, 2, 1), 4);
    CHECK_THROWS_AS(split(d, 0.5, 1), ContractError);
}

TEST_CASE("dataset file round trip and size") {
    auto d = generate_synthetic(small_spec(SynthMode::mixed, 4, 3, 0.05), 6);
    const auto path = temp_file("roundtrip.stfd");
    save_dataset(d, path);
    auto r = load_dataset(path);
    CHECK(std::ranges::equal(d.clips.data(), r.clips.data()));
    CHECK(r.clips.shape() == d.clips.shape());
    CHECK(r.labels == d.labels);
    CHECK(r.manifest == d.manifest);

    const std::size_t n = d.size();
    const std::size_t vol = d.clip_shape().volume();
    const std::size_t manifest_len = d.manifest.dump().size();
    CHECK(std::filesystem::file_size(path) == 28 + 4 * n * vol + 4 * n + 4 + manifest_len);
    std::filesystem::remove(path);
}

TEST_CASE("malformed dataset files") {
    auto d = generate_synthetic(small_spec(SynthMode::spatial_only, 2, 2), 6);
    const auto path = temp_file("malformed.stfd");
    save_dataset(d, path);
    const auto full = std::filesystem::file_size(path);

    std::filesystem::resize_file(path, full - 3);
    CHECK_THROWS_AS(load_dataset(path), FormatError);
    std::filesystem::resize_file(path, 10);
    CHECK_THROWS_AS(load_dataset(path), FormatError);

    save_dataset(d, path);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.write("XXXX", 4);
    }
    CHECK_THROWS_AS(load_dataset(path), FormatError);

    save_dataset(d, path);
    {
        std::ofstream f(path, std::ios::app | std::ios::binary);
        f.write("!", 1);
    }
    CHECK_THROWS_AS(load_dataset(path), FormatError);

    std::filesystem::remove(path);
    CHECK_THROWS_AS(load_dataset(path), FormatError);
}

TEST_CASE("batch iterator") {
    auto d = generate_synthetic(small_spec(SynthMode::temporal_only, 2, 5), 3);

    BatchIterator whole(d, 64, 1, 0);
    auto only = whole.next();
    REQUIRE(only);
    CHECK(only->labels.size() == 10);
    CHECK_FALSE(whole.next());

    BatchIterator it(d, 4, 7, 2);
    std::vector<std::size_t> sizes;
    std::vector<int> seen_labels;
    while (auto b = it.next()) {
        sizes.push_back(b->labels.size());
        CHECK(b->clips.shape()[0] == b->labels.size());
        seen_labels.insert(seen_labels.end(), b->labels.begin(), b->labels.end());
    }
    CHECK(sizes == std::vector<std::size_t>{4, 4, 2});
    CHECK(label_counts(seen_labels) == label_counts(d.labels));

    auto order = it.order();
    std::sort(order.begin(), order.end());
    for (std::size_t i = 0; i < order.size(); ++i) CHECK(order[i] == i);

    CHECK(BatchIterator(d, 4, 7, 2).order() == it.order());
    CHECK(BatchIterator(d, 4, 7, 3).order() != it.order());
    CHECK(BatchIterator(d, 4, 8, 2).order() != it.order());
    CHECK_THROWS_AS(BatchIterator(d, 0, 1, 0), ContractError);

    auto seq = sequential_batches(d, 3);
    CHECK(seq.size() == 4);
    CHECK(seq.back().labels.size() == 1);
    CHECK(std::equal(seq[0].clips.data().begin(), seq[0].clips.data().end(), d.clips.data().begin()));
}

TEST_CASE("gather and subset") {
    auto d = generate_synthetic(small_spec(SynthMode::mixed, 4, 2), 3);
    const std::vector<std::size_t> idx = {5, 0, 5};
    auto s = subset(d, idx, "pick");
    CHECK(s.size() == 3);
    CHECK(s.labels == std::vector<int>{d.labels[5], d.labels[0], d.labels[5]});
    CHECK(s.manifest["split"] == "pick");
    const std::size_t vol = d.clip_shape().volume();
    CHECK(std::equal(clip_ptr(s, 1), clip_ptr(s, 1) + vol, clip_ptr(d, 0)));
    const std::vector<std::size_t> out_of_range = {8};
    CHECK_THROWS_AS(gather(d, out_of_range), IndexError);
}

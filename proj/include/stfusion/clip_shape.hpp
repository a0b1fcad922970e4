#pragma once

#include <cstddef>

namespace stf {

// Per-clip extents (channels, frames, height, width).
struct ClipShape {
    std::size_t channels = 1;
    std::size_t time = 8;
    std::size_t height = 16;
    std::size_t width = 16;

    std::size_t volume() const { return channels * time * height * width; }
    bool operator==(const ClipShape&) const = default;
};

}  // namespace stf

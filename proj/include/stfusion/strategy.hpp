#pragma once

// Fusion strategies as per-layer triplets (l, v, u).
//
// l is the 1-based global layer index, v selects which incoming features the
// layer reads (entry 0 is the input of the layer's dense block, entry i the
// i-th earlier layer of that block), and u is the basic fusion unit or
// "skip" when both branches are off.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace stf {

enum class FusionUnitKind : std::uint8_t { S = 0, ST = 1, S_plus_ST = 2 };

// nullopt encodes a skipped layer.
using LayerUnit = std::optional<FusionUnitKind>;

inline constexpr std::size_t kFusionUnitCount = 3;

std::string_view unit_name(LayerUnit unit);  // "S", "ST", "S+ST", "skip"
LayerUnit parse_unit(std::string_view name);

inline bool uses_s_branch(LayerUnit u) { return u == FusionUnitKind::S || u == FusionUnitKind::S_plus_ST; }
inline bool uses_st_branch(LayerUnit u) { return u == FusionUnitKind::ST || u == FusionUnitKind::S_plus_ST; }

struct LayerTriplet {
    std::size_t l = 1;
    std::vector<bool> v;
    LayerUnit u;

    bool operator==(const LayerTriplet&) const = default;
};

struct FusionStrategy {
    std::vector<LayerTriplet> layers;

    std::size_t depth() const { return layers.size(); }
    bool operator==(const FusionStrategy&) const = default;

    // Every layer uses `unit` and reads all of its inputs.
    static FusionStrategy uniform(std::span<const std::size_t> edge_counts, LayerUnit unit);
    static FusionStrategy from_units(std::span<const std::size_t> edge_counts, std::span<const LayerUnit> units);

    std::vector<LayerUnit> units() const;
    // Throws ContractError when the triplets do not fit `edge_counts`.
    void check_against(std::span<const std::size_t> edge_counts) const;

    nlohmann::json to_json() const;
    std::string to_json_string() const;
    static FusionStrategy from_json(const nlohmann::json& j);
};

// Edge counts of a single dense block of depth L: layer l reads l inputs.
std::vector<std::size_t> single_block_edge_counts(std::size_t depth);

// Strategies reported in earlier work, mapped onto the triplet form:
//   top_heavy        S in the lower half, ST in the upper half
//   bottom_heavy     the reverse
//   mixed_everywhere S+ST at every layer
FusionStrategy strategy_from_literature(std::string_view name, std::span<const std::size_t> edge_counts);
FusionStrategy strategy_from_literature(std::string_view name, std::size_t depth);

}  // namespace stf

#include "stfusion/strategy.hpp"

#include <algorithm>

#include "stfusion/errors.hpp"

namespace stf {

std::string_view unit_name(LayerUnit unit) {
    if (!unit) return "skip";
    switch (*unit) {
        case FusionUnitKind::S: return "S";
        case FusionUnitKind::ST: return "ST";
        case FusionUnitKind::S_plus_ST: return "S+ST";
    }
    return "?";
}

LayerUnit parse_unit(std::string_view name) {
    if (name == "S") return FusionUnitKind::S;
    if (name == "ST") return FusionUnitKind::ST;
    if (name == "S+ST") return FusionUnitKind::S_plus_ST;
    if (name == "skip") return std::nullopt;
    throw FormatError("unknown fusion unit '" + std::string(name) + "' (expected S, ST, S+ST or skip)");
}

FusionStrategy FusionStrategy::uniform(std::span<const std::size_t> edge_counts, LayerUnit unit) {
    std::vector<LayerUnit> units(edge_counts.size(), unit);
    return from_units(edge_counts, units);
}

FusionStrategy FusionStrategy::from_units(std::span<const std::size_t> edge_counts, std::span<const LayerUnit> units) {
    if (edge_counts.size() != units.size()) {
        throw ContractError("from_units: " + std::to_string(units.size()) + " units for " +
                            std::to_string(edge_counts.size()) + " layers");
    }
    FusionStrategy s;
    for (std::size_t i = 0; i < units.size(); ++i) {
        s.layers.push_back({i + 1, std::vector<bool>(edge_counts[i], true), units[i]});
    }
    return s;
}

std::vector<LayerUnit> FusionStrategy::units() const {
    std::vector<LayerUnit> out;
    for (const auto& t : layers) out.push_back(t.u);
    return out;
}

void FusionStrategy::check_against(std::span<const std::size_t> edge_counts) const {
    if (layers.size() != edge_counts.size()) {
        throw ContractError("strategy has " + std::to_string(layers.size()) + " layers, template has " +
                            std::to_string(edge_counts.size()));
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].l != i + 1) {
            throw ContractError("strategy triplet " + std::to_string(i) + " has layer index " +
                                std::to_string(layers[i].l) + ", expected " + std::to_string(i + 1));
        }
        if (layers[i].v.size() != edge_counts[i]) {
            throw ContractError("strategy layer " + std::to_string(i + 1) + " selects over " +
                                std::to_string(layers[i].v.size()) + " inputs, template layer has " +
                                std::to_string(edge_counts[i]));
        }
    }
}

nlohmann::json FusionStrategy::to_json() const {
    nlohmann::json j;
    j["L"] = layers.size();
    auto arr = nlohmann::json::array();
    for (const auto& t : layers) {
        auto v = nlohmann::json::array();
        for (bool b : t.v) v.push_back(b ? 1 : 0);
        arr.push_back({{"l", t.l}, {"v", v}, {"u", std::string(unit_name(t.u))}});
    }
    j["layers"] = arr;
    return j;
}

std::string FusionStrategy::to_json_string() const { return to_json().dump(); }

FusionStrategy FusionStrategy::from_json(const nlohmann::json& j) {
    try {
        FusionStrategy s;
        const auto depth = j.at("L").get<std::size_t>();
        for (const auto& item : j.at("layers")) {
            LayerTriplet t;
            t.l = item.at("l").get<std::size_t>();
            for (const auto& bit : item.at("v")) t.v.push_back(bit.get<int>() != 0);
            t.u = parse_unit(item.at("u").get<std::string>());
            s.layers.push_back(std::move(t));
        }
        if (s.layers.size() != depth) {
            throw FormatError("strategy JSON: L=" + std::to_string(depth) + " but " + std::to_string(s.layers.size()) +
                              " layers listed");
        }
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("strategy JSON: ") + e.what());
    }
}

std::vector<std::size_t> single_block_edge_counts(std::size_t depth) {
    std::vector<std::size_t> counts(depth);
    for (std::size_t i = 0; i < depth; ++i) counts[i] = i + 1;
    return counts;
}

FusionStrategy strategy_from_literature(std::string_view name, std::span<const std::size_t> edge_counts) {
    const std::size_t depth = edge_counts.size();
    std::vector<LayerUnit> units(depth);
    if (name == "top_heavy" || name == "bottom_heavy") {
        for (std::size_t i = 0; i < depth; ++i) units[i] = i < depth / 2 ? FusionUnitKind::S : FusionUnitKind::ST;
        if (name == "bottom_heavy") std::reverse(units.begin(), units.end());
    } else if (name == "mixed_everywhere") {
        std::fill(units.begin(), units.end(), FusionUnitKind::S_plus_ST);
    } else {
        throw ContractError("unknown literature strategy '" + std::string(name) +
                            "'; options: top_heavy, bottom_heavy, mixed_everywhere");
    }
    return FusionStrategy::from_units(edge_counts, units);
}

FusionStrategy strategy_from_literature(std::string_view name, std::size_t depth) {
    const auto counts = single_block_edge_counts(depth);
    return strategy_from_literature(name, counts);
}

}  // namespace stf

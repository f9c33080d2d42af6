#include "kiim/knowledge.hpp"

namespace kiim::knowledge {

// Consolidation tables for the source datasets: raw irrigation subtypes to
// the three standardized methods (or Removed), and 143 raw crop types to the
// 20 crop groups.

namespace {

void add_all(std::map<std::string, std::string>& m, const char* target,
             std::initializer_list<const char*> raws) {
    for (const char* raw : raws) m.emplace(raw, target);
}

LabelMappingTable build_default_tables() {
    LabelMappingTable t;

    add_all(t.irrigation_map, "Sprinkler",
            {"Traveler Sprinkler", "Center Pivot - Tow", "Solid State Sprinkler", "Overhead", "Traveling Gun",
             "Pivot", "Lateral Sprinkler", "Other Sprinkler", "Big Gun", "Wheel Line", "Big Gun/Sprinkler",
             "Sprinkler/Wheel Line", "Center Pivot", "Micro-Sprinkler", "Micro-Bubbler", "Sprinkler & Bubbler",
             "Lateral", "Side Roll", "Center Pivot/Sprinkler", "Center Pivot/Wheel Line", "Big Gun/Wheel Line",
             "Big Gun/Sprinkler/Wheel Line"});
    add_all(t.irrigation_map, "Drip", {"Drip Microirrigation", "Micro-Drip"});
    add_all(t.irrigation_map, "Flood",
            {"Furrow", "Grated_Pipe", "Improved Flood", "Rill", "Hand/Rill", "None/Rill", "Gated_pipe"});
    add_all(t.irrigation_map, "Removed",
            {"Not Specified", "Micro", "Research", "Uncertain", "Drip/None", "Big Gun/Drip", "Drip/Big Gun",
             "Drip/Rill/Sprinkler", "Rill/Sprinkler", "Drip/Micro-Sprinkler", "Drip/Wheel Line",
             "Center Pivot/Rill", "Rill/Wheel Line", "Drip/Rill", "Center Pivot/None",
             "Center Pivot/Rill/Wheel Line", "Center Pivot/Sprinkler/Wheel Line", "Center Pivot/Rill/Sprinkler",
             "Rill/Sprinkler/Wheel Line", "Center Pivot/Drip", "Hand/Sprinkler", "Drip/Sprinkler",
             "Sub-irrigated", "Dry Crop", "Sprinkler And Drip", "Center Pivot/Drip/Sprinkler", "Unknown",
             "Non_irrigated"});

    add_all(t.crop_map, "Alfalfa", {"Alfalfa", "Alfalfa/Barley Mix", "Alfalfa/Grass", "New Alfalfa"});
    add_all(t.crop_map, "Cereals",
            {"Barley", "Barley/Wheat", "Cereal Grain", "Corn", "Durum Wheat", "Grain/Seeds unspecified", "Oats",
             "Rye", "Sorghum", "Speltz", "Spring Wheat", "Triticale", "Wheat", "Winter Wheat", "Corn Grain",
             "Corn Silage", "Small Grains", "Sorghum Grain", "Spring Grain", "Sweet Corn", "Wheat Fall",
             "Wheat Spring", "Field Corn", "Double crop barley/corn", "Double crop winter wheat/corn"});
    add_all(t.crop_map, "Cover Crop", {"Cover Crop", "Green Manure", "Field Crops", "Other Field Crops"});
    add_all(t.crop_map, "Fibres", {"Cotton"});
    add_all(t.crop_map, "Fruits",
            {"Apples", "Apricots", "Berries", "Berry", "Cherries", "Citrus", "Dates", "Fruit Trees", "Grapes",
             "Melon", "Oranges", "Peaches", "Pomegranate", "Citrus Groves", "Fruit"});
    add_all(t.crop_map, "Grass",
            {"Bermuda Grass", "Grass", "Grass Hay", "Hay/Silage", "Idle Pasture", "Other Hay/Non Alfalfa",
             "Pasture", "Pecan/Grass", "Sod", "Turfgrass", "Turfgrass Ag", "Turfgrass Urban", "Grass Pasture",
             "Bluegrass", "Sod Farm", "Grass/Hay/Pasture", "Hay", "Improved Pasture - Irrigated", "Rye Grass",
             "Grassland/Pasture", "Irrigated turf"});
    add_all(t.crop_map, "Green House", {"Greenhouse"});
    add_all(t.crop_map, "Herb Group", {"Flowers", "Herb"});
    add_all(t.crop_map, "Horticulture", {"Horticulture"});
    add_all(t.crop_map, "Nursery", {"Nurseries", "Nursery", "Nursery Trees", "Tree Nurseries", "Tree Nursery"});
    add_all(t.crop_map, "Nuts", {"Almond", "Pecans", "Pistachios", "Walnuts"});
    add_all(t.crop_map, "Oil-bearing crops",
            {"Canola", "Flaxseed", "Jojoba", "Mustard", "OilSeed", "Olives", "Safflower", "Soybeans"});
    add_all(t.crop_map, "Orchard", {"Orchard", "Orchard unspecified", "Orchard With Cover", "Orchard Wo Cover"});
    add_all(t.crop_map, "Pulses", {"Beans", "Dry Beans", "Garbanzo", "Seed", "Peanuts", "Seeds"});
    add_all(t.crop_map, "Roots and Tubers", {"Potato", "Potatoes"});
    add_all(t.crop_map, "Shrub Plants", {"Guayule", "Shrubland"});
    add_all(t.crop_map, "Sugar Crops", {"Sugar Beets", "Sugarbeets", "Sunflower", "Sugar Cane", "Sugar cane"});
    add_all(t.crop_map, "UNK",
            {"Commercial Tree", "Fallow", "Fallow/Idle", "Field Crop unspecified", "Idle", "Not Specified",
             "Other", "Sudan", "Transition", "Trees", "Urban", "Ornamentals", "Research Facility",
             "Research land", "Miscellaneous vegetables and fruits", "Other tree crops"});
    add_all(t.crop_map, "Vegetables",
            {"Flower Bulb", "Lettuce", "Onion", "Pumpkins", "Squash", "Vegetable", "Vegetables", "Watermelons",
             "Eggplant", "Fall Vegetables", "Spring Vegetables", "Vegetables Double Crop", "Cabbage", "Onions",
             "Peppers"});
    add_all(t.crop_map, "Vineyard", {"Vineyard"});

    return t;
}

}  // namespace

const LabelMappingTable& default_mapping_tables() {
    static const LabelMappingTable tables = build_default_tables();
    return tables;
}

}  // namespace kiim::knowledge

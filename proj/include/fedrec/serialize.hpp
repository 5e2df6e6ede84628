#pragma once

#include <cstddef>
#include <string>

#include "fedrec/backbone.hpp"
#include "fedrec/lowrank.hpp"

namespace fedrec {

// Binary adapter format, little-endian: u32 layer count, then per layer
// u32 id length, id bytes, u32 rank, u32 b rows (d_out), u32 a cols (d_in),
// a_mat entries row-major as f64, b_mat entries row-major as f64.
void save_adapters(const AdapterSet& set, const std::string& path);
AdapterSet load_adapters(const std::string& path);
std::size_t adapter_byte_size(const AdapterSet& set);

// Backbone snapshot in the same numeric format, for deterministic replay.
void save_backbone(const BackboneParams& params, const std::string& path);
BackboneParams load_backbone(const std::string& path);

}  // namespace fedrec

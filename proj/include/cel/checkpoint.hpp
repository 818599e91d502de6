#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cel/model.hpp"

namespace cel {

/// Binary layout, all integers little-endian:
///   "CEL1" | u64 N, M, M_q, R, q | M x u32 item assignment
///   | N*R f32 user rows (expanded) | M_q*R f32 item cluster rows
///   | u8 marker (1 = user block follows)
///   [ u64 Mq_u, q_u | N x u32 user assignment | Mq_u*R f32 user cluster rows ]
/// Values are stored as 32-bit floats, so a load rounds the model once.
std::vector<std::uint8_t> encode_checkpoint(const EmbeddingModel& model);

/// Rebuilds a model from encoded bytes. Interaction counts are zero; use
/// attach_counts() to restore them. Throws Error on malformed input.
EmbeddingModel decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const EmbeddingModel& model);
EmbeddingModel load_checkpoint(const std::filesystem::path& path);

/// Replaces the per-entity interaction counts of a table.
void attach_counts(ClusteredTable& table, std::vector<std::size_t> counts);

}  // namespace cel

// On-disk dataset: one JSON object per line for the records, grid features in
// a binary sidecar.
//
// Sidecar layout (little-endian):
//   "GPFEAT1" | config_hash u64 | count u32 | grid_n u32 | dim u32
//   | { record id u32 | payload offset u64 } * count | f32 payload, record-major
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gridpaint/scene.hpp"

namespace gridpaint {

inline constexpr std::string_view kFeatureMagic = "GPFEAT1";

struct SplitPaths {
  std::filesystem::path records;   // .jsonl
  std::filesystem::path features;  // .feat
};

SplitPaths split_paths(const std::filesystem::path& dir, std::string_view split);

void write_split(const SplitPaths& paths, std::span<const DatasetRecord> records,
                 std::uint64_t config_hash);

struct LoadedSplit {
  std::vector<DatasetRecord> records;
  std::uint64_t config_hash = 0;
};

/// Throws io_error when a file is missing and format_error when the two
/// files disagree (ids, counts, config hash).
LoadedSplit read_split(const SplitPaths& paths);

/// Human-readable description of the caption grammar and region convention.
std::string grammar_manifest(const DatasetConfig& config);

std::string record_to_json(const DatasetRecord& r, std::uint64_t config_hash);

}  // namespace gridpaint

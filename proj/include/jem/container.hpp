#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "jem/tensor.hpp"

// Binary container shared by all checkpoint-like files:
//
//   "JEMCKPT\0" | u32 container version | u64 header bytes | JSON header |
//   float64 LE blobs in header["tensors"] order | u64 FNV-1a of all prior bytes
//
// The header always carries "kind", "version" and "tensors" (name + shape).
namespace jem::container {

inline constexpr std::uint32_t kContainerVersion = 1;

struct Contents {
    nlohmann::json header;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor& get(std::string_view name) const;
};

// Writes to a temporary sibling then renames, so an interrupted write never
// leaves a truncated file under the final name.
void write(const std::filesystem::path& path, nlohmann::json header,
           const std::vector<std::pair<std::string, const Tensor*>>& tensors);

// Throws LoadError on bad magic, checksum, kind or version mismatch.
Contents read(const std::filesystem::path& path, std::string_view kind, int version);

std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t seed = 0xCBF29CE484222325ULL);

}  // namespace jem::container

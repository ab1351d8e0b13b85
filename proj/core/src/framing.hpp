#pragma once

#include "json_util.hpp"

#include <filesystem>

namespace xfrn::detail {

// Writes magic + header + 0x00 + blob contents to `<path>.partial`, then
// renames it onto `path`.
void write_framed(const std::filesystem::path& path, const json& header, const std::filesystem::path& blob_path);
std::filesystem::path temp_blob_path(const std::filesystem::path& path);

}  // namespace xfrn::detail

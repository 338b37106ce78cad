#pragma once

#include <string>
#include <utility>
#include <vector>

#include "bitmix/tensor.hpp"

namespace bitmix {

// Writes content to a temp file in the target directory, then renames over
// the destination. Partial outputs never appear under the final name.
void atomic_write_file(const std::string& path, const std::string& content);

// Versioned checkpoint: magic + header JSON (tensor manifest and caller
// metadata) + raw element data in manifest order.
void save_checkpoint(
    const std::string& path,
    const std::vector<std::pair<std::string, TensorPtr>>& tensors,
    const std::string& meta_json = "{}");

// Loads by name into the given tensors; every tensor must be present with a
// matching shape. Returns the stored metadata JSON text.
std::string load_checkpoint(
    const std::string& path,
    const std::vector<std::pair<std::string, TensorPtr>>& tensors);

}  // namespace bitmix

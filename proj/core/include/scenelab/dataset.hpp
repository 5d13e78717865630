#pragma once

#include <string>
#include <vector>

#include "scenelab/manifest.hpp"
#include "scenelab/tensor.hpp"

namespace scenelab {

// Decoded images for a set of manifest rows, index-aligned with the
// request. Corrupt or missing files are skipped with a logged warning and
// counted; everything else keeps its slot.
struct LoadedImages {
  std::vector<Tensor> images;
  std::vector<uint8_t> ok;
  int64_t loaded = 0;
  int64_t skipped = 0;
};

// Resolves relative URIs against base_dir. resize_to > 0 resizes to a
// square of that extent (bilinear).
LoadedImages load_images(const SampleManifest& m,
                         const std::vector<size_t>& row_indices,
                         const std::string& base_dir, int resize_to = 0);

// directory component of a manifest path, for URI resolution
std::string manifest_base_dir(const std::string& manifest_path);

// row indices of a split (mapped rows only)
std::vector<size_t> split_indices(const SampleManifest& m,
                                  const std::string& split);

}  // namespace scenelab

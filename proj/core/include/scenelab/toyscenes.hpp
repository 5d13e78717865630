#pragma once

#include <string>

#include "scenelab/manifest.hpp"
#include "scenelab/rng.hpp"

namespace scenelab {

// Procedural stand-in dataset: each class owns a disjoint slice of hue
// space and a distinct texture program, so classes are separable by
// construction (a nearest-centroid pixel classifier beats chance).
struct ToySceneSpec {
  int classes = 8;
  int image_size = 64;
  int per_class = 120;
  uint64_t seed = 0;
  double train_frac = 0.8;
  double val_frac = 0.1;  // remainder is the test split

  void validate() const;
};

// Renders the images as PNGs under out_dir (one subdirectory per class)
// and returns the manifest with stratified train/val/test splits. URIs are
// relative to out_dir. Byte-identical output for identical specs.
SampleManifest generate_toy_scenes(const ToySceneSpec& spec,
                                   const std::string& out_dir);

// class name used for index c: the indoor-scene names when classes == 8
std::string toy_class_name(int c, int classes);

}  // namespace scenelab

#pragma once

#include <string>
#include <vector>

#include "attnprune/model.hpp"
#include "attnprune/planner.hpp"

namespace attnprune {

// A model plus its pruning history (every applied plan, in order), so any
// pruned checkpoint is auditable back to its original.
struct Checkpoint {
  ToyModel model;
  std::vector<PrunePlan> history;
};

// File layout: "APCK 1" magic/version line, a manifest-length line, the
// plain-text JSON manifest (hyperparameters, per-layer factorizations and
// scales, seeds, pruning history), then the weight payload as row-major
// 64-bit little-endian reals in manifest order. No compression; round-trips
// are bit-exact. Truncated payloads, bad magic and version mismatches are
// rejected without returning a partial model.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Dataset directory: manifest.json plus one binary file per split
// (label + token matrix per sample, 64-bit little-endian).
void save_dataset(const SynthDataset& dataset, const std::string& dir);
SynthDataset load_dataset(const std::string& dir);

}  // namespace attnprune

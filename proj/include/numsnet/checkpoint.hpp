#pragma once

#include <optional>
#include <string>

#include "numsnet/adam.hpp"
#include "numsnet/model.hpp"

namespace numsnet {

// Versioned little-endian binary checkpoint, name-keyed parameter records,
// optional Adam state, trailing FNV-1a 64 checksum. Byte layout documented in
// docs/checkpoint-format.md. Round trips are bit-exact.

struct LoadResult {
    ModelGraph model;
    std::optional<AdamState<float>> optimizer;  // aligned to trainable registry order
};

void save_checkpoint(const ModelGraph& model, const std::string& path,
                     const AdamState<float>* optimizer = nullptr);

// Verifies the checksum before touching any record; a truncated or corrupted
// file raises ChecksumError and no partial model is returned. Version and
// shape problems raise FormatError / ShapeError respectively.
LoadResult load_checkpoint(const std::string& path);

// New model with the final 1x1 head (and any auxiliary heads) re-initialized
// for new_num_classes; every other parameter copied bit-exactly. The head
// init is seeded.
ModelGraph transfer_adapt(const ModelGraph& source, int new_num_classes, std::uint64_t seed = 0);

}  // namespace numsnet

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace numsnet {

// All library errors derive from Error so callers can catch one base type.
// Messages name the offending axis / slice / file where that is knowable.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct ValueError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Checkpoint-specific failures kept distinct so tests and callers can tell
// a corrupted file from a format revision from a wrong-architecture file.
struct ChecksumError : IoError {
    using IoError::IoError;
};

struct FormatError : IoError {
    using IoError::IoError;
};

enum class Mode { train, infer };

enum class Padding { same, valid };

inline const char* mode_name(Mode m) { return m == Mode::train ? "train" : "infer"; }

}  // namespace numsnet

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace rise {

// Shape or channel-count disagreement between operands.
struct DimensionError : std::runtime_error {
  explicit DimensionError(const std::string& msg) : std::runtime_error("dimension error: " + msg) {}
};

// API misuse: bad arguments, out-of-range indices, repeated backward, ...
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error("usage error: " + msg) {}
};

// Non-finite values where finite ones are required.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

// Corrupt or truncated on-disk data; carries the byte offset of the problem.
struct FormatError : std::runtime_error {
  FormatError(const std::string& msg, std::uint64_t byte_offset)
      : std::runtime_error("format error at byte " + std::to_string(byte_offset) + ": " + msg),
        offset(byte_offset) {}
  std::uint64_t offset;
};

// File speaks a newer (or older) revision of a format than this build understands.
struct UnsupportedVersionError : std::runtime_error {
  explicit UnsupportedVersionError(const std::string& msg)
      : std::runtime_error("unsupported version: " + msg) {}
};

// Rotation 6D decode input is zero or has parallel halves.
struct DegenerateRotationError : std::runtime_error {
  explicit DegenerateRotationError(const std::string& msg)
      : std::runtime_error("degenerate rotation input: " + msg) {}
};

// Observation cloud became empty after cropping; callers decide how to recover.
struct EmptyObservationError : std::runtime_error {
  explicit EmptyObservationError(const std::string& msg)
      : std::runtime_error("empty observation: " + msg) {}
};

// Scene geometry cannot be rendered (e.g. camera inside an object).
struct InvalidSceneError : std::runtime_error {
  explicit InvalidSceneError(const std::string& msg)
      : std::runtime_error("invalid scene: " + msg) {}
};

// Expert generation gave up on this scene; caller resamples a new seed.
struct SceneRejectionError : std::runtime_error {
  explicit SceneRejectionError(const std::string& msg)
      : std::runtime_error("scene rejected: " + msg) {}
};

}  // namespace rise

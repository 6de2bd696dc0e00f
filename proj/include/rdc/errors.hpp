#pragma once

#include <stdexcept>
#include <string>

namespace rdc {

/// Base class for all errors raised by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Ingestion / validation.
struct MalformedHeader : Error { using Error::Error; };
struct NonFiniteValue : Error { using Error::Error; };
struct DuplicateId : Error { using Error::Error; };
struct EmptyClass : Error { using Error::Error; };
struct ZeroVector : Error { using Error::Error; };

// Episode sampling.
struct InsufficientClasses : Error { using Error::Error; };
struct InsufficientRowsInClass : Error { using Error::Error; };

// Metric / shape contracts.
struct MissingRow : Error { using Error::Error; };
struct DimensionMismatch : Error { using Error::Error; };
struct IndexOutOfRange : Error { using Error::Error; };
struct ShapeMismatch : Error { using Error::Error; };

// Re-ranking / fine-tuning.
struct DegenerateRow : Error { using Error::Error; };
struct DivergenceDetected : Error { using Error::Error; };

}  // namespace rdc

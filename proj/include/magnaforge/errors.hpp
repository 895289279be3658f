#pragma once

#include <stdexcept>
#include <string>

namespace magnaforge {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ParseError : Error { using Error::Error; };
struct SchemaError : Error { using Error::Error; };
struct GeometryError : Error { using Error::Error; };
struct InconsistentBlueprint : Error { using Error::Error; };
struct GenerationExhausted : Error { using Error::Error; };
struct PlacementFailure : Error { using Error::Error; };
struct ShapeError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct LengthMismatch : Error { using Error::Error; };
struct NonFiniteLoss : Error { using Error::Error; };

}  // namespace magnaforge

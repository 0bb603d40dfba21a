// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace peftlab {

/// Base class for all engine errors.
class EngineError : public std::runtime_error {
 public:
  explicit EngineError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape or length mismatch between operands.
class DimensionError : public EngineError {
 public:
  explicit DimensionError(const std::string& msg) : EngineError(msg) {}
};

/// Invalid argument, config, or registry state.
class ValidationError : public EngineError {
 public:
  explicit ValidationError(const std::string& msg) : EngineError(msg) {}
};

/// KV-cache or sequence-length overflow.
class CapacityError : public EngineError {
 public:
  explicit CapacityError(const std::string& msg) : EngineError(msg) {}
};

/// NaN/Inf encountered where finite values are required.
class NumericalError : public EngineError {
 public:
  explicit NumericalError(const std::string& msg) : EngineError(msg) {}
};

/// Tenant-registry failures: unknown id, duplicate id, incompatible adapter.
class TenantError : public EngineError {
 public:
  explicit TenantError(const std::string& msg) : EngineError(msg) {}
};

/// File format errors for weight/adapter containers.
class SerializationError : public EngineError {
 public:
  enum class Kind { bad_magic, bad_version, truncated, method_mismatch, config_mismatch, io };

  SerializationError(Kind kind, const std::string& msg) : EngineError(msg), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

}  // namespace peftlab

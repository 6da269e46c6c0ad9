#pragma once

#include <stdexcept>
#include <string>

namespace zsr {

/// Every recoverable failure in the library surfaces as this type; the
/// message is meant for humans and names the offending row, line or field.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace zsr

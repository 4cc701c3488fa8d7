#pragma once

#include <stdexcept>
#include <string>

namespace modarb {

// All structured errors raised by the toolkit. The message always names the
// offending quantity (shapes, indices, field) so sweep logs are actionable.
class Error : public std::runtime_error {
 public:
  explicit Error(std::string msg) : std::runtime_error(std::move(msg)) {}
};

}  // namespace modarb

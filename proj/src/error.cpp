#include "marble/error.hpp"

namespace marble {

int exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ArgumentError*>(&e) ||
      dynamic_cast<const SpecError*>(&e)) {
    return 2;
  }
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  return 3;
}

}  // namespace marble

#pragma once

#include <string>

namespace acceptance {

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Lives in the translation unit built against the double library.
Outcome gradient_soundness();

}  // namespace acceptance

#pragma once

#include "common.hpp"
#include "doctest.h"

namespace testing {

template <class F>
refprior::Error capture_error(F&& f) {
  try {
    f();
  } catch (const refprior::Error& e) {
    return e;
  }
  FAIL("expected a refprior::Error");
  return refprior::Error(refprior::ErrorKind::Usage, "unreachable");
}

}  // namespace testing

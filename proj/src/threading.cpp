// SPDX-License-Identifier: Apache-2.0

#include "calibadv/threading.hpp"

#include <algorithm>
#include <cstdlib>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace calibadv {

int max_parallelism() {
  int machine = 1;
#ifdef _OPENMP
  machine = std::max(1, omp_get_max_threads());
#endif
  if (const char* env = std::getenv("CALIBADV_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1)
      return static_cast<int>(std::min<long>(v, machine));
  }
  return machine;
}

}  // namespace calibadv

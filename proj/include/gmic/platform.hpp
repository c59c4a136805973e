// Process-level tuning shared by the executables.
#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace gmic {

/// Keep large activation buffers on the heap instead of fresh mmap pages;
/// the repeated page faults otherwise dominate CPU training time.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace gmic

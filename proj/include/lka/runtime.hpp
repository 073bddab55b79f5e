// Copyright 2026 The lka-adapter Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace lka {

// Keeps large tensor buffers on the heap instead of fresh mmap pages, which
// otherwise get faulted in and zeroed by the kernel on every allocation.
// Call once from main(); a no-op outside glibc.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace lka

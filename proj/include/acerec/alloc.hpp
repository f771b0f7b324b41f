#pragma once

#include <cstdlib>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace acerec {

// Training allocates and frees many multi-megabyte buffers per batch. With
// glibc defaults each one is a fresh mmap, and page faults then dominate
// system time; raising the thresholds keeps those blocks on the heap.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 1024 * 1024 * 1024);
    mallopt(M_TOP_PAD, 512 * 1024 * 1024);
#endif
}

}  // namespace acerec

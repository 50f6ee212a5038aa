#include "triplet/platform.hpp"

#include <unistd.h>

#include <cstdlib>

namespace triplet::platform {

void ensure_blas_coretype(int /*argc*/, char** argv) {
  if (std::getenv("OPENBLAS_CORETYPE") || std::getenv("TRIPLET_NO_REEXEC")) return;
  const char* core = nullptr;
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  if (__builtin_cpu_supports("avx512f")) {
    core = "SkylakeX";
  } else if (__builtin_cpu_supports("avx2")) {
    core = "Haswell";
  }
#endif
  if (!core) return;
  setenv("OPENBLAS_CORETYPE", core, 1);
  execv("/proc/self/exe", argv);
  // exec failed: carry on with the library's own detection
}

}  // namespace triplet::platform

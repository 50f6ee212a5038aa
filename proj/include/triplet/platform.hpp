#pragma once

namespace triplet::platform {

/// OpenBLAS reads OPENBLAS_CORETYPE once at load time and misdetects some
/// virtual CPUs as older cores. When the variable is unset, picks a core
/// type from the CPU's instruction set, exports it and re-executes the
/// current binary. Returns normally when nothing needs to change, when
/// TRIPLET_NO_REEXEC is set, or when the re-exec fails.
void ensure_blas_coretype(int argc, char** argv);

}  // namespace triplet::platform

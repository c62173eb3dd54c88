#pragma once

namespace krrmix {

/// Worker threads used by the OpenMP kernels. 1 is the single-threaded
/// reference mode; kernels only split work over independent output rows, so
/// results are bitwise identical for any thread count.
int num_threads();
void set_num_threads(int n);

/// Reads KRRMIX_THREADS (default 1) and applies it. Returns the value used.
int init_threads_from_env();

}  // namespace krrmix

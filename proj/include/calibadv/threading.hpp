// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace calibadv {

// Thread budget for the parallel batch kernels. Machine parallelism by
// default, capped by the CALIBADV_THREADS environment variable.
int max_parallelism();

}  // namespace calibadv

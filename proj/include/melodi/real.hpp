#pragma once

namespace melodi {

// Scalar type for every tensor in the build. Gradient tests require the
// 64-bit build; the single-precision build exists for training throughput.
#ifdef MELODI_SINGLE_PRECISION
using real = float;
#else
using real = double;
#endif

}  // namespace melodi

#pragma once

#include <ostream>

namespace scmis::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

/// Entry point of the `scmis` executable: train, generate, mix, eval.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace scmis::cli

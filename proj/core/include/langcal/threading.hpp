#pragma once

#include <cstddef>
#include <functional>

namespace langcal {

/// Set the worker count used by parallel_for_ranges (1 = serial). Thread-count
/// changes only affect how index ranges are partitioned; every index is still
/// processed exactly once, so results must not depend on the setting.
void set_num_threads(std::size_t n);
std::size_t num_threads();

/// Run fn(i0, i1) over a contiguous partition of [0, n). Each range is handled
/// by exactly one worker; fn must only write to state owned by its range.
void parallel_for_ranges(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace langcal

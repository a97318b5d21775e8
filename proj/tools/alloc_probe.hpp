#pragma once

#include <cstddef>

// Process-wide allocation instrumentation. While armed, every call to the
// global operator new records its size; the largest request is kept.
namespace deltacomp::alloc_probe {

void arm() noexcept;
/// Stops recording and returns the largest single request seen while armed.
std::size_t disarm() noexcept;

}  // namespace deltacomp::alloc_probe

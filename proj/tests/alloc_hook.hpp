// Heap-allocation counting used by the zero-copy tests: global operator
// new/delete are replaced (alloc_hook.cpp) and bump a thread-local
// counter while a scope is armed.
#pragma once

#include <cstdint>

namespace alloc_hook {

extern thread_local bool armed;
extern thread_local uint64_t allocations;

struct Scope {
    Scope() {
        allocations = 0;
        armed = true;
    }
    ~Scope() { armed = false; }
    uint64_t count() const { return allocations; }
};

} // namespace alloc_hook

#include "ddit/fault.hpp"

#include <atomic>

namespace ddit::fault {
namespace {
std::atomic<Fault> g_active{Fault::none};
}

void inject(Fault f) { g_active.store(f); }
Fault active() { return g_active.load(); }
bool enabled(Fault f) { return f != Fault::none && g_active.load() == f; }

}  // namespace ddit::fault

#pragma once

namespace ddit::fault {

// Deliberate defects that the verification suite must detect. Never enabled
// outside `ddit verify --inject`.
enum class Fault {
  none,
  posterior_sign_flip,  // unmask probability uses (alpha_t - alpha_s)
  euler_sign_flip,      // Euler step adds the velocity instead of subtracting
};

void inject(Fault f);
Fault active();
bool enabled(Fault f);

}  // namespace ddit::fault

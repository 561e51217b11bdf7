#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace retclip::gradcheck {

struct ComponentResult {
    std::string name;
    double max_rel_error = 0.0;
};

struct Report {
    double eps = 1e-5;
    double threshold = 1e-4;
    std::vector<ComponentResult> components;

    bool passed() const;
    double worst() const;
};

// Central finite differences against the analytic gradients for every
// differentiable op, the nn layers, both encoders, and the end-to-end
// tripartite loss at d=8, N=2. All fixtures are internally seeded.
// `corrupt` deliberately inflates one reported error (negative-control hook).
Report run_all(double eps = 1e-5, double threshold = 1e-4, bool corrupt = false);

// One line per component plus a verdict line.
void print(const Report& report, std::ostream& os);

}  // namespace retclip::gradcheck

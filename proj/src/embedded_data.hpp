#pragma once

#include <string_view>

// Data files compiled into the library (generated from data/ at configure time).
namespace deid::embedded {

std::string_view abbreviations();
// Surrogate list for a PHI type; empty when no table ships for it.
std::string_view surrogates(std::string_view phi_type);

}  // namespace deid::embedded

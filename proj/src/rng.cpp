#include "musegen/rng.hpp"

// Header-only in practice; this TU anchors the target.

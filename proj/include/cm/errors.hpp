#pragma once

#include <stdexcept>
#include <string>

namespace cm {

// Malformed input data: unreadable/invalid tensor files, mismatched layer
// names or shapes, out-of-range parameters. CLI exit code 3.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A merged bundle that violates its own manifest or index invariants.
// CLI exit code 4.
class BundleError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad command-line usage detected after parsing (e.g. k larger than the
// number of experts). CLI exit code 2.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace cm

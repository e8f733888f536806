// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace wkv {

/// Raised on any contract violation: bad dimensions, broken cache ordering,
/// invalid configuration, non-convergence.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool condition, const std::string& message) {
    if (!condition) {
        throw Error(message);
    }
}

}  // namespace detail
}  // namespace wkv

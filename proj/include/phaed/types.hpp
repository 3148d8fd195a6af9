#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <vector>

namespace phaed {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Index = Eigen::Index;

/// Attention mask: entry != 0 means the (query row, key column) pair is attendable.
using Mask = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;

}  // namespace phaed

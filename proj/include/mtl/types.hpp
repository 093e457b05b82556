#pragma once

#include <Eigen/Dense>

namespace mtl {

template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <class Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using MatD = Mat<double>;
using VecF = Vec<float>;
using VecD = Vec<double>;

// Class-index vectors for multiclass targets/predictions.
using IndexVec = Eigen::VectorXi;

using Index = Eigen::Index;

}  // namespace mtl

// SPDX-License-Identifier: Apache-2.0
#include "peftlab/autograd.hpp"

namespace peftlab {

template class Tape<float>;
template class Tape<double>;
template void rope_rotate_inverse_inplace<float>(Matrix<float>&, std::uint32_t, std::size_t);
template void rope_rotate_inverse_inplace<double>(Matrix<double>&, std::uint32_t, std::size_t);

}  // namespace peftlab

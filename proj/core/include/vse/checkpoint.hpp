#pragma once

// Portable named-parameter checkpoint.
//
// Layout (all integers little-endian):
//   magic   "VSECKPT\0"            8 bytes
//   version u32                    currently 1
//   count   u32                    number of parameters
//   count manifest entries:
//     name_len u16, name bytes
//     dtype    u8                  0 = float32
//     ndim     u8
//     dims     u32 x ndim
//   payloads: raw little-endian float32 buffers, in manifest order

#include <string>

#include "vse/tensor.hpp"

namespace vse {

void save_checkpoint(const std::string& path, const ParamMap& params);
ParamMap load_checkpoint(const std::string& path, bool requires_grad = true);

}  // namespace vse

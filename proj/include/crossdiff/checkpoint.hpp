#pragma once

#include <string>

#include "crossdiff/crosscoder.hpp"
#include "crossdiff/synthdata.hpp"
#include "crossdiff/transfer.hpp"

namespace crossdiff {

// Binary container formats. All integers and floats are little-endian;
// tensor payloads are 32-bit floats, row-major, in the logical orientation
// (encoders d x M, decoders M x d).
//
//   XCKP  model checkpoint
//     magic "XCKP", version u32, arch u8, d_A u32, d_B u32, M u32, k u32,
//     partition boundaries 3 x u32 (end of A-exclusive, end of B-exclusive,
//     end of shared == M); DSF checkpoints append designated begin/end u32
//     and the k multiplier f64. Body: w_enc_a, w_enc_b, b_enc, w_dec_a,
//     w_dec_b, b_dec_a, b_dec_b.
//
//   XSTC  stitch map
//     magic "XSTC", version u32, d_A u32, d_B u32, has_inverse u8,
//     inversion_weight f64, fit_mse f64, fit_mse_inverse f64. Body: w
//     (d_B x d_A), b, then w_inv (d_A x d_B), b_inv when has_inverse.
//
//   XDIF  activation dump
//     magic "XDIF", version u32, d_A u32, d_B u32, row count u64. Body: all
//     x_a rows then all x_b rows.

void save_checkpoint(const CrosscoderModel& model, const std::string& path);
CrosscoderModel load_checkpoint(const std::string& path);

void save_stitch(const StitchMap& map, const std::string& path);
StitchMap load_stitch(const std::string& path);

void save_activation_dump(const ActivationPairBatch& batch, const std::string& path);
ActivationPairBatch load_activation_dump(const std::string& path);

}  // namespace crossdiff

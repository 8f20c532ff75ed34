// SPDX-License-Identifier: Apache-2.0
#pragma once

// Binary tensor container shared by model and cluster checkpoints.
//
//   "LAMR" | u32 version (=1) | u64 config length | UTF-8 JSON config
//   | u32 tensor count | per tensor: u16 name length, name, u8 dtype
//   (0 = f32, 1 = f64), u8 rank, rank × u64 dims, row-major payload
//   | u64 rng state
//
// Every integer and float is little-endian.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lamer/matrix.hpp"

namespace lamer {

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1 };

struct Tensor {
    std::string name;
    Dtype dtype = Dtype::F64;
    std::vector<std::uint64_t> dims;
    std::vector<double> values;  ///< f32 tensors hold float-rounded values

    static Tensor from_matrix(std::string name, const Matrix& m, Dtype dtype = Dtype::F64);
    Matrix to_matrix() const;  ///< rank-2 (or rank-1 as 1 × n)
};

struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::uint32_t version = kVersion;
    nlohmann::json config = nlohmann::json::object();
    std::vector<Tensor> tensors;
    std::uint64_t rng_state = 0;

    const Tensor& tensor(const std::string& name) const;  ///< FormatError if absent
    bool has_tensor(const std::string& name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
/// FormatError on bad magic/version/layout, IoError when the data ends early.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Writes through a temporary file and renames, so readers never see a partial file.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace lamer

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "qatlab/ema.hpp"
#include "qatlab/network.hpp"

namespace qatlab {

/// On-disk layout (all integers little-endian):
///   8 bytes   magic "QATLABCK"
///   u32       format version
///   u64       header length H
///   H bytes   JSON header: topology, config, tensor table
///   u32       CRC-32 of the header bytes
///   payload   tensors back to back as float64 LE, in table order
/// Each table entry holds name, dtype ("f64"), shape, offset, nbytes, crc32.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::ordered_json topology;
  nlohmann::ordered_json config;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const;
  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);

/// Throws ParseError (bad magic or header), VersionError (other format
/// version) or ChecksumError naming the damaged or truncated tensor.
Checkpoint load_checkpoint(const std::string& path);

/// Network parameters, BN running statistics, quantizer scales, QC
/// parameters and (when given) EMA shadows under "ema.<name>".
Checkpoint make_checkpoint(const NetworkSpec& net, const EMAState* ema,
                           const nlohmann::ordered_json& config);

NetworkSpec network_from_checkpoint(const Checkpoint& ck);
std::optional<EMAState> ema_from_checkpoint(const Checkpoint& ck);

}  // namespace qatlab

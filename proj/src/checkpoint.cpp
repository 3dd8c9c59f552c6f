// SPDX-License-Identifier: Apache-2.0
#include "qatlab/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "qatlab/error.hpp"

namespace qatlab {

using nlohmann::ordered_json;

namespace {

constexpr char kMagic[8] = {'Q', 'A', 'T', 'L', 'A', 'B', 'C', 'K'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::uint32_t crc_of(const void* data, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  const auto* p = static_cast<const Bytef*>(data);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t off) {
  T v;
  std::memcpy(&v, in.data() + off, sizeof(T));
  return v;
}

ordered_json quant_json(const std::optional<QuantizerState>& q) {
  if (!q) return nullptr;
  return ordered_json{{"bits", q->bits},
                      {"signed", q->is_signed},
                      {"granularity", to_string(q->granularity)},
                      {"axis", q->axis},
                      {"lsq_grad_scale", q->lsq_grad_scale}};
}

std::optional<QuantizerState> quant_from(const ordered_json& j, const Tensor* scale) {
  if (j.is_null()) return std::nullopt;
  if (!scale) throw ParseError("checkpoint: quantizer without a scale tensor");
  QuantizerState q = QuantizerState::make(j.at("bits").get<int>(), j.at("signed").get<bool>());
  q.granularity = granularity_from_string(j.at("granularity").get<std::string>());
  q.axis = j.at("axis").get<std::size_t>();
  q.lsq_grad_scale = j.at("lsq_grad_scale").get<bool>();
  q.scale = *scale;
  q.validate();
  return q;
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  if (const Tensor* t = find(name)) return *t;
  throw ParseError("checkpoint has no tensor '" + name + "'");
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  ordered_json table = ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ck.tensors) {
    const std::uint64_t nbytes = t.numel() * sizeof(double);
    table.push_back({{"name", name},
                     {"dtype", "f64"},
                     {"shape", t.shape()},
                     {"offset", offset},
                     {"nbytes", nbytes},
                     {"crc32", crc_of(t.vec().data(), nbytes)}});
    offset += nbytes;
  }
  const ordered_json header{{"format_version", Checkpoint::kVersion},
                            {"topology", ck.topology},
                            {"config", ck.config},
                            {"tensors", table}};
  const std::string hdr = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, Checkpoint::kVersion);
  put<std::uint64_t>(out, hdr.size());
  out += hdr;
  put<std::uint32_t>(out, crc_of(hdr.data(), hdr.size()));
  for (const auto& [name, t] : ck.tensors) {
    out.append(reinterpret_cast<const char*>(t.vec().data()), t.numel() * sizeof(double));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ArgumentError("cannot write checkpoint '" + path + "'");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw ArgumentError("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot open checkpoint '" + path + "'");
  const std::string in{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  if (in.size() < 20 || std::memcmp(in.data(), kMagic, sizeof(kMagic)) != 0) {
    throw ParseError(path + ": not a qatlab checkpoint (bad magic)");
  }
  const auto version = get<std::uint32_t>(in, 8);
  if (version != Checkpoint::kVersion) {
    throw VersionError(path + ": checkpoint format version " + std::to_string(version) +
                       " is not supported (expected " + std::to_string(Checkpoint::kVersion) + ")");
  }
  const auto hlen = get<std::uint64_t>(in, 12);
  const std::size_t hstart = 20;
  if (hlen > in.size() - hstart || in.size() - hstart - hlen < 4) {
    throw ChecksumError(path + ": truncated checkpoint header");
  }
  const std::string hdr = in.substr(hstart, hlen);
  if (get<std::uint32_t>(in, hstart + hlen) != crc_of(hdr.data(), hdr.size())) {
    throw ChecksumError(path + ": header checksum mismatch");
  }
  ordered_json header;
  try {
    header = ordered_json::parse(hdr);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": malformed checkpoint header: " + e.what());
  }
  if (header.value("format_version", 0u) != Checkpoint::kVersion) {
    throw VersionError(path + ": header format version disagrees with the file prefix");
  }

  Checkpoint ck;
  ck.topology = header.at("topology");
  ck.config = header.at("config");
  const std::size_t pstart = hstart + hlen + 4;
  const std::size_t avail = in.size() - pstart;
  std::uint64_t expect_end = 0;
  for (const auto& e : header.at("tensors")) {
    const auto name = e.at("name").get<std::string>();
    if (e.at("dtype").get<std::string>() != "f64") throw ParseError(path + ": tensor '" + name + "' has unsupported dtype");
    const auto shape = e.at("shape").get<Shape>();
    const auto off = e.at("offset").get<std::uint64_t>();
    const auto nbytes = e.at("nbytes").get<std::uint64_t>();
    if (nbytes != shape_numel(shape) * sizeof(double)) {
      throw ParseError(path + ": tensor '" + name + "' size disagrees with its shape");
    }
    if (off > avail || nbytes > avail - off) {
      throw ChecksumError(path + ": tensor '" + name + "' is truncated");
    }
    if (crc_of(in.data() + pstart + off, nbytes) != e.at("crc32").get<std::uint32_t>()) {
      throw ChecksumError(path + ": checksum mismatch in tensor '" + name + "'");
    }
    std::vector<double> data(shape_numel(shape));
    std::memcpy(data.data(), in.data() + pstart + off, nbytes);
    ck.tensors.emplace_back(name, Tensor(shape, std::move(data)));
    expect_end = std::max(expect_end, off + nbytes);
  }
  if (expect_end != avail) throw ChecksumError(path + ": unexpected trailing bytes after the last tensor");
  return ck;
}

Checkpoint make_checkpoint(const NetworkSpec& net, const EMAState* ema, const ordered_json& config) {
  Checkpoint ck;
  ck.config = config;
  ordered_json layers = ordered_json::array();
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& l = net.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    ordered_json lj{{"kind", to_string(l.kind)},
                    {"stride", l.stride},
                    {"padding", l.padding},
                    {"nonlinearity", to_string(l.nonlinearity)},
                    {"pool", to_string(l.pool)},
                    {"w_quant", quant_json(l.w_quant)},
                    {"a_quant", quant_json(l.a_quant)},
                    {"bn", nullptr},
                    {"correction", nullptr}};
    ck.tensors.emplace_back(p + "weight", l.weight);
    ck.tensors.emplace_back(p + "bias", l.bias);
    if (l.w_quant) ck.tensors.emplace_back(p + "w_scale", l.w_quant->scale);
    if (l.a_quant) ck.tensors.emplace_back(p + "a_scale", l.a_quant->scale);
    if (l.bn) {
      lj["bn"] = {{"momentum", l.bn->momentum}, {"eps", l.bn->eps}, {"mode", to_string(l.bn->mode)}};
      ck.tensors.emplace_back(p + "bn.gain", l.bn->gain);
      ck.tensors.emplace_back(p + "bn.bias", l.bn->bias);
      ck.tensors.emplace_back(p + "bn.running_mean", l.bn->running_mean);
      ck.tensors.emplace_back(p + "bn.running_var", l.bn->running_var);
    }
    if (l.correction) {
      lj["correction"] = {{"granularity", to_string(l.correction->granularity)}};
      ck.tensors.emplace_back(p + "qc.gamma", l.correction->gamma);
      ck.tensors.emplace_back(p + "qc.beta", l.correction->beta);
    }
    layers.push_back(lj);
  }
  ck.topology = {{"input_shape", net.input_shape}, {"loss", to_string(net.loss)}, {"layers", layers}, {"ema", nullptr}};
  if (ema && !ema->shadows.empty()) {
    ck.topology["ema"] = {{"alpha", ema->alpha}, {"warmup_iters", ema->warmup_iters}, {"iter", ema->iter}};
    for (const auto& [name, t] : ema->shadows) ck.tensors.emplace_back("ema." + name, t);
  }
  return ck;
}

NetworkSpec network_from_checkpoint(const Checkpoint& ck) {
  NetworkSpec net;
  try {
    const auto& topo = ck.topology;
    net.input_shape = topo.at("input_shape").get<Shape>();
    net.loss = loss_kind_from_string(topo.at("loss").get<std::string>());
    std::size_t i = 0;
    for (const auto& lj : topo.at("layers")) {
      const std::string p = "layers." + std::to_string(i++) + ".";
      LayerSpec l;
      l.kind = layer_kind_from_string(lj.at("kind").get<std::string>());
      l.stride = lj.at("stride").get<std::size_t>();
      l.padding = lj.at("padding").get<std::size_t>();
      l.nonlinearity = nonlinearity_from_string(lj.at("nonlinearity").get<std::string>());
      l.pool = pool_from_string(lj.at("pool").get<std::string>());
      l.weight = ck.tensor(p + "weight");
      l.bias = ck.tensor(p + "bias");
      l.w_quant = quant_from(lj.at("w_quant"), ck.find(p + "w_scale"));
      l.a_quant = quant_from(lj.at("a_quant"), ck.find(p + "a_scale"));
      if (const auto& bj = lj.at("bn"); !bj.is_null()) {
        BNParams bn;
        bn.gain = ck.tensor(p + "bn.gain");
        bn.bias = ck.tensor(p + "bn.bias");
        bn.running_mean = ck.tensor(p + "bn.running_mean");
        bn.running_var = ck.tensor(p + "bn.running_var");
        bn.momentum = bj.at("momentum").get<double>();
        bn.eps = bj.at("eps").get<double>();
        bn.mode = bn_mode_from_string(bj.at("mode").get<std::string>());
        l.bn = std::move(bn);
      }
      if (const auto& cj = lj.at("correction"); !cj.is_null()) {
        l.correction = CorrectionParams{ck.tensor(p + "qc.gamma"), ck.tensor(p + "qc.beta"),
                                        granularity_from_string(cj.at("granularity").get<std::string>())};
      }
      net.layers.push_back(std::move(l));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint topology: ") + e.what());
  }
  net.validate();
  return net;
}

std::optional<EMAState> ema_from_checkpoint(const Checkpoint& ck) {
  const auto& ej = ck.topology.at("ema");
  if (ej.is_null()) return std::nullopt;
  EMAState st;
  st.alpha = ej.at("alpha").get<double>();
  st.warmup_iters = ej.at("warmup_iters").get<std::size_t>();
  st.iter = ej.at("iter").get<std::size_t>();
  for (const auto& [name, t] : ck.tensors) {
    if (name.starts_with("ema.")) st.shadows.emplace(name.substr(4), t);
  }
  return st;
}

}  // namespace qatlab

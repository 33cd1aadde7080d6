#include "gridpaint/checkpoint.hpp"

#include "gridpaint/io.hpp"

namespace gridpaint {

std::string encode_checkpoint(std::span<const NamedTensor> tensors) {
  ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.f32s(t.data());
  }
  return w.take();
}

std::vector<NamedTensor> decode_checkpoint(std::string_view bytes) {
  ByteReader r(bytes);
  if (r.remaining() < kCheckpointMagic.size() || r.bytes(kCheckpointMagic.size()) != kCheckpointMagic) {
    throw format_error("not a GPCKPT1 checkpoint");
  }
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32();
    std::string name(r.bytes(name_len));
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw format_error("checkpoint tensor '" + name + "' has bad rank");
    Shape shape(rank);
    for (auto& d : shape) {
      d = r.u32();
      if (d == 0) throw format_error("checkpoint tensor '" + name + "' has a zero dimension");
    }
    auto values = r.f32s(shape_numel(shape));
    out.push_back({std::move(name), Tensor::from(std::move(shape), std::move(values))});
  }
  if (r.remaining() != 0) throw format_error("trailing bytes after checkpoint records");
  return out;
}

void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors) {
  write_file(path, encode_checkpoint(tensors));
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace gridpaint

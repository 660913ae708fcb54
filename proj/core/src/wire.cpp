#include "relaymesh/wire.hpp"

#include <algorithm>
#include <set>
#include <string>

namespace relaymesh::wire {
namespace {

void put16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

void put32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  put16(out, static_cast<std::uint16_t>(v >> 16));
  put16(out, static_cast<std::uint16_t>(v));
}

std::uint16_t get16(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint16_t>((b[at] << 8) | b[at + 1]);
}

std::uint32_t get32(std::span<const std::uint8_t> b, std::size_t at) {
  return (static_cast<std::uint32_t>(get16(b, at)) << 16) | get16(b, at + 2);
}

}  // namespace

std::vector<std::uint8_t> encode(const MediaPacketHeader& h,
                                 std::span<const std::uint8_t> payload) {
  if (payload.size() > kMaxPayload) {
    throw WireError("payload of " + std::to_string(payload.size()) +
                    " bytes exceeds " + std::to_string(kMaxPayload));
  }
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderSize + payload.size());
  put32(out, h.timestamp_ms);
  put32(out, h.flow_id);
  put16(out, h.rate_kbps);
  out.push_back(h.frame_rate);
  out.push_back(h.seq);
  out.push_back(h.codec);
  out.insert(out.end(), 3, 0);
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

std::vector<std::uint8_t> encode(const MediaPacket& packet) {
  return encode(packet.header, packet.payload);
}

MediaPacket decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderSize) {
    throw WireError("packet of " + std::to_string(bytes.size()) +
                    " bytes is shorter than the header");
  }
  if (bytes.size() > kHeaderSize + kMaxPayload) {
    throw WireError("payload exceeds " + std::to_string(kMaxPayload) + " bytes");
  }
  MediaPacket p;
  p.header.timestamp_ms = get32(bytes, 0);
  p.header.flow_id = get32(bytes, 4);
  p.header.rate_kbps = get16(bytes, 8);
  p.header.frame_rate = bytes[10];
  p.header.seq = bytes[11];
  p.header.codec = bytes[12];
  p.payload.assign(bytes.begin() + kHeaderSize, bytes.end());
  return p;
}

std::size_t packets_per_frame(std::uint32_t rate_kbps, std::uint32_t frame_rate) {
  if (rate_kbps == 0 || frame_rate == 0) {
    throw WireError("rate and frame rate must be positive");
  }
  const std::uint64_t bits = std::uint64_t{rate_kbps} * 1000;
  const std::uint64_t per_packet = std::uint64_t{frame_rate} * kMaxPayload * 8;
  return static_cast<std::size_t>((bits + per_packet - 1) / per_packet);
}

std::vector<MediaPacket> fragment_frame(const MediaPacketHeader& frame_header,
                                        std::span<const std::uint8_t> frame,
                                        std::uint8_t& next_seq) {
  const std::size_t count =
      packets_per_frame(frame_header.rate_kbps, frame_header.frame_rate);
  if (frame.size() > count * kMaxPayload) {
    throw WireError("frame of " + std::to_string(frame.size()) +
                    " bytes does not fit " + std::to_string(count) +
                    " packets at the declared rate");
  }
  std::vector<MediaPacket> out;
  out.reserve(count);
  const std::size_t base = frame.size() / count;
  const std::size_t extra = frame.size() % count;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t len = base + (i < extra ? 1 : 0);
    MediaPacket p;
    p.header = frame_header;
    p.header.seq = next_seq++;
    p.payload.assign(frame.begin() + offset, frame.begin() + offset + len);
    offset += len;
    out.push_back(std::move(p));
  }
  return out;
}

Reassembly reassemble(std::span<const MediaPacket> packets) {
  Reassembly r;
  if (packets.empty()) return r;
  const auto& first = packets.front().header;
  r.expected = packets_per_frame(first.rate_kbps, first.frame_rate);

  std::array<const MediaPacket*, 256> by_seq{};
  for (const auto& p : packets) {
    if (p.header.timestamp_ms != first.timestamp_ms ||
        p.header.flow_id != first.flow_id) {
      throw WireError("fragments from different frames");
    }
    if (by_seq[p.header.seq] != nullptr) {
      ++r.duplicates;
      continue;
    }
    by_seq[p.header.seq] = &p;
    ++r.received;
  }
  if (r.received != r.expected) return r;

  // Start of the circular run: a present seq whose predecessor is absent.
  std::optional<std::uint8_t> start;
  for (unsigned s = 0; s < 256; ++s) {
    const auto prev = static_cast<std::uint8_t>(s - 1);
    if (by_seq[s] != nullptr && by_seq[prev] == nullptr) {
      if (start) return r;  // more than one run: a gap
      start = static_cast<std::uint8_t>(s);
    }
  }
  if (!start) return r;
  for (std::size_t i = 0; i < r.expected; ++i) {
    const auto* p = by_seq[static_cast<std::uint8_t>(*start + i)];
    r.frame.insert(r.frame.end(), p->payload.begin(), p->payload.end());
  }
  r.complete = true;
  return r;
}

std::int64_t unwrap_timestamp(std::uint32_t wire_ms, std::int64_t reference_ms) {
  constexpr std::int64_t kSpan = std::int64_t{1} << 32;
  const std::int64_t base = reference_ms - (reference_ms % kSpan + kSpan) % kSpan;
  std::int64_t best = base + wire_ms;
  for (std::int64_t c : {best - kSpan, best + kSpan}) {
    if (std::llabs(c - reference_ms) < std::llabs(best - reference_ms)) best = c;
  }
  return best;
}

}  // namespace relaymesh::wire

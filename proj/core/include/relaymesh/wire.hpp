#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace relaymesh::wire {

inline constexpr std::size_t kHeaderSize = 16;
inline constexpr std::size_t kMaxPayload = 512;

class WireError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MediaPacketHeader {
  std::uint32_t timestamp_ms = 0;  // source time in initiator clock
  std::uint32_t flow_id = 0;
  std::uint16_t rate_kbps = 0;
  std::uint8_t frame_rate = 0;
  std::uint8_t seq = 0;            // per flow, wraps at 256
  std::uint8_t codec = 0;

  friend bool operator==(const MediaPacketHeader&, const MediaPacketHeader&) = default;
};

struct MediaPacket {
  MediaPacketHeader header;
  std::vector<std::uint8_t> payload;

  friend bool operator==(const MediaPacket&, const MediaPacket&) = default;
};

// Big-endian header followed by the payload. Reserved octets are written as
// zero. Throws WireError for payloads over kMaxPayload.
std::vector<std::uint8_t> encode(const MediaPacketHeader& header,
                                 std::span<const std::uint8_t> payload);
std::vector<std::uint8_t> encode(const MediaPacket& packet);

// Reserved octets are ignored. Throws WireError on short input or payload
// over kMaxPayload.
MediaPacket decode(std::span<const std::uint8_t> bytes);

// ceil((rate * 1000 / fr) / (kMaxPayload * 8)) packets per frame.
std::size_t packets_per_frame(std::uint32_t rate_kbps, std::uint32_t frame_rate);

// Splits one frame into packets_per_frame() packets sharing a timestamp.
// Sequence numbers continue from `next_seq`, which is advanced.
std::vector<MediaPacket> fragment_frame(const MediaPacketHeader& frame_header,
                                        std::span<const std::uint8_t> frame,
                                        std::uint8_t& next_seq);

struct Reassembly {
  bool complete = false;
  std::vector<std::uint8_t> frame;  // filled when complete
  std::size_t expected = 0;
  std::size_t received = 0;         // distinct fragments
  std::size_t duplicates = 0;
};

// Orders the fragments of one frame by sequence (mod 256, relative to the
// lowest seq in circular order) and joins them. Throws WireError when
// timestamps or flows differ.
Reassembly reassemble(std::span<const MediaPacket> packets);

// Full 64-bit time for a 32-bit wire timestamp: the candidate nearest to
// `reference_ms`.
std::int64_t unwrap_timestamp(std::uint32_t wire_ms, std::int64_t reference_ms);

}  // namespace relaymesh::wire

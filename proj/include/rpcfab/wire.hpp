#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

// Frame and message formats, cache-line-MTU fragmentation/reassembly and
// flat argument (de)serialization.
//
// Wire frame layout (64 bytes total, little-endian integers):
//   bytes  0-1   dst_addr          destination tenant address
//   bytes  2-5   connection_id
//   bytes  6-9   rpc_id
//   byte   10    frame_kind        low nibble; high nibble reserved (zero)
//   byte   11    function_id
//   byte   12    frame_index
//   byte   13    frame_count
//   bytes 14-15  payload_len_total total message payload bytes
//   bytes 16-63  payload           48-byte slice, zero padded
//
// The per-entry phase byte used by the polling rings is *not* part of the
// wire frame; it lives in the ring entry wrapper (see rings.hpp).

namespace rpcfab::wire {

inline constexpr std::size_t kFrameSize = 64;
inline constexpr std::size_t kHeaderSize = 16;
inline constexpr std::size_t kFramePayload = 48;
inline constexpr std::size_t kDefaultMaxMessage = 4096;

using FrameBytes = std::array<uint8_t, kFrameSize>;

enum class FrameKind : uint8_t {
    Request = 0,
    Response = 1,
    Connect = 2,
    ConnectAck = 3,
    Disconnect = 4,
};

struct RpcFrame {
    uint16_t dst_addr = 0;
    uint32_t connection_id = 0;
    uint32_t rpc_id = 0;
    FrameKind kind = FrameKind::Request;
    uint8_t function_id = 0;
    uint8_t frame_index = 0;
    uint8_t frame_count = 1;
    uint16_t payload_len_total = 0;
    std::array<uint8_t, kFramePayload> payload{};

    /// Payload bytes carried by this particular frame (last frame may be
    /// partial; all others carry a full 48-byte slice).
    std::size_t chunk_len() const {
        if (frame_index + 1u < frame_count) return kFramePayload;
        return payload_len_total - std::size_t{frame_index} * kFramePayload;
    }
};

FrameBytes encode_frame(const RpcFrame& f);

/// Decodes one 64-byte buffer. Returns nullopt when the buffer violates the
/// frame invariants (unknown kind, reserved bits set, frame_count == 0,
/// frame_index >= frame_count, inconsistent payload_len_total).
std::optional<RpcFrame> decode_frame(std::span<const uint8_t, kFrameSize> buf);

/// Reads the destination address without decoding the full frame. Used by
/// the switch, which only ever needs the first two bytes.
inline uint16_t peek_dst_addr(const FrameBytes& b) {
    return static_cast<uint16_t>(b[0] | (uint16_t{b[1]} << 8));
}
inline FrameKind peek_kind(const FrameBytes& b) {
    return static_cast<FrameKind>(b[10] & 0x0F);
}

enum class MsgKind : uint8_t { Request = 0, Response = 1 };

struct RpcMessage {
    uint32_t connection_id = 0;
    uint32_t rpc_id = 0;
    MsgKind kind = MsgKind::Request;
    uint8_t function_id = 0;
    std::vector<uint8_t> payload;  // 1 B .. max message size
};

struct WireError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InvalidMessage : WireError {
    using WireError::WireError;
};
struct OversizeMessage : WireError {
    using WireError::WireError;
};
struct TypeMismatch : WireError {
    using WireError::WireError;
};
struct LengthOverflow : WireError {
    using WireError::WireError;
};

/// Splits a message into ceil(len/48) frames with consecutive frame_index.
/// Throws InvalidMessage on an empty payload and OversizeMessage above
/// max_message.
std::vector<RpcFrame> fragment(const RpcMessage& msg, uint16_t dst_addr,
                               std::size_t max_message = kDefaultMaxMessage);

/// Per-(connection_id, rpc_id) reassembly of frames back into messages.
/// Owned by a single thread; delivery order of frames may interleave across
/// rpc_ids arbitrarily. Duplicates are ignored, a frame whose frame_count
/// disagrees with the existing entry is rejected, and entries that stay
/// incomplete past the timeout are evicted.
class Reassembler {
  public:
    explicit Reassembler(uint64_t timeout_ns = 10'000'000) : timeout_ns_(timeout_ns) {}

    enum class Feed : uint8_t { Pending, Complete, Duplicate, Mismatch };
    struct Result {
        Feed status;
        std::optional<RpcMessage> message;  // set iff status == Complete
    };

    Result feed(const RpcFrame& frame, uint64_t now_ns);

    /// Drops entries whose first frame arrived more than timeout ago.
    /// Returns the number of evicted (timed out) entries.
    std::size_t evict_expired(uint64_t now_ns);

    std::size_t pending() const { return entries_.size(); }
    uint64_t timeouts() const { return timeouts_; }
    uint64_t duplicates() const { return duplicates_; }
    uint64_t mismatches() const { return mismatches_; }

  private:
    struct Entry {
        uint8_t frame_count = 0;
        uint8_t received = 0;
        FrameKind kind = FrameKind::Request;
        uint8_t function_id = 0;
        uint16_t payload_len_total = 0;
        uint64_t first_ns = 0;
        std::array<uint64_t, 4> have{};  // presence bitmap, frame_count <= 255
        std::vector<uint8_t> bytes;      // frame_count * 48, assembled in place
    };

    static uint64_t key(uint32_t c_id, uint32_t rpc_id) {
        return (uint64_t{c_id} << 32) | rpc_id;
    }

    uint64_t timeout_ns_;
    uint64_t timeouts_ = 0;
    uint64_t duplicates_ = 0;
    uint64_t mismatches_ = 0;
    std::unordered_map<uint64_t, Entry> entries_;
};

// --- Flat argument codec -------------------------------------------------
//
// Fields are laid out in declaration order: int32/int64 little-endian fixed
// width, char[N] occupying exactly N bytes zero padded. Values for char[N]
// are std::string; trailing NULs are not significant (decode trims them).

enum class FieldType : uint8_t { Int32, Int64, Chars };

struct FieldDesc {
    std::string name;
    FieldType type = FieldType::Int32;
    uint16_t width = 4;  // wire bytes: 4, 8, or N for char[N]
};

inline FieldDesc field_i32(std::string name) { return {std::move(name), FieldType::Int32, 4}; }
inline FieldDesc field_i64(std::string name) { return {std::move(name), FieldType::Int64, 8}; }
inline FieldDesc field_chars(std::string name, uint16_t n) {
    return {std::move(name), FieldType::Chars, n};
}

using ArgValue = std::variant<int32_t, int64_t, std::string>;

std::size_t encoded_size(std::span<const FieldDesc> fields);

/// Throws TypeMismatch on arity or variant mismatch, LengthOverflow when a
/// string is longer than its declared width.
std::vector<uint8_t> encode_args(std::span<const FieldDesc> fields,
                                 std::span<const ArgValue> values);

/// Throws TypeMismatch when the buffer size does not match the field spec.
std::vector<ArgValue> decode_args(std::span<const FieldDesc> fields,
                                  std::span<const uint8_t> bytes);

}  // namespace rpcfab::wire

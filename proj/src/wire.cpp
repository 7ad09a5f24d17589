#include "rpcfab/wire.hpp"

#include <cassert>
#include <cstring>

namespace rpcfab::wire {

namespace {

void put_u16(uint8_t* p, uint16_t v) {
    p[0] = static_cast<uint8_t>(v);
    p[1] = static_cast<uint8_t>(v >> 8);
}
void put_u32(uint8_t* p, uint32_t v) {
    p[0] = static_cast<uint8_t>(v);
    p[1] = static_cast<uint8_t>(v >> 8);
    p[2] = static_cast<uint8_t>(v >> 16);
    p[3] = static_cast<uint8_t>(v >> 24);
}
uint16_t get_u16(const uint8_t* p) {
    return static_cast<uint16_t>(p[0] | (uint16_t{p[1]} << 8));
}
uint32_t get_u32(const uint8_t* p) {
    return p[0] | (uint32_t{p[1]} << 8) | (uint32_t{p[2]} << 16) | (uint32_t{p[3]} << 24);
}

}  // namespace

FrameBytes encode_frame(const RpcFrame& f) {
    FrameBytes out{};
    put_u16(&out[0], f.dst_addr);
    put_u32(&out[2], f.connection_id);
    put_u32(&out[6], f.rpc_id);
    out[10] = static_cast<uint8_t>(f.kind) & 0x0F;  // high nibble reserved
    out[11] = f.function_id;
    out[12] = f.frame_index;
    out[13] = f.frame_count;
    put_u16(&out[14], f.payload_len_total);
    std::memcpy(&out[kHeaderSize], f.payload.data(), kFramePayload);
    return out;
}

std::optional<RpcFrame> decode_frame(std::span<const uint8_t, kFrameSize> buf) {
    if (buf[10] & 0xF0) return std::nullopt;  // reserved bits must be zero
    const uint8_t kind_raw = buf[10] & 0x0F;
    if (kind_raw > static_cast<uint8_t>(FrameKind::Disconnect)) return std::nullopt;

    RpcFrame f;
    f.dst_addr = get_u16(&buf[0]);
    f.connection_id = get_u32(&buf[2]);
    f.rpc_id = get_u32(&buf[6]);
    f.kind = static_cast<FrameKind>(kind_raw);
    f.function_id = buf[11];
    f.frame_index = buf[12];
    f.frame_count = buf[13];
    f.payload_len_total = get_u16(&buf[14]);

    if (f.frame_count == 0) return std::nullopt;
    if (f.frame_index >= f.frame_count) return std::nullopt;
    const std::size_t total = f.payload_len_total;
    if (total > std::size_t{f.frame_count} * kFramePayload) return std::nullopt;
    if (total <= (std::size_t{f.frame_count} - 1) * kFramePayload) return std::nullopt;

    std::memcpy(f.payload.data(), &buf[kHeaderSize], kFramePayload);
    return f;
}

std::vector<RpcFrame> fragment(const RpcMessage& msg, uint16_t dst_addr,
                               std::size_t max_message) {
    const std::size_t len = msg.payload.size();
    if (len == 0) throw InvalidMessage("empty payloads are not allowed");
    if (len > max_message)
        throw OversizeMessage("payload of " + std::to_string(len) + " bytes exceeds max " +
                              std::to_string(max_message));

    const std::size_t count = (len + kFramePayload - 1) / kFramePayload;
    assert(count <= 255);

    std::vector<RpcFrame> frames;
    frames.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        RpcFrame f;
        f.dst_addr = dst_addr;
        f.connection_id = msg.connection_id;
        f.rpc_id = msg.rpc_id;
        f.kind = msg.kind == MsgKind::Request ? FrameKind::Request : FrameKind::Response;
        f.function_id = msg.function_id;
        f.frame_index = static_cast<uint8_t>(i);
        f.frame_count = static_cast<uint8_t>(count);
        f.payload_len_total = static_cast<uint16_t>(len);
        const std::size_t off = i * kFramePayload;
        const std::size_t n = std::min(kFramePayload, len - off);
        std::memcpy(f.payload.data(), msg.payload.data() + off, n);
        frames.push_back(f);
    }
    return frames;
}

Reassembler::Result Reassembler::feed(const RpcFrame& frame, uint64_t now) {
    auto [it, inserted] = entries_.try_emplace(key(frame.connection_id, frame.rpc_id));
    Entry& e = it->second;
    if (inserted) {
        e.frame_count = frame.frame_count;
        e.kind = frame.kind;
        e.function_id = frame.function_id;
        e.payload_len_total = frame.payload_len_total;
        e.first_ns = now;
        e.bytes.resize(std::size_t{frame.frame_count} * kFramePayload);
    } else if (e.frame_count != frame.frame_count ||
               e.payload_len_total != frame.payload_len_total) {
        ++mismatches_;
        return {Feed::Mismatch, std::nullopt};
    }

    const uint8_t idx = frame.frame_index;
    uint64_t& word = e.have[idx >> 6];
    const uint64_t bit = 1ull << (idx & 63);
    if (word & bit) {
        ++duplicates_;
        return {Feed::Duplicate, std::nullopt};
    }
    word |= bit;
    ++e.received;
    std::memcpy(e.bytes.data() + std::size_t{idx} * kFramePayload, frame.payload.data(),
                kFramePayload);

    if (e.received < e.frame_count) return {Feed::Pending, std::nullopt};

    RpcMessage msg;
    msg.connection_id = frame.connection_id;
    msg.rpc_id = frame.rpc_id;
    msg.kind = e.kind == FrameKind::Response ? MsgKind::Response : MsgKind::Request;
    msg.function_id = e.function_id;
    e.bytes.resize(e.payload_len_total);
    msg.payload = std::move(e.bytes);
    entries_.erase(it);
    return {Feed::Complete, std::move(msg)};
}

std::size_t Reassembler::evict_expired(uint64_t now) {
    std::size_t evicted = 0;
    for (auto it = entries_.begin(); it != entries_.end();) {
        if (now - it->second.first_ns > timeout_ns_) {
            it = entries_.erase(it);
            ++evicted;
        } else {
            ++it;
        }
    }
    timeouts_ += evicted;
    return evicted;
}

std::size_t encoded_size(std::span<const FieldDesc> fields) {
    std::size_t n = 0;
    for (const auto& f : fields) n += f.width;
    return n;
}

std::vector<uint8_t> encode_args(std::span<const FieldDesc> fields,
                                 std::span<const ArgValue> values) {
    if (fields.size() != values.size())
        throw TypeMismatch("expected " + std::to_string(fields.size()) + " values, got " +
                           std::to_string(values.size()));

    std::vector<uint8_t> out(encoded_size(fields), 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        const FieldDesc& f = fields[i];
        const ArgValue& v = values[i];
        switch (f.type) {
            case FieldType::Int32: {
                const int32_t* p = std::get_if<int32_t>(&v);
                if (!p) throw TypeMismatch("field '" + f.name + "' expects int32");
                put_u32(&out[off], static_cast<uint32_t>(*p));
                break;
            }
            case FieldType::Int64: {
                const int64_t* p = std::get_if<int64_t>(&v);
                if (!p) throw TypeMismatch("field '" + f.name + "' expects int64");
                const uint64_t u = static_cast<uint64_t>(*p);
                put_u32(&out[off], static_cast<uint32_t>(u));
                put_u32(&out[off + 4], static_cast<uint32_t>(u >> 32));
                break;
            }
            case FieldType::Chars: {
                const std::string* p = std::get_if<std::string>(&v);
                if (!p) throw TypeMismatch("field '" + f.name + "' expects char[N]");
                if (p->size() > f.width)
                    throw LengthOverflow("field '" + f.name + "': " +
                                         std::to_string(p->size()) + " bytes > char[" +
                                         std::to_string(f.width) + "]");
                std::memcpy(&out[off], p->data(), p->size());
                break;
            }
        }
        off += f.width;
    }
    return out;
}

std::vector<ArgValue> decode_args(std::span<const FieldDesc> fields,
                                  std::span<const uint8_t> bytes) {
    if (bytes.size() != encoded_size(fields))
        throw TypeMismatch("buffer of " + std::to_string(bytes.size()) +
                           " bytes does not match field spec of " +
                           std::to_string(encoded_size(fields)));

    std::vector<ArgValue> out;
    out.reserve(fields.size());
    std::size_t off = 0;
    for (const auto& f : fields) {
        switch (f.type) {
            case FieldType::Int32:
                out.emplace_back(static_cast<int32_t>(get_u32(&bytes[off])));
                break;
            case FieldType::Int64: {
                const uint64_t lo = get_u32(&bytes[off]);
                const uint64_t hi = get_u32(&bytes[off + 4]);
                out.emplace_back(static_cast<int64_t>(lo | (hi << 32)));
                break;
            }
            case FieldType::Chars: {
                std::size_t n = f.width;
                while (n > 0 && bytes[off + n - 1] == 0) --n;
                out.emplace_back(std::string(reinterpret_cast<const char*>(&bytes[off]), n));
                break;
            }
        }
        off += f.width;
    }
    return out;
}

}  // namespace rpcfab::wire

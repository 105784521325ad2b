#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "kvcomm/model.hpp"
#include "kvcomm/payload.hpp"

namespace kvcomm {

enum class TransportKind { InProcess, File, Tcp };

TransportKind transport_from_string(const std::string& s);
std::string transport_to_string(TransportKind k);

/// Reads KVCOMM_ADDR / KVCOMM_TIMEOUT_MS with library defaults.
struct TransportOptions {
    std::string address = "127.0.0.1:0";
    int timeout_ms = 30000;
    static TransportOptions from_env();
};

/// Context prefill on the sender followed by payload extraction; the sender
/// never decodes.
KvPayload sender_run(const Model& sender, const std::vector<std::uint32_t>& context,
                     const std::vector<std::uint32_t>& layers, KvDtype dtype);

struct ReceiverResult {
    std::vector<std::uint32_t> tokens;
    Tensor prefill_logits; // [|Q| × vocab]
    std::vector<std::vector<float>> step_logits;
    std::vector<std::string> warnings;
    std::uint64_t prefill_flops = 0;
    std::uint64_t decode_flops = 0;
};

/// Query prefill with the payload's KV injected at its layers, then greedy
/// decoding with the injected rows kept in the cache. Query positions follow
/// the transmitted context (offset = payload seq length) unless the payload
/// is empty, in which case the run degenerates to the no-communication
/// baseline, offset 0 included.
ReceiverResult receiver_run(const Model& receiver, const std::vector<std::uint32_t>& query,
                            const KvPayload& payload, std::uint32_t max_new,
                            std::optional<std::uint32_t> eos_id = std::nullopt);

struct Session {
    const Model* sender = nullptr;
    const Model* receiver = nullptr;
    std::vector<std::uint32_t> layers; // frozen before the first test sample
    TransportKind transport = TransportKind::InProcess;
    KvDtype dtype = KvDtype::F32;
    TransportOptions options;
    std::string file_path; // file transport target

    void validate() const;
};

struct CommCostReport {
    std::uint64_t sender_prefill_flops = 0;
    std::uint64_t receiver_prefill_flops = 0;
    std::uint64_t receiver_decode_flops = 0;
    std::uint64_t bytes_on_wire = 0;
};

struct EndToEndResult {
    ReceiverResult receiver;
    CommCostReport cost;
    KvPayload payload; // as decoded on the receiving side
};

EndToEndResult end_to_end(const Session& session, const std::vector<std::uint32_t>& context,
                          const std::vector<std::uint32_t>& query, std::uint32_t max_new,
                          std::optional<std::uint32_t> eos_id = std::nullopt);

// --- TCP transport: one length-prefixed frame per payload, 1-byte ack ---

std::uint8_t ack_code_for(ErrorCode code);

/// Accepts loopback connections and hands each decoded payload to the
/// handler; a frame that fails to decode is nacked with its error code and
/// the connection continues.
class TcpPayloadServer {
public:
    using Handler = std::function<void(KvPayload payload)>;

    TcpPayloadServer(const TransportOptions& options, Handler handler);
    ~TcpPayloadServer();

    TcpPayloadServer(const TcpPayloadServer&) = delete;
    TcpPayloadServer& operator=(const TcpPayloadServer&) = delete;

    int port() const { return port_; }
    void stop();

private:
    void serve();
    void handle_connection(int fd);

    int listen_fd_ = -1;
    int port_ = 0;
    int timeout_ms_ = 30000;
    Handler handler_;
    std::thread thread_;
};

class TcpPayloadClient {
public:
    explicit TcpPayloadClient(const TransportOptions& options);
    ~TcpPayloadClient();

    TcpPayloadClient(const TcpPayloadClient&) = delete;
    TcpPayloadClient& operator=(const TcpPayloadClient&) = delete;

    /// Sends one frame and waits for the ack; a nonzero ack throws
    /// TransportError carrying the nack code.
    void send_payload(const std::vector<std::uint8_t>& bytes);
    /// Raw frame without local validation, for fault-injection tests.
    std::uint8_t send_frame_raw(const std::vector<std::uint8_t>& bytes);
    /// Declares the full length but stops after `keep` bytes and half-closes,
    /// so the peer sees a short frame. Returns the nack code.
    std::uint8_t send_frame_truncated(const std::vector<std::uint8_t>& bytes, std::size_t keep);

private:
    int fd_ = -1;
};

void write_payload_file(const std::string& path, const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> read_payload_file(const std::string& path);

} // namespace kvcomm

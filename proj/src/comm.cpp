#include "kvcomm/comm.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <fstream>

#include "kvcomm/tensor.hpp"

namespace kvcomm {

namespace {

std::pair<std::string, int> split_addr(const std::string& addr) {
    const auto colon = addr.rfind(':');
    if (colon == std::string::npos)
        throw ConfigError("address must be host:port, got " + addr);
    std::string host = addr.substr(0, colon);
    if (host.empty() || host == "localhost") host = "127.0.0.1";
    const int port = std::atoi(addr.c_str() + colon + 1);
    if (port < 0 || port > 65535) throw ConfigError("bad port in " + addr);
    return {host, port};
}

void set_socket_timeout(int fd, int timeout_ms) {
    timeval tv{};
    tv.tv_sec = timeout_ms / 1000;
    tv.tv_usec = (timeout_ms % 1000) * 1000;
    setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
    setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof(tv));
}

bool read_exact(int fd, void* buf, std::size_t len) {
    std::uint8_t* p = static_cast<std::uint8_t*>(buf);
    std::size_t got = 0;
    while (got < len) {
        const ssize_t n = ::recv(fd, p + got, len - got, 0);
        if (n == 0) return false; // peer closed
        if (n < 0) {
            if (errno == EINTR) continue;
            throw TransportError(std::string("recv failed: ") + std::strerror(errno));
        }
        got += static_cast<std::size_t>(n);
    }
    return true;
}

void write_exact(int fd, const void* buf, std::size_t len) {
    const std::uint8_t* p = static_cast<const std::uint8_t*>(buf);
    std::size_t sent = 0;
    while (sent < len) {
        const ssize_t n = ::send(fd, p + sent, len - sent, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw TransportError(std::string("send failed: ") + std::strerror(errno));
        }
        sent += static_cast<std::size_t>(n);
    }
}

} // namespace

TransportKind transport_from_string(const std::string& s) {
    if (s == "in-process") return TransportKind::InProcess;
    if (s == "file") return TransportKind::File;
    if (s == "tcp") return TransportKind::Tcp;
    throw ConfigError("unknown transport: " + s);
}

std::string transport_to_string(TransportKind k) {
    switch (k) {
        case TransportKind::InProcess: return "in-process";
        case TransportKind::File: return "file";
        case TransportKind::Tcp: return "tcp";
    }
    return "?";
}

TransportOptions TransportOptions::from_env() {
    TransportOptions o;
    if (const char* addr = std::getenv("KVCOMM_ADDR")) o.address = addr;
    if (const char* t = std::getenv("KVCOMM_TIMEOUT_MS")) o.timeout_ms = std::atoi(t);
    if (o.timeout_ms <= 0) o.timeout_ms = 30000;
    return o;
}

KvPayload sender_run(const Model& sender, const std::vector<std::uint32_t>& context,
                     const std::vector<std::uint32_t>& layers, KvDtype dtype) {
    for (std::uint32_t l : layers)
        if (l >= sender.config().n_layers)
            throw ConfigError("sender_run: layer " + std::to_string(l) + " out of range");
    auto [trace, cache] = sender.prefill(context);
    return extract_payload(cache, layers, dtype, sender.model_id());
}

ReceiverResult receiver_run(const Model& receiver, const std::vector<std::uint32_t>& query,
                            const KvPayload& payload, std::uint32_t max_new,
                            std::optional<std::uint32_t> eos_id) {
    payload.validate();
    const ModelConfig& cfg = receiver.config();
    if (payload.total_layers != cfg.n_layers)
        throw ProtocolError(ErrorCode::Invariant,
                            "payload layer count does not match receiver model");
    if (!payload.entries.empty()) {
        const LayerKv& e = payload.entries.front();
        if (e.keys.shape[0] != cfg.n_kv_heads || e.keys.shape[2] != cfg.head_dim)
            throw ProtocolError(ErrorCode::Invariant,
                                "payload head shape does not match receiver model");
    }

    ReceiverResult result;
    if (payload.sender_model_id != receiver.model_id())
        result.warnings.push_back("sender model id mismatch (fine-tuned pair?): payload " +
                                  std::to_string(payload.sender_model_id) + " vs receiver " +
                                  std::to_string(receiver.model_id()));

    // an empty selection degenerates to the no-communication baseline,
    // including the position origin
    const bool inject = !payload.entries.empty();
    const std::uint32_t offset = inject ? payload.seq_len() : 0;
    const InjectedKv injected = payload.injection_map();

    const std::uint64_t before_prefill = matmul_flops();
    Model::PrefillOptions opts;
    opts.position_offset = offset;
    if (inject) opts.injected = &injected;
    auto [trace, own_cache] = receiver.prefill(query, opts);
    result.prefill_logits = trace.logits;
    result.prefill_flops = matmul_flops() - before_prefill;

    KvCacheSet cache = std::move(own_cache);
    if (inject)
        for (const LayerKv& e : payload.entries)
            cache[e.layer_index] = concat_inject(cache[e.layer_index], e);

    const std::size_t last = trace.logits.shape[0] - 1;
    std::vector<float> last_logits(trace.logits.data.begin() + last * cfg.vocab_size,
                                   trace.logits.data.begin() + (last + 1) * cfg.vocab_size);
    const std::uint64_t before_decode = matmul_flops();
    GenResult gen = receiver.greedy_continue(
        cache, last_logits, offset + static_cast<std::uint32_t>(query.size()), max_new, eos_id);
    result.decode_flops = matmul_flops() - before_decode;
    result.tokens = std::move(gen.tokens);
    result.step_logits = std::move(gen.step_logits);
    return result;
}

void Session::validate() const {
    if (!sender || !receiver) throw ConfigError("session needs sender and receiver models");
    const ModelConfig& s = sender->config();
    const ModelConfig& r = receiver->config();
    if (s.n_layers != r.n_layers || s.n_heads != r.n_heads ||
        s.n_kv_heads != r.n_kv_heads || s.head_dim != r.head_dim)
        throw ConfigError("sender and receiver must agree on L, H, kv heads and head_dim");
    for (std::uint32_t l : layers)
        if (l >= s.n_layers) throw ConfigError("session layer set out of range");
    if (transport == TransportKind::File && file_path.empty())
        throw ConfigError("file transport needs a path");
}

EndToEndResult end_to_end(const Session& session, const std::vector<std::uint32_t>& context,
                          const std::vector<std::uint32_t>& query, std::uint32_t max_new,
                          std::optional<std::uint32_t> eos_id) {
    session.validate();
    EndToEndResult result;

    const std::uint64_t before_sender = matmul_flops();
    KvPayload sent = sender_run(*session.sender, context, session.layers, session.dtype);
    result.cost.sender_prefill_flops = matmul_flops() - before_sender;

    std::vector<std::uint8_t> bytes = serialize(sent);
    result.cost.bytes_on_wire = bytes.size();

    KvPayload received;
    switch (session.transport) {
        case TransportKind::InProcess: {
            received = deserialize(bytes);
            break;
        }
        case TransportKind::File: {
            write_payload_file(session.file_path, bytes);
            received = deserialize(read_payload_file(session.file_path));
            break;
        }
        case TransportKind::Tcp: {
            // loopback demonstration: a server thread owns the receiving end
            KvPayload inbox;
            std::atomic<bool> got{false};
            TransportOptions opts = session.options;
            TcpPayloadServer server(opts, [&inbox, &got](KvPayload p) {
                inbox = std::move(p);
                got.store(true);
            });
            {
                TransportOptions copts = opts;
                copts.address = "127.0.0.1:" + std::to_string(server.port());
                TcpPayloadClient client(copts);
                client.send_payload(bytes);
            } // close the connection so the server loops back to accept
            server.stop();
            if (!got.load()) throw TransportError("tcp transport delivered no payload");
            received = std::move(inbox);
            break;
        }
    }

    ReceiverResult rr = receiver_run(*session.receiver, query, received, max_new, eos_id);
    result.cost.receiver_prefill_flops = rr.prefill_flops;
    result.cost.receiver_decode_flops = rr.decode_flops;
    result.receiver = std::move(rr);
    result.payload = std::move(received);
    return result;
}

std::uint8_t ack_code_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::BadMagic: return 1;
        case ErrorCode::BadVersion: return 2;
        case ErrorCode::BadCrc: return 3;
        case ErrorCode::Truncated: return 4;
        case ErrorCode::Invariant: return 5;
        default: return 6;
    }
}

TcpPayloadServer::TcpPayloadServer(const TransportOptions& options, Handler handler)
    : timeout_ms_(options.timeout_ms), handler_(std::move(handler)) {
    const auto [host, port] = split_addr(options.address);

    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw TransportError("socket() failed");
    int one = 1;
    setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));

    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::inet_pton(AF_INET, host.empty() ? "127.0.0.1" : host.c_str(), &addr.sin_addr) != 1)
        throw ConfigError("bad listen host: " + host);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
        ::close(listen_fd_);
        throw TransportError("bind failed on " + options.address + ": " + std::strerror(errno));
    }
    if (::listen(listen_fd_, 8) != 0) {
        ::close(listen_fd_);
        throw TransportError("listen failed");
    }
    sockaddr_in bound{};
    socklen_t len = sizeof(bound);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
    port_ = ntohs(bound.sin_port);

    thread_ = std::thread([this] { serve(); });
}

TcpPayloadServer::~TcpPayloadServer() { stop(); }

void TcpPayloadServer::stop() {
    if (listen_fd_ >= 0) {
        ::shutdown(listen_fd_, SHUT_RDWR);
        ::close(listen_fd_);
        listen_fd_ = -1;
    }
    if (thread_.joinable()) thread_.join();
}

void TcpPayloadServer::serve() {
    while (true) {
        const int fd = ::accept(listen_fd_, nullptr, nullptr);
        if (fd < 0) return; // listener closed
        set_socket_timeout(fd, timeout_ms_);
        try {
            handle_connection(fd);
        } catch (...) {
            // connection-level failure; keep serving
        }
        ::close(fd);
    }
}

void TcpPayloadServer::handle_connection(int fd) {
    // strictly sequential frames: u32 length, payload bytes, 1-byte ack
    while (true) {
        std::uint32_t frame_len = 0;
        if (!read_exact(fd, &frame_len, sizeof(frame_len))) return; // clean EOF
        std::vector<std::uint8_t> bytes(frame_len);
        std::uint8_t ack = 0;
        if (!read_exact(fd, bytes.data(), bytes.size())) {
            ack = ack_code_for(ErrorCode::Truncated);
            write_exact(fd, &ack, 1);
            return;
        }
        try {
            KvPayload p = deserialize(bytes);
            if (handler_) handler_(std::move(p));
        } catch (const Error& e) {
            ack = ack_code_for(e.code());
        }
        write_exact(fd, &ack, 1);
    }
}

TcpPayloadClient::TcpPayloadClient(const TransportOptions& options) {
    const auto [host, port] = split_addr(options.address);
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw TransportError("socket() failed");
    set_socket_timeout(fd_, options.timeout_ms);

    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::inet_pton(AF_INET, host.empty() ? "127.0.0.1" : host.c_str(), &addr.sin_addr) != 1) {
        ::close(fd_);
        throw ConfigError("bad connect host: " + host);
    }
    if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
        ::close(fd_);
        throw TransportError("connect failed to " + options.address + ": " +
                             std::strerror(errno));
    }
}

TcpPayloadClient::~TcpPayloadClient() {
    if (fd_ >= 0) ::close(fd_);
}

std::uint8_t TcpPayloadClient::send_frame_raw(const std::vector<std::uint8_t>& bytes) {
    const std::uint32_t len = static_cast<std::uint32_t>(bytes.size());
    write_exact(fd_, &len, sizeof(len));
    write_exact(fd_, bytes.data(), bytes.size());
    std::uint8_t ack = 0;
    if (!read_exact(fd_, &ack, 1)) throw TransportError("connection closed before ack");
    return ack;
}

std::uint8_t TcpPayloadClient::send_frame_truncated(const std::vector<std::uint8_t>& bytes,
                                                    std::size_t keep) {
    const std::uint32_t len = static_cast<std::uint32_t>(bytes.size());
    write_exact(fd_, &len, sizeof(len));
    write_exact(fd_, bytes.data(), std::min(keep, bytes.size()));
    ::shutdown(fd_, SHUT_WR);
    std::uint8_t ack = 0;
    if (!read_exact(fd_, &ack, 1)) throw TransportError("connection closed before ack");
    return ack;
}

void TcpPayloadClient::send_payload(const std::vector<std::uint8_t>& bytes) {
    const std::uint8_t ack = send_frame_raw(bytes);
    if (ack != 0)
        throw TransportError("payload nacked with code " + std::to_string(ack));
}

void write_payload_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("write failed: " + path);
}

std::vector<std::uint8_t> read_payload_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

} // namespace kvcomm

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "qsci/network.hpp"
#include "qsci/tensor.hpp"

namespace qsci {

/// Little-endian byte sink.
class ByteWriter {
public:
    void u8(uint8_t v) { buf_.push_back(static_cast<char>(v)); }
    void u16(uint16_t v);
    void u32(uint32_t v);
    void u64(uint64_t v);
    void i64(int64_t v) { u64(static_cast<uint64_t>(v)); }
    void f32(float v);
    void raw(std::string_view bytes) { buf_.append(bytes); }
    /// u32 length followed by the bytes.
    void str(std::string_view s);
    const std::string& data() const noexcept { return buf_; }

private:
    std::string buf_;
};

/// Little-endian byte source; truncation throws DataError naming `context`.
class ByteReader {
public:
    ByteReader(std::string_view bytes, std::string context) : bytes_(bytes), ctx_(std::move(context)) {}
    uint8_t u8();
    uint16_t u16();
    uint32_t u32();
    uint64_t u64();
    int64_t i64() { return static_cast<int64_t>(u64()); }
    float f32();
    std::string_view raw(size_t n);
    std::string str();
    bool done() const noexcept { return pos_ == bytes_.size(); }
    [[noreturn]] void fail(const std::string& what) const;

private:
    std::string_view bytes_;
    std::string ctx_;
    size_t pos_ = 0;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

inline constexpr std::string_view kCheckpointMagic = "QSCICKPT";
inline constexpr std::string_view kDataMagic = "QSCIDATA";
inline constexpr uint16_t kArchiveVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor value;
};

/// Generic tensor container: magic, version, fingerprint, config text and
/// named float32 records (name, dtype tag, rank, dims, payload).
struct Archive {
    std::string magic;
    uint16_t version = kArchiveVersion;
    uint64_t fingerprint = 0;
    std::string config_text;
    std::vector<NamedTensor> records;

    const Tensor* find(std::string_view name) const;
    const Tensor& at(std::string_view name) const;
};

std::string encode_archive(const Archive& a);
Archive decode_archive(std::string_view bytes, std::string_view expect_magic, const std::string& context);
void save_archive(const std::string& path, const Archive& a);
Archive load_archive(const std::string& path, std::string_view expect_magic);

/// FNV-1a over the little-endian float payload.
uint64_t tensor_checksum(const Tensor& t);

/// Snapshot of every model parameter, including quantizer scales and shifts.
Archive make_checkpoint(QNet& net);
/// Config recorded in a checkpoint.
QNetConfig checkpoint_config(const Archive& ckpt);
/// Restores every parameter; the checkpoint fingerprint must match the net's.
void load_checkpoint(QNet& net, const Archive& ckpt);
/// Copies weights and biases from a full-precision checkpoint with the same
/// geometry. Layers absent from it (shortcuts, shifts) keep their values.
void init_from_checkpoint(QNet& net, const Archive& fp_ckpt);

}  // namespace qsci

#include "qsci/container.hpp"

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "qsci/config.hpp"
#include "qsci/errors.hpp"

namespace qsci {

void ByteWriter::u16(uint16_t v) {
    for (int i = 0; i < 2; ++i) u8(static_cast<uint8_t>(v >> (8 * i)));
}
void ByteWriter::u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<uint8_t>(v >> (8 * i)));
}
void ByteWriter::u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<uint8_t>(v >> (8 * i)));
}
void ByteWriter::f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
void ByteWriter::str(std::string_view s) {
    u32(static_cast<uint32_t>(s.size()));
    raw(s);
}

void ByteReader::fail(const std::string& what) const {
    throw DataError(ctx_ + ": " + what + " at byte " + std::to_string(pos_));
}

std::string_view ByteReader::raw(size_t n) {
    if (bytes_.size() - pos_ < n) fail("truncated");
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
}

uint8_t ByteReader::u8() { return static_cast<uint8_t>(raw(1)[0]); }

uint16_t ByteReader::u16() {
    auto b = raw(2);
    return static_cast<uint16_t>(static_cast<uint8_t>(b[0]) | (static_cast<uint8_t>(b[1]) << 8));
}

uint32_t ByteReader::u32() {
    auto b = raw(4);
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<uint8_t>(b[static_cast<size_t>(i)]);
    return v;
}

uint64_t ByteReader::u64() {
    auto b = raw(8);
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<uint8_t>(b[static_cast<size_t>(i)]);
    return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

std::string ByteReader::str() {
    const uint32_t n = u32();
    return std::string(raw(n));
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, std::string_view bytes) {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for '" + path + "'");
}

const Tensor* Archive::find(std::string_view name) const {
    for (const auto& r : records) {
        if (r.name == name) return &r.value;
    }
    return nullptr;
}

const Tensor& Archive::at(std::string_view name) const {
    const Tensor* t = find(name);
    if (!t) throw DataError("archive has no record '" + std::string(name) + "'");
    return *t;
}

namespace {
constexpr uint8_t kDtypeF32 = 1;
}

std::string encode_archive(const Archive& a) {
    if (a.magic.size() != 8) throw ConfigError("archive magic must be 8 bytes");
    ByteWriter w;
    w.raw(a.magic);
    w.u16(a.version);
    w.u64(a.fingerprint);
    w.str(a.config_text);
    w.u32(static_cast<uint32_t>(a.records.size()));
    for (const auto& r : a.records) {
        w.str(r.name);
        w.u8(kDtypeF32);
        w.u8(static_cast<uint8_t>(r.value.rank()));
        for (int64_t d : r.value.shape()) w.i64(d);
        for (float v : r.value.data()) w.f32(v);
    }
    return w.data();
}

Archive decode_archive(std::string_view bytes, std::string_view expect_magic, const std::string& context) {
    ByteReader r(bytes, context);
    Archive a;
    a.magic = std::string(r.raw(8));
    if (a.magic != expect_magic) {
        r.fail("bad magic '" + a.magic + "', expected '" + std::string(expect_magic) + "'");
    }
    a.version = r.u16();
    if (a.version != kArchiveVersion) r.fail("unsupported version " + std::to_string(a.version));
    a.fingerprint = r.u64();
    a.config_text = r.str();
    const uint32_t n = r.u32();
    for (uint32_t i = 0; i < n; ++i) {
        NamedTensor t;
        t.name = r.str();
        if (r.u8() != kDtypeF32) r.fail("unknown dtype in record '" + t.name + "'");
        const uint8_t rank = r.u8();
        Shape s(rank);
        for (auto& d : s) {
            d = r.i64();
            if (d < 0) r.fail("negative extent in record '" + t.name + "'");
        }
        const size_t count = shape_numel(s);
        if (count > (bytes.size() / 4)) r.fail("record '" + t.name + "' larger than file");
        std::vector<float> vals(count);
        for (auto& v : vals) v = r.f32();
        t.value = Tensor(s, std::move(vals));
        a.records.push_back(std::move(t));
    }
    if (!r.done()) r.fail("trailing bytes");
    return a;
}

void save_archive(const std::string& path, const Archive& a) { write_file(path, encode_archive(a)); }

Archive load_archive(const std::string& path, std::string_view expect_magic) {
    return decode_archive(read_file(path), expect_magic, path);
}

uint64_t tensor_checksum(const Tensor& t) {
    ByteWriter w;
    for (float v : t.data()) w.f32(v);
    return fnv1a64(w.data());
}

Archive make_checkpoint(QNet& net) {
    Archive a;
    a.magic = std::string(kCheckpointMagic);
    a.fingerprint = net.config().fingerprint();
    a.config_text = net.config().canonical();
    for (Parameter* p : net.parameters()) a.records.push_back({p->name, p->value});
    return a;
}

QNetConfig checkpoint_config(const Archive& ckpt) {
    QNetConfig c = parse_net_config(ckpt.config_text);
    if (c.fingerprint() != ckpt.fingerprint) throw DataError("checkpoint fingerprint does not match its config text");
    return c;
}

void load_checkpoint(QNet& net, const Archive& ckpt) {
    if (ckpt.fingerprint != net.config().fingerprint()) {
        throw ConfigError("checkpoint fingerprint mismatch: file was produced by a different network config");
    }
    for (Parameter* p : net.parameters()) {
        const Tensor& t = ckpt.at(p->name);
        if (t.shape() != p->value.shape()) throw DataError("checkpoint record '" + p->name + "' has wrong shape");
        p->value = t;
    }
}

void init_from_checkpoint(QNet& net, const Archive& fp_ckpt) {
    const QNetConfig src = checkpoint_config(fp_ckpt);
    if (src.geometry_fingerprint() != net.config().geometry_fingerprint()) {
        throw ConfigError("init checkpoint geometry differs from the network config");
    }
    auto copy = [&](Parameter& p) {
        if (const Tensor* t = fp_ckpt.find(p.name)) {
            if (t->shape() != p.value.shape()) throw DataError("init record '" + p.name + "' has wrong shape");
            p.value = *t;
        }
    };
    for (auto& l : net.layers()) {
        copy(l.weight);
        copy(l.bias);
    }
    for (auto& a : net.attentions()) {
        if (a.shift) {
            copy(a.beta_q);
            copy(a.beta_k);
        }
    }
}

}  // namespace qsci

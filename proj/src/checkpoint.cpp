#include "npstream/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "npstream/error.hpp"
#include "npstream/nn_blocks.hpp"

namespace npstream {

namespace {

std::array<std::uint32_t, 256> make_crc_table() {
    std::array<std::uint32_t, 256> table{};
    for (std::uint32_t i = 0; i < 256; ++i) {
        std::uint32_t c = i;
        for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
        table[i] = c;
    }
    return table;
}

class Writer {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void i64v(i64 v) { u64(static_cast<std::uint64_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        buf_.insert(buf_.end(), s.begin(), s.end());
    }
    std::vector<std::uint8_t> take() { return std::move(buf_); }

private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    Reader(const std::uint8_t* data, std::size_t n) : data_(data), size_(n) {}

    std::uint8_t u8() {
        need(1);
        return data_[pos_++];
    }
    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
        return v;
    }
    i64 i64v() { return static_cast<i64>(u64()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }
    std::size_t remaining() const { return size_ - pos_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > size_) throw ValueError("checkpoint: truncated file");
    }
    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

void write_config(Writer& w, const ModelConfig& cfg) {
    w.str(family_name(cfg.family));
    w.i64v(cfg.d_x);
    w.i64v(cfg.d_y);
    w.i64v(cfg.d_model);
    w.i64v(cfg.heads);
    w.i64v(cfg.qk_dim);
    w.i64v(cfg.v_dim);
    w.i64v(cfg.layers);
    w.i64v(cfg.mlp_hidden);
    w.i64v(cfg.embed_hidden);
    w.i64v(cfg.lbanp_latents);
    w.f64(cfg.sigma_min2);
}

ModelConfig read_config(Reader& r) {
    ModelConfig cfg;
    cfg.family = family_from_string(r.str());
    cfg.d_x = r.i64v();
    cfg.d_y = r.i64v();
    cfg.d_model = r.i64v();
    cfg.heads = static_cast<int>(r.i64v());
    cfg.qk_dim = r.i64v();
    cfg.v_dim = r.i64v();
    cfg.layers = static_cast<int>(r.i64v());
    cfg.mlp_hidden = r.i64v();
    cfg.embed_hidden = r.i64v();
    cfg.lbanp_latents = r.i64v();
    cfg.sigma_min2 = r.f64();
    cfg.validate();
    return cfg;
}

}  // namespace

std::uint32_t crc32(const std::uint8_t* data, std::size_t n) {
    static const std::array<std::uint32_t, 256> table = make_crc_table();
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

std::vector<std::uint8_t> serialize_checkpoint(const ModelParams& model) {
    Writer payload;
    write_config(payload, model.cfg);

    ModelParams& mutable_model = const_cast<ModelParams&>(model);
    NamedParams<double> named;
    collect_params(mutable_model, named);
    payload.u64(named.size());
    for (const auto& [name, tensor] : named) {
        payload.str(name);
        payload.u32(static_cast<std::uint32_t>(tensor->rank()));
        for (i64 d = 0; d < tensor->rank(); ++d) payload.i64v(tensor->dim(d));
        for (double v : tensor->data) payload.f64(v);
    }
    const std::vector<std::uint8_t> body = payload.take();

    Writer out;
    out.u8('N');
    out.u8('P');
    out.u8('C');
    out.u8('K');
    out.u32(kCheckpointVersion);
    out.u64(body.size());
    std::vector<std::uint8_t> bytes = out.take();
    bytes.insert(bytes.end(), body.begin(), body.end());
    const std::uint32_t crc = crc32(body.data(), body.size());
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));
    return bytes;
}

ModelParams deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader header(bytes.data(), bytes.size());
    if (header.u8() != 'N' || header.u8() != 'P' || header.u8() != 'C' || header.u8() != 'K')
        throw ValueError("checkpoint: bad magic, not a checkpoint file");
    const std::uint32_t version = header.u32();
    if (version != kCheckpointVersion)
        throw ValueError("checkpoint: unsupported format version " + std::to_string(version));
    const std::uint64_t payload_size = header.u64();
    if (header.remaining() < payload_size + 4) throw ValueError("checkpoint: truncated file");
    if (header.remaining() > payload_size + 4) throw ValueError("checkpoint: trailing bytes after checksum");

    const std::uint8_t* payload = bytes.data() + (bytes.size() - payload_size - 4);
    Reader crc_reader(payload + payload_size, 4);
    const std::uint32_t stored_crc = crc_reader.u32();
    if (crc32(payload, payload_size) != stored_crc) throw ValueError("checkpoint: checksum mismatch");

    Reader r(payload, payload_size);
    const ModelConfig cfg = read_config(r);

    Rng scratch(0);
    ModelParams model = make_model(cfg, scratch);
    NamedParams<double> named;
    collect_params(model, named);

    const std::uint64_t count = r.u64();
    if (count != named.size())
        throw ValueError("checkpoint: tensor table holds " + std::to_string(count) + " entries, model needs " +
                         std::to_string(named.size()));
    for (std::uint64_t t = 0; t < count; ++t) {
        const std::string name = r.str();
        if (name != named[t].first)
            throw ValueError("checkpoint: unexpected tensor '" + name + "', wanted '" + named[t].first + "'");
        Tensor* dst = named[t].second;
        const std::uint32_t rank = r.u32();
        if (static_cast<i64>(rank) != dst->rank()) throw ValueError("checkpoint: rank mismatch for '" + name + "'");
        for (std::uint32_t d = 0; d < rank; ++d)
            if (r.i64v() != dst->dim(d)) throw ValueError("checkpoint: shape mismatch for '" + name + "'");
        for (double& v : dst->data) v = r.f64();
    }
    if (r.remaining() != 0) throw ValueError("checkpoint: trailing bytes in payload");
    return model;
}

void save_checkpoint(const ModelParams& model, const std::string& path) {
    const std::vector<std::uint8_t> bytes = serialize_checkpoint(model);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValueError("checkpoint: cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ValueError("checkpoint: write failed for '" + path + "'");
}

ModelParams load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValueError("checkpoint: cannot open '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

ModelParams load_checkpoint(const std::string& path, Family expected) {
    ModelParams m = load_checkpoint(path);
    if (m.cfg.family != expected)
        throw ValueError(std::string("checkpoint: holds a ") + family_name(m.cfg.family) + " model, expected " +
                         family_name(expected));
    return m;
}

}  // namespace npstream

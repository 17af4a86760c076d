#include "numsnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace numsnet {

namespace {

constexpr char kMagic[8] = {'N', 'U', 'M', 'S', 'C', 'K', 'P', '1'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts are not supported");

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= data[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

struct Writer {
    std::vector<std::uint8_t> buf;
    template <class T>
    void raw(const T& v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        buf.insert(buf.end(), p, p + sizeof(T));
    }
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf.insert(buf.end(), b, b + n);
    }
};

struct Reader {
    const std::uint8_t* p;
    std::size_t remaining;
    template <class T>
    T raw() {
        if (remaining < sizeof(T)) throw FormatError("checkpoint: record runs past end of file");
        T v;
        std::memcpy(&v, p, sizeof(T));
        p += sizeof(T);
        remaining -= sizeof(T);
        return v;
    }
    void bytes(void* dst, std::size_t n) {
        if (remaining < n) throw FormatError("checkpoint: record runs past end of file");
        std::memcpy(dst, p, n);
        p += n;
        remaining -= n;
    }
};

}  // namespace

void save_checkpoint(const ModelGraph& model, const std::string& path,
                     const AdamState<float>* optimizer) {
    Writer w;
    w.bytes(kMagic, sizeof(kMagic));
    w.raw(kVersion);
    w.raw(static_cast<std::uint8_t>(model.arch()));
    std::uint8_t flags = 0;
    if (model.options().deep_supervision) flags |= 1;
    if (model.options().batchnorm) flags |= 2;
    w.raw(flags);
    w.raw(std::uint16_t{0});
    w.raw(static_cast<std::uint32_t>(model.num_classes()));
    for (auto wd : model.widths()) w.raw(static_cast<std::uint32_t>(wd));
    w.raw(model.options().bn_momentum);
    w.raw(model.options().bn_eps);
    w.raw(model.options().dropout_rate);

    const auto& params = model.params();
    w.raw(static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        w.raw(static_cast<std::uint16_t>(p.name.size()));
        w.bytes(p.name.data(), p.name.size());
        w.raw(std::uint8_t{0});  // dtype float32
        w.raw(static_cast<std::uint8_t>(p.trainable ? 1 : 0));
        w.raw(static_cast<std::uint8_t>(p.value.shape().rank()));
        w.raw(std::uint8_t{0});
        for (auto d : p.value.shape().dims) w.raw(static_cast<std::int64_t>(d));
        w.bytes(p.value.data().data(), p.value.data().size() * sizeof(float));
    }

    w.raw(static_cast<std::uint8_t>(optimizer ? 1 : 0));
    if (optimizer) {
        w.raw(optimizer->lr);
        w.raw(optimizer->beta1);
        w.raw(optimizer->beta2);
        w.raw(optimizer->eps);
        w.raw(static_cast<std::int64_t>(optimizer->t));
        w.raw(static_cast<std::uint32_t>(optimizer->m.size()));
        for (std::size_t i = 0; i < optimizer->m.size(); ++i) {
            w.raw(static_cast<std::uint64_t>(optimizer->m[i].size()));
            w.bytes(optimizer->m[i].data(), optimizer->m[i].size() * sizeof(float));
            w.bytes(optimizer->v[i].data(), optimizer->v[i].size() * sizeof(float));
        }
    }

    w.raw(fnv1a64(w.buf.data(), w.buf.size()));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out.write(reinterpret_cast<const char*>(w.buf.data()),
              static_cast<std::streamsize>(w.buf.size()));
    if (!out) throw IoError("short write to checkpoint: " + path);
}

LoadResult load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());

    if (buf.size() < sizeof(kMagic) + 8 ||
        std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
        throw FormatError("not a checkpoint file: " + path);
    std::uint64_t stored;
    std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
    if (stored != fnv1a64(buf.data(), buf.size() - 8))
        throw ChecksumError("checkpoint checksum mismatch (truncated or corrupted): " + path);

    Reader r{buf.data() + sizeof(kMagic), buf.size() - sizeof(kMagic) - 8};
    const auto version = r.raw<std::uint32_t>();
    if (version != kVersion)
        throw FormatError("checkpoint format version " + std::to_string(version) +
                          " is not supported (expected " + std::to_string(kVersion) + ")");
    const auto arch_tag = r.raw<std::uint8_t>();
    if (arch_tag > 4) throw FormatError("checkpoint names an unknown architecture tag");
    const auto flags = r.raw<std::uint8_t>();
    r.raw<std::uint16_t>();
    BuildOptions opts;
    opts.num_classes = static_cast<int>(r.raw<std::uint32_t>());
    std::array<std::int64_t, 5> widths{};
    for (auto& wd : widths) wd = r.raw<std::uint32_t>();
    opts.widths = widths;
    opts.deep_supervision = flags & 1;
    opts.batchnorm = flags & 2;
    opts.bn_momentum = r.raw<float>();
    opts.bn_eps = r.raw<float>();
    opts.dropout_rate = r.raw<float>();

    LoadResult result{ModelGraph::build(static_cast<Arch>(arch_tag), opts), std::nullopt};

    const auto count = r.raw<std::uint32_t>();
    if (count != result.model.params().size())
        throw FormatError("checkpoint has " + std::to_string(count) +
                          " parameter records, architecture expects " +
                          std::to_string(result.model.params().size()));
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.raw<std::uint16_t>();
        std::string name(name_len, '\0');
        r.bytes(name.data(), name_len);
        const auto dtype = r.raw<std::uint8_t>();
        if (dtype != 0) throw FormatError("checkpoint record " + name + " has unknown dtype");
        r.raw<std::uint8_t>();  // trainable flag; authoritative value comes from the build
        const auto ndim = r.raw<std::uint8_t>();
        r.raw<std::uint8_t>();
        std::vector<std::int64_t> dims(ndim);
        for (auto& d : dims) d = r.raw<std::int64_t>();
        if (!result.model.has_param(name))
            throw FormatError("checkpoint record names unknown parameter: " + name);
        Tensor dst = result.model.param(name);
        if (dst.shape().dims != dims) {
            Shape got{dims};
            throw ShapeError("checkpoint record " + name + " has shape " + got.str() +
                             ", architecture expects " + dst.shape().str());
        }
        r.bytes(dst.mutable_data().data(), dst.mutable_data().size() * sizeof(float));
    }

    if (r.raw<std::uint8_t>()) {
        AdamState<float> st;
        st.lr = r.raw<float>();
        st.beta1 = r.raw<float>();
        st.beta2 = r.raw<float>();
        st.eps = r.raw<float>();
        st.t = r.raw<std::int64_t>();
        const auto nparams = r.raw<std::uint32_t>();
        st.m.resize(nparams);
        st.v.resize(nparams);
        for (std::uint32_t i = 0; i < nparams; ++i) {
            const auto n = r.raw<std::uint64_t>();
            st.m[i].resize(n);
            st.v[i].resize(n);
            r.bytes(st.m[i].data(), n * sizeof(float));
            r.bytes(st.v[i].data(), n * sizeof(float));
        }
        result.optimizer = std::move(st);
    }
    return result;
}

ModelGraph transfer_adapt(const ModelGraph& source, int new_num_classes, std::uint64_t seed) {
    if (new_num_classes < 1) throw ValueError("transfer_adapt: new_num_classes must be >= 1");
    BuildOptions opts = source.options();
    opts.num_classes = new_num_classes;
    opts.seed = seed;
    ModelGraph adapted = ModelGraph::build(source.arch(), opts);
    for (const auto& p : source.params()) {
        if (p.name.rfind("head", 0) == 0) continue;  // heads are class-count dependent
        Tensor dst = adapted.param(p.name);
        if (dst.shape() != p.value.shape())
            throw ShapeError("transfer_adapt: parameter " + p.name + " shape changed");
        std::copy(p.value.data().begin(), p.value.data().end(), dst.mutable_data().begin());
    }
    return adapted;
}

}  // namespace numsnet

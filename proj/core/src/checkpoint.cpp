#include "cellsynth/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace cellsynth {

namespace {

constexpr char kMagic[4] = {'C', 'S', 'Y', 'N'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <class T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

Json read_header(std::ifstream& in, const std::filesystem::path& path) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) throw InputError("not a checkpoint archive: " + path.string());
    const auto version = read_pod<std::uint32_t>(in);
    if (version != kVersion) throw InputError("unsupported checkpoint version " + std::to_string(version));
    const auto len = read_pod<std::uint64_t>(in);
    if (!in || len > (std::uint64_t(1) << 32)) throw InputError("corrupt checkpoint header: " + path.string());
    std::string text(len, '\0');
    in.read(text.data(), std::streamsize(len));
    if (!in) throw IoError("truncated checkpoint: " + path.string());
    try {
        return Json::parse(text);
    } catch (const Json::exception& e) {
        throw InputError("corrupt checkpoint header in " + path.string() + ": " + e.what());
    }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Json header, const nn::ParameterStore& params) {
    Json list = Json::array();
    for (std::size_t i = 0; i < params.params().size(); ++i)
        list.push_back({{"name", params.names()[i]}, {"shape", params.params()[i].shape()}});
    header["parameters"] = std::move(list);
    const std::string text = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + path.string());
    out.write(kMagic, 4);
    write_pod(out, kVersion);
    write_pod(out, std::uint64_t(text.size()));
    out.write(text.data(), std::streamsize(text.size()));
    for (const auto& p : params.params())
        out.write(reinterpret_cast<const char*>(p.value().data()), std::streamsize(p.size() * sizeof(float)));
    if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

Json read_checkpoint_header(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    return read_header(in, path);
}

Json load_checkpoint(const std::filesystem::path& path, nn::ParameterStore& params) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    Json header = read_header(in, path);
    const Json& list = header.at("parameters");
    if (list.size() != params.params().size())
        throw InputError("checkpoint has " + std::to_string(list.size()) + " parameters, model expects " +
                         std::to_string(params.params().size()));
    for (std::size_t i = 0; i < list.size(); ++i) {
        auto& p = params.params()[i];
        if (list[i].at("name").get<std::string>() != params.names()[i] ||
            list[i].at("shape").get<std::vector<int>>() != p.shape())
            throw InputError("checkpoint parameter mismatch at '" + params.names()[i] + "'");
        in.read(reinterpret_cast<char*>(p.mutable_value().data()), std::streamsize(p.size() * sizeof(float)));
    }
    if (!in) throw IoError("truncated checkpoint: " + path.string());
    return header;
}

Json schedule_to_json(const DiffusionSchedule& s) { return {{"betas", s.beta}}; }

DiffusionSchedule schedule_from_json(const Json& j) {
    return DiffusionSchedule::from_betas(j.at("betas").get<std::vector<double>>());
}

namespace nn {

void to_json(Json& j, const UNetConfig& c) {
    j = {{"in_channels", c.in_channels},
         {"out_channels", c.out_channels},
         {"base_channels", c.base_channels},
         {"channel_mults", c.channel_mults},
         {"emb_dim", c.emb_dim},
         {"groups", c.groups},
         {"attention_levels", c.attention_levels},
         {"extra_embedding_features", c.extra_embedding_features}};
}

void from_json(const Json& j, UNetConfig& c) {
    j.at("in_channels").get_to(c.in_channels);
    j.at("out_channels").get_to(c.out_channels);
    j.at("base_channels").get_to(c.base_channels);
    j.at("channel_mults").get_to(c.channel_mults);
    j.at("emb_dim").get_to(c.emb_dim);
    j.at("groups").get_to(c.groups);
    j.at("attention_levels").get_to(c.attention_levels);
    j.at("extra_embedding_features").get_to(c.extra_embedding_features);
}

}  // namespace nn

}  // namespace cellsynth

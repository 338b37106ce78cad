#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "bitmix/serialize.hpp"

namespace bitmix {
namespace {

constexpr char kMagic[8] = {'B', 'M', 'C', 'K', 'P', 'T', '0', '1'};

std::string tmp_name(const std::string& path) { return path + ".tmp"; }

void rename_over(const std::string& tmp, const std::string& path) {
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        fail("serialize: cannot rename '" + tmp + "' to '" + path + "'");
}

}  // namespace

void atomic_write_file(const std::string& path, const std::string& content) {
    const std::string tmp = tmp_name(path);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        check(out.good(), "serialize: cannot write '" + tmp + "'");
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        check(out.good(), "serialize: short write to '" + tmp + "'");
    }
    rename_over(tmp, path);
}

void save_checkpoint(
    const std::string& path,
    const std::vector<std::pair<std::string, TensorPtr>>& tensors,
    const std::string& meta_json) {
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& [name, t] : tensors) {
        check(t != nullptr, "checkpoint: null tensor '" + name + "'");
        manifest.push_back({{"name", name}, {"shape", t->shape}});
    }
    nlohmann::json header{{"version", 1},
                          {"real_bytes", sizeof(real_t)},
                          {"meta", nlohmann::json::parse(meta_json)},
                          {"tensors", std::move(manifest)}};
    const std::string htext = header.dump();

    const std::string tmp = tmp_name(path);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        check(out.good(), "checkpoint: cannot write '" + tmp + "'");
        out.write(kMagic, sizeof(kMagic));
        const std::uint64_t hlen = htext.size();
        out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
        out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
        for (const auto& [name, t] : tensors)
            out.write(reinterpret_cast<const char*>(t->data.data()),
                      static_cast<std::streamsize>(t->data.size() *
                                                   sizeof(real_t)));
        check(out.good(), "checkpoint: short write to '" + tmp + "'");
    }
    rename_over(tmp, path);
}

std::string load_checkpoint(
    const std::string& path,
    const std::vector<std::pair<std::string, TensorPtr>>& tensors) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "checkpoint: cannot open '" + path + "'");
    char magic[8];
    in.read(magic, sizeof(magic));
    check(in.good() && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0,
          "checkpoint: '" + path + "' has a bad magic header");
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    check(in.good(), "checkpoint: truncated header length");
    std::string htext(hlen, '\0');
    in.read(htext.data(), static_cast<std::streamsize>(hlen));
    check(in.good(), "checkpoint: truncated header");
    const auto header = nlohmann::json::parse(htext);
    check(header.at("version").get<int>() == 1,
          "checkpoint: unsupported version");
    check(header.at("real_bytes").get<size_t>() == sizeof(real_t),
          "checkpoint: element width mismatch (file written by a build with "
          "a different real type)");

    std::map<std::string, TensorPtr> want;
    for (const auto& [name, t] : tensors) want[name] = t;
    size_t loaded = 0;
    for (const auto& entry : header.at("tensors")) {
        const auto name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<std::vector<i64>>();
        const i64 numel = shape_numel(shape);
        auto it = want.find(name);
        if (it == want.end()) {
            in.seekg(static_cast<std::streamoff>(numel * sizeof(real_t)),
                     std::ios::cur);
            continue;
        }
        check(it->second->shape == shape,
              "checkpoint: shape mismatch for '" + name + "': file " +
                  shape_str(shape) + ", model " +
                  shape_str(it->second->shape));
        in.read(reinterpret_cast<char*>(it->second->data.data()),
                static_cast<std::streamsize>(numel * sizeof(real_t)));
        check(in.good(), "checkpoint: truncated data for '" + name + "'");
        ++loaded;
    }
    check(loaded == want.size(),
          "checkpoint: '" + path + "' is missing " +
              std::to_string(want.size() - loaded) + " required tensors");
    return header.at("meta").dump();
}

}  // namespace bitmix

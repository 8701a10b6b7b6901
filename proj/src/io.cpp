#include "realign/io.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "realign/errors.hpp"

namespace realign {

namespace {

template <class T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const char* what) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError(std::string("truncated read: ") + what);
    return v;
}

void put_doubles(std::ostream& os, const std::vector<double>& v) {
    put<uint64_t>(os, v.size());
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> get_doubles(std::istream& is, const char* what) {
    auto n = get<uint64_t>(is, what);
    std::vector<double> v(n);
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!is) throw IoError(std::string("truncated read: ") + what);
    return v;
}

}  // namespace

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("save_tensor: cannot open " + path);
    os.write("RTEN", 4);
    put<uint32_t>(os, 1);
    put<uint32_t>(os, static_cast<uint32_t>(t.shape.size()));
    for (int64_t d : t.shape) put<int64_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!os) throw IoError("save_tensor: write failed for " + path);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_tensor: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "RTEN", 4) != 0)
        throw IoError("load_tensor: bad magic in " + path);
    auto version = get<uint32_t>(is, "version");
    if (version != 1) throw IoError("load_tensor: unsupported version");
    auto ndim = get<uint32_t>(is, "ndim");
    std::vector<int64_t> shape(ndim);
    for (auto& d : shape) d = get<int64_t>(is, "dim");
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!is) throw IoError("load_tensor: truncated data in " + path);
    return t;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("save_checkpoint: cannot open " + path);
    os.write("RLCK", 4);
    put<uint32_t>(os, 1);
    put<uint64_t>(os, ck.config_hash);
    put<uint64_t>(os, ck.state.seed);
    put<uint64_t>(os, ck.state.iteration);
    put<double>(os, ck.state.best_val_reward);
    put_doubles(os, ck.betas);
    put_doubles(os, ck.params);
    put_doubles(os, ck.state.velocity);
    if (!os) throw IoError("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "RLCK", 4) != 0)
        throw IoError("load_checkpoint: bad magic in " + path);
    auto version = get<uint32_t>(is, "version");
    if (version != 1) throw IoError("load_checkpoint: unsupported version");
    Checkpoint ck;
    ck.config_hash = get<uint64_t>(is, "config_hash");
    ck.state.seed = get<uint64_t>(is, "seed");
    ck.state.iteration = get<uint64_t>(is, "iteration");
    ck.state.best_val_reward = get<double>(is, "best_val_reward");
    ck.betas = get_doubles(is, "betas");
    ck.params = get_doubles(is, "params");
    ck.state.velocity = get_doubles(is, "velocity");
    ck.state.config_hash = ck.config_hash;
    return ck;
}

void export_attention_traces(const std::string& dir, const std::string& stem,
                             const std::vector<AttnTrace>& traces) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest = nlohmann::json::array();
    for (size_t i = 0; i < traces.size(); ++i) {
        const AttnTrace& tr = traces[i];
        Tensor t({tr.n_q, tr.n_k});
        t.data = tr.attn;
        std::string file = stem + "_step" + std::to_string(tr.step_t) + ".rten";
        save_tensor(dir + "/" + file, t);
        manifest.push_back({{"layer", "cross_attention_0"},
                            {"step", tr.step_t},
                            {"shape", {tr.n_q, tr.n_k}},
                            {"file", file}});
    }
    write_file(dir + "/" + stem + "_manifest.json", manifest.dump(2) + "\n");
}

std::string read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    std::string s((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return s;
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    os.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!os) throw IoError("write failed: " + path);
}

}  // namespace realign

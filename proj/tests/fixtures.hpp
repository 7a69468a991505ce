#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "mmga/config.hpp"
#include "mmga/dataset.hpp"
#include "mmga/harness.hpp"

namespace fx {

inline mmga::data::DatasetConfig tiny_data(std::uint64_t seed = 3) {
    mmga::data::DatasetConfig dc;
    dc.n_users = 12;
    dc.k_topics = 2;
    dc.posts_per_user = 2;
    dc.p_in = 0.6;
    dc.p_out = 0.1;
    dc.vocab_size = 16;
    dc.max_tokens = 8;
    dc.image = {1, 16, 16};
    dc.stat_dim = 4;
    dc.seed = seed;
    return dc;
}

inline mmga::ModelConfig tiny_model(const mmga::data::DatasetMeta& meta) {
    mmga::ModelConfig mc;
    mc.embed_dim = 16;
    mc.n_layers = 2;
    mc.n_heads = 2;
    mc.patch_size = 8;
    mc.mlp_dim = 32;
    mc.gnn_layers = 2;
    mc.head_hidden = 16;
    mmga::bind_to_dataset(mc, meta);
    return mc;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("mmga_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

}  // namespace fx

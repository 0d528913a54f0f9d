#pragma once

#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <string>

#include "mwm/error.hpp"

#define EXPECT_ERRC(stmt, errc)                                                              \
    do {                                                                                     \
        try {                                                                                \
            stmt;                                                                            \
            ADD_FAILURE() << "expected " << mwm::to_string(errc) << ", nothing thrown";       \
        } catch (const mwm::Error& e_) {                                                     \
            EXPECT_EQ(e_.code(), errc) << e_.what();                                         \
        }                                                                                    \
    } while (0)

namespace testutil {

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("mwm_test_" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

}  // namespace testutil

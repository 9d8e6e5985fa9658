#pragma once

#include <atomic>
#include <filesystem>
#include <string>

#include <unistd.h>

#include "trajectwin/data_model.hpp"

namespace testing {

namespace fs = std::filesystem;

// Visit with every target present (ADAS13, Ventricles, diagnosis).
inline trajectwin::VisitRecord visit(const std::string& id, double t, double adas13 = 10.0,
                                     double ventricles = 30000.0,
                                     trajectwin::Diagnosis dx = trajectwin::Diagnosis::CN) {
  trajectwin::VisitRecord v;
  v.patient_id = id;
  v.t = t;
  v.diagnosis = dx;
  v.set_feature(trajectwin::feature::ADAS13, adas13);
  v.set_feature(trajectwin::feature::Ventricles, ventricles);
  return v;
}

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("trajectwin-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

}  // namespace testing

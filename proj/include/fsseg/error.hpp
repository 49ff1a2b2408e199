#pragma once

#include <stdexcept>
#include <string>

namespace fsseg {

// Every failure mode carries a stable machine-readable name. The CLI prints
// the name as the first token on stderr and maps it to an exit code.
class Error : public std::runtime_error {
 public:
  Error(std::string name, const std::string& msg)
      : std::runtime_error(name + ": " + msg), name_(std::move(name)) {}
  const std::string& name() const noexcept { return name_; }

 private:
  std::string name_;
};

struct ShapeMismatch : Error {
  explicit ShapeMismatch(const std::string& m) : Error("ShapeMismatch", m) {}
};
struct NonFinite : Error {
  explicit NonFinite(const std::string& m) : Error("NonFinite", m) {}
};
struct GridMismatch : Error {
  explicit GridMismatch(const std::string& m) : Error("GridMismatch", m) {}
};
struct EmptyMask : Error {
  explicit EmptyMask(const std::string& m) : Error("EmptyMask", m) {}
};
struct PartitionError : Error {
  explicit PartitionError(const std::string& m) : Error("PartitionError", m) {}
};
struct BadMagic : Error {
  explicit BadMagic(const std::string& m) : Error("BadMagic", m) {}
};
struct TruncatedFile : Error {
  explicit TruncatedFile(const std::string& m) : Error("TruncatedFile", m) {}
};
struct DimOverflow : Error {
  explicit DimOverflow(const std::string& m) : Error("DimOverflow", m) {}
};
struct BadFormat : Error {
  explicit BadFormat(const std::string& m) : Error("BadFormat", m) {}
};
struct AnchorOutOfRange : Error {
  explicit AnchorOutOfRange(const std::string& m) : Error("AnchorOutOfRange", m) {}
};
struct MissingTeacherResolution : Error {
  explicit MissingTeacherResolution(const std::string& m)
      : Error("MissingTeacherResolution", m) {}
};
struct InsufficientSamples : Error {
  explicit InsufficientSamples(const std::string& m) : Error("InsufficientSamples", m) {}
};
struct FoldLeak : Error {
  explicit FoldLeak(const std::string& m) : Error("FoldLeak", m) {}
};
struct EmptyEpisode : Error {
  explicit EmptyEpisode(const std::string& m) : Error("EmptyEpisode", m) {}
};
struct BadConfig : Error {
  explicit BadConfig(const std::string& m) : Error("BadConfig", m) {}
};
struct IoError : Error {
  explicit IoError(const std::string& m) : Error("IoError", m) {}
};

}  // namespace fsseg

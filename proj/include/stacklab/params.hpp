#pragma once

#include "stacklab/tensor.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace stacklab {

static_assert(std::endian::native == std::endian::little,
              "parameter archives are little-endian; big-endian hosts are unsupported");

// Named parameter registry. Insertion order is the canonical enumeration
// order used by the optimizer, the archive format, and parameter counting.
template <class S> class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor<S> tensor;
  };

  Tensor<S>& add(const std::string& name, Matrix<S> value) {
    require(!index_.count(name), "ParamSet: duplicate parameter name " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, Tensor<S>::parameter(std::move(value))});
    return entries_.back().tensor;
  }

  Tensor<S>& at(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), "ParamSet: unknown parameter " + name);
    return entries_[it->second].tensor;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<Entry>& entries() const { return entries_; }
  size_t count() const { return entries_.size(); }

  long total_values() const {
    long n = 0;
    for (const auto& e : entries_) n += static_cast<long>(e.tensor.size());
    return n;
  }

  std::vector<Tensor<S>> tensors() const {
    std::vector<Tensor<S>> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.tensor);
    return out;
  }

  void zero_grads() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  std::vector<Matrix<S>> grads() const {
    std::vector<Matrix<S>> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.tensor.grad());
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, size_t> index_;
};

// Archive layout: a UTF-8 manifest (one record per parameter: name, shape,
// offset in 32-bit values), a "data <count>" line, then raw little-endian
// IEEE-754 32-bit values, row-major per parameter. An optional header line
// (e.g. the architecture spec string of a checkpoint) precedes the manifest.
inline constexpr const char* kArchiveMagic = "stacklab-params 1";

template <class S>
void save_archive(std::ostream& out, const ParamSet<S>& params, const std::string& header = "") {
  out << kArchiveMagic << "\n";
  if (!header.empty()) out << "header " << header << "\n";
  long offset = 0;
  for (const auto& e : params.entries()) {
    out << "param " << e.name << " " << e.tensor.rows() << " " << e.tensor.cols() << " " << offset << "\n";
    offset += static_cast<long>(e.tensor.size());
  }
  out << "data " << offset << "\n";
  for (const auto& e : params.entries()) {
    const auto& v = e.tensor.value();
    for (Index i = 0; i < v.rows(); ++i)
      for (Index j = 0; j < v.cols(); ++j) {
        const float f = static_cast<float>(v(i, j));
        char bytes[4];
        std::memcpy(bytes, &f, 4);
        out.write(bytes, 4);
      }
  }
}

struct ArchiveRecord {
  std::string name;
  Index rows = 0, cols = 0;
  long offset = 0;
};

struct Archive {
  std::string header;
  std::vector<ArchiveRecord> records;
  std::vector<float> values;
};

inline Archive load_archive(std::istream& in) {
  Archive a;
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line == kArchiveMagic,
          "archive: bad magic line");
  long expected = -1;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "header") {
      std::getline(ls, a.header);
      if (!a.header.empty() && a.header[0] == ' ') a.header.erase(0, 1);
    } else if (kind == "param") {
      ArchiveRecord r;
      ls >> r.name >> r.rows >> r.cols >> r.offset;
      require(!ls.fail(), "archive: malformed param record: " + line);
      a.records.push_back(r);
    } else if (kind == "data") {
      ls >> expected;
      require(!ls.fail() && expected >= 0, "archive: malformed data record: " + line);
      break;
    } else {
      fail_contract("archive: unexpected record kind '" + kind + "'");
    }
  }
  require(expected >= 0, "archive: missing data section");
  a.values.resize(static_cast<size_t>(expected));
  in.read(reinterpret_cast<char*>(a.values.data()), expected * 4);
  require(in.gcount() == expected * 4, "archive: truncated data section");
  return a;
}

template <class S> void load_into(const Archive& a, ParamSet<S>& params) {
  require(a.records.size() == params.count(),
          "archive: parameter count mismatch: file has " + std::to_string(a.records.size()) +
              ", model has " + std::to_string(params.count()));
  for (const auto& r : a.records) {
    auto& t = params.at(r.name);
    require(t.rows() == r.rows && t.cols() == r.cols,
            "archive: shape mismatch for " + r.name + ": file " + shape_str(r.rows, r.cols) + ", model " +
                shape_str(t.rows(), t.cols()));
    auto& v = t.mutable_value();
    long at = r.offset;
    for (Index i = 0; i < v.rows(); ++i)
      for (Index j = 0; j < v.cols(); ++j) v(i, j) = static_cast<S>(a.values[static_cast<size_t>(at++)]);
  }
}

template <class S>
void save_archive_file(const std::string& path, const ParamSet<S>& params, const std::string& header = "") {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), "cannot open for writing: " + path);
  save_archive(out, params, header);
}

inline Archive load_archive_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "cannot open for reading: " + path);
  return load_archive(in);
}

}  // namespace stacklab

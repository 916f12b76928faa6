#pragma once

// Binary containers (little-endian throughout):
//
//   dataset  "TSD1" | u32 version=1 | u32 n_subjects | u32 channels | u32 timepoints
//            | u8 has_labels | u8 split[n_subjects] | f32 payload | u8 label[n_subjects]?
//            payload is subject-major, then channel-major (row of one channel is contiguous)
//
//   checkpoint "CKP1" | u32 config_len | config JSON bytes | u32 count
//            | per tensor: u32 name_len | name | u32 ndims | u32 dims[ndims] | f32 data

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dynpre/dataset.hpp"
#include "dynpre/downstream.hpp"
#include "dynpre/eval.hpp"
#include "dynpre/params.hpp"
#include "dynpre/pretrain.hpp"

namespace dynpre::io {

namespace fs = std::filesystem;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kDatasetVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class U>
U to_le(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    std::reverse(b, b + sizeof(U));
    std::memcpy(&v, b, sizeof(U));
  }
  return v;
}

class Writer {
 public:
  explicit Writer(const fs::path& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot open " + path.string() + " for writing");
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v) {
    v = to_le(v);
    bytes(&v, 4);
  }
  void f32(const float* p, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
      bytes(p, n * 4);
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        float v = to_le(p[i]);
        bytes(&v, 4);
      }
    }
  }
  void finish() {
    out_.flush();
    if (!out_) throw std::runtime_error("write failed: " + path_.string());
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const fs::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw std::runtime_error("cannot open " + path.string());
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError(path_.string() + ": truncated file");
  }
  std::uint8_t u8() {
    std::uint8_t v;
    bytes(&v, 1);
    return v;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return to_le(v);
  }
  void f32(float* p, std::size_t n) {
    bytes(p, n * 4);
    if constexpr (std::endian::native == std::endian::big) {
      for (std::size_t i = 0; i < n; ++i) p[i] = to_le(p[i]);
    }
  }
  void expect_magic(const char (&magic)[5]) {
    char got[4];
    bytes(got, 4);
    if (std::memcmp(got, magic, 4) != 0) throw FormatError(path_.string() + ": bad magic, expected " + magic);
  }
  void expect_end() {
    if (in_.peek() != std::char_traits<char>::eof()) throw FormatError(path_.string() + ": trailing bytes");
  }

 private:
  fs::path path_;
  std::ifstream in_;
};

inline std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > 0xffffffffu) throw std::invalid_argument(std::string(what) + " does not fit in u32");
  return static_cast<std::uint32_t>(v);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dataset container

inline void save_dataset(const fs::path& path, const Dataset& data) {
  data.validate();
  detail::Writer w(path);
  w.bytes("TSD1", 4);
  w.u32(kDatasetVersion);
  w.u32(detail::checked_u32(data.size(), "n_subjects"));
  w.u32(detail::checked_u32(data.channels, "channels"));
  w.u32(detail::checked_u32(data.timepoints, "timepoints"));
  w.u8(data.has_labels() ? 1 : 0);
  for (Split s : data.splits) w.u8(static_cast<std::uint8_t>(s));
  for (const auto& subject : data.subjects) w.f32(subject.data(), static_cast<std::size_t>(subject.size()));
  if (data.has_labels()) {
    for (int y : data.labels) {
      if (y < 0 || y > 255) throw std::invalid_argument("dataset labels must fit in one byte");
      w.u8(static_cast<std::uint8_t>(y));
    }
  }
  w.finish();
}

inline Dataset load_dataset(const fs::path& path) {
  detail::Reader r(path);
  r.expect_magic("TSD1");
  const auto version = r.u32();
  if (version != kDatasetVersion) {
    throw FormatError(path.string() + ": unsupported container version " + std::to_string(version));
  }
  Dataset data;
  const std::size_t n = r.u32();
  data.channels = r.u32();
  data.timepoints = r.u32();
  const auto has_labels = r.u8();
  if (has_labels > 1) throw FormatError(path.string() + ": has_labels must be 0 or 1");
  data.splits.resize(n);
  for (auto& s : data.splits) {
    const auto tag = r.u8();
    if (tag > 2) throw FormatError(path.string() + ": split tag " + std::to_string(tag) + " out of range");
    s = static_cast<Split>(tag);
  }
  data.subjects.resize(n);
  for (auto& subject : data.subjects) {
    subject.resize(static_cast<Eigen::Index>(data.channels), static_cast<Eigen::Index>(data.timepoints));
    r.f32(subject.data(), static_cast<std::size_t>(subject.size()));
  }
  if (has_labels) {
    data.labels.resize(n);
    for (auto& y : data.labels) y = r.u8();
  }
  r.expect_end();
  return data;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  nlohmann::json config;
  ParamStore<float> params;
};

inline void save_checkpoint(const fs::path& path, const ParamStore<float>& params, const nlohmann::json& config) {
  detail::Writer w(path);
  w.bytes("CKP1", 4);
  const std::string text = config.dump();
  w.u32(detail::checked_u32(text.size(), "config"));
  w.bytes(text.data(), text.size());
  w.u32(detail::checked_u32(params.size(), "tensor count"));
  for (const auto& [name, p] : params) {
    w.u32(detail::checked_u32(name.size(), "name"));
    w.bytes(name.data(), name.size());
    w.u32(detail::checked_u32(p.value.rank(), "ndims"));
    for (auto d : p.value.dims()) w.u32(detail::checked_u32(d, "dim"));
    w.f32(p.value.data().data(), p.value.size());
  }
  w.finish();
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  detail::Reader r(path);
  r.expect_magic("CKP1");
  Checkpoint ck;
  std::string text(r.u32(), '\0');
  r.bytes(text.data(), text.size());
  try {
    ck.config = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": config blob is not valid JSON");
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(r.u32(), '\0');
    r.bytes(name.data(), name.size());
    std::vector<std::size_t> dims(r.u32());
    for (auto& d : dims) d = r.u32();
    Tensor<float> t(dims);
    r.f32(t.data().data(), t.size());
    ck.params.add(name, std::move(t));
  }
  r.expect_end();
  return ck;
}

/// Copies checkpoint values into `target`, whose names and shapes define the expected schema.
inline void load_into(const Checkpoint& ck, ParamStore<float>& target) {
  for (auto& [name, p] : target) {
    if (!ck.params.contains(name)) throw FormatError("checkpoint is missing tensor " + name);
    const auto& src = ck.params.at(name).value;
    if (src.dims() != p.value.dims()) {
      throw FormatError("shape mismatch at " + name + ": checkpoint " + dims_to_string(src.dims()) + ", model " +
                        dims_to_string(p.value.dims()));
    }
    p.value = src;
  }
  if (ck.params.size() != target.size()) throw FormatError("checkpoint holds tensors the model does not define");
}

/// Encoder checkpoint: config blob carries the architecture and the pretraining method.
inline void save_encoder(const fs::path& path, const EncoderConfig& cfg, const ParamStore<float>& encoder,
                         const std::string& method) {
  nlohmann::json j;
  j["encoder"] = cfg.to_json();
  j["method"] = method;
  save_checkpoint(path, encoder, j);
}

struct LoadedEncoder {
  EncoderConfig config;
  ParamStore<float> params;
  std::string method;
};

/// Loads an encoder checkpoint. With `expected`, the tensors are checked against that architecture.
inline LoadedEncoder load_encoder(const fs::path& path, const EncoderConfig* expected = nullptr) {
  const auto ck = load_checkpoint(path);
  LoadedEncoder out;
  if (!ck.config.contains("encoder")) throw FormatError(path.string() + ": not an encoder checkpoint");
  out.config = expected ? *expected : EncoderConfig::from_json(ck.config.at("encoder"));
  out.method = ck.config.value("method", "stdim");
  Rng rng(0);
  out.params = build_encoder<float>(out.config, rng);
  load_into(ck, out.params);
  return out;
}

// ---------------------------------------------------------------------------
// CSV ingestion

namespace detail {

inline std::vector<std::string> split_line(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, sep)) out.push_back(cell);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

inline std::string trim(std::string s) {
  const auto ws = " \t\r\n";
  s.erase(0, s.find_first_not_of(ws));
  s.erase(s.find_last_not_of(ws) + 1);
  return s;
}

inline Split parse_split(const std::string& s) {
  if (s == "train" || s == "0") return Split::train;
  if (s == "val" || s == "1") return Split::val;
  if (s == "test" || s == "2") return Split::test;
  throw FormatError("unknown split tag: " + s);
}

inline Matrix<float> read_csv_matrix(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::vector<float>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::vector<float> row;
    for (const auto& cell : split_line(line, ',')) {
      try {
        std::size_t used = 0;
        const std::string t = trim(cell);
        row.push_back(std::stof(t, &used));
        if (used != t.size()) throw std::invalid_argument(t);
      } catch (const std::exception&) {
        throw FormatError(path.string() + ": non-numeric cell '" + cell + "'");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) throw FormatError(path.string() + ": ragged rows");
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw FormatError(path.string() + ": empty file");
  Matrix<float> m(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
  return m;
}

}  // namespace detail

/// One CSV per subject (rows are channels, columns time points), taken in file-name order.
/// The optional labels file has lines `stem,label[,split]`; subjects without a split
/// column go to train. Without a labels file the container is unlabeled and all-train.
inline Dataset import_csv(const fs::path& dir, const fs::path& labels_file = {}) {
  if (!fs::is_directory(dir)) throw std::runtime_error(dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw FormatError(dir.string() + ": no CSV files");

  Dataset data;
  for (const auto& f : files) {
    auto m = detail::read_csv_matrix(f);
    if (data.subjects.empty()) {
      data.channels = m.rows();
      data.timepoints = m.cols();
    } else if (static_cast<std::size_t>(m.rows()) != data.channels ||
               static_cast<std::size_t>(m.cols()) != data.timepoints) {
      throw FormatError(f.string() + ": shape " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                        " differs from " + std::to_string(data.channels) + "x" + std::to_string(data.timepoints));
    }
    data.subjects.push_back(std::move(m));
  }
  data.splits.assign(files.size(), Split::train);

  if (!labels_file.empty()) {
    std::ifstream in(labels_file);
    if (!in) throw std::runtime_error("cannot open " + labels_file.string());
    std::map<std::string, std::pair<int, Split>> table;
    std::string line;
    while (std::getline(in, line)) {
      if (detail::trim(line).empty()) continue;
      auto cells = detail::split_line(line, ',');
      if (cells.size() < 2 || cells.size() > 3) throw FormatError("labels: expected stem,label[,split]: " + line);
      int label = 0;
      try {
        label = std::stoi(detail::trim(cells[1]));
      } catch (const std::exception&) {
        throw FormatError("labels: bad label in line: " + line);
      }
      if (label < 0 || label > 1) throw FormatError("labels: binary labels only: " + line);
      const Split split = cells.size() == 3 ? detail::parse_split(detail::trim(cells[2])) : Split::train;
      table[detail::trim(cells[0])] = {label, split};
    }
    for (const auto& f : files) {
      auto it = table.find(f.stem().string());
      if (it == table.end()) throw FormatError("labels: no entry for " + f.stem().string());
      data.labels.push_back(it->second.first);
      data.splits[data.labels.size() - 1] = it->second.second;
    }
  }
  data.validate();
  return data;
}

// ---------------------------------------------------------------------------
// Result tables

inline nlohmann::json to_json(const TrialResult& r) {
  return {{"regime", regime_name(r.regime)}, {"pretrain", r.pretrain},       {"n_train", r.n_train},
          {"seed", r.seed},                  {"trial", r.trial},             {"gain", r.gain},
          {"test_auc", r.test_auc},          {"test_accuracy", r.test_accuracy}, {"val_auc", r.val_auc},
          {"best_epoch", r.best_epoch},      {"epochs_run", r.epochs_run}};
}

inline TrialResult trial_from_json(const nlohmann::json& j) {
  TrialResult r;
  r.regime = parse_regime(j.at("regime").get<std::string>());
  r.pretrain = j.value("pretrain", r.regime == Regime::npt ? "none" : "stdim");
  r.n_train = j.at("n_train").get<std::size_t>();
  r.seed = j.value("seed", std::uint64_t{0});
  r.trial = j.value("trial", std::size_t{0});
  r.gain = j.value("gain", 0.5);
  r.test_auc = j.at("test_auc").get<double>();
  r.test_accuracy = j.value("test_accuracy", 0.0);
  r.val_auc = j.value("val_auc", 0.0);
  r.best_epoch = j.value("best_epoch", std::size_t{0});
  r.epochs_run = j.value("epochs_run", std::size_t{0});
  return r;
}

inline void append_results(const fs::path& path, const std::vector<TrialResult>& rows) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  for (const auto& r : rows) out << to_json(r).dump() << '\n';
}

inline std::vector<TrialResult> read_results(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<TrialResult> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    try {
      rows.push_back(trial_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

inline std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::ostringstream out;
  out.precision(6);
  out << std::fixed;
  out << "regime,n_train,median_auc,q25,q75\n";
  for (const auto& r : rows) out << r.regime << ',' << r.n_train << ',' << r.median_auc << ',' << r.q25 << ',' << r.q75 << '\n';
  return out.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

inline std::string pretrain_log_csv(const std::vector<EpochLog>& log) {
  std::ostringstream out;
  out.precision(8);
  out << "epoch,loss,val_loss,metric\n";
  for (const auto& e : log) out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.metric << '\n';
  return out.str();
}

}  // namespace dynpre::io

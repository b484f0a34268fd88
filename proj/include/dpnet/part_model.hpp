#pragma once

// The part-based head: parts U (P x D) score region descriptors, the
// per-part maximum forms the bag-of-parts b, and V (C x P) classifies it.
//
// DPCK checkpoint layout (little-endian):
//   "DPCK" | u32 version=1 | u32 P | u32 D | u32 C | u32 q |
//   P*D f64 (U, row-major) | C*P f64 (V, row-major) | u32 trailer_len | JSON trailer

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpnet/errors.hpp"
#include "dpnet/feature_store.hpp"
#include "dpnet/numerics.hpp"
#include "dpnet/rng.hpp"

namespace dpnet {

struct PartModel {
  Mat u;  // P x D, one part per row
  Mat v;  // C x P
  std::uint32_t parts_per_class = 0;

  std::size_t num_parts() const { return u.rows(); }
  std::size_t descriptor_dim() const { return u.cols(); }
  std::size_t num_classes() const { return v.rows(); }

  /// True when parts split into C contiguous blocks of q.
  bool has_class_blocks() const {
    return parts_per_class > 0 && num_parts() == std::size_t{parts_per_class} * num_classes();
  }

  friend bool operator==(const PartModel&, const PartModel&) = default;
};

inline void validate(const PartModel& m) {
  if (m.u.empty() || m.v.empty()) throw ContractError("part model: empty U or V");
  if (m.v.cols() != m.u.rows()) {
    throw ContractError("part model: V is " + m.v.shape() + " but U is " + m.u.shape());
  }
  if (!all_finite(m.u.data()) || !all_finite(m.v.data())) {
    throw ContractError("part model: non-finite parameter");
  }
}

struct ForwardTrace {
  Mat s;                               // P x R
  std::vector<std::uint32_t> argmax_r; // per part, lowest index among maxima
  Vec b_raw;
  Vec b;
  Vec logits;
  Vec o;
};

inline Mat score(const PartModel& model, const Mat& x) {
  if (x.rows() != model.descriptor_dim()) {
    throw ContractError("score: descriptors are " + x.shape() + " but parts are " + model.u.shape());
  }
  return matmul(model.u, x);
}

struct BagOfParts {
  Vec raw;
  std::vector<std::uint32_t> argmax_r;
  Vec b;
};

inline BagOfParts bag_of_parts(const Mat& s, double eps = kNormEps) {
  if (s.empty()) throw ContractError("bag_of_parts: empty score matrix");
  BagOfParts out;
  out.raw.resize(s.rows());
  out.argmax_r.resize(s.rows());
  for (std::size_t p = 0; p < s.rows(); ++p) {
    std::uint32_t best = 0;
    for (std::size_t r = 1; r < s.cols(); ++r) {
      if (s(p, r) > s(p, best)) best = static_cast<std::uint32_t>(r);
    }
    out.argmax_r[p] = best;
    out.raw[p] = s(p, best);
  }
  out.b = l2_normalize(out.raw, eps);
  return out;
}

struct Prediction {
  Vec logits;
  Vec o;
};

inline Prediction predict(const PartModel& model, std::span<const double> b) {
  if (b.size() != model.num_parts()) {
    throw ContractError("predict: bag has " + std::to_string(b.size()) + " entries, model has " +
                        std::to_string(model.num_parts()) + " parts");
  }
  Prediction out;
  out.logits = matvec(model.v, b);
  out.o = softmax(out.logits);
  return out;
}

inline ForwardTrace forward(const PartModel& model, const Mat& x) {
  ForwardTrace t;
  t.s = score(model, x);
  auto bag = bag_of_parts(t.s);
  t.b_raw = std::move(bag.raw);
  t.argmax_r = std::move(bag.argmax_r);
  t.b = std::move(bag.b);
  auto pred = predict(model, t.b);
  t.logits = std::move(pred.logits);
  t.o = std::move(pred.o);
  return t;
}

/// Index of the largest probability, lowest index on ties.
inline std::size_t predicted_class(std::span<const double> o) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < o.size(); ++c) {
    if (o[c] > o[best]) best = c;
  }
  return best;
}

/// Fresh model with unit-norm Gaussian parts. With class_blocks, V is the
/// block indicator (v[c][p] = 1 for p in c's block); otherwise N(0, 0.01^2).
inline PartModel make_model(std::size_t descriptor_dim, std::size_t num_classes, std::uint32_t parts_per_class,
                            bool class_blocks, Rng& rng) {
  if (descriptor_dim == 0 || num_classes == 0 || parts_per_class == 0) {
    throw ContractError("make_model: D, C and q must be >= 1");
  }
  const std::size_t parts = std::size_t{parts_per_class} * num_classes;
  PartModel m;
  m.parts_per_class = parts_per_class;
  m.u = Mat(parts, descriptor_dim);
  for (std::size_t p = 0; p < parts; ++p) {
    for (double& x : m.u.row(p)) x = rng.normal();
    auto normed = l2_normalize(m.u.row(p));
    std::copy(normed.begin(), normed.end(), m.u.row(p).begin());
  }
  m.v = Mat(num_classes, parts);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t p = 0; p < parts; ++p) {
      if (class_blocks) {
        m.v(c, p) = (p / parts_per_class == c) ? 1.0 : 0.0;
      } else {
        m.v(c, p) = 0.01 * rng.normal();
      }
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  PartModel model;
  nlohmann::json trailer = nlohmann::json::object();
};

namespace detail {
inline constexpr char kCheckpointMagic[4] = {'D', 'P', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  const PartModel& m = ck.model;
  validate(m);
  const std::string trailer = ck.trailer.dump();
  std::string out;
  out.append(detail::kCheckpointMagic, 4);
  detail::put<std::uint32_t>(out, detail::kCheckpointVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(m.num_parts()));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(m.descriptor_dim()));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(m.num_classes()));
  detail::put<std::uint32_t>(out, m.parts_per_class);
  for (double x : m.u.data()) detail::put<double>(out, x);
  for (double x : m.v.data()) detail::put<double>(out, x);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(trailer.size()));
  out.append(trailer);
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& source = "<memory>") {
  detail::ByteReader in(bytes, source);
  auto magic = in.take(4, "magic");
  if (std::memcmp(magic.data(), detail::kCheckpointMagic, 4) != 0) {
    throw ParseError(ParseErrorKind::kBadMagic, source + ": not a DPCK file");
  }
  const auto version = in.get<std::uint32_t>("version");
  if (version != detail::kCheckpointVersion) {
    throw ParseError(ParseErrorKind::kVersionMismatch,
                     source + ": version " + std::to_string(version) + ", expected 1");
  }
  const auto parts = in.get<std::uint32_t>("P");
  const auto dim = in.get<std::uint32_t>("D");
  const auto classes = in.get<std::uint32_t>("C");
  Checkpoint ck;
  ck.model.parts_per_class = in.get<std::uint32_t>("q");
  if (parts == 0 || dim == 0 || classes == 0) {
    throw ParseError(ParseErrorKind::kMalformed, source + ": zero dimension");
  }
  auto read_mat = [&](std::size_t rows, std::size_t cols, const char* what) {
    if (in.remaining() / sizeof(double) < rows * cols) {
      throw ParseError(ParseErrorKind::kTruncated, source + ": missing " + what);
    }
    Mat m(rows, cols);
    for (double& x : m.data()) {
      x = in.get<double>(what);
      if (!std::isfinite(x)) throw ParseError(ParseErrorKind::kNonFinite, source + ": non-finite " + what);
    }
    return m;
  };
  ck.model.u = read_mat(parts, dim, "U");
  ck.model.v = read_mat(classes, parts, "V");
  const auto trailer_len = in.get<std::uint32_t>("trailer length");
  auto trailer = in.take(trailer_len, "trailer");
  if (in.remaining() != 0) throw ParseError(ParseErrorKind::kMalformed, source + ": trailing bytes");
  try {
    ck.trailer = nlohmann::json::parse(trailer);
  } catch (const nlohmann::json::parse_error& ex) {
    throw ParseError(ParseErrorKind::kMalformed, source + ": trailer: " + ex.what());
  }
  return ck;
}

inline void write_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path), path.string());
}

}  // namespace dpnet

#pragma once

// Planted-keyframe video QA generator.
//
// Each video has T frames of N patches with raw_dim values per patch. K
// keyframes carry a marker plus the pattern of the correct answer for the
// queried attribute; about lure_prob of the remaining frames carry the
// pattern of a choice drawn uniformly at random and the rest are pure noise.
// Lures say nothing about the answer, so it can only be read from keyframes,
// and a sampler that misses them is pulled toward whatever the lures show.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vila/random.hpp"

namespace vila {

enum class Placement { UniformRandom, OnePerSegment, Clustered };

inline std::string to_string(Placement p) {
  switch (p) {
    case Placement::UniformRandom: return "uniform_random";
    case Placement::OnePerSegment: return "one_per_segment";
    case Placement::Clustered: return "clustered";
  }
  return "?";
}

inline Placement placement_from_string(const std::string& s) {
  if (s == "uniform_random") return Placement::UniformRandom;
  if (s == "one_per_segment") return Placement::OnePerSegment;
  if (s == "clustered") return Placement::Clustered;
  throw std::invalid_argument("keyframe_placement must be one of uniform_random, one_per_segment, clustered; got " + s);
}

struct DatasetSpec {
  std::size_t num_train = 4000;
  std::size_t num_val = 1000;
  std::size_t T = 32;
  std::size_t N = 4;
  std::size_t raw_dim = 16;
  std::size_t A = 4;
  std::size_t K = 4;
  std::size_t num_attributes = 2;
  double noise_std = 0.3;
  double marker_scale = 3.0;
  double pattern_scale = 0.35;
  double lure_prob = 0.5;
  Placement keyframe_placement = Placement::OnePerSegment;
  std::uint64_t seed = 7;

  void validate() const {
    auto fail = [](const std::string& field, const std::string& constraint) {
      throw std::invalid_argument("invalid dataset spec field '" + field + "': " + constraint);
    };
    if (num_train < 1) fail("num_train", "must be at least 1");
    if (num_val < 1) fail("num_val", "must be at least 1");
    if (T < 1) fail("T", "must be at least 1");
    if (N < 1) fail("N", "must be at least 1");
    if (A < 2) fail("A", "must be at least 2");
    if (K < 1) fail("K", "must be at least 1");
    if (K > T) fail("K", "K must not exceed T");
    if (num_attributes < 1) fail("num_attributes", "must be at least 1");
    if (keyframe_placement == Placement::OnePerSegment && T % K != 0) fail("K", "one_per_segment placement needs T divisible by K");
    if (raw_dim < N + num_attributes * A) fail("raw_dim", "must be at least N + num_attributes * A so patterns stay orthogonal");
    if (!(noise_std >= 0.0)) fail("noise_std", "must be nonnegative");
    if (!(marker_scale > 0.0)) fail("marker_scale", "must be positive");
    if (!(pattern_scale > 0.0)) fail("pattern_scale", "must be positive");
    if (!(lure_prob >= 0.0 && lure_prob <= 1.0)) fail("lure_prob", "must lie in [0, 1]");
  }
};

inline void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = nlohmann::json{{"num_train", s.num_train},
                     {"num_val", s.num_val},
                     {"T", s.T},
                     {"N", s.N},
                     {"raw_dim", s.raw_dim},
                     {"A", s.A},
                     {"K", s.K},
                     {"num_attributes", s.num_attributes},
                     {"noise_std", s.noise_std},
                     {"marker_scale", s.marker_scale},
                     {"pattern_scale", s.pattern_scale},
                     {"lure_prob", s.lure_prob},
                     {"keyframe_placement", to_string(s.keyframe_placement)},
                     {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, DatasetSpec& s) {
  const DatasetSpec d;
  auto get = [&](const char* key, auto fallback) {
    using V = decltype(fallback);
    if (!j.contains(key)) return fallback;
    try {
      return j.at(key).get<V>();
    } catch (const nlohmann::json::exception&) {
      throw std::invalid_argument(std::string("invalid dataset spec field '") + key + "': wrong type");
    }
  };
  s.num_train = get("num_train", d.num_train);
  s.num_val = get("num_val", d.num_val);
  s.T = get("T", d.T);
  s.N = get("N", d.N);
  s.raw_dim = get("raw_dim", d.raw_dim);
  s.A = get("A", d.A);
  s.K = get("K", d.K);
  s.num_attributes = get("num_attributes", d.num_attributes);
  s.noise_std = get("noise_std", d.noise_std);
  s.marker_scale = get("marker_scale", d.marker_scale);
  s.pattern_scale = get("pattern_scale", d.pattern_scale);
  s.lure_prob = get("lure_prob", d.lure_prob);
  s.keyframe_placement = placement_from_string(get("keyframe_placement", to_string(d.keyframe_placement)));
  s.seed = get("seed", d.seed);
}

/// Token id layout shared by the generator and the text encoder.
struct Vocab {
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kQuestion = 1;
  static constexpr std::size_t kAttributeBase = 2;
  std::size_t num_attributes = 2;
  std::size_t A = 4;

  std::size_t attribute_token(std::size_t attr) const { return kAttributeBase + attr; }
  std::size_t value_token(std::size_t attr, std::size_t value) const {
    return kAttributeBase + num_attributes + attr * A + value;
  }
  std::size_t size() const { return kAttributeBase + num_attributes + num_attributes * A; }
};

struct SynthSample {
  std::vector<double> raw_video;  // [T, N, raw_dim], values exactly representable as f32
  std::vector<std::size_t> question_tokens;
  std::vector<std::vector<std::size_t>> choice_tokens;
  std::size_t answer_idx = 0;
  std::vector<std::size_t> keyframes;  // sorted
  std::uint64_t seed = 0;
  std::size_t attribute = 0;
  std::vector<std::size_t> choice_values;  // value id of each choice
};

/// Marker and attribute pattern directions, shared by every split.
struct PatternBank {
  std::size_t N = 0, raw_dim = 0;
  std::vector<std::vector<double>> markers;                // [N][raw_dim], unit norm
  std::vector<std::vector<std::vector<double>>> patterns;  // [attr][value][raw_dim], unit norm

  static PatternBank build(const DatasetSpec& spec) {
    PatternBank bank;
    bank.N = spec.N;
    bank.raw_dim = spec.raw_dim;
    Rng rng(derive_seed(spec.seed, 0xbA5E));
    std::vector<std::vector<double>> basis;
    auto orthonormal = [&]() {
      for (;;) {
        std::vector<double> v(spec.raw_dim);
        for (auto& x : v) x = rng.normal();
        for (const auto& b : basis) {
          const double dot = std::inner_product(v.begin(), v.end(), b.begin(), 0.0);
          for (std::size_t i = 0; i < v.size(); ++i) v[i] -= dot * b[i];
        }
        const double n = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
        if (n < 1e-6) continue;
        for (auto& x : v) x /= n;
        basis.push_back(v);
        return v;
      }
    };
    for (std::size_t n = 0; n < spec.N; ++n) bank.markers.push_back(orthonormal());
    bank.patterns.resize(spec.num_attributes);
    for (std::size_t a = 0; a < spec.num_attributes; ++a) {
      for (std::size_t v = 0; v < spec.A; ++v) bank.patterns[a].push_back(orthonormal());
    }
    return bank;
  }
};

/// Reads only frames it recognizes as keyframes (marker response above half
/// the planted scale) and answers with the choice whose pattern responds
/// most. Returns nullopt when no keyframe is among `frames`.
inline std::optional<std::size_t> self_decode(const DatasetSpec& spec, const PatternBank& bank, const SynthSample& s,
                                              const std::vector<std::size_t>& frames) {
  const std::size_t P = spec.raw_dim;
  std::vector<double> score(s.choice_values.size(), 0.0);
  bool any = false;
  for (std::size_t f : frames) {
    double marker = 0.0;
    for (std::size_t n = 0; n < spec.N; ++n) {
      const double* x = s.raw_video.data() + (f * spec.N + n) * P;
      marker += std::inner_product(x, x + P, bank.markers[n].begin(), 0.0);
    }
    marker /= static_cast<double>(spec.N) * spec.marker_scale;
    if (marker < 0.5) continue;
    any = true;
    for (std::size_t c = 0; c < s.choice_values.size(); ++c) {
      const auto& pat = bank.patterns[s.attribute][s.choice_values[c]];
      for (std::size_t n = 0; n < spec.N; ++n) {
        const double* x = s.raw_video.data() + (f * spec.N + n) * P;
        score[c] += std::inner_product(x, x + P, pat.begin(), 0.0);
      }
    }
  }
  if (!any) return std::nullopt;
  return static_cast<std::size_t>(std::max_element(score.begin(), score.end()) - score.begin());
}

/// Decoder answer with the fixed fallback (choice 0) when no keyframe is visible.
inline std::size_t decode_or_fallback(const DatasetSpec& spec, const PatternBank& bank, const SynthSample& s,
                                      const std::vector<std::size_t>& frames) {
  return self_decode(spec, bank, s, frames).value_or(0);
}

namespace detail {

inline std::vector<std::size_t> place_keyframes(const DatasetSpec& spec, Rng& rng) {
  std::vector<std::size_t> k;
  switch (spec.keyframe_placement) {
    case Placement::OnePerSegment: {
      const std::size_t len = spec.T / spec.K;
      for (std::size_t s = 0; s < spec.K; ++s) k.push_back(s * len + rng.below(len));
      break;
    }
    case Placement::UniformRandom: {
      std::vector<std::size_t> all(spec.T);
      std::iota(all.begin(), all.end(), 0);
      for (std::size_t i = 0; i < spec.K; ++i) {
        const std::size_t j = i + rng.below(spec.T - i);
        std::swap(all[i], all[j]);
      }
      k.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(spec.K));
      break;
    }
    case Placement::Clustered: {
      const std::size_t start = rng.below(spec.T - spec.K + 1);
      for (std::size_t i = 0; i < spec.K; ++i) k.push_back(start + i);
      break;
    }
  }
  std::sort(k.begin(), k.end());
  return k;
}

inline SynthSample make_sample(const DatasetSpec& spec, const PatternBank& bank, std::uint64_t seed) {
  const Vocab vocab{.num_attributes = spec.num_attributes, .A = spec.A};
  Rng rng(seed);
  SynthSample s;
  s.seed = seed;
  s.attribute = rng.below(spec.num_attributes);
  s.choice_values.resize(spec.A);
  std::iota(s.choice_values.begin(), s.choice_values.end(), 0);
  for (std::size_t i = spec.A - 1; i > 0; --i) std::swap(s.choice_values[i], s.choice_values[rng.below(i + 1)]);
  s.answer_idx = rng.below(spec.A);
  const std::size_t correct = s.choice_values[s.answer_idx];
  s.keyframes = place_keyframes(spec, rng);

  s.question_tokens = {Vocab::kQuestion, vocab.attribute_token(s.attribute)};
  for (auto v : s.choice_values) s.choice_tokens.push_back({vocab.value_token(s.attribute, v)});

  const std::size_t P = spec.raw_dim;
  s.raw_video.assign(spec.T * spec.N * P, 0.0);
  std::vector<char> is_key(spec.T, 0);
  for (auto f : s.keyframes) is_key[f] = 1;
  for (std::size_t f = 0; f < spec.T; ++f) {
    // Lure frames show the pattern of a choice drawn uniformly from all A, so
    // they mislead a frame-agnostic reader without leaking the answer.
    const bool lure_frame = !is_key[f] && rng.uniform_open() < spec.lure_prob;
    const std::size_t lure = lure_frame ? s.choice_values[rng.below(spec.A)] : 0;
    for (std::size_t n = 0; n < spec.N; ++n) {
      double* x = s.raw_video.data() + (f * spec.N + n) * P;
      for (std::size_t i = 0; i < P; ++i) {
        double v = spec.noise_std * rng.normal();
        if (is_key[f]) {
          v += spec.marker_scale * bank.markers[n][i] + spec.pattern_scale * bank.patterns[s.attribute][correct][i];
        } else if (lure_frame) {
          v += spec.pattern_scale * bank.patterns[s.attribute][lure][i];
        }
        x[i] = static_cast<double>(static_cast<float>(v));
      }
    }
  }
  return s;
}

}  // namespace detail

struct Dataset {
  DatasetSpec spec;
  PatternBank bank;
  std::vector<SynthSample> train;
  std::vector<SynthSample> val;
};

enum class Split : std::uint64_t { Train = 1, Val = 2 };

/// Deterministic in the spec; every sample owns the stream derived from
/// (seed, split, index). A sample whose keyframes the self-decoder cannot
/// read is redrawn from the next sub-stream.
inline Dataset generate(const DatasetSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  ds.bank = PatternBank::build(spec);
  auto build = [&](Split split, std::size_t count) {
    std::vector<SynthSample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      for (std::uint64_t attempt = 0;; ++attempt) {
        const std::uint64_t seed = derive_seed(spec.seed, static_cast<std::uint64_t>(split), (i << 8) + attempt);
        SynthSample s = detail::make_sample(spec, ds.bank, seed);
        if (self_decode(spec, ds.bank, s, s.keyframes) == s.answer_idx) {
          out.push_back(std::move(s));
          break;
        }
        if (attempt == 255) throw std::runtime_error("generator could not plant a decodable sample");
      }
    }
    return out;
  };
  ds.train = build(Split::Train, spec.num_train);
  ds.val = build(Split::Val, spec.num_val);
  return ds;
}

// ---------------------------------------------------------------------------
// Baseline samplers and oracles

enum class Strategy { KeyframeOracle, UniformK, RandomK };

/// Evenly spaced frames, the centre of each of k equal spans.
inline std::vector<std::size_t> uniform_frames(std::size_t T, std::size_t k) {
  std::vector<std::size_t> f;
  for (std::size_t s = 0; s < k; ++s) f.push_back(((2 * s + 1) * T) / (2 * k));
  return f;
}

inline std::vector<std::size_t> strategy_frames(Strategy strategy, const DatasetSpec& spec, const SynthSample& s,
                                                std::size_t k) {
  switch (strategy) {
    case Strategy::KeyframeOracle: {
      std::vector<std::size_t> f(s.keyframes.begin(), s.keyframes.begin() + static_cast<std::ptrdiff_t>(std::min(k, s.keyframes.size())));
      for (std::size_t i = 0; f.size() < k && i < spec.T; ++i) {
        if (!std::binary_search(s.keyframes.begin(), s.keyframes.end(), i)) f.push_back(i);
      }
      std::sort(f.begin(), f.end());
      return f;
    }
    case Strategy::UniformK: return uniform_frames(spec.T, k);
    case Strategy::RandomK: {
      Rng rng(derive_seed(s.seed, 0x5A4D));
      std::vector<std::size_t> all(spec.T);
      std::iota(all.begin(), all.end(), 0);
      for (std::size_t i = 0; i < k; ++i) std::swap(all[i], all[i + rng.below(spec.T - i)]);
      std::vector<std::size_t> f(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k));
      std::sort(f.begin(), f.end());
      return f;
    }
  }
  return {};
}

/// Accuracy of the self-decoder restricted to the frames a strategy picks.
inline double oracle_accuracy(Strategy strategy, const Dataset& ds, std::size_t k, bool use_val = true) {
  if (k > ds.spec.T) throw std::invalid_argument("k must not exceed T");
  const auto& samples = use_val ? ds.val : ds.train;
  std::size_t correct = 0;
  for (const auto& s : samples) {
    if (decode_or_fallback(ds.spec, ds.bank, s, strategy_frames(strategy, ds.spec, s, k)) == s.answer_idx) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

struct UniformBaseline {
  double recall = 0.0;    // expected |uniform ∩ keyframes| / K
  double hit_rate = 0.0;  // probability at least one keyframe is covered
  double accuracy = 0.0;  // decoder accuracy with chance-level fallback
  std::size_t placements = 0;
};

/// Expected behaviour of the uniform-k sampler, by exhaustive enumeration of
/// every keyframe placement the dataset settings allow (each equally likely).
inline UniformBaseline enumerate_uniform_baseline(std::size_t T, std::size_t K, std::size_t k, Placement placement,
                                                  std::size_t A) {
  const auto picks = uniform_frames(T, k);
  std::vector<char> picked(T, 0);
  for (auto p : picks) picked[p] = 1;
  UniformBaseline out;
  double recall_sum = 0.0, hit_sum = 0.0;
  auto visit = [&](const std::vector<std::size_t>& keys) {
    std::size_t hits = 0;
    for (auto f : keys) hits += picked[f];
    recall_sum += static_cast<double>(hits) / static_cast<double>(K);
    hit_sum += hits > 0 ? 1.0 : 0.0;
    ++out.placements;
  };
  std::vector<std::size_t> keys(K);
  switch (placement) {
    case Placement::OnePerSegment: {
      const std::size_t len = T / K;
      std::vector<std::size_t> offs(K, 0);
      for (;;) {
        for (std::size_t s = 0; s < K; ++s) keys[s] = s * len + offs[s];
        visit(keys);
        std::size_t i = 0;
        while (i < K && ++offs[i] == len) offs[i++] = 0;
        if (i == K) break;
      }
      break;
    }
    case Placement::UniformRandom: {
      std::vector<char> sel(T, 0);
      std::fill(sel.end() - static_cast<std::ptrdiff_t>(K), sel.end(), 1);
      do {
        keys.clear();
        for (std::size_t i = 0; i < T; ++i)
          if (sel[i]) keys.push_back(i);
        visit(keys);
      } while (std::next_permutation(sel.begin(), sel.end()));
      break;
    }
    case Placement::Clustered: {
      for (std::size_t start = 0; start + K <= T; ++start) {
        for (std::size_t i = 0; i < K; ++i) keys[i] = start + i;
        visit(keys);
      }
      break;
    }
  }
  out.recall = recall_sum / static_cast<double>(out.placements);
  out.hit_rate = hit_sum / static_cast<double>(out.placements);
  out.accuracy = out.hit_rate + (1.0 - out.hit_rate) / static_cast<double>(A);
  return out;
}

// ---------------------------------------------------------------------------
// Directory format: manifest.json + one little-endian f32 blob per split.

namespace detail {

inline void write_f32_le(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                         static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
  os.write(bytes, 4);
}

inline double read_f32_le(const unsigned char* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  return static_cast<double>(std::bit_cast<float>(bits));
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + p.string());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

}  // namespace detail

inline nlohmann::json sample_meta(const SynthSample& s) {
  return {{"seed", s.seed},          {"attribute", s.attribute},         {"answer_idx", s.answer_idx},
          {"keyframes", s.keyframes}, {"question_tokens", s.question_tokens}, {"choice_tokens", s.choice_tokens},
          {"choice_values", s.choice_values}};
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "vila-synth-v1";
  manifest["spec"] = ds.spec;
  const std::size_t per = ds.spec.T * ds.spec.N * ds.spec.raw_dim;
  for (auto [name, samples] : {std::pair{"train", &ds.train}, std::pair{"val", &ds.val}}) {
    const std::string blob = std::string(name) + ".f32";
    std::ofstream os(dir / blob, std::ios::binary | std::ios::trunc);
    nlohmann::json meta = nlohmann::json::array();
    for (const auto& s : *samples) {
      for (double v : s.raw_video) detail::write_f32_le(os, v);
      meta.push_back(sample_meta(s));
    }
    if (!os) throw std::runtime_error("failed writing " + (dir / blob).string());
    manifest["splits"][name] = {{"count", samples->size()},
                                {"blob", blob},
                                {"shape", {samples->size(), ds.spec.T, ds.spec.N, ds.spec.raw_dim}},
                                {"bytes", samples->size() * per * 4},
                                {"samples", meta}};
  }
  std::ofstream(dir / "manifest.json", std::ios::trunc) << manifest.dump(1) << '\n';
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest = nlohmann::json::parse(detail::read_file(dir / "manifest.json"));
  if (manifest.value("format", "") != "vila-synth-v1") throw std::runtime_error("unrecognized dataset format in " + dir.string());
  Dataset ds;
  ds.spec = manifest.at("spec").get<DatasetSpec>();
  ds.spec.validate();
  ds.bank = PatternBank::build(ds.spec);
  const std::size_t per = ds.spec.T * ds.spec.N * ds.spec.raw_dim;
  for (auto [name, samples] : {std::pair{"train", &ds.train}, std::pair{"val", &ds.val}}) {
    const auto& split = manifest.at("splits").at(name);
    const std::string bytes = detail::read_file(dir / split.at("blob").get<std::string>());
    const std::size_t count = split.at("count").get<std::size_t>();
    if (bytes.size() != count * per * 4) throw std::runtime_error(std::string("blob size mismatch for split ") + name);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    for (std::size_t i = 0; i < count; ++i) {
      const auto& m = split.at("samples").at(i);
      SynthSample s;
      s.seed = m.at("seed").get<std::uint64_t>();
      s.attribute = m.at("attribute").get<std::size_t>();
      s.answer_idx = m.at("answer_idx").get<std::size_t>();
      s.keyframes = m.at("keyframes").get<std::vector<std::size_t>>();
      s.question_tokens = m.at("question_tokens").get<std::vector<std::size_t>>();
      s.choice_tokens = m.at("choice_tokens").get<std::vector<std::vector<std::size_t>>>();
      s.choice_values = m.at("choice_values").get<std::vector<std::size_t>>();
      s.raw_video.resize(per);
      for (std::size_t j = 0; j < per; ++j) s.raw_video[j] = detail::read_f32_le(p + (i * per + j) * 4);
      samples->push_back(std::move(s));
    }
  }
  return ds;
}

/// FNV-1a over the manifest and blob bytes of a saved dataset directory.
inline std::string dataset_digest(const std::filesystem::path& dir) {
  std::string all = detail::read_file(dir / "manifest.json");
  all += detail::read_file(dir / "train.f32");
  all += detail::read_file(dir / "val.f32");
  return hex64(fnv1a(all));
}

}  // namespace vila

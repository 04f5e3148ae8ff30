#include "marble/bagdata.hpp"

#include <zlib.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>
#include <sstream>

#include "binio.hpp"
#include "marble/error.hpp"

namespace marble {

namespace {

constexpr std::uint16_t kBagVersion = 1;
constexpr std::uint32_t kNoParent = 0xFFFFFFFFu;

double round_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

Tensor unit_direction(std::size_t dim, Rng& rng) {
  Tensor t(Shape{dim});
  double norm = 0.0;
  for (auto& v : t.data()) {
    v = rng.normal();
    norm += v * v;
  }
  norm = std::sqrt(norm);
  for (auto& v : t.data()) v = round_f32(v / norm);
  return t;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_fields(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos
                                                                          : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

bool is_split_name(std::string_view s) { return s == "train" || s == "val" || s == "test"; }

}  // namespace

void SynthSpec::validate() const {
  if (n_slides == 0) throw SpecError("synth: n_slides must be positive");
  if (levels == 0) throw SpecError("synth: levels must be >= 1");
  if (ratio == 0) throw SpecError("synth: ratio must be >= 1");
  if (coarse_rows == 0 || coarse_cols == 0) throw SpecError("synth: coarse grid must be non-empty");
  if (dim == 0) throw SpecError("synth: dim must be positive");
  if (!(noise >= 0.0)) throw SpecError("synth: noise must be >= 0");
  if (!(amplitude >= 0.0)) throw SpecError("synth: amplitude must be >= 0");
  if (!(background >= 0.0 && background < 1.0)) throw SpecError("synth: background must be in [0, 1)");
  if (!(censoring >= 0.0 && censoring < 1.0)) throw SpecError("synth: censoring must be in [0, 1)");
  if (signal_tokens == 0) throw SpecError("synth: signal_tokens must be >= 1");
  if (coarse_rows * coarse_cols < signal_tokens + 1) {
    throw SpecError("synth: a " + std::to_string(coarse_rows) + "x" + std::to_string(coarse_cols) +
                    " coarse grid cannot hold " + std::to_string(signal_tokens) +
                    " signal tokens plus a decoy parent");
  }
  if (n_val + n_test >= n_slides && (n_val || n_test)) {
    throw SpecError("synth: validation and test splits leave no training slides");
  }
  if (!s_coarse.empty() && s_coarse.shape() != Shape{dim}) throw SpecError("synth: s_coarse has wrong length");
  if (!s_fine.empty() && s_fine.shape() != Shape{dim}) throw SpecError("synth: s_fine has wrong length");
}

void SynthSpec::finalize() {
  validate();
  Rng rng(derive_seed(seed, "signals"));
  if (s_coarse.empty()) s_coarse = unit_direction(dim, rng);
  if (s_fine.empty()) s_fine = unit_direction(dim, rng);
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw ParseError("unknown split '" + std::string(s) + "'");
}

std::vector<const Slide*> Dataset::split(Split s) const {
  std::vector<const Slide*> out;
  for (const auto& sl : slides) {
    if (sl.meta.split == s) out.push_back(&sl);
  }
  return out;
}

GeneratedSlide generate_slide(const SynthSpec& spec, std::size_t colocated_pairs, Rng& rng) {
  spec.validate();
  if (spec.s_coarse.empty() || spec.s_fine.empty()) {
    throw SpecError("generate_slide: signal directions missing (call finalize)");
  }
  const std::size_t n_sig = spec.signal_tokens;
  if (colocated_pairs > n_sig) {
    throw SpecError("generate_slide: more co-located pairs than signal tokens");
  }

  // Coarse mask with room for the signal tokens and one decoy parent.
  std::vector<LevelGrid> grids;
  LevelGrid coarse = LevelGrid::full(0, spec.coarse_rows, spec.coarse_cols, 0);
  for (int attempt = 0;; ++attempt) {
    for (std::size_t i = 0; i < coarse.tissue.size(); ++i) coarse.tissue[i] = rng.uniform() >= spec.background;
    if (coarse.tissue_count() >= n_sig + 1) break;
    if (attempt == 32) {
      std::fill(coarse.tissue.begin(), coarse.tissue.end(), true);
      break;
    }
  }
  grids.push_back(coarse);
  std::size_t rows = spec.coarse_rows, cols = spec.coarse_cols;
  for (std::size_t k = 1; k < spec.levels; ++k) {
    rows *= spec.ratio;
    cols *= spec.ratio;
    grids.push_back(LevelGrid::full(k, rows, cols, spec.ratio));
  }

  std::vector<Tensor> emb;
  for (const auto& g : grids) {
    Tensor t(Shape{g.tissue_count(), spec.dim});
    for (auto& v : t.data()) v = spec.noise * rng.normal();
    emb.push_back(std::move(t));
  }
  GeneratedSlide out;
  out.bag = build_bag(grids, emb);
  TokenBag& bag = out.bag;

  // Level-0 ancestor of every finest-level token.
  const std::size_t finest = bag.finest();
  std::vector<std::size_t> ancestor(bag.levels[finest].size());
  std::iota(ancestor.begin(), ancestor.end(), 0);
  for (std::size_t k = finest; k > 0; --k) {
    for (auto& a : ancestor) a = bag.levels[k].parents[a];
  }
  const std::size_t t0 = bag.levels[0].size();
  std::vector<std::vector<std::size_t>> children(t0);
  for (std::size_t i = 0; i < ancestor.size(); ++i) children[ancestor[i]].push_back(i);

  // Coarse signal tokens: n_sig distinct level-0 tokens.
  std::vector<std::size_t> coarse_idx(t0);
  std::iota(coarse_idx.begin(), coarse_idx.end(), 0);
  for (std::size_t i = 0; i < n_sig; ++i) std::swap(coarse_idx[i], coarse_idx[i + rng.below(t0 - i)]);
  out.coarse_signal.assign(coarse_idx.begin(), coarse_idx.begin() + static_cast<std::ptrdiff_t>(n_sig));
  const std::vector<std::size_t> decoy_parents(coarse_idx.begin() + static_cast<std::ptrdiff_t>(n_sig),
                                               coarse_idx.end());

  std::set<std::size_t> used;
  auto pick_child = [&](std::size_t parent) {
    const auto& kids = children[parent];
    for (int tries = 0; tries < 64; ++tries) {
      const std::size_t c = kids[rng.below(kids.size())];
      if (used.insert(c).second) return c;
    }
    for (auto c : kids) {
      if (used.insert(c).second) return c;
    }
    throw SpecError("generate_slide: no free fine token under a parent");
  };
  for (std::size_t i = 0; i < n_sig; ++i) {
    const std::size_t parent = i < colocated_pairs
                                   ? out.coarse_signal[i]
                                   : decoy_parents[rng.below(decoy_parents.size())];
    out.fine_signal.push_back(pick_child(parent));
  }
  out.colocated = colocated_pairs;

  Tensor& ce = bag.levels[0].embeddings;
  for (auto i : out.coarse_signal) {
    for (std::size_t d = 0; d < spec.dim; ++d) ce.at(i, d) += spec.amplitude * spec.s_coarse[d];
  }
  Tensor& fe = bag.levels[finest].embeddings;
  for (auto i : out.fine_signal) {
    for (std::size_t d = 0; d < spec.dim; ++d) fe.at(i, d) += spec.amplitude * spec.s_fine[d];
  }
  // Stored values are exactly representable in the f32 bag format.
  for (auto& lv : bag.levels) {
    for (auto& v : lv.embeddings.data()) v = round_f32(v);
  }
  return out;
}

SurvivalRecord draw_survival(const SynthSpec& spec, std::size_t colocated_pairs, Rng& rng) {
  const double rate = std::exp(spec.hazard_gamma * static_cast<double>(colocated_pairs));
  const double u = 1.0 - rng.uniform();  // (0, 1]
  double t = -std::log(u) / rate;
  const bool censored = rng.uniform() < spec.censoring;
  const double frac = 1.0 - rng.uniform();
  if (censored) t *= frac;
  t = std::max(t, 1e-12);
  return SurvivalRecord{t, !censored};
}

std::vector<Split> assign_splits(std::size_t n, std::uint64_t seed, std::size_t n_val,
                                 std::size_t n_test) {
  if (n_val == 0) n_val = n / 10;
  if (n_test == 0) n_test = n / 10;
  if (n_val + n_test > n) throw ConfigError("assign_splits: splits exceed slide count");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  std::vector<Split> out(n, Split::Train);
  for (std::size_t j = 0; j < n_val; ++j) out[perm[j]] = Split::Val;
  for (std::size_t j = n_val; j < n_val + n_test; ++j) out[perm[j]] = Split::Test;
  return out;
}

Dataset generate_dataset(const SynthSpec& in) {
  SynthSpec spec = in;
  spec.finalize();
  Dataset data;
  data.task = spec.task;
  data.classes = spec.task == HeadKind::Classification ? 2 : 1;
  Rng rng(derive_seed(spec.seed, "slides"));
  const auto splits = assign_splits(spec.n_slides, derive_seed(spec.seed, "split"), spec.n_val, spec.n_test);
  for (std::size_t i = 0; i < spec.n_slides; ++i) {
    Slide s;
    char id[32];
    std::snprintf(id, sizeof(id), "slide_%05zu", i);
    s.meta.id = id;
    s.meta.path = "bags/" + s.meta.id + ".bag";
    s.meta.split = splits[i];
    std::size_t pairs = 0;
    if (spec.task == HeadKind::Classification) {
      s.meta.label = static_cast<int>(i % 2);
      pairs = static_cast<std::size_t>(s.meta.label);
    } else {
      pairs = rng.below(spec.signal_tokens + 1);
    }
    s.bag = generate_slide(spec, pairs, rng).bag;
    if (spec.task == HeadKind::Survival) s.meta.survival = draw_survival(spec, pairs, rng);
    data.slides.push_back(std::move(s));
  }
  return data;
}

std::string bag_bytes(const TokenBag& bag) {
  bag.validate();
  if (bag.levels.empty() || bag.levels.size() > 255) throw FormatError("bag: level count must be 1..255");
  binio::Writer w;
  w.put_bytes("MBG1");
  w.put<std::uint16_t>(kBagVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(bag.levels.size()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(bag.dim));
  for (std::size_t k = 0; k < bag.levels.size(); ++k) {
    const BagLevel& lv = bag.levels[k];
    w.put<std::uint32_t>(static_cast<std::uint32_t>(lv.size()));
    w.put<std::uint32_t>(k == 0 ? 0u : lv.ratio);
    for (const auto& c : lv.coords) {
      w.put<std::int32_t>(c.row);
      w.put<std::int32_t>(c.col);
    }
    for (std::size_t i = 0; i < lv.size(); ++i) {
      w.put<std::uint32_t>(k == 0 ? kNoParent : static_cast<std::uint32_t>(lv.parents[i]));
    }
    for (double v : lv.embeddings.data()) w.put_f32(static_cast<float>(v));
  }
  const std::string& body = w.bytes();
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));
  w.put<std::uint32_t>(crc);
  return w.bytes();
}

TokenBag parse_bag(std::string_view bytes) {
  binio::Reader r(bytes, "bag");
  if (r.get_bytes(4, "magic") != "MBG1") r.fail("bad magic");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kBagVersion) r.fail("unsupported version " + std::to_string(version));
  const auto n_levels = r.get<std::uint8_t>("level count");
  if (n_levels == 0) r.fail("zero levels");
  TokenBag bag;
  bag.dim = r.get<std::uint32_t>("D");
  if (bag.dim == 0) r.fail("D must be positive");
  for (std::size_t k = 0; k < n_levels; ++k) {
    BagLevel lv;
    const auto t = r.get<std::uint32_t>("token count");
    lv.ratio = r.get<std::uint32_t>("ratio");
    if (k == 0 && lv.ratio != 0) r.fail("level 0 ratio must be 0");
    if (k > 0 && lv.ratio == 0) r.fail("level " + std::to_string(k) + " ratio must be >= 1");
    // Reject counts the remaining bytes cannot possibly hold before allocating.
    const std::uint64_t per_token = 8 + 4 + 4ull * bag.dim;
    if (static_cast<std::uint64_t>(t) * per_token > r.remaining()) r.fail("token count exceeds file size");
    const std::size_t prev = k == 0 ? 0 : bag.levels[k - 1].size();
    for (std::uint32_t i = 0; i < t; ++i) {
      GridCoord c;
      c.row = r.get<std::int32_t>("coord row");
      c.col = r.get<std::int32_t>("coord col");
      if (c.row < 0 || c.col < 0) r.fail("negative coordinate");
      lv.coords.push_back(c);
    }
    for (std::uint32_t i = 0; i < t; ++i) {
      const auto p = r.get<std::uint32_t>("parent");
      if (k == 0) {
        if (p != kNoParent) r.fail("level 0 parent must be 0xFFFFFFFF");
      } else {
        if (p >= prev) {
          r.fail("parent index " + std::to_string(p) + " out of range for " + std::to_string(prev) +
                 " tokens at level " + std::to_string(k));
        }
        lv.parents.push_back(p);
      }
    }
    if (t > 0) {
      std::vector<double> emb(static_cast<std::size_t>(t) * bag.dim);
      for (auto& v : emb) {
        v = r.get_f32("embedding");
        if (!std::isfinite(v)) r.fail("non-finite embedding value");
      }
      lv.embeddings = Tensor(Shape{t, bag.dim}, std::move(emb));
    }
    bag.levels.push_back(std::move(lv));
  }
  const std::size_t body_end = r.offset();
  const auto stored = r.get<std::uint32_t>("checksum");
  if (r.remaining() != 0) r.fail("trailing bytes");
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(body_end)));
  if (crc != stored) {
    throw FormatError("bag: checksum mismatch at offset " + std::to_string(body_end));
  }
  try {
    bag.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("bag: ") + e.what() + " (file length " + std::to_string(bytes.size()) + ")");
  }
  return bag;
}

void write_bag(const TokenBag& bag, const std::string& path) { binio::write_file(path, bag_bytes(bag)); }

TokenBag read_bag(const std::string& path) {
  try {
    return parse_bag(binio::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

std::vector<SlideRecord> parse_manifest(std::string_view text, HeadKind task, std::uint64_t seed) {
  std::vector<SlideRecord> out;
  std::vector<bool> has_split;
  std::set<std::string> ids;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const auto f = split_fields(line);
    const std::string where = "manifest line " + std::to_string(line_no);
    const std::size_t base = task == HeadKind::Classification ? 3 : 4;
    const bool split_col = f.size() == base + 1 && is_split_name(f.back());
    if (f.size() != base && !split_col) {
      throw ParseError(where + ": expected " + std::to_string(base) + " or " + std::to_string(base + 1) +
                       " comma-separated fields, got " + std::to_string(f.size()));
    }
    SlideRecord rec;
    rec.id = f[0];
    rec.path = f[1];
    if (rec.id.empty() || rec.path.empty()) throw ParseError(where + ": empty id or path");
    auto parse_num = [&](const std::string& s, auto& v, const char* what) {
      const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
      if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw ParseError(where + ": bad " + what + " '" + s + "'");
      }
    };
    if (task == HeadKind::Classification) {
      parse_num(f[2], rec.label, "label");
      if (rec.label < 0) throw ParseError(where + ": negative label");
    } else {
      parse_num(f[2], rec.survival.time, "time");
      if (!(rec.survival.time > 0.0)) throw ParseError(where + ": time must be positive");
      if (f[3] != "0" && f[3] != "1") throw ParseError(where + ": event must be 0 or 1");
      rec.survival.event = f[3] == "1";
    }
    if (split_col) rec.split = parse_split(f.back());
    if (!ids.insert(rec.id).second) throw DuplicateError(where + ": duplicate slide id '" + rec.id + "'");
    has_split.push_back(split_col);
    out.push_back(std::move(rec));
  }
  std::vector<std::size_t> missing;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!has_split[i]) missing.push_back(i);
  }
  if (!missing.empty()) {
    const auto splits = assign_splits(missing.size(), derive_seed(seed, "split"));
    for (std::size_t j = 0; j < missing.size(); ++j) out[missing[j]].split = splits[j];
  }
  return out;
}

std::vector<SlideRecord> load_manifest(const std::string& path, HeadKind task, std::uint64_t seed) {
  std::string text;
  try {
    text = binio::read_file(path);
  } catch (const FormatError&) {
    throw ConfigError("cannot read manifest " + path);
  }
  return parse_manifest(text, task, seed);
}

std::string manifest_text(const std::vector<SlideRecord>& records, HeadKind task) {
  std::ostringstream os;
  os.precision(17);
  for (const auto& r : records) {
    os << r.id << ',' << r.path << ',';
    if (task == HeadKind::Classification) {
      os << r.label;
    } else {
      os << r.survival.time << ',' << (r.survival.event ? 1 : 0);
    }
    os << ',' << split_name(r.split) << '\n';
  }
  return os.str();
}

Dataset load_dataset(const std::string& manifest_path, HeadKind task, std::size_t classes,
                     std::uint64_t seed) {
  Dataset data;
  data.task = task;
  data.classes = classes;
  const auto base = std::filesystem::path(manifest_path).parent_path();
  for (auto& rec : load_manifest(manifest_path, task, seed)) {
    if (task == HeadKind::Classification && static_cast<std::size_t>(rec.label) >= classes) {
      throw ParseError("manifest: label " + std::to_string(rec.label) + " of " + rec.id +
                       " out of range for " + std::to_string(classes) + " classes");
    }
    Slide s;
    const auto p = std::filesystem::path(rec.path);
    s.bag = read_bag((p.is_absolute() ? p : base / p).string());
    s.meta = std::move(rec);
    data.slides.push_back(std::move(s));
  }
  return data;
}

void write_dataset(const Dataset& data, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "bags");
  std::vector<SlideRecord> records;
  for (const auto& s : data.slides) {
    write_bag(s.bag, (fs::path(dir) / s.meta.path).string());
    records.push_back(s.meta);
  }
  binio::write_file((fs::path(dir) / "manifest.csv").string(), manifest_text(records, data.task));
}

}  // namespace marble

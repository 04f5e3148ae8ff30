#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "marble/metrics.hpp"
#include "marble/model.hpp"
#include "marble/pyramid.hpp"
#include "marble/rng.hpp"

namespace marble {

// Synthetic multi-scale cohort with a planted cross-scale signal.
//
// Every slide carries `signal_tokens` coarse tokens shifted by a * s_coarse
// and the same number of finest-level tokens shifted by a * s_fine. Only
// co-location (a fine signal token below a coarse signal token) carries the
// label: positives have one co-located pair, negatives none; for survival the
// number of co-located pairs sets the hazard.
struct SynthSpec {
  std::size_t n_slides = 300;
  std::size_t n_val = 0;   // 0: 10% of n_slides
  std::size_t n_test = 0;  // 0: 10% of n_slides
  std::size_t levels = 2;  // S + 1
  std::uint32_t ratio = 2;
  std::size_t coarse_rows = 4;
  std::size_t coarse_cols = 4;
  std::size_t dim = 64;
  double noise = 1.0;
  double amplitude = 8.0;
  std::size_t signal_tokens = 2;
  double background = 0.15;  // probability a coarse cell is background
  HeadKind task = HeadKind::Classification;
  double censoring = 0.3;
  double hazard_gamma = 0.7;
  std::uint64_t seed = 7;
  // Unit-norm directions; drawn from the seed by finalize() when empty.
  Tensor s_coarse;
  Tensor s_fine;

  void validate() const;
  void finalize();
};

enum class Split { Train, Val, Test };

std::string_view split_name(Split s);
Split parse_split(std::string_view s);

struct SlideRecord {
  std::string id;
  std::string path;
  int label = -1;
  SurvivalRecord survival;
  Split split = Split::Train;
};

struct Slide {
  SlideRecord meta;
  TokenBag bag;
};

struct Dataset {
  HeadKind task = HeadKind::Classification;
  std::size_t classes = 2;
  std::vector<Slide> slides;

  std::vector<const Slide*> split(Split s) const;
};

struct GeneratedSlide {
  TokenBag bag;
  std::vector<std::size_t> coarse_signal;  // level-0 token indices
  std::vector<std::size_t> fine_signal;    // finest-level token indices
  std::size_t colocated = 0;               // fine signal tokens under a coarse signal token
};

// `colocated_pairs` is the number of co-located pairs to plant (1 for a
// positive slide, 0 for a negative one; 0..signal_tokens for survival).
GeneratedSlide generate_slide(const SynthSpec& spec, std::size_t colocated_pairs, Rng& rng);

// Time-to-event with hazard exp(gamma * pairs); censored with probability
// spec.censoring at a uniform time before the event.
SurvivalRecord draw_survival(const SynthSpec& spec, std::size_t colocated_pairs, Rng& rng);

// Whole cohort with labels and a seeded split assignment.
Dataset generate_dataset(const SynthSpec& spec);

// Split assignment: n_val = n_test = n / 10 (floor) unless given, rest train.
std::vector<Split> assign_splits(std::size_t n, std::uint64_t seed, std::size_t n_val = 0,
                                 std::size_t n_test = 0);

// Bag file: see README for the layout. A CRC-32 of all preceding bytes
// closes the file.
std::string bag_bytes(const TokenBag& bag);
TokenBag parse_bag(std::string_view bytes);
void write_bag(const TokenBag& bag, const std::string& path);
TokenBag read_bag(const std::string& path);

// Manifest: "id,path,label[,split]" or "id,path,time,event01[,split]".
// Missing split columns are filled by assign_splits(seed).
std::vector<SlideRecord> parse_manifest(std::string_view text, HeadKind task, std::uint64_t seed);
std::vector<SlideRecord> load_manifest(const std::string& path, HeadKind task, std::uint64_t seed);
std::string manifest_text(const std::vector<SlideRecord>& records, HeadKind task);

// Reads a manifest and every bag it references (paths relative to the
// manifest's directory).
Dataset load_dataset(const std::string& manifest_path, HeadKind task, std::size_t classes,
                     std::uint64_t seed);

// Writes bags/<id>.bag and manifest.csv under `dir`.
void write_dataset(const Dataset& data, const std::string& dir);

}  // namespace marble

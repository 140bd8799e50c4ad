#include "convnova/genome.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

#include "convnova/error.hpp"

namespace convnova {

namespace {

constexpr std::string_view kBases = "ACGT";

std::string random_bases(std::size_t n, Rng& rng) {
  std::string s(n, 'A');
  for (auto& c : s) c = kBases[rng.below(4)];
  return s;
}

std::vector<std::size_t> occurrences(std::string_view text, std::string_view motif) {
  std::vector<std::size_t> out;
  for (auto pos = text.find(motif); pos != std::string_view::npos; pos = text.find(motif, pos + 1))
    out.push_back(pos);
  return out;
}

// Re-randomizes every occurrence of any motif until none is left.
void scrub(std::string& s, const std::vector<std::string_view>& motifs, Rng& rng) {
  for (bool dirty = true; dirty;) {
    dirty = false;
    for (auto m : motifs) {
      for (auto pos = s.find(m); pos != std::string::npos; pos = s.find(m)) {
        for (std::size_t i = 0; i < m.size(); ++i) s[pos + i] = kBases[rng.below(4)];
        dirty = true;
      }
    }
  }
}

NucSeq checked_motif(std::string_view motif, const char* what) {
  require(!motif.empty(), "bad_argument", std::string(what) + ": motif is empty");
  const auto m = NucSeq::normalized(motif);
  for (char c : m.str())
    require(c != 'N', "bad_argument", std::string(what) + ": motif must be over A, C, G, T");
  return m;
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), "io", "cannot open " + path.string());
  return in;
}

}  // namespace

NucSeq NucSeq::normalized(std::string_view text) {
  std::string s(text.size(), 'N');
  for (std::size_t i = 0; i < text.size(); ++i) {
    switch (text[i]) {
      case 'A': case 'a': s[i] = 'A'; break;
      case 'C': case 'c': s[i] = 'C'; break;
      case 'G': case 'g': s[i] = 'G'; break;
      case 'T': case 't': s[i] = 'T'; break;
      default: break;
    }
  }
  return NucSeq(std::move(s));
}

NucSeq NucSeq::substr(std::size_t pos, std::size_t len) const { return NucSeq(bases_.substr(pos, len)); }

std::vector<FastaRecord> parse_fasta(std::istream& in) {
  std::vector<FastaRecord> records;
  std::string line, bases;
  std::string id;
  std::size_t header_line = 0;
  bool open = false;
  auto close = [&] {
    if (!open) return;
    require(!bases.empty(), "bad_fasta", "record '" + id + "' (line " + std::to_string(header_line) + ") is empty");
    records.push_back({id, NucSeq::normalized(bases)});
    bases.clear();
  };
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.front() == '>') {
      close();
      id = line.substr(1);
      id = id.substr(0, id.find_first_of(" \t"));
      require(!id.empty(), "bad_fasta", "line " + std::to_string(lineno) + ": header has no id");
      header_line = lineno;
      open = true;
    } else {
      require(open, "bad_fasta", "line " + std::to_string(lineno) + ": sequence data before any header");
      bases += line;
    }
  }
  close();
  return records;
}

std::vector<FastaRecord> load_fasta(const std::filesystem::path& path) {
  auto in = open_input(path);
  return parse_fasta(in);
}

std::vector<NucSeq> window(const NucSeq& seq, std::size_t length, std::size_t stride) {
  require(length >= 1 && stride >= 1, "bad_argument", "window: length and stride must be >= 1");
  std::vector<NucSeq> out;
  for (std::size_t pos = 0; pos + length <= seq.size(); pos += stride) out.push_back(seq.substr(pos, length));
  return out;
}

std::size_t MaskedRow::mask_count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

MaskedRow mlm_mask(const NucSeq& seq, double rate, Rng& rng) {
  require(rate >= 0.0 && rate <= 1.0, "bad_argument", "mask rate must be in [0, 1]");
  std::vector<std::size_t> candidates;
  for (std::size_t t = 0; t < seq.size(); ++t)
    if (base_index(seq[t]) < 4) candidates.push_back(t);
  const auto count = static_cast<std::size_t>(std::floor(rate * static_cast<double>(candidates.size())));
  // Partial Fisher-Yates: the first `count` slots become a uniform sample.
  for (std::size_t i = 0; i < count; ++i) std::swap(candidates[i], candidates[i + rng.below(candidates.size() - i)]);

  std::string masked = seq.str();
  MaskedRow row{{}, std::vector<std::int32_t>(seq.size(), -1), std::vector<std::uint8_t>(seq.size(), 0)};
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t t = candidates[i];
    row.targets[t] = static_cast<std::int32_t>(base_index(seq[t]));
    row.mask[t] = 1;
    masked[t] = 'N';
  }
  row.masked = NucSeq::normalized(masked);
  return row;
}

void LabeledSet::validate() const {
  require(!sequences.empty(), "empty_dataset", "dataset is empty");
  require(sequences.size() == labels.size(), "shape_mismatch", "dataset has mismatched sequences and labels");
  require(n_classes >= 1, "bad_label", "dataset has no classes");
  for (std::size_t i = 0; i < labels.size(); ++i)
    require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < n_classes, "bad_label",
            "label " + std::to_string(labels[i]) + " at row " + std::to_string(i) + " is outside [0, " +
                std::to_string(n_classes) + ")");
}

LabeledSet synth_motif(std::size_t n, std::size_t length, const NucSeq& motif_seq, Rng& rng) {
  const auto motif = checked_motif(motif_seq.str(), "synth_motif");
  require(motif.size() <= length, "bad_argument",
          "synth_motif: motif of length " + std::to_string(motif.size()) + " does not fit in " +
              std::to_string(length));
  require(n >= 1, "bad_argument", "synth_motif: n must be >= 1");
  LabeledSet set;
  set.n_classes = 2;
  const std::string_view m = motif.str();
  for (std::size_t i = 0; i < n; ++i) {
    const bool positive = i < n / 2;
    std::string s = random_bases(length, rng);
    if (positive) {
      const auto pos = rng.below(length - m.size() + 1);
      std::copy(m.begin(), m.end(), s.begin() + static_cast<std::ptrdiff_t>(pos));
    } else {
      scrub(s, {m}, rng);
    }
    set.sequences.push_back(NucSeq::normalized(s));
    set.labels.push_back(positive ? 1 : 0);
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());
  LabeledSet shuffled{{}, {}, 2};
  for (auto i : order) {
    shuffled.sequences.push_back(set.sequences[i]);
    shuffled.labels.push_back(set.labels[i]);
  }
  return shuffled;
}

bool longrange_label(const NucSeq& seq, const LongRangeSpec& spec) {
  const auto a = occurrences(seq.str(), spec.motif_a);
  const auto b = occurrences(seq.str(), spec.motif_b);
  for (auto i : a)
    for (auto j : b)
      if ((i > j ? i - j : j - i) >= spec.gap_min) return true;
  return false;
}

LabeledSet synth_longrange(const LongRangeSpec& spec, Rng& rng) {
  const auto ma = checked_motif(spec.motif_a, "synth_longrange");
  const auto mb = checked_motif(spec.motif_b, "synth_longrange");
  const std::size_t mlen = ma.size();
  require(mb.size() == mlen && ma != mb, "bad_argument", "synth_longrange: motifs must differ and share a length");
  require(spec.n >= 1, "bad_argument", "synth_longrange: n must be >= 1");
  require(spec.gap_min >= mlen, "bad_argument", "synth_longrange: gap_min must be at least the motif length");
  require(2 * mlen + spec.gap_min <= spec.length, "bad_argument",
          "synth_longrange: 2 * motif length + gap_min exceeds the sequence length");
  const std::size_t gap_max = spec.gap_max == 0 ? spec.length - mlen : spec.gap_max;
  require(gap_max >= spec.gap_min && gap_max + mlen <= spec.length, "bad_argument",
          "synth_longrange: gap_max must lie in [gap_min, length - motif length]");

  const std::string_view a = ma.str(), b = mb.str();
  LabeledSet set;
  set.n_classes = 2;
  for (std::size_t i = 0; i < spec.n; ++i) {
    const bool positive = i % 2 == 0;
    for (;;) {
      const std::size_t sep = spec.gap_min + rng.below(gap_max - spec.gap_min + 1);
      const std::size_t p = rng.below(spec.length - sep - mlen + 1);
      std::string_view first = a, second = b;
      if (positive) {
        if (rng.below(2) == 1) std::swap(first, second);
      } else {
        first = second = rng.below(2) == 0 ? a : b;
      }
      std::string s = random_bases(spec.length, rng);
      scrub(s, {a, b}, rng);
      std::copy(first.begin(), first.end(), s.begin() + static_cast<std::ptrdiff_t>(p));
      std::copy(second.begin(), second.end(), s.begin() + static_cast<std::ptrdiff_t>(p + sep));
      // Planting can create a new occurrence across a boundary; redraw then.
      if (occurrences(s, a).size() + occurrences(s, b).size() != 2) continue;
      auto seq = NucSeq::normalized(s);
      if (longrange_label(seq, spec) != positive) continue;
      set.sequences.push_back(std::move(seq));
      set.labels.push_back(positive ? 1 : 0);
      break;
    }
  }
  return set;
}

NucSeq synth_kmer_corpus(std::size_t total_length, std::size_t vocab_size, std::size_t word_length, double noise,
                         Rng& rng) {
  require(vocab_size >= 1 && word_length >= 1, "bad_argument", "kmer corpus: vocabulary and words must be nonempty");
  require(noise >= 0.0 && noise <= 1.0, "bad_argument", "kmer corpus: noise must be in [0, 1]");
  std::vector<std::string> vocab;
  for (std::size_t i = 0; i < vocab_size; ++i) vocab.push_back(random_bases(word_length, rng));
  std::string s;
  s.reserve(total_length + word_length);
  while (s.size() < total_length) s += vocab[rng.below(vocab_size)];
  s.resize(total_length);
  for (auto& c : s)
    if (rng.uniform() < noise) c = kBases[rng.below(4)];
  return NucSeq::normalized(s);
}

LabeledSet parse_tsv(std::istream& in) {
  LabeledSet set;
  std::string line;
  std::int32_t max_label = -1;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto where = "line " + std::to_string(lineno) + ": ";
    const auto tab = line.find('\t');
    require(tab != std::string::npos && tab > 0, "bad_tsv", where + "expected 'sequence<TAB>label'");
    const std::string_view field = std::string_view(line).substr(tab + 1);
    std::int32_t label = 0;
    const auto [end, ec] = std::from_chars(field.data(), field.data() + field.size(), label);
    require(ec == std::errc{} && end == field.data() + field.size() && !field.empty(), "bad_tsv",
            where + "label '" + std::string(field) + "' is not an integer");
    require(label >= 0, "bad_tsv", where + "label must be non-negative");
    set.sequences.push_back(NucSeq::normalized(std::string_view(line).substr(0, tab)));
    set.labels.push_back(label);
    max_label = std::max(max_label, label);
  }
  require(!set.sequences.empty(), "empty_dataset", "TSV has no rows");
  set.n_classes = static_cast<std::size_t>(max_label) + 1;
  return set;
}

LabeledSet load_tsv(const std::filesystem::path& path) {
  auto in = open_input(path);
  try {
    return parse_tsv(in);
  } catch (const Error& e) {
    fail(e.cause(), path.string() + ": " + e.what());
  }
}

void write_tsv(std::ostream& out, const LabeledSet& set) {
  for (std::size_t i = 0; i < set.size(); ++i) out << set.sequences[i].str() << '\t' << set.labels[i] << '\n';
}

std::pair<LabeledSet, LabeledSet> split(const LabeledSet& set, double fraction, Rng& rng) {
  require(fraction >= 0.0 && fraction <= 1.0, "bad_argument", "split fraction must be in [0, 1]");
  std::vector<std::size_t> order(set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());
  const auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(set.size())));
  std::pair<LabeledSet, LabeledSet> out{{{}, {}, set.n_classes}, {{}, {}, set.n_classes}};
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto& dst = i < n_train ? out.first : out.second;
    dst.sequences.push_back(set.sequences[order[i]]);
    dst.labels.push_back(set.labels[order[i]]);
  }
  return out;
}

}  // namespace convnova

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "convnova/rng.hpp"
#include "convnova/tensor.hpp"

namespace convnova {

/// One-hot channel order.
inline constexpr std::string_view kAlphabet = "ACGTN";
inline constexpr std::size_t kUnknownBase = 4;

/// Channel index of an already-normalized base.
inline std::size_t base_index(char c) {
  switch (c) {
    case 'A': return 0;
    case 'C': return 1;
    case 'G': return 2;
    case 'T': return 3;
    default: return kUnknownBase;
  }
}

/// Nucleotide string over {A, C, G, T, N}.
class NucSeq {
 public:
  NucSeq() = default;

  /// Folds lowercase to uppercase and maps every other symbol to 'N'.
  static NucSeq normalized(std::string_view text);

  const std::string& str() const noexcept { return bases_; }
  std::size_t size() const noexcept { return bases_.size(); }
  bool empty() const noexcept { return bases_.empty(); }
  char operator[](std::size_t i) const noexcept { return bases_[i]; }
  NucSeq substr(std::size_t pos, std::size_t len) const;

  friend bool operator==(const NucSeq&, const NucSeq&) = default;

 private:
  explicit NucSeq(std::string bases) : bases_(std::move(bases)) {}
  std::string bases_;
};

struct FastaRecord {
  std::string id;
  NucSeq seq;
};

/// Parses FASTA text; wrapped sequence lines are joined.
std::vector<FastaRecord> parse_fasta(std::istream& in);
std::vector<FastaRecord> load_fasta(const std::filesystem::path& path);

/// [l, 5] encoding in channel order A, C, G, T, N.
template <typename T>
Tensor<T> one_hot(const NucSeq& seq) {
  require(!seq.empty(), "empty_sequence", "one_hot: empty sequence");
  Tensor<T> out({seq.size(), kAlphabet.size()});
  for (std::size_t t = 0; t < seq.size(); ++t) out.at(t, base_index(seq[t])) = T(1);
  return out;
}

/// Row-wise argmax back to bases.
template <typename T>
NucSeq decode_one_hot(const Tensor<T>& x) {
  std::string s(x.dim(0), 'N');
  for (std::size_t t = 0; t < x.dim(0); ++t) {
    auto r = x.row(t);
    std::size_t best = 0;
    for (std::size_t c = 1; c < r.size(); ++c)
      if (r[c] > r[best]) best = c;
    s[t] = kAlphabet[best];
  }
  return NucSeq::normalized(s);
}

/// Full windows of `length` starting every `stride` bases; a trailing partial
/// window is dropped.
std::vector<NucSeq> window(const NucSeq& seq, std::size_t length, std::size_t stride);

/// One masked sequence. `masked` has 'N' at every masked position; `targets`
/// holds the original base index (0..3) there and -1 elsewhere.
struct MaskedRow {
  NucSeq masked;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> mask;

  std::size_t mask_count() const;
};

/// Masks exactly floor(rate * m) of the m A/C/G/T positions, chosen uniformly
/// without replacement, by replacing them with N.
MaskedRow mlm_mask(const NucSeq& seq, double rate, Rng& rng);

struct MaskedBatch {
  std::vector<MaskedRow> rows;

  /// [b, l, 5] one-hot inputs; all rows must share a length.
  template <typename T>
  Tensor<T> inputs() const {
    require(!rows.empty(), "empty_batch", "masked batch is empty");
    const std::size_t l = rows.front().masked.size();
    Tensor<T> out({rows.size(), l, kAlphabet.size()});
    for (std::size_t b = 0; b < rows.size(); ++b) {
      require(rows[b].masked.size() == l, "shape_mismatch", "masked batch rows differ in length");
      for (std::size_t t = 0; t < l; ++t) out.at(b, t, base_index(rows[b].masked[t])) = T(1);
    }
    return out;
  }
};

struct LabeledSet {
  std::vector<NucSeq> sequences;
  std::vector<std::int32_t> labels;
  std::size_t n_classes = 0;

  std::size_t size() const noexcept { return sequences.size(); }
  /// Throws unless nonempty, lengths match and every label is in [0, n_classes).
  void validate() const;
};

/// Half positives carrying `motif` at a uniform offset, half negatives with
/// every accidental occurrence re-randomized away; shuffled; labels 1 / 0.
LabeledSet synth_motif(std::size_t n, std::size_t length, const NucSeq& motif, Rng& rng);

struct LongRangeSpec {
  std::size_t n = 1000;
  std::size_t length = 256;
  /// Minimum start-to-start separation that makes a pair count.
  std::size_t gap_min = 64;
  /// Largest planted separation; 0 means as far as the length allows.
  std::size_t gap_max = 0;
  std::string motif_a = "ACGGTCAT";
  std::string motif_b = "TGCATGGA";
};

/// Label 1 iff motif_a and motif_b both occur with separation >= gap_min.
/// Positives plant one copy of each; negatives plant two copies of the same
/// motif at the same separations, so only a model whose receptive field
/// spans the pair can tell the classes apart.
LabeledSet synth_longrange(const LongRangeSpec& spec, Rng& rng);

/// The long-range predicate evaluated by scanning `seq`.
bool longrange_label(const NucSeq& seq, const LongRangeSpec& spec);

/// Concatenation of words drawn from a small random vocabulary of
/// `word_length`-mers, with per-base substitution noise. Used as an MLM
/// corpus whose masked bases are predictable from context.
NucSeq synth_kmer_corpus(std::size_t total_length, std::size_t vocab_size, std::size_t word_length,
                         double noise, Rng& rng);

/// Rows "sequence<TAB>integer_label"; blank lines are skipped.
LabeledSet parse_tsv(std::istream& in);
LabeledSet load_tsv(const std::filesystem::path& path);
void write_tsv(std::ostream& out, const LabeledSet& set);

/// Shuffled split with round(fraction * n) training examples.
std::pair<LabeledSet, LabeledSet> split(const LabeledSet& set, double fraction, Rng& rng);

}  // namespace convnova

#pragma once

#include <streambp/errors.hpp>
#include <streambp/tensor.hpp>

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace streambp {

// Ordered, contiguous, non-empty chunks covering [0, length).
class Partition {
 public:
  Partition() = default;

  // Balanced split: sizes differ by at most one, larger chunks first. A chunk
  // count above `length` is clamped to one row per chunk.
  static Partition even(std::size_t length, std::size_t chunks) {
    if (chunks == 0) throw DomainError("Partition: chunk count must be >= 1");
    if (length == 0) throw DomainError("Partition: cannot partition an empty range");
    chunks = std::min(chunks, length);
    Partition p;
    p.length_ = length;
    const std::size_t base = length / chunks;
    const std::size_t extra = length % chunks;
    std::size_t at = 0;
    for (std::size_t i = 0; i < chunks; ++i) {
      const std::size_t n = base + (i < extra ? 1 : 0);
      p.chunks_.push_back({at, at + n});
      at += n;
    }
    return p;
  }

  // Fixed chunk length; the final chunk takes whatever is left.
  static Partition by_chunk_size(std::size_t length, std::size_t chunk_size) {
    if (chunk_size == 0) throw DomainError("Partition: chunk size must be >= 1");
    if (length == 0) throw DomainError("Partition: cannot partition an empty range");
    Partition p;
    p.length_ = length;
    for (std::size_t at = 0; at < length; at += chunk_size) p.chunks_.push_back({at, std::min(length, at + chunk_size)});
    return p;
  }

  static Partition from_boundaries(std::size_t length, std::span<const std::size_t> ends) {
    Partition p;
    p.length_ = length;
    std::size_t at = 0;
    for (std::size_t e : ends) {
      if (e <= at || e > length) throw DomainError("Partition: boundaries must be increasing within [1, length]");
      p.chunks_.push_back({at, e});
      at = e;
    }
    if (at != length) throw DomainError("Partition: boundaries do not cover the range");
    return p;
  }

  std::size_t length() const { return length_; }
  std::size_t count() const { return chunks_.size(); }
  const RowRange& operator[](std::size_t i) const {
    if (i >= chunks_.size()) throw ShapeError("Partition: chunk " + std::to_string(i) + " out of range");
    return chunks_[i];
  }
  std::span<const RowRange> chunks() const { return chunks_; }
  std::size_t max_chunk_rows() const {
    std::size_t m = 0;
    for (const auto& c : chunks_) m = std::max(m, c.size());
    return m;
  }

  auto begin() const { return chunks_.begin(); }
  auto end() const { return chunks_.end(); }

 private:
  std::size_t length_ = 0;
  std::vector<RowRange> chunks_;
};

// How a sequence dimension is split: a number of chunks, or a chunk length.
struct Chunking {
  enum class Kind { count, size };
  Kind kind = Kind::count;
  std::size_t value = 1;

  static Chunking chunks(std::size_t d) { return {Kind::count, d}; }
  static Chunking rows_per_chunk(std::size_t n) { return {Kind::size, n}; }

  Partition resolve(std::size_t length) const {
    return kind == Kind::count ? Partition::even(length, value) : Partition::by_chunk_size(length, value);
  }
};

// Layer plan splits the T hidden-state rows; head plan splits the scored rows.
struct PartitionPlan {
  Chunking layer = Chunking::chunks(1);
  Chunking head = Chunking::chunks(1);

  static PartitionPlan uniform(std::size_t layer_chunks, std::size_t head_chunks) {
    return {Chunking::chunks(layer_chunks), Chunking::chunks(head_chunks)};
  }
};

}  // namespace streambp

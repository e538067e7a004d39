#pragma once

#include <streambp/errors.hpp>

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

namespace streambp {

enum class Tag : std::uint8_t { parameter, gradient, activation, scratch };
inline constexpr std::size_t kNumTags = 4;

enum class FlopsCategory : std::uint8_t { attn_score, attn_out, qkv_proj, mlp, lm_head, objective };
inline constexpr std::size_t kNumFlopsCategories = 6;

inline constexpr std::array<std::string_view, kNumFlopsCategories> kFlopsCategoryNames = {
    "attn_score", "attn_out", "qkv_proj", "mlp", "lm_head", "objective"};

inline constexpr std::string_view to_string(Tag tag) {
  switch (tag) {
    case Tag::parameter: return "parameter";
    case Tag::gradient: return "gradient";
    case Tag::activation: return "activation";
    case Tag::scratch: return "scratch";
  }
  return "?";
}

inline constexpr std::string_view to_string(FlopsCategory c) {
  return kFlopsCategoryNames[static_cast<std::size_t>(c)];
}

struct MemorySample {
  std::uint64_t event_index = 0;
  std::uint64_t live_activation_bytes = 0;
};

// One alloc/free as seen by the meter. Only kept when trace recording is on.
struct MemoryEvent {
  std::uint64_t bytes = 0;
  Tag tag = Tag::scratch;
  bool is_alloc = true;
  std::string label;
};

struct MemoryReport {
  std::uint64_t peak_activation_bytes = 0;
  // activations + parameters + gradients + scratch
  std::uint64_t peak_total_bytes = 0;
  std::vector<MemorySample> timeline;
  std::map<std::string, std::uint64_t, std::less<>> peak_by_label;

  std::uint64_t label_peak(std::string_view label) const {
    auto it = peak_by_label.find(label);
    return it == peak_by_label.end() ? 0 : it->second;
  }
};

struct FlopsReport {
  std::array<std::uint64_t, kNumFlopsCategories> by_category{};

  std::uint64_t operator[](FlopsCategory c) const { return by_category[static_cast<std::size_t>(c)]; }
  std::uint64_t total() const {
    return std::accumulate(by_category.begin(), by_category.end(), std::uint64_t{0});
  }
  FlopsReport& operator+=(const FlopsReport& other) {
    for (std::size_t i = 0; i < kNumFlopsCategories; ++i) by_category[i] += other.by_category[i];
    return *this;
  }
  friend FlopsReport operator-(FlopsReport a, const FlopsReport& b) {
    for (std::size_t i = 0; i < kNumFlopsCategories; ++i) a.by_category[i] -= b.by_category[i];
    return a;
  }
  bool operator==(const FlopsReport&) const = default;
};

// Weight reloads stand in for the HBM weight-load overhead of chunked backward:
// one per (layer, chunk) gradient computation.
struct PassReport {
  std::uint64_t weight_reloads = 0;
  std::uint64_t kernel_invocations = 0;
  std::vector<std::uint64_t> reloads_per_layer;
};

// Exact counters for activation memory, FLOPs and weight reloads. One meter per
// run; never shared between concurrent runs.
class Meter {
 public:
  explicit Meter(bool record_trace = false) : record_trace_(record_trace) {}

  Meter(const Meter&) = delete;
  Meter& operator=(const Meter&) = delete;

  void track_alloc(std::uint64_t bytes, Tag tag, std::string_view label = {}) {
    live_[idx(tag)] += bytes;
    live_total_ += bytes;
    peak_total_ = std::max(peak_total_, live_total_);
    if (tag == Tag::activation) peak_activation_ = std::max(peak_activation_, live_[idx(tag)]);
    if (!label.empty()) {
      auto& slot = label_slot(label);
      slot.live += bytes;
      slot.peak = std::max(slot.peak, slot.live);
    }
    record(bytes, tag, true, label);
  }

  void track_free(std::uint64_t bytes, Tag tag, std::string_view label = {}) {
    if (bytes > live_[idx(tag)]) {
      throw AccountingError("meter: freeing " + std::to_string(bytes) + " bytes of " +
                            std::string(to_string(tag)) + " with only " +
                            std::to_string(live_[idx(tag)]) + " live");
    }
    live_[idx(tag)] -= bytes;
    live_total_ -= bytes;
    if (!label.empty()) {
      auto& slot = label_slot(label);
      if (bytes > slot.live) throw AccountingError("meter: label '" + std::string(label) + "' went negative");
      slot.live -= bytes;
    }
    record(bytes, tag, false, label);
  }

  std::uint64_t live(Tag tag) const { return live_[idx(tag)]; }
  std::uint64_t live_total() const { return live_total_; }
  std::uint64_t peak_activation() const { return peak_activation_; }
  std::uint64_t peak_total() const { return peak_total_; }

  std::uint64_t label_peak(std::string_view label) const {
    auto it = labels_.find(label);
    return it == labels_.end() ? 0 : it->second.peak;
  }

  // Restart peak tracking from the current live state, for measuring one phase.
  void reset_peaks() {
    peak_activation_ = live_[idx(Tag::activation)];
    peak_total_ = live_total_;
    for (auto& [_, slot] : labels_) slot.peak = slot.live;
    timeline_.clear();
  }

  void add_flops(FlopsCategory c, std::uint64_t n) { flops_.by_category[static_cast<std::size_t>(c)] += n; }
  void count_kernel() { ++passes_.kernel_invocations; }
  void count_weight_reload(std::size_t layer) {
    ++passes_.weight_reloads;
    if (passes_.reloads_per_layer.size() <= layer) passes_.reloads_per_layer.resize(layer + 1, 0);
    ++passes_.reloads_per_layer[layer];
  }

  MemoryReport memory_report() const {
    MemoryReport r;
    r.peak_activation_bytes = peak_activation_;
    r.peak_total_bytes = peak_total_;
    r.timeline = timeline_;
    for (const auto& [name, slot] : labels_) r.peak_by_label.emplace(name, slot.peak);
    return r;
  }
  const FlopsReport& flops() const { return flops_; }
  const PassReport& passes() const { return passes_; }
  const std::vector<MemoryEvent>& trace() const { return trace_; }
  std::uint64_t event_count() const { return events_; }

 private:
  struct LabelSlot {
    std::uint64_t live = 0;
    std::uint64_t peak = 0;
  };

  static constexpr std::size_t idx(Tag t) { return static_cast<std::size_t>(t); }

  LabelSlot& label_slot(std::string_view label) {
    auto it = labels_.find(label);
    if (it == labels_.end()) it = labels_.emplace(std::string(label), LabelSlot{}).first;
    return it->second;
  }

  void record(std::uint64_t bytes, Tag tag, bool alloc, std::string_view label) {
    timeline_.push_back({events_, live_[idx(Tag::activation)]});
    if (record_trace_) trace_.push_back({bytes, tag, alloc, std::string(label)});
    ++events_;
  }

  bool record_trace_;
  std::array<std::uint64_t, kNumTags> live_{};
  std::uint64_t live_total_ = 0;
  std::uint64_t peak_activation_ = 0;
  std::uint64_t peak_total_ = 0;
  std::uint64_t events_ = 0;
  std::map<std::string, LabelSlot, std::less<>> labels_;
  std::vector<MemorySample> timeline_;
  std::vector<MemoryEvent> trace_;
  FlopsReport flops_;
  PassReport passes_;
};

// Registers `bytes` under `tag` for the guard's lifetime (resident parameters,
// externally owned inputs).
class ScopedResidency {
 public:
  ScopedResidency(Meter& meter, std::uint64_t bytes, Tag tag) : meter_(&meter), bytes_(bytes), tag_(tag) {
    meter_->track_alloc(bytes_, tag_);
  }
  ~ScopedResidency() { meter_->track_free(bytes_, tag_); }
  ScopedResidency(const ScopedResidency&) = delete;
  ScopedResidency& operator=(const ScopedResidency&) = delete;

 private:
  Meter* meter_;
  std::uint64_t bytes_;
  Tag tag_;
};

struct Rational {
  std::uint64_t num = 0;
  std::uint64_t den = 1;

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  bool operator==(const Rational&) const = default;
};

// Predicted StreamBP / full-attention FLOPs ratio for the causal score products:
// sum_i 2 (T/D)(iT/D) d over 2 T^2 d, i.e. (1 + D) / (2D). Independent of T and d.
inline Rational flops_ratio_attention(std::uint64_t seq_len, std::uint64_t hidden, std::uint64_t chunks) {
  if (chunks == 0) throw DomainError("flops_ratio_attention: chunk count must be >= 1");
  if (seq_len == 0 || hidden == 0) throw DomainError("flops_ratio_attention: T and d must be >= 1");
  if (seq_len % chunks != 0) throw DomainError("flops_ratio_attention: D must divide T");
  const std::uint64_t num = 1 + chunks;
  const std::uint64_t den = 2 * chunks;
  const std::uint64_t g = std::gcd(num, den);
  return {num / g, den / g};
}

}  // namespace streambp

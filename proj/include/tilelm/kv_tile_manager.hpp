#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <unordered_map>
#include <vector>

namespace tilelm {

using SeqId = std::uint64_t;
using TileId = std::uint32_t;

// Tiled: KV grows tile by tile from any free ids.
// ContiguousReservation: the whole prompt + max_new_tokens footprint is
// reserved up front as one run of adjacent tile ids (comparison baseline).
enum class AllocMode { Tiled, ContiguousReservation };

const char* to_string(AllocMode mode);

struct TilePoolConfig {
  std::size_t total_tiles = 0;
  std::size_t tile_size = 16;
  std::size_t n_layers = 1;
  std::size_t n_kv_heads = 1;
  std::size_t head_dim = 1;
  AllocMode mode = AllocMode::Tiled;

  std::size_t capacity_tokens() const { return total_tiles * tile_size; }
  // Scalars per token slot in one layer's K (or V) arena.
  std::size_t slot_width() const { return n_kv_heads * head_dim; }
  void validate() const;
};

struct SlotRef {
  TileId tile_id = 0;
  std::size_t offset = 0;
  bool operator==(const SlotRef&) const = default;
};

struct BlockTable {
  SeqId seq_id = 0;
  std::vector<TileId> tiles;
  std::size_t token_count = 0;
};

struct PoolStats {
  std::size_t total_tiles = 0;
  std::size_t free_tiles = 0;
  std::size_t used_tiles = 0;
  std::size_t live_sequences = 0;
  std::size_t live_tokens = 0;
  std::size_t internal_waste_slots = 0;
};

constexpr std::size_t tiles_needed(std::size_t token_count, std::size_t tile_size) {
  return (token_count + tile_size - 1) / tile_size;
}

// Maps a logical token position to its physical slot.
SlotRef slot_ref(const BlockTable& table, std::size_t tile_size, std::size_t position);

// Fixed arena of KV tiles with a free index. Single owner, no internal locking.
class TilePool {
 public:
  explicit TilePool(const TilePoolConfig& config);

  TilePool(TilePool&&) noexcept = default;
  TilePool& operator=(TilePool&&) noexcept = default;
  TilePool(const TilePool&) = delete;
  TilePool& operator=(const TilePool&) = delete;

  const TilePoolConfig& config() const { return config_; }
  std::size_t tile_size() const { return config_.tile_size; }
  std::size_t free_tile_count() const { return free_.size(); }
  std::size_t used_tile_count() const { return config_.total_tiles - free_.size(); }

  // max_new_tokens only matters in ContiguousReservation mode, where the full
  // footprint must fit in one contiguous free run and decode_reserve is moot.
  bool can_admit(std::size_t prompt_len, std::size_t decode_reserve,
                 std::size_t max_new_tokens = 0) const;

  // Reserves the prompt's tiles eagerly; token_count stays 0 until slots are
  // appended. Throws OutOfTiles or DuplicateSequence.
  const BlockTable& allocate_sequence(SeqId seq, std::size_t prompt_len,
                                      std::size_t max_new_tokens = 0);

  // Claims the next token position, pulling a tile from the free index when
  // the sequence's last tile is full. Throws OutOfTiles, UnknownSequence.
  SlotRef append_slot(SeqId seq);

  // Returns the number of tiles released. Throws UnknownSequence.
  std::size_t free_sequence(SeqId seq);

  SlotRef slot_ref(SeqId seq, std::size_t position) const;

  bool contains(SeqId seq) const { return tables_.count(seq) != 0; }
  const BlockTable& table(SeqId seq) const;
  const std::unordered_map<SeqId, BlockTable>& tables() const { return tables_; }
  std::optional<SeqId> owner_of(TileId tile) const;
  const std::set<TileId>& free_index() const { return free_; }

  PoolStats stats() const;

  // Per-slot K/V rows (n_kv_heads * head_dim scalars) of one layer.
  std::span<float> key(std::size_t layer, SlotRef slot);
  std::span<float> value(std::size_t layer, SlotRef slot);
  std::span<const float> key(std::size_t layer, SlotRef slot) const;
  std::span<const float> value(std::size_t layer, SlotRef slot) const;

 private:
  BlockTable& mutable_table(SeqId seq);
  std::optional<TileId> find_contiguous_run(std::size_t count) const;
  TileId take_lowest_free();
  std::size_t slot_offset(std::size_t layer, SlotRef slot) const;

  TilePoolConfig config_;
  std::set<TileId> free_;
  std::vector<std::optional<SeqId>> owner_;
  std::unordered_map<SeqId, BlockTable> tables_;
  std::vector<std::vector<float>> keys_;
  std::vector<std::vector<float>> values_;
};

}  // namespace tilelm

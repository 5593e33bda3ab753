#include "tilelm/kv_tile_manager.hpp"

#include <limits>
#include <string>

#include "tilelm/errors.hpp"

namespace tilelm {

const char* to_string(AllocMode mode) {
  return mode == AllocMode::Tiled ? "tiled" : "contiguous";
}

void TilePoolConfig::validate() const {
  if (total_tiles < 1) throw InvalidConfig("tile pool needs at least one tile");
  if (tile_size < 1) throw InvalidConfig("tile_size must be >= 1");
  if (n_layers < 1 || n_kv_heads < 1 || head_dim < 1)
    throw InvalidConfig("tile pool layer/head dimensions must be >= 1");
  if (total_tiles > std::numeric_limits<TileId>::max())
    throw InvalidConfig("too many tiles");
}

SlotRef slot_ref(const BlockTable& table, std::size_t tile_size, std::size_t position) {
  if (position >= table.token_count)
    throw PositionOutOfRange("position " + std::to_string(position) +
                             " >= token_count " + std::to_string(table.token_count));
  return {table.tiles[position / tile_size], position % tile_size};
}

TilePool::TilePool(const TilePoolConfig& config) : config_(config) {
  config_.validate();
  for (std::size_t t = 0; t < config_.total_tiles; ++t)
    free_.insert(free_.end(), static_cast<TileId>(t));
  owner_.assign(config_.total_tiles, std::nullopt);
  const std::size_t arena = config_.total_tiles * config_.tile_size * config_.slot_width();
  keys_.assign(config_.n_layers, std::vector<float>(arena, 0.0f));
  values_.assign(config_.n_layers, std::vector<float>(arena, 0.0f));
}

std::optional<TileId> TilePool::find_contiguous_run(std::size_t count) const {
  if (count == 0) return TileId{0};
  std::size_t run = 0;
  TileId start = 0;
  TileId prev = 0;
  for (TileId id : free_) {
    if (run > 0 && id == prev + 1) {
      ++run;
    } else {
      run = 1;
      start = id;
    }
    prev = id;
    if (run == count) return start;
  }
  return std::nullopt;
}

bool TilePool::can_admit(std::size_t prompt_len, std::size_t decode_reserve,
                         std::size_t max_new_tokens) const {
  if (config_.mode == AllocMode::ContiguousReservation) {
    const std::size_t need = tiles_needed(prompt_len + max_new_tokens, config_.tile_size);
    return need <= free_.size() && find_contiguous_run(need).has_value();
  }
  return free_.size() >= tiles_needed(prompt_len, config_.tile_size) + decode_reserve;
}

TileId TilePool::take_lowest_free() {
  auto it = free_.begin();
  TileId id = *it;
  free_.erase(it);
  return id;
}

const BlockTable& TilePool::allocate_sequence(SeqId seq, std::size_t prompt_len,
                                              std::size_t max_new_tokens) {
  if (contains(seq)) throw DuplicateSequence("sequence " + std::to_string(seq) + " already allocated");

  BlockTable table;
  table.seq_id = seq;
  if (config_.mode == AllocMode::ContiguousReservation) {
    const std::size_t need = tiles_needed(prompt_len + max_new_tokens, config_.tile_size);
    auto start = find_contiguous_run(need);
    if (!start) throw OutOfTiles("no contiguous run of " + std::to_string(need) + " tiles");
    for (std::size_t i = 0; i < need; ++i) {
      const TileId id = static_cast<TileId>(*start + i);
      free_.erase(id);
      table.tiles.push_back(id);
    }
  } else {
    const std::size_t need = tiles_needed(prompt_len, config_.tile_size);
    if (need > free_.size())
      throw OutOfTiles("need " + std::to_string(need) + " tiles, " +
                       std::to_string(free_.size()) + " free");
    for (std::size_t i = 0; i < need; ++i) table.tiles.push_back(take_lowest_free());
  }
  for (TileId id : table.tiles) owner_[id] = seq;
  return tables_.emplace(seq, std::move(table)).first->second;
}

BlockTable& TilePool::mutable_table(SeqId seq) {
  auto it = tables_.find(seq);
  if (it == tables_.end()) throw UnknownSequence("unknown sequence " + std::to_string(seq));
  return it->second;
}

const BlockTable& TilePool::table(SeqId seq) const {
  auto it = tables_.find(seq);
  if (it == tables_.end()) throw UnknownSequence("unknown sequence " + std::to_string(seq));
  return it->second;
}

SlotRef TilePool::append_slot(SeqId seq) {
  BlockTable& t = mutable_table(seq);
  const std::size_t pos = t.token_count;
  if (pos == t.tiles.size() * config_.tile_size) {
    if (config_.mode == AllocMode::ContiguousReservation)
      throw OutOfTiles("sequence " + std::to_string(seq) + " exhausted its reservation");
    if (free_.empty()) throw OutOfTiles("tile pool exhausted");
    const TileId id = take_lowest_free();
    owner_[id] = seq;
    t.tiles.push_back(id);
  }
  ++t.token_count;
  return {t.tiles[pos / config_.tile_size], pos % config_.tile_size};
}

std::size_t TilePool::free_sequence(SeqId seq) {
  auto it = tables_.find(seq);
  if (it == tables_.end()) throw UnknownSequence("unknown sequence " + std::to_string(seq));
  const std::size_t released = it->second.tiles.size();
  for (TileId id : it->second.tiles) {
    owner_[id].reset();
    free_.insert(id);
  }
  tables_.erase(it);
  return released;
}

SlotRef TilePool::slot_ref(SeqId seq, std::size_t position) const {
  return tilelm::slot_ref(table(seq), config_.tile_size, position);
}

std::optional<SeqId> TilePool::owner_of(TileId tile) const {
  if (tile >= owner_.size()) return std::nullopt;
  return owner_[tile];
}

PoolStats TilePool::stats() const {
  PoolStats s;
  s.total_tiles = config_.total_tiles;
  s.free_tiles = free_.size();
  s.used_tiles = used_tile_count();
  s.live_sequences = tables_.size();
  for (const auto& [id, t] : tables_) s.live_tokens += t.token_count;
  s.internal_waste_slots = s.used_tiles * config_.tile_size - s.live_tokens;
  return s;
}

std::size_t TilePool::slot_offset(std::size_t layer, SlotRef slot) const {
  if (layer >= config_.n_layers) throw PositionOutOfRange("layer out of range");
  if (slot.tile_id >= config_.total_tiles || slot.offset >= config_.tile_size)
    throw PositionOutOfRange("slot out of range");
  return (static_cast<std::size_t>(slot.tile_id) * config_.tile_size + slot.offset) *
         config_.slot_width();
}

std::span<float> TilePool::key(std::size_t layer, SlotRef slot) {
  const std::size_t off = slot_offset(layer, slot);
  return {keys_[layer].data() + off, config_.slot_width()};
}
std::span<float> TilePool::value(std::size_t layer, SlotRef slot) {
  const std::size_t off = slot_offset(layer, slot);
  return {values_[layer].data() + off, config_.slot_width()};
}
std::span<const float> TilePool::key(std::size_t layer, SlotRef slot) const {
  const std::size_t off = slot_offset(layer, slot);
  return {keys_[layer].data() + off, config_.slot_width()};
}
std::span<const float> TilePool::value(std::size_t layer, SlotRef slot) const {
  const std::size_t off = slot_offset(layer, slot);
  return {values_[layer].data() + off, config_.slot_width()};
}

}  // namespace tilelm

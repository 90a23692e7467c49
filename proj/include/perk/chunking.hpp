#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "perk/tokenizer.hpp"

namespace perk {

// Where a fact landed: chunk index plus token offset inside that chunk.
struct FactPlacement {
    std::int32_t chunk_index = 0;
    std::int32_t offset = 0;
};

// The long context split into a parallel batch of sub-sequences for
// inner-loop encoding. Concatenating the chunk payloads reproduces the
// context exactly once.
struct ChunkBatch {
    std::vector<TokenSeq> chunks;
    std::int64_t effective_len = 0;
    std::vector<FactPlacement> provenance;

    std::size_t size() const { return chunks.size(); }
};

// Near-equal chunk sizes for a stream of `total` tokens at target length `c`:
// ceil(total/c) chunks whose sizes differ by at most one token.
std::vector<std::int64_t> near_equal_sizes(std::int64_t total, std::int64_t c);

// Plain near-equal split of a token stream (no fact handling).
ChunkBatch split_tokens(const std::vector<std::int32_t>& tokens, std::int64_t c);

// Splits filler into near-equal chunks and inserts each fact, prefixed
// "fact i :" in original order, at a uniform random position within a
// uniformly chosen chunk. Placement is computed against the final chunk grid,
// so re-splitting the merged token stream with split_tokens reproduces the
// same chunks (facts never straddle a boundary).
ChunkBatch chunk_context(const std::vector<std::int32_t>& filler,
                         const std::vector<std::vector<std::int32_t>>& facts, std::int64_t c,
                         const Vocab& vocab, std::mt19937_64& rng);

// Whole-document packing: greedily fills chunks up to `c` tokens without
// splitting a document. Used for record-style contexts.
ChunkBatch pack_documents(const std::vector<std::vector<std::int32_t>>& docs, std::int64_t c);

// One chunk per document (prefix-free chunking for the API task).
ChunkBatch one_per_document(const std::vector<std::vector<std::int32_t>>& docs);

// Flattened payload of a batch, in chunk order.
std::vector<std::int32_t> flatten(const ChunkBatch& batch);

}  // namespace perk

#include "perk/chunking.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace perk {

namespace {

TokenSeq make_chunk(std::vector<std::int32_t> ids) {
    TokenSeq seq;
    seq.loss_mask.assign(ids.size(), 1);
    seq.ids = std::move(ids);
    return seq;
}

}  // namespace

std::vector<std::int64_t> near_equal_sizes(std::int64_t total, std::int64_t c) {
    if (total <= 0) {
        throw std::invalid_argument("near_equal_sizes: empty context");
    }
    if (c <= 0) {
        throw std::invalid_argument("near_equal_sizes: chunk length must be positive");
    }
    const std::int64_t n = (total + c - 1) / c;
    const std::int64_t base = total / n;
    const std::int64_t rem = total % n;
    std::vector<std::int64_t> sizes(static_cast<std::size_t>(n));
    for (std::int64_t k = 0; k < n; ++k) {
        sizes[static_cast<std::size_t>(k)] = base + (k < rem ? 1 : 0);
    }
    return sizes;
}

ChunkBatch split_tokens(const std::vector<std::int32_t>& tokens, std::int64_t c) {
    const auto sizes = near_equal_sizes(static_cast<std::int64_t>(tokens.size()), c);
    ChunkBatch batch;
    batch.effective_len = c;
    std::int64_t pos = 0;
    for (auto sz : sizes) {
        batch.chunks.push_back(make_chunk(std::vector<std::int32_t>(
            tokens.begin() + pos, tokens.begin() + pos + sz)));
        pos += sz;
    }
    return batch;
}

ChunkBatch chunk_context(const std::vector<std::int32_t>& filler,
                         const std::vector<std::vector<std::int32_t>>& facts, std::int64_t c,
                         const Vocab& vocab, std::mt19937_64& rng) {
    if (filler.empty() && facts.empty()) {
        throw std::invalid_argument("chunk_context: empty context");
    }

    // Prefix facts in original order: "fact i :".
    std::vector<std::vector<std::int32_t>> prefixed;
    prefixed.reserve(facts.size());
    std::int64_t total = static_cast<std::int64_t>(filler.size());
    std::int64_t longest = 0;
    for (std::size_t i = 0; i < facts.size(); ++i) {
        auto seq = vocab.encode("fact " + std::to_string(i + 1) + " :");
        seq.insert(seq.end(), facts[i].begin(), facts[i].end());
        total += static_cast<std::int64_t>(seq.size());
        longest = std::max(longest, static_cast<std::int64_t>(seq.size()));
        prefixed.push_back(std::move(seq));
    }
    if (c < longest) {
        throw std::invalid_argument(
            "chunk_context: effective length " + std::to_string(c) +
            " is shorter than the longest prefixed fact (" + std::to_string(longest) + ")");
    }

    const auto sizes = near_equal_sizes(total, c);
    const std::int64_t n = static_cast<std::int64_t>(sizes.size());
    std::vector<std::int64_t> start(static_cast<std::size_t>(n) + 1, 0);
    for (std::int64_t k = 0; k < n; ++k) {
        start[static_cast<std::size_t>(k) + 1] = start[static_cast<std::size_t>(k)] +
                                                 sizes[static_cast<std::size_t>(k)];
    }

    // Choose non-overlapping fact intervals wholly inside a uniformly chosen
    // chunk of the final grid.
    struct Interval {
        std::int64_t begin;
        std::int64_t end;
        std::size_t fact;
        std::int32_t chunk;
    };
    std::vector<Interval> placed;
    for (std::size_t j = 0; j < prefixed.size(); ++j) {
        const std::int64_t len = static_cast<std::int64_t>(prefixed[j].size());
        bool ok = false;
        for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
            const std::int64_t k =
                static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(n));
            const std::int64_t lo = start[static_cast<std::size_t>(k)];
            const std::int64_t hi = start[static_cast<std::size_t>(k) + 1] - len;
            if (hi < lo) {
                continue;
            }
            const std::int64_t s =
                lo + static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
            bool overlap = false;
            for (const auto& iv : placed) {
                if (s < iv.end && iv.begin < s + len) {
                    overlap = true;
                    break;
                }
            }
            if (!overlap) {
                placed.push_back({s, s + len, j, static_cast<std::int32_t>(k)});
                ok = true;
            }
        }
        if (!ok) {
            throw std::invalid_argument("chunk_context: could not place fact " +
                                        std::to_string(j) + " without overlap");
        }
    }

    // Merge: facts occupy their intervals, filler fills the rest in order.
    std::vector<std::int32_t> merged(static_cast<std::size_t>(total), 0);
    std::vector<bool> taken(static_cast<std::size_t>(total), false);
    for (const auto& iv : placed) {
        for (std::int64_t p = iv.begin; p < iv.end; ++p) {
            merged[static_cast<std::size_t>(p)] =
                prefixed[iv.fact][static_cast<std::size_t>(p - iv.begin)];
            taken[static_cast<std::size_t>(p)] = true;
        }
    }
    std::size_t fi = 0;
    for (std::int64_t p = 0; p < total; ++p) {
        if (!taken[static_cast<std::size_t>(p)]) {
            merged[static_cast<std::size_t>(p)] = filler[fi++];
        }
    }

    ChunkBatch batch = split_tokens(merged, c);
    batch.provenance.resize(prefixed.size());
    for (const auto& iv : placed) {
        batch.provenance[iv.fact] = {
            iv.chunk, static_cast<std::int32_t>(iv.begin - start[static_cast<std::size_t>(iv.chunk)])};
    }
    return batch;
}

ChunkBatch pack_documents(const std::vector<std::vector<std::int32_t>>& docs, std::int64_t c) {
    if (docs.empty()) {
        throw std::invalid_argument("pack_documents: empty context");
    }
    ChunkBatch batch;
    batch.effective_len = c;
    std::vector<std::int32_t> cur;
    for (const auto& doc : docs) {
        if (!cur.empty() &&
            static_cast<std::int64_t>(cur.size() + doc.size()) > c) {
            batch.chunks.push_back(make_chunk(std::move(cur)));
            cur.clear();
        }
        batch.provenance.push_back({static_cast<std::int32_t>(batch.chunks.size()),
                                    static_cast<std::int32_t>(cur.size())});
        cur.insert(cur.end(), doc.begin(), doc.end());
    }
    if (!cur.empty()) {
        batch.chunks.push_back(make_chunk(std::move(cur)));
    }
    return batch;
}

ChunkBatch one_per_document(const std::vector<std::vector<std::int32_t>>& docs) {
    if (docs.empty()) {
        throw std::invalid_argument("one_per_document: empty context");
    }
    ChunkBatch batch;
    batch.effective_len = 0;
    for (std::size_t i = 0; i < docs.size(); ++i) {
        batch.provenance.push_back({static_cast<std::int32_t>(i), 0});
        batch.chunks.push_back(make_chunk(docs[i]));
        batch.effective_len =
            std::max<std::int64_t>(batch.effective_len, static_cast<std::int64_t>(docs[i].size()));
    }
    return batch;
}

std::vector<std::int32_t> flatten(const ChunkBatch& batch) {
    std::vector<std::int32_t> out;
    for (const auto& chunk : batch.chunks) {
        out.insert(out.end(), chunk.ids.begin(), chunk.ids.end());
    }
    return out;
}

}  // namespace perk

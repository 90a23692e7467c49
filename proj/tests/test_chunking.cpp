#include <stdexcept>
#include <random>

#include "doctest.h"
#include "perk/chunking.hpp"

using perk::ChunkBatch;
using perk::Vocab;

namespace {

std::vector<std::int32_t> filler_ids(std::int64_t n) {
    std::vector<std::int32_t> v(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        v[static_cast<std::size_t>(i)] = 100 + static_cast<std::int32_t>(i % 50);
    }
    return v;
}

}  // namespace

TEST_CASE("1024-token context at c=128 yields a batch of 8 chunks") {
    auto batch = perk::split_tokens(filler_ids(1024), 128);
    CHECK(batch.size() == 8);
    for (const auto& chunk : batch.chunks) {
        CHECK(chunk.ids.size() == 128);
    }
}

TEST_CASE("context shorter than c yields one chunk equal to the context") {
    auto ids = filler_ids(57);
    auto batch = perk::split_tokens(ids, 128);
    CHECK(batch.size() == 1);
    CHECK(batch.chunks[0].ids == ids);
}

TEST_CASE("1000 tokens at c=256 yields 4 chunks of 250 tokens each") {
    auto batch = perk::split_tokens(filler_ids(1000), 256);
    CHECK(batch.size() == 4);
    for (const auto& chunk : batch.chunks) {
        CHECK(chunk.ids.size() == 250);
    }
}

TEST_CASE("empty context raises an error") {
    std::mt19937_64 rng(1);
    auto v = Vocab::build({"fact"});
    CHECK_THROWS_AS((void)perk::split_tokens({}, 64), std::invalid_argument);
    CHECK_THROWS_AS((void)perk::chunk_context({}, {}, 64, v, rng), std::invalid_argument);
}

TEST_CASE("chunk_context places whole prefixed facts and records exact provenance") {
    auto v = Vocab::build({"fact", "john", "moved", "to", "the", "garden", "mary", "took",
                           "apple"});
    std::mt19937_64 rng(7);
    std::vector<std::vector<std::int32_t>> facts = {
        v.encode("john moved to the garden"),
        v.encode("mary took the apple"),
        v.encode("john moved to the garden"),
    };
    auto filler = filler_ids(256);
    for (auto& t : filler) {
        t = v.id("the");  // keep ids in-vocab
    }
    auto batch = perk::chunk_context(filler, facts, 64, v, rng);

    // coverage: total token count is filler + prefixed facts
    std::int64_t total = static_cast<std::int64_t>(filler.size());
    std::vector<std::vector<std::int32_t>> prefixed;
    for (std::size_t i = 0; i < facts.size(); ++i) {
        auto seq = v.encode("fact " + std::to_string(i + 1) + " :");
        seq.insert(seq.end(), facts[i].begin(), facts[i].end());
        total += static_cast<std::int64_t>(seq.size());
        prefixed.push_back(seq);
    }
    auto flat = perk::flatten(batch);
    CHECK(static_cast<std::int64_t>(flat.size()) == total);

    // provenance: the prefixed fact sits exactly at (chunk, offset)
    REQUIRE(batch.provenance.size() == facts.size());
    for (std::size_t j = 0; j < facts.size(); ++j) {
        const auto& pl = batch.provenance[j];
        const auto& chunk = batch.chunks[static_cast<std::size_t>(pl.chunk_index)].ids;
        REQUIRE(pl.offset + prefixed[j].size() <= chunk.size());
        for (std::size_t k = 0; k < prefixed[j].size(); ++k) {
            CHECK(chunk[static_cast<std::size_t>(pl.offset) + k] == prefixed[j][k]);
        }
    }

    // re-splitting the flattened context reproduces identical chunks
    auto rebatch = perk::split_tokens(flat, 64);
    REQUIRE(rebatch.size() == batch.size());
    for (std::size_t k = 0; k < batch.size(); ++k) {
        CHECK(rebatch.chunks[k].ids == batch.chunks[k].ids);
    }
}

TEST_CASE("chunk_context rejects an effective length shorter than the longest fact") {
    auto v = Vocab::build({"fact", "a", "b", "c", "d", "e", "f", "g"});
    std::mt19937_64 rng(3);
    std::vector<std::vector<std::int32_t>> facts = {v.encode("a b c d e f g a b c d e f g")};
    CHECK_THROWS_AS((void)perk::chunk_context(filler_ids(64), facts, 8, v, rng),
                    std::invalid_argument);
}

TEST_CASE("pack_documents keeps documents whole and in order") {
    std::vector<std::vector<std::int32_t>> docs;
    for (std::int32_t i = 0; i < 16; ++i) {
        docs.push_back(std::vector<std::int32_t>(34, i));
    }
    auto batch = perk::pack_documents(docs, 80);
    CHECK(batch.size() == 8);  // two 34-token docs per 80-token chunk
    for (std::size_t i = 0; i < docs.size(); ++i) {
        CHECK(batch.provenance[i].chunk_index == static_cast<std::int32_t>(i / 2));
        CHECK(batch.provenance[i].offset == static_cast<std::int32_t>((i % 2) * 34));
    }
    CHECK(perk::flatten(batch).size() == 16 * 34);
}

TEST_CASE("one_per_document gives per-document chunks") {
    std::vector<std::vector<std::int32_t>> docs = {{1, 2, 3}, {4, 5}, {6}};
    auto batch = perk::one_per_document(docs);
    CHECK(batch.size() == 3);
    CHECK(batch.chunks[1].ids == std::vector<std::int32_t>{4, 5});
}

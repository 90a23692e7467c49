#include <cmath>
#include <random>

#include "doctest.h"
#include "perk/model.hpp"

using perk::BaseParams;
using perk::LoraAdapter;
using perk::ModelConfig;
using perk::Tensor;
using perk::TokenSeq;

namespace {

ModelConfig<double> tiny_cfg(std::int64_t vocab = 16) {
    ModelConfig<double> cfg;
    cfg.vocab_size = vocab;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 4;
    cfg.max_positions = 32;
    cfg.lora_rank = 2;
    return cfg;
}

std::vector<std::int32_t> random_ids(std::int64_t n, std::int64_t vocab, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::vector<std::int32_t> ids(static_cast<std::size_t>(n));
    for (auto& id : ids) {
        id = static_cast<std::int32_t>(rng() % static_cast<std::uint64_t>(vocab));
    }
    return ids;
}

}  // namespace

TEST_CASE("causality: perturbing token t+1 leaves logits at positions <= t bit-identical") {
    auto cfg = tiny_cfg();
    auto base = BaseParams<double>::init(cfg, 42);
    auto ids = random_ids(10, cfg.vocab_size, 1);
    auto logits_a = perk::forward_logits(base, nullptr, ids);
    auto ids_b = ids;
    ids_b[7] = (ids_b[7] + 3) % static_cast<std::int32_t>(cfg.vocab_size);
    auto logits_b = perk::forward_logits(base, nullptr, ids_b);
    for (std::int64_t t = 0; t < 7; ++t) {
        for (std::int64_t v = 0; v < cfg.vocab_size; ++v) {
            CHECK(logits_a.at(t, v) == logits_b.at(t, v));
        }
    }
    // and the perturbed position itself differs somewhere
    bool differs = false;
    for (std::int64_t v = 0; v < cfg.vocab_size; ++v) {
        differs = differs || logits_a.at(7, v) != logits_b.at(7, v);
    }
    CHECK(differs);
}

TEST_CASE("zero-init LoRA: adapter with B=0 gives logits bit-identical to base") {
    auto cfg = tiny_cfg();
    auto base = BaseParams<double>::init(cfg, 7);
    auto adapter = LoraAdapter<double>::init(cfg, 8);
    auto ids = random_ids(12, cfg.vocab_size, 2);
    auto a = perk::forward_logits(base, nullptr, ids);
    auto b = perk::forward_logits(base, &adapter, ids);
    CHECK(a.bit_equal(b));
}

TEST_CASE("adapted linear arithmetic: rank-1 example gives (4,2)") {
    // x = (1,2), W = I2, A maps input to rank-1 via [1;1], B back via [1,0].
    auto x = Tensor<double>::from_vector({1, 2}, {1.0, 2.0});
    auto w = Tensor<double>::from_vector({2, 2}, {1.0, 0.0, 0.0, 1.0});
    auto bias = Tensor<double>::zeros({2});
    perk::LoraPair<double> pair;
    pair.a = Tensor<double>::from_vector({2, 1}, {1.0, 1.0});
    pair.b = Tensor<double>::from_vector({1, 2}, {1.0, 0.0});
    auto y = perk::lora_linear(x, w, bias, &pair, 1.0);
    CHECK(y.at(0, 0) == doctest::Approx(4.0));
    CHECK(y.at(0, 1) == doctest::Approx(2.0));
}

TEST_CASE("rsLoRA scale: alpha 16 at rank 256 gives exactly 1") {
    ModelConfig<double> cfg = tiny_cfg();
    cfg.lora_rank = 256;
    cfg.lora_alpha = 16;
    cfg.rs_lora = true;
    CHECK(cfg.lora_scale() == doctest::Approx(1.0));
    cfg.rs_lora = false;
    CHECK(cfg.lora_scale() == doctest::Approx(16.0 / 256.0));
}

TEST_CASE("nll_loss: all-zero logits with vocab 4 cost ln 4 per token") {
    TokenSeq seq;
    seq.ids = {0, 1, 2, 3};
    seq.loss_mask = {1, 1, 1, 1};
    auto logits = Tensor<double>::zeros({4, 4});
    auto loss = perk::nll_loss(logits, seq);
    CHECK(loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("nll_loss: true-token probability 1/2 everywhere costs ln 2") {
    // Row [ln p, ln(1-p)] has logsumexp 0, so the target's NLL is -ln p.
    TokenSeq seq;
    seq.ids = {0, 0, 0};
    seq.loss_mask = {1, 1, 1};
    const double lp = std::log(0.5);
    auto logits = Tensor<double>::from_vector({3, 2}, {lp, lp, lp, lp, lp, lp});
    auto loss = perk::nll_loss(logits, seq);
    CHECK(loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("nll_loss: 3-token hand-set logits match a scalar softmax recomputation") {
    TokenSeq seq;
    seq.ids = {2, 0, 1};
    seq.loss_mask = {1, 1, 1};
    std::vector<double> raw = {0.3, -1.2, 0.7, 1.5, 0.1, -0.4, -0.9, 2.2, 0.0};
    auto logits = Tensor<double>::from_vector({3, 3}, raw);

    auto hand_nll = [&](std::int64_t row, std::int64_t target) {
        double denom = 0.0;
        for (std::int64_t j = 0; j < 3; ++j) {
            denom += std::exp(raw[static_cast<std::size_t>(row * 3 + j)]);
        }
        const double p = std::exp(raw[static_cast<std::size_t>(row * 3 + target)]) / denom;
        return -std::log(p);
    };
    const double expected = (hand_nll(0, 0) + hand_nll(1, 1)) / 2.0;
    CHECK(perk::nll_loss(logits, seq).item() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("nll_loss errors on a sequence with no predicted positions") {
    TokenSeq seq;
    seq.ids = {3};
    seq.loss_mask = {1};
    auto logits = Tensor<double>::zeros({1, 4});
    CHECK_THROWS_AS((void)perk::nll_loss(logits, seq), std::invalid_argument);
}

TEST_CASE("reasoning_loss: per-token NLLs (0.5, 1.5) on two masked positions average to 1.0") {
    TokenSeq seq;
    seq.ids = {0, 0, 0};
    seq.loss_mask = {0, 1, 1};
    const double p1 = std::exp(-0.5);
    const double p2 = std::exp(-1.5);
    auto logits = Tensor<double>::from_vector(
        {3, 2}, {std::log(p1), std::log(1 - p1),    // predicts position 1 -> nll 0.5
                 std::log(p2), std::log(1 - p2),    // predicts position 2 -> nll 1.5
                 0.0, 0.0});
    auto loss = perk::reasoning_loss(logits, seq);
    CHECK(loss.item() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("reasoning_loss ignores logits at unmasked positions bit-exactly") {
    TokenSeq seq;
    seq.ids = {1, 0, 1, 0};
    seq.loss_mask = {0, 0, 1, 1};
    std::mt19937_64 rng(4);
    auto l1 = Tensor<double>::randn({4, 2}, rng);
    // masked positions 2,3 read logits rows 1,2 -- rows 0 and 3 are free.
    auto v = l1.to_vector();
    v[0 * 2] += 10.0;
    v[3 * 2] += 5.0;
    auto l2 = Tensor<double>::from_vector({4, 2}, v);
    CHECK(perk::reasoning_loss(l1, seq).item() == perk::reasoning_loss(l2, seq).item());
    // perturbing a row that a masked position reads does change the loss
    auto v3 = l1.to_vector();
    v3[1 * 2] += 1.0;
    auto l3 = Tensor<double>::from_vector({4, 2}, v3);
    CHECK(perk::reasoning_loss(l1, seq).item() != perk::reasoning_loss(l3, seq).item());
}

TEST_CASE("reasoning_loss equals nll_loss under an all-true mask") {
    std::mt19937_64 rng(11);
    for (unsigned trial = 0; trial < 5; ++trial) {
        TokenSeq seq;
        seq.ids = random_ids(9, 6, 100 + trial);
        seq.loss_mask.assign(seq.ids.size(), 1);
        auto logits = Tensor<double>::randn({9, 6}, rng);
        CHECK(perk::reasoning_loss(logits, seq).item() == perk::nll_loss(logits, seq).item());
    }
}

TEST_CASE("reasoning_loss errors on an empty mask") {
    TokenSeq seq;
    seq.ids = {0, 1};
    seq.loss_mask = {0, 0};
    auto logits = Tensor<double>::zeros({2, 4});
    CHECK_THROWS_AS((void)perk::reasoning_loss(logits, seq), std::invalid_argument);
}

TEST_CASE("greedy_walk follows a hand-set logits table with lowest-id tie breaking") {
    // States: after prompt emit 2, then 3, then tie between 1 and 2 -> 1.
    auto table = [](const std::vector<std::int32_t>& ids) -> std::vector<double> {
        switch (ids.size()) {
            case 1: return {0.0, 0.1, 0.9, 0.2};
            case 2: return {0.0, 0.1, 0.2, 0.9};
            default: return {0.0, 0.5, 0.5, 0.1};
        }
    };
    auto out = perk::greedy_walk<double>({0}, 5, /*eos=*/1, table);
    CHECK(out.ids == std::vector<std::int32_t>{2, 3, 1});
}

TEST_CASE("greedy_walk: argmax always eos yields an empty decoded answer") {
    auto table = [](const std::vector<std::int32_t>&) -> std::vector<double> {
        return {0.0, 1.0, 0.0};
    };
    auto out = perk::greedy_walk<double>({0}, 8, 1, table);
    CHECK(out.ids == std::vector<std::int32_t>{1});
    // an <eos>-only generation decodes to the empty string
    perk::Vocab v = perk::Vocab::build({"a", "b"});
    CHECK(v.decode(out.ids) == "");
}

TEST_CASE("greedy_decode output length never exceeds max_new") {
    auto cfg = tiny_cfg();
    auto base = BaseParams<double>::init(cfg, 3);
    TokenSeq prompt;
    prompt.ids = random_ids(5, cfg.vocab_size, 9);
    prompt.loss_mask.assign(5, 0);
    for (std::int64_t cap : {1, 3, 7}) {
        auto out = perk::greedy_decode(base, nullptr, prompt, cap);
        CHECK(static_cast<std::int64_t>(out.ids.size()) <= cap);
    }
}

TEST_CASE("extend_positions: errors at new_max <= max, interpolates and keeps endpoints") {
    ModelConfig<double> cfg = tiny_cfg();
    cfg.max_positions = 4;
    auto base = BaseParams<double>::init(cfg, 21);
    CHECK_THROWS_AS((void)perk::extend_positions(base, 4), std::invalid_argument);
    CHECK_THROWS_AS((void)perk::extend_positions(base, 3), std::invalid_argument);

    auto ext = perk::extend_positions(base, 7);
    CHECK(ext.cfg.max_positions == 7);
    const std::int64_t d = cfg.d_model;
    // endpoints fixed
    for (std::int64_t j = 0; j < d; ++j) {
        CHECK(ext.pos_emb.at(0, j) == base.pos_emb.at(0, j));
        CHECK(ext.pos_emb.at(6, j) == base.pos_emb.at(3, j));
    }
    // position 3 maps to coordinate 3*3/6 = 1.5 -> midpoint of rows 1 and 2
    for (std::int64_t j = 0; j < d; ++j) {
        const double mid = 0.5 * (base.pos_emb.at(1, j) + base.pos_emb.at(2, j));
        CHECK(ext.pos_emb.at(3, j) == doctest::Approx(mid).epsilon(1e-12));
    }
    // monotone coordinate mapping
    for (std::int64_t p = 1; p < 7; ++p) {
        const double c0 = static_cast<double>(p - 1) * 3.0 / 6.0;
        const double c1 = static_cast<double>(p) * 3.0 / 6.0;
        CHECK(c1 > c0);
    }
}

TEST_CASE("sequence-length and vocabulary errors") {
    auto cfg = tiny_cfg();
    auto base = BaseParams<double>::init(cfg, 5);
    auto long_ids = random_ids(cfg.max_positions + 1, cfg.vocab_size, 3);
    CHECK_THROWS_AS((void)perk::forward_logits(base, nullptr, long_ids), std::invalid_argument);
    std::vector<std::int32_t> bad = {0, static_cast<std::int32_t>(cfg.vocab_size)};
    CHECK_THROWS_AS((void)perk::forward_logits(base, nullptr, bad), std::invalid_argument);
}

TEST_CASE("nll gradient w.r.t. logits passes the finite-difference check") {
    TokenSeq seq;
    seq.ids = {1, 3, 0, 2};
    seq.loss_mask = {1, 1, 1, 1};
    std::mt19937_64 rng(31);
    auto x0 = Tensor<double>::randn({4, 4}, rng);
    auto f = [&](const Tensor<double>& t) { return perk::nll_loss(t, seq); };
    CHECK(perk::finite_diff_check<double>(f, x0, 1e-5) < 1e-5);
}

TEST_CASE("NLL of the 2-layer tiny LM on an 8-token sequence passes finite differences") {
    auto cfg = tiny_cfg();
    auto base = BaseParams<double>::init(cfg, 13);
    TokenSeq seq;
    seq.ids = random_ids(8, cfg.vocab_size, 77);
    seq.loss_mask.assign(8, 1);
    auto f_head = [&](const Tensor<double>& t) {
        BaseParams<double> b = base;
        b.head = t;
        return perk::nll_loss(perk::forward_logits(b, nullptr, seq.ids), seq);
    };
    CHECK(perk::finite_diff_check<double>(f_head, base.head, 3e-5) < 1e-5);

    auto f_wq = [&](const Tensor<double>& t) {
        BaseParams<double> b = base;
        b.layers[0].wq = t;
        return perk::nll_loss(perk::forward_logits(b, nullptr, seq.ids), seq);
    };
    CHECK(perk::finite_diff_check<double>(f_wq, base.layers[0].wq, 1e-3) < 1e-5);
}

TEST_CASE("last_row_only logits equal the final row of the full forward") {
    auto cfg = tiny_cfg();
    auto base = BaseParams<double>::init(cfg, 15);
    auto adapter = LoraAdapter<double>::init(cfg, 16);
    // make the adapter non-trivial
    std::mt19937_64 rng(17);
    for (auto& m : adapter.mods) {
        m.b = Tensor<double>::leaf(Tensor<double>::randn(m.b.shape(), rng, 0.1));
    }
    auto ids = random_ids(9, cfg.vocab_size, 18);
    auto full = perk::forward_logits(base, &adapter, ids);
    auto last = perk::forward_logits(base, &adapter, ids, {.last_row_only = true});
    CHECK(last.rows() == 1);
    for (std::int64_t v = 0; v < cfg.vocab_size; ++v) {
        CHECK(last.at(0, v) == full.at(8, v));
    }
}

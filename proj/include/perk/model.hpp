#pragma once

// Tiny decoder-only causal LM with optional LoRA adapters on every linear
// projection in the attention and MLP blocks. Learned absolute positional
// embeddings, pre-norm blocks, GELU MLPs.

#include <cmath>
#include <random>
#include <type_traits>
#include <string>
#include <vector>

#include "perk/nn_ops.hpp"
#include "perk/ops.hpp"
#include "perk/tokenizer.hpp"

namespace perk {

template <typename Real>
struct ModelConfig {
    std::int64_t vocab_size = 0;
    std::int64_t d_model = 64;
    std::int64_t n_layers = 2;
    std::int64_t n_heads = 4;
    std::int64_t max_positions = 512;
    std::int64_t mlp_ratio = 4;
    std::int64_t lora_rank = 8;
    Real lora_alpha = Real(16);
    bool rs_lora = true;
    std::vector<std::string> adapted_modules = {"attn.q",  "attn.k", "attn.v",
                                                "attn.o",  "mlp.fc", "mlp.proj"};

    void validate() const {
        if (vocab_size <= 0) {
            throw std::invalid_argument("ModelConfig: vocab_size must be positive");
        }
        if (d_model % n_heads != 0) {
            throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
        }
        if (lora_rank < 1) {
            throw std::invalid_argument("ModelConfig: lora_rank must be >= 1");
        }
    }

    Real lora_scale() const {
        return rs_lora ? lora_alpha / static_cast<Real>(std::sqrt(static_cast<double>(lora_rank)))
                       : lora_alpha / static_cast<Real>(lora_rank);
    }
};

template <typename Real>
struct LayerParams {
    Tensor<Real> ln1_g, ln1_b;
    Tensor<Real> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<Real> ln2_g, ln2_b;
    Tensor<Real> wfc, bfc, wproj, bproj;
};

// Frozen base parameters (theta_base). Never modified by any inner- or
// outer-loop update.
template <typename Real>
struct BaseParams {
    ModelConfig<Real> cfg;
    Tensor<Real> tok_emb;  // [V, D]
    Tensor<Real> pos_emb;  // [P, D]
    std::vector<LayerParams<Real>> layers;
    Tensor<Real> lnf_g, lnf_b;
    Tensor<Real> head;  // [D, V]

    static BaseParams init(const ModelConfig<Real>& cfg, std::uint64_t seed) {
        cfg.validate();
        std::mt19937_64 rng(seed);
        const Real std0 = Real(0.02);
        const auto d = cfg.d_model;
        BaseParams p;
        p.cfg = cfg;
        p.tok_emb = Tensor<Real>::randn({cfg.vocab_size, d}, rng, std0);
        p.pos_emb = Tensor<Real>::randn({cfg.max_positions, d}, rng, std0);
        for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
            LayerParams<Real> lp;
            lp.ln1_g = Tensor<Real>::full({d}, Real(1));
            lp.ln1_b = Tensor<Real>::zeros({d});
            lp.wq = Tensor<Real>::randn({d, d}, rng, std0);
            lp.bq = Tensor<Real>::zeros({d});
            lp.wk = Tensor<Real>::randn({d, d}, rng, std0);
            lp.bk = Tensor<Real>::zeros({d});
            lp.wv = Tensor<Real>::randn({d, d}, rng, std0);
            lp.bv = Tensor<Real>::zeros({d});
            lp.wo = Tensor<Real>::randn({d, d}, rng, std0);
            lp.bo = Tensor<Real>::zeros({d});
            lp.ln2_g = Tensor<Real>::full({d}, Real(1));
            lp.ln2_b = Tensor<Real>::zeros({d});
            lp.wfc = Tensor<Real>::randn({d, d * cfg.mlp_ratio}, rng, std0);
            lp.bfc = Tensor<Real>::zeros({d * cfg.mlp_ratio});
            lp.wproj = Tensor<Real>::randn({d * cfg.mlp_ratio, d}, rng, std0);
            lp.bproj = Tensor<Real>::zeros({d});
            p.layers.push_back(std::move(lp));
        }
        p.lnf_g = Tensor<Real>::full({d}, Real(1));
        p.lnf_b = Tensor<Real>::zeros({d});
        p.head = Tensor<Real>::randn({d, cfg.vocab_size}, rng, std0);
        return p;
    }

    std::vector<std::pair<std::string, Tensor<Real>*>> named_tensors() {
        std::vector<std::pair<std::string, Tensor<Real>*>> out;
        out.emplace_back("tok_emb", &tok_emb);
        out.emplace_back("pos_emb", &pos_emb);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            auto& lp = layers[l];
            const std::string pre = "l" + std::to_string(l) + ".";
            out.emplace_back(pre + "ln1.g", &lp.ln1_g);
            out.emplace_back(pre + "ln1.b", &lp.ln1_b);
            out.emplace_back(pre + "attn.q.w", &lp.wq);
            out.emplace_back(pre + "attn.q.b", &lp.bq);
            out.emplace_back(pre + "attn.k.w", &lp.wk);
            out.emplace_back(pre + "attn.k.b", &lp.bk);
            out.emplace_back(pre + "attn.v.w", &lp.wv);
            out.emplace_back(pre + "attn.v.b", &lp.bv);
            out.emplace_back(pre + "attn.o.w", &lp.wo);
            out.emplace_back(pre + "attn.o.b", &lp.bo);
            out.emplace_back(pre + "ln2.g", &lp.ln2_g);
            out.emplace_back(pre + "ln2.b", &lp.ln2_b);
            out.emplace_back(pre + "mlp.fc.w", &lp.wfc);
            out.emplace_back(pre + "mlp.fc.b", &lp.bfc);
            out.emplace_back(pre + "mlp.proj.w", &lp.wproj);
            out.emplace_back(pre + "mlp.proj.b", &lp.bproj);
        }
        out.emplace_back("lnf.g", &lnf_g);
        out.emplace_back("lnf.b", &lnf_b);
        out.emplace_back("head", &head);
        return out;
    }

    // Leaf-tensor view of all parameters (used by the FT-ICR baseline, which
    // trains the full tiny model).
    void make_trainable() {
        for (auto& [name, t] : named_tensors()) {
            *t = Tensor<Real>::leaf(*t);
        }
    }
};

// One adapted linear: out = x W + b + scale * (x A) B, with A: [d_in, r] and
// B: [r, d_out]. B starts at zero so the adapted model equals the base model.
template <typename Real>
struct LoraPair {
    std::string name;  // e.g. "l0.attn.q"
    Tensor<Real> a;
    Tensor<Real> b;
};

template <typename Real>
struct LoraAdapter {
    Real scale = Real(1);
    std::vector<LoraPair<Real>> mods;  // layer-major, adapted_modules order

    static LoraAdapter init(const ModelConfig<Real>& cfg, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        LoraAdapter ad;
        ad.scale = cfg.lora_scale();
        const auto d = cfg.d_model;
        for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
            for (const auto& m : cfg.adapted_modules) {
                std::int64_t din = d, dout = d;
                if (m == "mlp.fc") {
                    dout = d * cfg.mlp_ratio;
                } else if (m == "mlp.proj") {
                    din = d * cfg.mlp_ratio;
                }
                LoraPair<Real> pair;
                pair.name = "l" + std::to_string(l) + "." + m;
                pair.a = Tensor<Real>::leaf(
                    Tensor<Real>::randn({din, cfg.lora_rank}, rng, Real(0.02)));
                pair.b = Tensor<Real>::leaf(Tensor<Real>::zeros({cfg.lora_rank, dout}));
                ad.mods.push_back(std::move(pair));
            }
        }
        return ad;
    }

    std::size_t n_modules() const { return mods.size(); }

    std::vector<Tensor<Real>> flat() const {
        std::vector<Tensor<Real>> out;
        for (const auto& p : mods) {
            out.push_back(p.a);
            out.push_back(p.b);
        }
        return out;
    }

    static LoraAdapter from_flat(const LoraAdapter& like, const std::vector<Tensor<Real>>& flat) {
        LoraAdapter out;
        out.scale = like.scale;
        out.mods.reserve(like.mods.size());
        for (std::size_t i = 0; i < like.mods.size(); ++i) {
            out.mods.push_back({like.mods[i].name, flat[2 * i], flat[2 * i + 1]});
        }
        return out;
    }
};

// x W + b, plus the LoRA delta when an adapter pair is given.
template <typename Real>
Tensor<Real> lora_linear(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b,
                         const LoraPair<Real>* lora, Real lora_scale) {
    auto y = add(matmul(x, w), broadcast_row(b, x.rows()));
    if (lora != nullptr) {
        y = add(y, scale(matmul(matmul(x, lora->a), lora->b), lora_scale));
    }
    return y;
}

template <typename Real>
Tensor<Real> causal_bias(std::int64_t t) {
    auto out = Tensor<Real>::from_storage({t, t}, nullptr);
    Real* o = out.mutable_ptr();
    for (std::int64_t i = 0; i < t; ++i) {
        for (std::int64_t j = 0; j < t; ++j) {
            o[i * t + j] = j <= i ? Real(0) : Real(-1e9);
        }
    }
    return out;
}

struct ForwardOptions {
    bool last_row_only = false;  // compute head logits for the final position only
};

// Causal forward pass: position t's logits depend only on tokens <= t.
template <typename Real>
Tensor<Real> forward_logits(const BaseParams<Real>& base,
                            const LoraAdapter<std::type_identity_t<Real>>* adapter,
                            const std::vector<std::int32_t>& ids,
                            ForwardOptions opts = {}) {
    const auto& cfg = base.cfg;
    const std::int64_t t = static_cast<std::int64_t>(ids.size());
    if (t == 0) {
        throw std::invalid_argument("forward_logits: empty sequence");
    }
    if (t > cfg.max_positions) {
        throw std::invalid_argument("forward_logits: sequence length " + std::to_string(t) +
                                    " exceeds max_positions " +
                                    std::to_string(cfg.max_positions));
    }
    for (auto id : ids) {
        if (id < 0 || id >= cfg.vocab_size) {
            throw std::invalid_argument("forward_logits: token id " + std::to_string(id) +
                                        " outside vocabulary of size " +
                                        std::to_string(cfg.vocab_size));
        }
    }
    if (adapter != nullptr &&
        adapter->mods.size() != cfg.adapted_modules.size() * static_cast<std::size_t>(cfg.n_layers)) {
        throw std::invalid_argument("forward_logits: adapter/module count mismatch");
    }

    const std::int64_t d = cfg.d_model;
    const std::int64_t dh = d / cfg.n_heads;
    const Real att_scale = Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(dh)));
    const Real lscale = adapter ? adapter->scale : Real(1);

    auto tok_ids = make_ids(std::vector<std::int32_t>(ids.begin(), ids.end()));
    auto x = add(gather_rows(base.tok_emb, tok_ids), gather_rows(base.pos_emb, iota_ids(t)));
    auto bias = causal_bias<Real>(t);

    const std::size_t n_mods = cfg.adapted_modules.size();
    auto mod = [&](std::int64_t layer, const char* name) -> const LoraPair<Real>* {
        if (adapter == nullptr) {
            return nullptr;
        }
        for (std::size_t m = 0; m < n_mods; ++m) {
            if (cfg.adapted_modules[m] == name) {
                return &adapter->mods[static_cast<std::size_t>(layer) * n_mods + m];
            }
        }
        return nullptr;
    };

    for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lp = base.layers[static_cast<std::size_t>(l)];
        auto h = layer_norm_rows(x, lp.ln1_g, lp.ln1_b);
        auto q = lora_linear(h, lp.wq, lp.bq, mod(l, "attn.q"), lscale);
        auto k = lora_linear(h, lp.wk, lp.bk, mod(l, "attn.k"), lscale);
        auto v = lora_linear(h, lp.wv, lp.bv, mod(l, "attn.v"), lscale);
        std::vector<Tensor<Real>> heads;
        heads.reserve(static_cast<std::size_t>(cfg.n_heads));
        for (std::int64_t hd = 0; hd < cfg.n_heads; ++hd) {
            auto qh = slice_block(q, 0, t, hd * dh, (hd + 1) * dh);
            auto kh = slice_block(k, 0, t, hd * dh, (hd + 1) * dh);
            auto vh = slice_block(v, 0, t, hd * dh, (hd + 1) * dh);
            auto s = add(scale(matmul(qh, transpose(kh)), att_scale), bias);
            heads.push_back(matmul(softmax_rows(s), vh));
        }
        auto att = lora_linear(concat_cols(heads), lp.wo, lp.bo, mod(l, "attn.o"), lscale);
        x = add(x, att);
        auto h2 = layer_norm_rows(x, lp.ln2_g, lp.ln2_b);
        auto inner = gelu(lora_linear(h2, lp.wfc, lp.bfc, mod(l, "mlp.fc"), lscale));
        auto m = lora_linear(inner, lp.wproj, lp.bproj, mod(l, "mlp.proj"), lscale);
        x = add(x, m);
    }
    x = layer_norm_rows(x, base.lnf_g, base.lnf_b);
    if (opts.last_row_only) {
        x = slice_block(x, t - 1, t, 0, d);
    }
    return matmul(x, base.head);
}

// Final hidden state (after the last layer norm) of the base model alone;
// used as the token-weight network's input features.
template <typename Real>
Tensor<Real> base_hidden_states(const BaseParams<Real>& base,
                                const std::vector<std::int32_t>& ids) {
    // Same trunk as forward_logits without the head projection.
    const auto& cfg = base.cfg;
    const std::int64_t t = static_cast<std::int64_t>(ids.size());
    const std::int64_t d = cfg.d_model;
    const std::int64_t dh = d / cfg.n_heads;
    const Real att_scale = Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(dh)));
    auto tok_ids = make_ids(std::vector<std::int32_t>(ids.begin(), ids.end()));
    auto x = add(gather_rows(base.tok_emb, tok_ids), gather_rows(base.pos_emb, iota_ids(t)));
    auto bias = causal_bias<Real>(t);
    for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lp = base.layers[static_cast<std::size_t>(l)];
        auto h = layer_norm_rows(x, lp.ln1_g, lp.ln1_b);
        auto q = lora_linear<Real>(h, lp.wq, lp.bq, nullptr, Real(1));
        auto k = lora_linear<Real>(h, lp.wk, lp.bk, nullptr, Real(1));
        auto v = lora_linear<Real>(h, lp.wv, lp.bv, nullptr, Real(1));
        std::vector<Tensor<Real>> heads;
        for (std::int64_t hd = 0; hd < cfg.n_heads; ++hd) {
            auto qh = slice_block(q, 0, t, hd * dh, (hd + 1) * dh);
            auto kh = slice_block(k, 0, t, hd * dh, (hd + 1) * dh);
            auto vh = slice_block(v, 0, t, hd * dh, (hd + 1) * dh);
            auto s = add(scale(matmul(qh, transpose(kh)), att_scale), bias);
            heads.push_back(matmul(softmax_rows(s), vh));
        }
        x = add(x, lora_linear<Real>(concat_cols(heads), lp.wo, lp.bo, nullptr, Real(1)));
        auto h2 = layer_norm_rows(x, lp.ln2_g, lp.ln2_b);
        auto inner = gelu(lora_linear<Real>(h2, lp.wfc, lp.bfc, nullptr, Real(1)));
        x = add(x, lora_linear<Real>(inner, lp.wproj, lp.bproj, nullptr, Real(1)));
    }
    return layer_norm_rows(x, base.lnf_g, base.lnf_b);
}

// Per-token NLL of the predicted positions listed in `positions` (each must
// be >= 1; position t is predicted from logits row t-1).
template <typename Real>
Tensor<Real> nll_at_positions(const Tensor<Real>& logits, const TokenSeq& seq,
                              const std::vector<std::int64_t>& positions) {
    if (logits.rows() != static_cast<std::int64_t>(seq.ids.size())) {
        throw std::invalid_argument("nll: logits/sequence length mismatch");
    }
    std::vector<std::int32_t> rows;
    std::vector<std::int32_t> targets;
    rows.reserve(positions.size());
    for (auto t : positions) {
        if (t < 1 || t >= static_cast<std::int64_t>(seq.ids.size())) {
            throw std::invalid_argument("nll: predicted position out of range");
        }
        rows.push_back(static_cast<std::int32_t>(t - 1));
        targets.push_back(seq.ids[static_cast<std::size_t>(t)]);
    }
    auto picked_rows = gather_rows(logits, make_ids(std::move(rows)));
    return cross_entropy_rows(picked_rows, targets);
}

// Mean token-level negative log-likelihood over all predicted positions.
template <typename Real>
Tensor<Real> nll_loss(const Tensor<Real>& logits, const TokenSeq& seq) {
    const std::int64_t t = static_cast<std::int64_t>(seq.ids.size());
    if (t < 2) {
        throw std::invalid_argument("nll_loss: no predicted positions");
    }
    std::vector<std::int64_t> positions;
    for (std::int64_t i = 1; i < t; ++i) {
        positions.push_back(i);
    }
    auto per_tok = nll_at_positions(logits, seq, positions);
    return scale(sum(per_tok), Real(1) / static_cast<Real>(positions.size()));
}

// NLL restricted to masked (answer) positions, normalized by the masked
// count. Position 0 can never be predicted and is ignored by both losses, so
// an all-true mask reduces this to nll_loss exactly.
template <typename Real>
Tensor<Real> reasoning_loss(const Tensor<Real>& logits, const TokenSeq& seq) {
    if (seq.loss_mask.size() != seq.ids.size()) {
        throw std::invalid_argument("reasoning_loss: mask/ids length mismatch");
    }
    std::vector<std::int64_t> positions;
    for (std::size_t i = 1; i < seq.ids.size(); ++i) {
        if (seq.loss_mask[i]) {
            positions.push_back(static_cast<std::int64_t>(i));
        }
    }
    if (positions.empty()) {
        throw std::invalid_argument("reasoning_loss: empty loss mask");
    }
    auto per_tok = nll_at_positions(logits, seq, positions);
    return scale(sum(per_tok), Real(1) / static_cast<Real>(positions.size()));
}

// Greedy walk over a next-logits provider; ties broken by lowest token id.
// Stops at eos_id or after max_new tokens.
template <typename Real, typename NextLogits>
TokenSeq greedy_walk(const std::vector<std::int32_t>& prompt, std::int64_t max_new,
                     std::int32_t eos_id, NextLogits next) {
    std::vector<std::int32_t> ids = prompt;
    TokenSeq out;
    for (std::int64_t step = 0; step < max_new; ++step) {
        const std::vector<Real> row = next(ids);
        std::int32_t best = 0;
        Real best_v = row.at(0);
        for (std::size_t j = 1; j < row.size(); ++j) {
            if (row[j] > best_v) {
                best_v = row[j];
                best = static_cast<std::int32_t>(j);
            }
        }
        ids.push_back(best);
        out.ids.push_back(best);
        out.loss_mask.push_back(1);
        if (best == eos_id) {
            break;
        }
    }
    return out;
}

// Greedy decoding with the model (optionally adapted). Returns only the
// generated tail (including <eos> if hit).
template <typename Real>
TokenSeq greedy_decode(const BaseParams<Real>& base,
                       const LoraAdapter<std::type_identity_t<Real>>* adapter,
                       const TokenSeq& prompt, std::int64_t max_new,
                       std::int32_t eos_id = Vocab::kEos) {
    if (prompt.ids.empty()) {
        throw std::invalid_argument("greedy_decode: empty prompt");
    }
    if (static_cast<std::int64_t>(prompt.ids.size()) + max_new > base.cfg.max_positions) {
        throw std::invalid_argument("greedy_decode: prompt plus max_new exceeds max_positions");
    }
    NoGradGuard ng;
    return greedy_walk<Real>(prompt.ids, max_new, eos_id,
                             [&](const std::vector<std::int32_t>& ids) {
                                 auto logits = forward_logits(base, adapter, ids,
                                                              {.last_row_only = true});
                                 return logits.to_vector();
                             });
}

// Linear interpolation of the positional table onto a longer grid: new
// position p reads the original table at coordinate p*(P-1)/(new_max-1).
template <typename Real>
BaseParams<Real> extend_positions(const BaseParams<Real>& base, std::int64_t new_max) {
    const std::int64_t p_old = base.cfg.max_positions;
    if (new_max <= p_old) {
        throw std::invalid_argument("extend_positions: new_max " + std::to_string(new_max) +
                                    " must exceed max_positions " + std::to_string(p_old));
    }
    const std::int64_t d = base.cfg.d_model;
    std::vector<Real> table(static_cast<std::size_t>(new_max * d));
    const auto* src = base.pos_emb.ptr();
    for (std::int64_t p = 0; p < new_max; ++p) {
        const double coord = static_cast<double>(p) * static_cast<double>(p_old - 1) /
                             static_cast<double>(new_max - 1);
        const std::int64_t i0 = static_cast<std::int64_t>(coord);
        const std::int64_t i1 = std::min(i0 + 1, p_old - 1);
        const Real frac = static_cast<Real>(coord - static_cast<double>(i0));
        for (std::int64_t j = 0; j < d; ++j) {
            table[static_cast<std::size_t>(p * d + j)] =
                (Real(1) - frac) * src[i0 * d + j] + frac * src[i1 * d + j];
        }
    }
    BaseParams<Real> out = base;
    out.cfg.max_positions = new_max;
    out.pos_emb = Tensor<Real>::from_vector({new_max, d}, std::move(table));
    return out;
}

}  // namespace perk

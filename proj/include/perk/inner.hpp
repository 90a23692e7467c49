#pragma once

// Test-time learning: N differentiable optimizer steps on the weighted NLL of
// a chunk batch, updating only the adapter. The computation graph is retained
// for the last `retain` steps; earlier steps run on transient graphs that are
// dropped after each update, so truncation changes gradients but never
// values.

#include <algorithm>
#include <functional>
#include <numeric>
#include <utility>

#include "perk/chunking.hpp"
#include "perk/model.hpp"

namespace perk {

enum class InnerOptKind { Sgd, AdamW };

template <typename Real>
struct InnerHyper {
    Tensor<Real> lr_table;  // [param group, inner step], learnable
    InnerOptKind kind = InnerOptKind::AdamW;
    Real beta1 = Real(0.9);
    Real beta2 = Real(0.999);
    Real eps = Real(1e-8);
    Real weight_decay = Real(0);  // decoupled; inner default is none

    static InnerHyper init(std::int64_t n_groups, std::int64_t n_steps, Real init_lr,
                           InnerOptKind kind = InnerOptKind::AdamW) {
        InnerHyper h;
        h.lr_table = Tensor<Real>::leaf(Tensor<Real>::full({n_groups, n_steps}, init_lr));
        h.kind = kind;
        return h;
    }

    std::int64_t n_groups() const { return lr_table.rows(); }
    std::int64_t n_steps() const { return lr_table.cols(); }
};

// First/second moments of the differentiable AdamW-style optimizer;
// zero-initialized at adaptation start. Moment updates inside the retention
// window are recorded on the graph like everything else.
template <typename Real>
struct InnerOptState {
    std::vector<Tensor<Real>> m;
    std::vector<Tensor<Real>> v;
    std::int64_t step = 0;

    static InnerOptState init(const InnerHyper<Real>& hyper,
                              const std::vector<Tensor<Real>>& params) {
        InnerOptState st;
        if (hyper.kind == InnerOptKind::AdamW) {
            for (const auto& p : params) {
                st.m.push_back(Tensor<Real>::zeros(p.shape()));
                st.v.push_back(Tensor<Real>::zeros(p.shape()));
            }
        }
        return st;
    }

    void detach_all() {
        for (auto& t : m) {
            t = t.detach();
        }
        for (auto& t : v) {
            t = t.detach();
        }
    }
};

// One optimizer step. Updates only the given parameters; recorded
// differentiably (including moment updates and the learning-rate scalars)
// whenever gradient recording is active. The AdamW-style denominator keeps
// eps^2 inside the square root so the update stays differentiable at v = 0.
template <typename Real>
std::vector<Tensor<Real>> inner_step(const std::vector<Tensor<Real>>& params,
                                     const std::vector<Tensor<Real>>& grads,
                                     const std::vector<Tensor<Real>>& lrs,
                                     const InnerHyper<Real>& hyper, InnerOptState<Real>& state) {
    if (grads.size() != params.size() || lrs.size() != params.size()) {
        throw std::invalid_argument("inner_step: params/grads/lrs size mismatch");
    }
    std::vector<Tensor<Real>> out;
    out.reserve(params.size());
    if (hyper.kind == InnerOptKind::Sgd) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            out.push_back(sub(params[i], mul_scalar(grads[i], lrs[i])));
        }
        state.step += 1;
        return out;
    }
    const std::int64_t t = state.step + 1;
    const Real c1 = Real(1) / (Real(1) - static_cast<Real>(std::pow(hyper.beta1, t)));
    const Real c2 = Real(1) / (Real(1) - static_cast<Real>(std::pow(hyper.beta2, t)));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto m_new = add(scale(state.m[i], hyper.beta1), scale(grads[i], Real(1) - hyper.beta1));
        auto v_new = add(scale(state.v[i], hyper.beta2),
                         scale(mul(grads[i], grads[i]), Real(1) - hyper.beta2));
        auto m_hat = scale(m_new, c1);
        auto v_hat = scale(v_new, c2);
        auto update = mul(m_hat, recip(sqrt(add_const(v_hat, hyper.eps * hyper.eps))));
        if (hyper.weight_decay != Real(0)) {
            update = add(update, scale(params[i], hyper.weight_decay));
        }
        out.push_back(sub(params[i], mul_scalar(update, lrs[i])));
        state.m[i] = m_new;
        state.v[i] = v_new;
    }
    state.step += 1;
    return out;
}

// The recorded inner-loop trajectory. `states` holds detached copies of
// phi^(0)..phi^(N); `entry_proxies` are the gradient-receiving leaves at
// phi^(N-T); `final_params` carry the graph of the retained window.
template <typename Real>
struct AdaptationTrace {
    std::vector<std::vector<Tensor<Real>>> states;
    std::vector<Tensor<Real>> entry_proxies;
    std::vector<Tensor<Real>> final_params;
    std::vector<Real> step_losses;
    int n_steps = 0;
    int retained = 0;
};

// Objective abstraction: returns per-step gradients for `params` plus the
// step's loss value. With create_graph=true the gradients must carry graphs
// (the caller records the update differentiably).
template <typename Real>
struct InnerObjective {
    using GradFn = std::function<std::pair<std::vector<Tensor<Real>>, Real>(
        const std::vector<Tensor<Real>>& params, int step, bool create_graph)>;
    GradFn grad;

    static InnerObjective from_loss(
        std::function<Tensor<Real>(const std::vector<Tensor<Real>>&, int)> loss_fn) {
        InnerObjective obj;
        obj.grad = [loss_fn](const std::vector<Tensor<Real>>& params, int step,
                             bool create_graph) {
            auto loss = loss_fn(params, step);
            auto gs = backward_at(loss, params, create_graph);
            return std::make_pair(std::move(gs), loss.item());
        };
        return obj;
    }
};

// Runs `n_steps` inner updates, retaining the graph for the last `retain`
// steps. retain == 0 keeps no graph at all (inference). Steps before the
// retention window run on transient graphs and are detached; the states
// entering the window are wrapped in leaf proxies so the meta-gradient
// accumulates there.
template <typename Real>
AdaptationTrace<Real> run_inner_loop(const std::vector<Tensor<Real>>& init_params,
                                     const std::vector<int>& param_groups,
                                     const InnerObjective<Real>& objective,
                                     const InnerHyper<Real>& hyper, int n_steps, int retain) {
    if (n_steps < 1) {
        throw std::invalid_argument("run_inner_loop: need at least one step");
    }
    if (retain < 0 || retain > n_steps) {
        throw std::invalid_argument("run_inner_loop: retain must lie in [0, n_steps]");
    }
    if (param_groups.size() != init_params.size()) {
        throw std::invalid_argument("run_inner_loop: param_groups size mismatch");
    }
    if (hyper.lr_table.cols() < n_steps) {
        throw std::invalid_argument("run_inner_loop: lr_table has fewer columns than steps");
    }
    for (int g : param_groups) {
        if (g < 0 || g >= hyper.lr_table.rows()) {
            throw std::invalid_argument("run_inner_loop: param group out of range");
        }
    }

    AdaptationTrace<Real> trace;
    trace.n_steps = n_steps;
    trace.retained = retain;

    std::vector<Tensor<Real>> phi = init_params;
    auto record_state = [&trace](const std::vector<Tensor<Real>>& ps) {
        std::vector<Tensor<Real>> snap;
        snap.reserve(ps.size());
        for (const auto& p : ps) {
            snap.push_back(p.detach());
        }
        trace.states.push_back(std::move(snap));
    };
    record_state(phi);

    InnerOptState<Real> state = InnerOptState<Real>::init(hyper, phi);

    auto lr_slices = [&](int step) {
        std::vector<Tensor<Real>> lrs;
        lrs.reserve(phi.size());
        for (std::size_t i = 0; i < phi.size(); ++i) {
            const std::int64_t g = param_groups[i];
            lrs.push_back(slice_block(hyper.lr_table, g, g + 1, step, step + 1));
        }
        return lrs;
    };

    for (int n = 0; n < n_steps; ++n) {
        if (retain > 0 && n == n_steps - retain) {
            for (auto& p : phi) {
                p = leaf_proxy(p);
            }
            trace.entry_proxies = phi;
            state.detach_all();
        }
        const bool retained_step = retain > 0 && n >= n_steps - retain;
        try {
            if (retained_step) {
                auto lrs = lr_slices(n);
                auto [gs, loss_value] = objective.grad(phi, n, /*create_graph=*/true);
                phi = inner_step(phi, gs, lrs, hyper, state);
                trace.step_losses.push_back(loss_value);
            } else {
                std::vector<Tensor<Real>> locals;
                locals.reserve(phi.size());
                for (const auto& p : phi) {
                    locals.push_back(p.requires_grad() ? p : Tensor<Real>::leaf(p));
                }
                auto [gs, loss_value] = objective.grad(locals, n, /*create_graph=*/false);
                NoGradGuard ng;
                auto lrs = lr_slices(n);
                phi = inner_step(locals, gs, lrs, hyper, state);
                trace.step_losses.push_back(loss_value);
            }
        } catch (const OverflowError& e) {
            throw OverflowError("inner step " + std::to_string(n) + " aborted: " + e.what());
        }
        record_state(phi);
    }

    trace.final_params = phi;
    return trace;
}

// ---------------------------------------------------------------------------
// Token-weight network: a two-layer MLP mapping the frozen base model's final
// hidden state of each predicted token to a non-negative weight (softplus
// output); weights are renormalized to mean 1 over the chunk batch.

template <typename Real>
struct TokenWeightNet {
    Tensor<Real> w1, b1, w2, b2;

    static TokenWeightNet init(std::int64_t d_model, std::int64_t hidden, std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        TokenWeightNet net;
        net.w1 = Tensor<Real>::leaf(Tensor<Real>::randn({d_model, hidden}, rng, Real(0.1)));
        net.b1 = Tensor<Real>::leaf(Tensor<Real>::zeros({hidden}));
        net.w2 = Tensor<Real>::leaf(Tensor<Real>::randn({hidden, 1}, rng, Real(0.1)));
        net.b2 = Tensor<Real>::leaf(Tensor<Real>::zeros({1}));
        return net;
    }

    // [T, D] features -> [T] non-negative weights.
    Tensor<Real> forward(const Tensor<Real>& feats) const {
        auto h = tanh(add(matmul(feats, w1), broadcast_row(b1, feats.rows())));
        auto o = add(matmul(h, w2), broadcast_row(b2, feats.rows()));
        return reshape(softplus(o), {feats.rows()});
    }

    std::vector<Tensor<Real>> flat() const { return {w1, b1, w2, b2}; }
};

// The meta-learned state: adapter initialization, per-layer-per-step inner
// learning rates, and the token-weight network.
template <typename Real>
struct MetaParams {
    LoraAdapter<Real> adapter;
    InnerHyper<Real> hyper;
    TokenWeightNet<Real> wnet;
    bool use_token_weights = true;

    static MetaParams init(const ModelConfig<Real>& cfg, std::int64_t n_inner_steps, Real init_lr,
                           InnerOptKind kind, std::uint64_t seed, std::int64_t wnet_hidden = 32) {
        MetaParams mp;
        mp.adapter = LoraAdapter<Real>::init(cfg, seed);
        mp.hyper = InnerHyper<Real>::init(
            static_cast<std::int64_t>(mp.adapter.n_modules()), n_inner_steps, init_lr, kind);
        mp.wnet = TokenWeightNet<Real>::init(cfg.d_model, wnet_hidden, seed + 1);
        return mp;
    }

    std::vector<std::pair<std::string, Tensor<Real>*>> named_tensors() {
        std::vector<std::pair<std::string, Tensor<Real>*>> out;
        for (auto& m : adapter.mods) {
            out.emplace_back("adapter." + m.name + ".A", &m.a);
            out.emplace_back("adapter." + m.name + ".B", &m.b);
        }
        out.emplace_back("inner.lr_table", &hyper.lr_table);
        out.emplace_back("wnet.w1", &wnet.w1);
        out.emplace_back("wnet.b1", &wnet.b1);
        out.emplace_back("wnet.w2", &wnet.w2);
        out.emplace_back("wnet.b2", &wnet.b2);
        return out;
    }

    std::vector<Tensor<Real>> leaves() const {
        std::vector<Tensor<Real>> out = adapter.flat();
        out.push_back(hyper.lr_table);
        for (const auto& t : wnet.flat()) {
            out.push_back(t);
        }
        return out;
    }

    // lr-table row for each flattened adapter parameter (A and B of a module
    // share the module's row).
    std::vector<int> adapter_param_groups() const {
        std::vector<int> groups;
        for (std::size_t i = 0; i < adapter.mods.size(); ++i) {
            groups.push_back(static_cast<int>(i));
            groups.push_back(static_cast<int>(i));
        }
        return groups;
    }
};

// (sum_c w_c . nll_c) / (sum_c w_c), accumulated in the given order.
template <typename Real>
Tensor<Real> weighted_nll(const std::vector<Tensor<Real>>& per_token_nlls,
                          const std::vector<Tensor<Real>>& weights) {
    if (per_token_nlls.empty() || per_token_nlls.size() != weights.size()) {
        throw std::invalid_argument("weighted_nll: nll/weight batch mismatch");
    }
    Tensor<Real> num, den;
    for (std::size_t c = 0; c < per_token_nlls.size(); ++c) {
        detail::check_same_shape("weighted_nll", per_token_nlls[c], weights[c]);
        auto n_c = sum(mul(per_token_nlls[c], weights[c]));
        auto d_c = sum(weights[c]);
        num = num.defined() ? add(num, n_c) : n_c;
        den = den.defined() ? add(den, d_c) : d_c;
    }
    if (den.item() == Real(0)) {
        throw std::invalid_argument("weighted_nll: all-zero weights");
    }
    return mul(num, recip(den));
}

// ---------------------------------------------------------------------------
// adapt: encode a chunk batch into the adapter.

struct AdaptOptions {
    int n_steps = 4;
    int retain = 2;
    int accum = 1;          // number of gradient-accumulation sub-batches
    bool training = true;   // retain a graph for meta-gradients
};

template <typename Real>
struct AdaptResult {
    AdaptationTrace<Real> trace;
    LoraAdapter<Real> adapter;  // phi^(N); carries the retained graph when training
};

// Content-derived canonical processing order: chunk indices sorted by token
// ids lexicographically. Permuting the batch therefore never changes the
// accumulation order, which makes phi^(N) bit-identical under permutation.
inline std::vector<std::size_t> canonical_chunk_order(const ChunkBatch& batch) {
    std::vector<std::size_t> order(batch.chunks.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return batch.chunks[a].ids < batch.chunks[b].ids;
    });
    return order;
}

template <typename Real>
AdaptResult<Real> adapt(const BaseParams<Real>& base, const MetaParams<Real>& meta,
                        const ChunkBatch& batch, const AdaptOptions& opts) {
    if (batch.chunks.empty()) {
        throw std::invalid_argument("adapt: empty chunk batch");
    }
    const int n_chunks = static_cast<int>(batch.chunks.size());
    if (opts.training && (opts.retain < 1 || opts.retain > opts.n_steps)) {
        throw std::invalid_argument("adapt: retention must lie in [1, n_steps]");
    }
    if (opts.accum < 1 || opts.accum > n_chunks) {
        throw std::invalid_argument("adapt: accumulation steps must lie in [1, #chunks]");
    }
    for (const auto& chunk : batch.chunks) {
        if (static_cast<std::int64_t>(chunk.ids.size()) > base.cfg.max_positions) {
            throw std::invalid_argument("adapt: chunk longer than max_positions");
        }
        if (chunk.ids.size() < 2) {
            throw std::invalid_argument("adapt: chunk with no predicted positions");
        }
    }

    const auto order = canonical_chunk_order(batch);

    // Token weights: one extra no-graph base forward per chunk for features;
    // the weight network itself is differentiable (meta-learned).
    std::vector<Tensor<Real>> w_graph(order.size());
    std::vector<Tensor<Real>> w_value(order.size());
    std::int64_t total_predicted = 0;
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
        total_predicted +=
            static_cast<std::int64_t>(batch.chunks[order[oi]].ids.size()) - 1;
    }
    Real inv_den_value = Real(0);
    Tensor<Real> inv_den_graph;
    if (meta.use_token_weights) {
        std::vector<Tensor<Real>> feats(order.size());
        {
            NoGradGuard ng;
            for (std::size_t oi = 0; oi < order.size(); ++oi) {
                const auto& ids = batch.chunks[order[oi]].ids;
                auto hidden = base_hidden_states(base, ids);
                feats[oi] = slice_block(hidden, 1, hidden.rows(), 0, hidden.cols());
            }
        }
        // Raw weights and per-batch renormalization to mean 1, built as a
        // graph only when training (the retained steps need it).
        GradGuard gg(opts.training && grad_enabled());
        Tensor<Real> wsum;
        std::vector<Tensor<Real>> raw(order.size());
        for (std::size_t oi = 0; oi < order.size(); ++oi) {
            raw[oi] = meta.wnet.forward(feats[oi]);
            auto s = sum(raw[oi]);
            wsum = wsum.defined() ? add(wsum, s) : s;
        }
        auto factor = scale(recip(wsum), static_cast<Real>(total_predicted));
        Tensor<Real> den;
        for (std::size_t oi = 0; oi < order.size(); ++oi) {
            w_graph[oi] = mul_scalar(raw[oi], factor);
            w_value[oi] = w_graph[oi].detach();
            auto s = sum(w_graph[oi]);
            den = den.defined() ? add(den, s) : s;
        }
        inv_den_graph = recip(den);
        inv_den_value = inv_den_graph.item();
    } else {
        for (std::size_t oi = 0; oi < order.size(); ++oi) {
            const auto rows =
                static_cast<std::int64_t>(batch.chunks[order[oi]].ids.size()) - 1;
            w_value[oi] = Tensor<Real>::full({rows}, Real(1));
            w_graph[oi] = w_value[oi];
        }
        inv_den_value = Real(1) / static_cast<Real>(total_predicted);
        inv_den_graph = Tensor<Real>::scalar(inv_den_value);
    }

    // Per-chunk loss terms, processed sub-batch by sub-batch in canonical
    // order. Gradients are accumulated chunk by chunk, so the result is
    // bit-identical for every accumulation setting; accum only bounds how
    // many chunk graphs are alive at once.
    const int group_size = (n_chunks + opts.accum - 1) / opts.accum;
    InnerObjective<Real> objective;
    objective.grad = [&, order, group_size](const std::vector<Tensor<Real>>& params, int /*step*/,
                                            bool create_graph) {
        auto adapter_view = LoraAdapter<Real>::from_flat(meta.adapter, params);
        std::vector<Tensor<Real>> total(params.size());
        Real loss_value = Real(0);
        for (std::size_t lo = 0; lo < order.size(); lo += static_cast<std::size_t>(group_size)) {
            const std::size_t hi =
                std::min(order.size(), lo + static_cast<std::size_t>(group_size));
            std::vector<Tensor<Real>> terms;
            terms.reserve(hi - lo);
            for (std::size_t oi = lo; oi < hi; ++oi) {
                const auto& chunk = batch.chunks[order[oi]];
                std::vector<std::int64_t> positions;
                positions.reserve(chunk.ids.size() - 1);
                for (std::int64_t p = 1; p < static_cast<std::int64_t>(chunk.ids.size()); ++p) {
                    positions.push_back(p);
                }
                auto logits = forward_logits(base, &adapter_view, chunk.ids);
                auto ce = nll_at_positions(logits, chunk, positions);
                if (create_graph) {
                    terms.push_back(mul_scalar(sum(mul(ce, w_graph[oi])), inv_den_graph));
                } else {
                    terms.push_back(scale(sum(mul(ce, w_value[oi])), inv_den_value));
                }
            }
            for (auto& term : terms) {
                auto gs = backward_at(term, params, create_graph);
                for (std::size_t i = 0; i < params.size(); ++i) {
                    total[i] = total[i].defined() ? add(total[i], gs[i]) : gs[i];
                }
                loss_value += term.item();
            }
        }
        return std::make_pair(std::move(total), loss_value);
    };

    AdaptResult<Real> result;
    result.trace = run_inner_loop(meta.adapter.flat(), meta.adapter_param_groups(), objective,
                                  meta.hyper, opts.n_steps, opts.training ? opts.retain : 0);
    result.adapter = LoraAdapter<Real>::from_flat(meta.adapter, result.trace.final_params);
    return result;
}

// Greedy decoding with the adapted parameters on a question-only prompt: the
// prompt never contains context tokens; everything the model knows about the
// context lives in phi^(N).
template <typename Real>
TokenSeq answer_with_adapter(const BaseParams<Real>& base, const LoraAdapter<Real>& adapted,
                             const TokenSeq& question_prompt, std::int64_t max_new) {
    LoraAdapter<Real> values = adapted;
    for (auto& m : values.mods) {
        m.a = m.a.detach();
        m.b = m.b.detach();
    }
    return greedy_decode(base, &values, question_prompt, max_new);
}

}  // namespace perk

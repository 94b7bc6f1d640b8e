from typing import List, Tuple

import numpy as np
import pytest

from state_transition import tensor as T
from state_transition.attention import (
    AttentionConfig,
    HistoryCache,
    RelativePositionTable,
    TokenBlock,
    affinity,
    cache_push,
    causal_self_attention,
    merge_heads,
    multi_head,
    sequence_plan,
    split_heads,
    sta_attention,
    sta_kernel,
    sta_scores,
    standard_cross_attention,
    standard_kernel,
    windowed_self_attention,
)
from state_transition.errors import ConfigError, DimensionError, SequencingError, UsageError
from state_transition.gradcheck import central_difference_gradient, relative_error
from state_transition.tensor import ComputationTape, Tensor


def random_blocks(rng: np.random.Generator, steps: int, m: int, n: int, d: int, heads: int = 1,
                  integer: bool = False, requires_grad: bool = False) -> List[TokenBlock]:
    def draw(rows: int) -> Tensor:
        values = rng.integers(-3, 4, size=(heads, rows, d)).astype(float) if integer \
            else rng.normal(size=(heads, rows, d))
        return Tensor(values, requires_grad=requires_grad)

    return [TokenBlock(timestep=t, q=draw(m), k=draw(n), v=draw(n), s=draw(n)) for t in range(steps)]


def random_table(rng: np.random.Generator, max_offset: int, d: int, heads: int = 1,
                 integer: bool = False) -> RelativePositionTable:
    values = rng.integers(-2, 3, size=(heads, max_offset + 1, d)).astype(float) if integer \
        else rng.normal(size=(heads, max_offset + 1, d)) * 0.5
    return RelativePositionTable(Tensor(values))


def zero_table(max_offset: int, d: int, heads: int = 1) -> RelativePositionTable:
    return RelativePositionTable(Tensor(np.zeros((heads, max_offset + 1, d))))


def brute_force_sta(window: List[TokenBlock], pos: RelativePositionTable, head: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    "Nested-loop scores and output of the last step of the window, for one head"
    t = len(window) - 1
    current = window[-1]
    e = pos.embeddings.data[head]
    m, n = current.q.shape[1], current.k.shape[1]
    d_k, d_s = current.q.shape[2], current.s.shape[2]
    k = t
    scores = np.zeros((m, n))
    for tau, block in enumerate(window):
        for i in range(m):
            for j in range(n):
                for l in range(n):
                    a = sum(block.q.data[head, i, d] * block.k.data[head, l, d] for d in range(d_k))
                    transition = sum((block.s.data[head, l, d] + e[t - tau, d]) * (current.s.data[head, j, d] + e[0, d])
                                     for d in range(d_s))
                    scores[i, j] += a * transition
    scores /= np.sqrt(d_k * d_s * max(k, 1))

    out = np.zeros((m, current.v.shape[2]))
    for i in range(m):
        exps = [np.exp(scores[i, j] - scores[i].max()) for j in range(n)]
        for j in range(n):
            out[i] += exps[j] / sum(exps) * current.v.data[head, j]
    return scores, out


def brute_force_standard(q_t: np.ndarray, window: List[TokenBlock], pos: RelativePositionTable, head: int = 0) -> np.ndarray:
    t = len(window) - 1
    p = pos.embeddings.data[head]
    d_k = q_t.shape[-1]
    rows = []
    for i in range(q_t.shape[0]):
        scores, values = [], []
        for tau, block in enumerate(window):
            for l in range(block.k.shape[1]):
                key = block.k.data[head, l] + p[t - tau]
                scores.append(sum(q_t[i, d] * key[d] for d in range(d_k)) / np.sqrt(d_k))
                values.append(block.v.data[head, l])
        exps = np.exp(np.array(scores) - max(scores))
        rows.append((exps / exps.sum()) @ np.array(values))
    return np.array(rows)


class VerifyAttentionConfig:
    def verify_defaults(self) -> None:
        config = AttentionConfig()
        assert (config.d_model, config.n_heads, config.max_history) == (512, 8, 15)
        assert config.d_k == config.d_s == config.d_v == 64

    def verify_indivisible_width_rejected(self) -> None:
        with pytest.raises(ConfigError, match="not divisible"):
            AttentionConfig(d_model=10, n_heads=3)


class VerifyStandardCrossAttention:
    def verify_single_key_returns_its_value(self) -> None:
        rng = np.random.default_rng(0)
        block = random_blocks(rng, 1, m=3, n=1, d=4)[0]
        out = standard_cross_attention(block.q, [block], random_table(rng, 0, 4))
        assert np.array_equal(out.data[0], np.repeat(block.v.data[0], 3, axis=0))

    def verify_orthogonal_query_averages_values(self) -> None:
        rng = np.random.default_rng(1)
        window = random_blocks(rng, 3, m=1, n=2, d=4)
        q_t = Tensor(np.zeros((1, 1, 4)))
        out = standard_cross_attention(q_t, window, zero_table(2, 4))
        all_values = np.concatenate([block.v.data[0] for block in window])
        assert np.allclose(out.data[0, 0], all_values.mean(axis=0), atol=1e-12)

    def verify_hand_case_matches_nested_loops(self) -> None:
        rng = np.random.default_rng(2)
        window = random_blocks(rng, 2, m=1, n=1, d=2)
        pos = random_table(rng, 1, 2)
        out = standard_cross_attention(window[-1].q, window, pos)
        expected = brute_force_standard(window[-1].q.data[0], window, pos)
        assert np.max(np.abs(out.data[0] - expected)) < 1e-12

    def verify_outputs_are_convex_combinations(self) -> None:
        rng = np.random.default_rng(3)
        window = random_blocks(rng, 4, m=2, n=3, d=4)
        captured = {}
        out = standard_cross_attention(window[-1].q, window, random_table(rng, 3, 4), recorder=captured.update)
        weights = captured["weights"][0, 0, 0]
        assert np.all(weights >= 0) and np.max(np.abs(weights.sum(axis=-1) - 1)) < 1e-9
        # weight columns run newest step first
        values = np.concatenate([block.v.data[0] for block in reversed(window)])
        assert np.allclose(weights @ values, out.data[0], atol=1e-12)

    def verify_empty_window(self) -> None:
        with pytest.raises(UsageError):
            standard_cross_attention(Tensor(np.zeros((1, 1, 2))), [], zero_table(0, 2))


class VerifySTA:
    def verify_degenerate_window(self) -> None:
        rng = np.random.default_rng(4)
        block = random_blocks(rng, 1, m=2, n=3, d=4)[0]
        pos = random_table(rng, 0, 4)
        s_tilde = block.s.data[0] + pos.embeddings.data[0, 0]
        expected = block.q.data[0] @ block.k.data[0].T @ (s_tilde @ s_tilde.T) / np.sqrt(4 * 4)
        assert np.allclose(sta_scores([block], block, pos).data[0], expected, atol=1e-12)

    def verify_identical_transition_rows_collapse(self) -> None:
        rng = np.random.default_rng(5)
        window = random_blocks(rng, 3, m=2, n=3, d=4)
        u = rng.normal(size=4)
        for block in window:
            block.s = Tensor(np.broadcast_to(u, (1, 3, 4)).copy())
        scores = sta_scores(window, window[-1], zero_table(2, 4)).data[0]
        assert np.allclose(scores, scores[:, :1], atol=1e-12)

        out = sta_attention(window, window[-1], zero_table(2, 4))
        assert np.allclose(out.data[0], np.broadcast_to(window[-1].v.data[0].mean(axis=0), (2, 4)), atol=1e-12)

    def verify_single_state_token_returns_current_value(self) -> None:
        rng = np.random.default_rng(6)
        window = random_blocks(rng, 5, m=3, n=1, d=4)
        out = sta_attention(window, window[-1], random_table(rng, 4, 4))
        assert np.array_equal(out.data[0], np.repeat(window[-1].v.data[0], 3, axis=0))

    def verify_hand_case_matches_nested_loops(self) -> None:
        rng = np.random.default_rng(7)
        window = random_blocks(rng, 2, m=1, n=2, d=2, integer=True)
        pos = random_table(rng, 1, 2, integer=True)
        expected_scores, expected_out = brute_force_sta(window, pos)
        assert np.max(np.abs(sta_scores(window, window[-1], pos).data[0] - expected_scores)) < 1e-12
        assert np.max(np.abs(sta_attention(window, window[-1], pos).data[0] - expected_out)) < 1e-12

    def verify_randomized_oracle_equivalence(self) -> None:
        rng = np.random.default_rng(8)
        for _ in range(100):
            m, n = rng.integers(1, 4, size=2)
            k = int(rng.integers(0, 5))
            d = int(rng.integers(1, 5))
            window = random_blocks(rng, k + 1, m=int(m), n=int(n), d=d)
            pos = random_table(rng, k, d)
            expected_scores, expected_out = brute_force_sta(window, pos)
            assert np.max(np.abs(sta_scores(window, window[-1], pos).data[0] - expected_scores)) < 1e-12
            assert np.max(np.abs(sta_attention(window, window[-1], pos).data[0] - expected_out)) < 1e-12

    def verify_outputs_mix_only_current_values(self) -> None:
        rng = np.random.default_rng(9)
        window = random_blocks(rng, 4, m=2, n=3, d=4)
        captured = {}
        out = sta_attention(window, window[-1], random_table(rng, 3, 4), recorder=captured.update)
        weights = captured["weights"][0, 0, 0]
        assert weights.shape == (2, 3)
        assert np.max(np.abs(weights.sum(axis=-1) - 1)) < 1e-9
        assert np.allclose(weights @ window[-1].v.data[0], out.data[0], atol=1e-12)

    def verify_mismatched_token_counts(self) -> None:
        rng = np.random.default_rng(10)
        window = random_blocks(rng, 1, m=2, n=3, d=4) + [random_blocks(rng, 1, m=2, n=2, d=4)[0]]
        window[1].timestep = 1
        with pytest.raises(DimensionError):
            sta_attention(window, window[-1], zero_table(1, 4))

    def verify_window_must_end_at_current(self) -> None:
        rng = np.random.default_rng(11)
        window = random_blocks(rng, 3, m=1, n=2, d=2)
        with pytest.raises(SequencingError):
            sta_attention(window[:2], window[2], zero_table(2, 2))

    def verify_gradient_end_to_end(self) -> None:
        rng = np.random.default_rng(12)
        window = random_blocks(rng, 3, m=2, n=2, d=3, requires_grad=True)
        pos = random_table(rng, 2, 3)
        pos.embeddings.requires_grad = True
        weights = Tensor(rng.normal(size=(1, 2, 3)))

        def loss() -> Tensor:
            return T.sum_all(T.mul(sta_attention(window, window[-1], pos), weights))

        leaves = [pos.embeddings] + [getattr(b, name) for b in window for name in ("q", "k", "v", "s")]
        for leaf in leaves:
            leaf.zero_grad()
        with ComputationTape() as tape:
            value = loss()
        T.backward(value, tape)

        for leaf in leaves:
            numeric = central_difference_gradient(lambda: loss().item(), leaf.data)
            assert relative_error(leaf.grad, numeric) < 1e-4


class VerifyMultiHead:
    def make_inputs(self, rng: np.random.Generator, heads: int, steps: int = 3, m: int = 2, n: int = 2, d: int = 3):
        def draw(tokens: int) -> Tensor:
            return Tensor(rng.normal(size=(1, heads, steps, tokens, d)))
        return dict(q=draw(m), k=draw(n), v=draw(n), s=draw(n)), random_table(rng, steps - 1, d, heads)

    def sta_inner(self, pos: RelativePositionTable, steps: int):
        plan = sequence_plan(steps, steps - 1)
        return lambda q, k, v, s: sta_kernel(affinity(q, k), q.shape[-1], s, v, pos, plan)

    def verify_single_head_is_inner_then_projection(self) -> None:
        rng = np.random.default_rng(13)
        inputs, pos = self.make_inputs(rng, heads=1)
        out_weight = Tensor(rng.normal(size=(3, 3)))
        inner = self.sta_inner(pos, 3)
        out = multi_head(AttentionConfig(d_model=3, n_heads=1, max_history=2), inner, out_weight, **inputs)
        expected = inner(**inputs).data[:, 0] @ out_weight.data
        assert np.max(np.abs(out.data - expected)) < 1e-12

    def verify_head_permutation_round_trip(self) -> None:
        rng = np.random.default_rng(14)
        inputs, pos = self.make_inputs(rng, heads=3)
        perm = np.array([2, 0, 1])
        permuted_pos = RelativePositionTable(Tensor(pos.embeddings.data[perm]))
        permuted = {name: Tensor(value.data[:, perm]) for name, value in inputs.items()}

        out = self.sta_inner(pos, 3)(**inputs).data
        out_permuted = self.sta_inner(permuted_pos, 3)(**permuted).data
        assert np.max(np.abs(out_permuted[:, np.argsort(perm)] - out)) < 1e-12

    def verify_two_heads_match_single_head_path(self) -> None:
        rng = np.random.default_rng(15)
        inputs, pos = self.make_inputs(rng, heads=2)
        out_weight = Tensor(rng.normal(size=(6, 6)))
        config = AttentionConfig(d_model=6, n_heads=2, max_history=2)
        combined = multi_head(config, self.sta_inner(pos, 3), out_weight, **inputs).data

        per_head = []
        for h in range(2):
            head_pos = RelativePositionTable(Tensor(pos.embeddings.data[h:h + 1]))
            head_inputs = {name: Tensor(value.data[:, h:h + 1]) for name, value in inputs.items()}
            per_head.append(self.sta_inner(head_pos, 3)(**head_inputs).data[:, 0])
        expected = np.concatenate(per_head, axis=-1) @ out_weight.data
        assert np.max(np.abs(combined - expected)) < 1e-12

    def verify_split_merge_round_trip(self) -> None:
        x = Tensor(np.random.default_rng(16).normal(size=(2, 3, 4, 6)))
        assert np.array_equal(merge_heads(split_heads(x, 3)).data, x.data)

    def verify_head_count_mismatch(self) -> None:
        rng = np.random.default_rng(17)
        inputs, pos = self.make_inputs(rng, heads=2)
        with pytest.raises(DimensionError, match="heads"):
            multi_head(AttentionConfig(d_model=6, n_heads=3), self.sta_inner(pos, 3), Tensor(np.eye(6)), **inputs)


class VerifyCausalSelfAttention:
    def weights(self, rng: np.random.Generator, d: int):
        return {name: Tensor(rng.normal(size=(d, d))) for name in ("q", "k", "v", "o")}

    def verify_single_step_is_bidirectional(self) -> None:
        rng = np.random.default_rng(18)
        weights = self.weights(rng, 4)
        tokens = Tensor(rng.normal(size=(3, 4)))
        config = AttentionConfig(d_model=4, n_heads=1, max_history=0)
        out = causal_self_attention(tokens, 3, config, weights).data

        q, k, v = (tokens.data @ weights[name].data for name in ("q", "k", "v"))
        scores = q @ k.T / 2.0
        probs = np.exp(scores - scores.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        assert np.max(np.abs(out - probs @ v @ weights["o"].data)) < 1e-12

    def verify_matches_masked_nested_loops(self) -> None:
        rng = np.random.default_rng(19)
        weights = self.weights(rng, 4)
        tokens = Tensor(rng.normal(size=(4, 4)))
        config = AttentionConfig(d_model=4, n_heads=2, max_history=1)
        out = causal_self_attention(tokens, 2, config, weights).data

        q, k, v = (tokens.data @ weights[name].data for name in ("q", "k", "v"))
        heads = []
        for h in range(2):
            cols = slice(2 * h, 2 * h + 2)
            head_out = np.zeros((4, 2))
            for i in range(4):
                visible = [j for j in range(4) if j // 2 <= i // 2]
                scores = np.array([q[i, cols] @ k[j, cols] / np.sqrt(2) for j in visible])
                probs = np.exp(scores - scores.max())
                probs /= probs.sum()
                for p, j in zip(probs, visible):
                    head_out[i] += p * v[j, cols]
            heads.append(head_out)
        expected = np.concatenate(heads, axis=1) @ weights["o"].data
        assert np.max(np.abs(out - expected)) < 1e-12

    def verify_future_steps_do_not_leak(self) -> None:
        rng = np.random.default_rng(20)
        weights = self.weights(rng, 4)
        config = AttentionConfig(d_model=4, n_heads=2, max_history=2)
        tokens = rng.normal(size=(6, 4))
        perturbed = tokens.copy()
        perturbed[4:] += rng.normal(size=(2, 4)) * 10

        out = causal_self_attention(Tensor(tokens), 2, config, weights).data
        out_perturbed = causal_self_attention(Tensor(perturbed), 2, config, weights).data
        assert np.array_equal(out[:4], out_perturbed[:4])
        assert not np.array_equal(out[4:], out_perturbed[4:])

    def verify_token_count_must_divide(self) -> None:
        rng = np.random.default_rng(21)
        with pytest.raises(DimensionError):
            causal_self_attention(Tensor(np.ones((5, 4))), 2, AttentionConfig(d_model=4, n_heads=1), self.weights(rng, 4))


class VerifySequenceKernels:
    def sequence_inputs(self, rng: np.random.Generator, steps: int, heads: int = 2, m: int = 2, n: int = 3, d: int = 4):
        def draw(tokens: int) -> np.ndarray:
            return rng.normal(size=(1, heads, steps, tokens, d))
        return {name: draw(m if name == "q" else n) for name in ("q", "k", "v", "s")}

    def run_sta(self, arrays, pos, history_limit):
        plan = sequence_plan(arrays["q"].shape[2], history_limit)
        q, k = Tensor(arrays["q"]), Tensor(arrays["k"])
        return sta_kernel(affinity(q, k), q.shape[-1], Tensor(arrays["s"]), Tensor(arrays["v"]), pos, plan).data

    def run_standard(self, arrays, pos, history_limit):
        plan = sequence_plan(arrays["q"].shape[2], history_limit)
        return standard_kernel(Tensor(arrays["q"]), Tensor(arrays["k"]), Tensor(arrays["v"]), pos, plan).data

    @pytest.mark.parametrize("runner", ["run_sta", "run_standard"])
    def verify_causality(self, runner: str) -> None:
        rng = np.random.default_rng(22)
        arrays = self.sequence_inputs(rng, 8)
        pos = random_table(rng, 3, 4, heads=2)
        perturbed = {name: value.copy() for name, value in arrays.items()}
        for value in perturbed.values():
            value[:, :, 5:] += rng.normal(size=value[:, :, 5:].shape) * 5

        out = getattr(self, runner)(arrays, pos, 3)
        out_perturbed = getattr(self, runner)(perturbed, pos, 3)
        assert np.array_equal(out[:, :, :5], out_perturbed[:, :, :5])

    def verify_sequence_matches_per_step_window(self) -> None:
        rng = np.random.default_rng(23)
        arrays = self.sequence_inputs(rng, 7, heads=1)
        pos = random_table(rng, 3, 4)
        out = self.run_sta(arrays, pos, 3)
        for t in range(7):
            window = [TokenBlock(timestep=tau, **{name: Tensor(arrays[name][0, :, tau]) for name in arrays})
                      for tau in range(max(0, t - 3), t + 1)]
            expected = sta_attention(window, window[-1], pos).data
            assert np.max(np.abs(out[0, :, t] - expected)) < 1e-12

    def verify_self_attention_window(self) -> None:
        rng = np.random.default_rng(24)
        q, k, v = (Tensor(rng.normal(size=(1, 1, 6, 2, 3))) for _ in range(3))
        out = windowed_self_attention(q, k, v, sequence_plan(6, 2)).data
        for t in range(6):
            lo = max(0, t - 2)
            sub = [Tensor(x.data[:, :, lo:t + 1]) for x in (q, k, v)]
            expected = windowed_self_attention(*sub, sequence_plan(t + 1 - lo, t - lo)).data[:, :, -1]
            assert np.max(np.abs(out[:, :, t] - expected)) < 1e-12


class VerifyHistoryCache:
    def verify_push_into_empty_cache(self) -> None:
        rng = np.random.default_rng(25)
        cache = cache_push(HistoryCache(4), random_blocks(rng, 1, m=1, n=2, d=2)[0])
        assert len(cache) == 1
        assert [block.timestep for block in cache.window()] == [0]

    def verify_ring_eviction(self) -> None:
        rng = np.random.default_rng(26)
        k_max = 3
        cache = HistoryCache(k_max + 1)
        for block in random_blocks(rng, k_max + 2, m=1, n=2, d=2):
            cache.push(block)
        assert len(cache) == k_max + 1
        assert [block.timestep for block in cache.window()] == [1, 2, 3, 4]
        assert [block.timestep for block in cache.window(history_limit=1)] == [3, 4]

    def verify_non_consecutive_push(self) -> None:
        rng = np.random.default_rng(27)
        blocks = random_blocks(rng, 3, m=1, n=2, d=2)
        cache = HistoryCache(4)
        cache.push(blocks[0])
        with pytest.raises(SequencingError, match="Cannot push step 2 after step 0"):
            cache.push(blocks[2])

    def verify_cached_affinity_equals_recomputation(self) -> None:
        rng = np.random.default_rng(28)
        cache = HistoryCache(3)
        for block in random_blocks(rng, 5, m=2, n=3, d=4, heads=2):
            cache.push(block)
        for block, cached in zip(cache.window(), cache.window_affinities()):
            assert np.array_equal(cached.data, T.einsum("hid,hjd->hij", block.q, block.k).data)

    @pytest.mark.parametrize("variant", ["sta", "standard"])
    def verify_incremental_equals_recomputation(self, variant: str) -> None:
        rng = np.random.default_rng(29)
        heads, d_model, m, n, k_max, steps = 2, 8, 2, 3, 5, 20
        weights = {name: rng.normal(size=(d_model, d_model)) / np.sqrt(d_model) for name in ("q", "k", "v", "s")}
        decoder_inputs = rng.normal(size=(steps, m, d_model))
        state_inputs = rng.normal(size=(steps, n, d_model))
        pos = random_table(rng, k_max, d_model // heads, heads=heads)

        def project(t: int) -> TokenBlock:
            def heads_of(x: np.ndarray, name: str) -> Tensor:
                return Tensor((x @ weights[name]).reshape(x.shape[0], heads, -1).transpose(1, 0, 2))
            return TokenBlock(timestep=t, q=heads_of(decoder_inputs[t], "q"), k=heads_of(state_inputs[t], "k"),
                              v=heads_of(state_inputs[t], "v"), s=heads_of(state_inputs[t], "s"))

        cache = HistoryCache(k_max + 1)
        worst = 0.0
        for t in range(steps):
            cache.push(project(t))
            fresh_window = [project(tau) for tau in range(max(0, t - k_max), t + 1)]
            if variant == "sta":
                incremental = cache.sta_step(pos).data
                recomputed = sta_attention(fresh_window, fresh_window[-1], pos).data
            else:
                incremental = cache.standard_step(pos).data
                recomputed = standard_cross_attention(fresh_window[-1].q, fresh_window, pos).data
            worst = max(worst, float(np.max(np.abs(incremental - recomputed))))
        assert worst < 1e-10


class VerifySoftmaxWidth:
    def verify_sta_width_constant_and_standard_width_grows(self) -> None:
        rng = np.random.default_rng(30)
        n = 3
        pos = random_table(rng, 31, 2)
        for k in range(32):
            window = random_blocks(rng, k + 1, m=2, n=n, d=2)
            with T.counting() as sta_counters:
                sta_attention(window, window[-1], pos)
            with T.counting() as standard_counters:
                standard_cross_attention(window[-1].q, window, pos)
            assert set(sta_counters.softmax_widths) == {n}
            assert set(standard_counters.softmax_widths) == {(k + 1) * n}

"""Policy contract: distributions, sampling, entropies, gradients, SFT."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from treealign import policy as P
from treealign import toy_env
from treealign.policy import (
    PolicyFault,
    SamplingConfig,
    ToySoftmaxPolicy,
    VocabularyError,
    grad_logprob,
    logprob_of,
    position_entropies,
    rollout,
    rollout_tokens,
)
from treealign.seeds import derive
from treealign.vocab import GrammarCursor, replay


class FixedAnswerPolicy:
    """Test double: uniform over a fixed set of count answers, deterministic
    elsewhere (first legal token)."""

    def __init__(self, vocab, answers=(0, 1, 2, 3)):
        self.vocab = vocab
        self.answers = answers
        self._ids = vocab.token_ids()

    def next_distribution(self, task, prefix_tokens):
        cursor = replay(task, self.vocab, prefix_tokens)
        legal = cursor.legal_tokens()
        probs = np.zeros(self.vocab.size())
        num_choices = [t for t in legal if t in {f"num/{k}" for k in self.answers}]
        if cursor.slot() == 8 and num_choices:  # answer value position
            for t in num_choices:
                probs[self._ids[t]] = 1.0 / len(num_choices)
        elif "answer/count" in legal:
            probs[self._ids["answer/count"]] = 1.0
        else:
            probs[self._ids[legal[0]]] = 1.0
        return probs


@pytest.fixture(scope="module")
def count_task():
    return next(t for t in toy_env.generate_tasks(3, 30) if t.query.kind == "count")


class TestDistributionContract:
    def test_uniform_policy_sums_to_one(self, vocab, tasks):
        pol = ToySoftmaxPolicy.init(vocab)
        probs = pol.next_distribution(tasks[0], [])
        assert abs(probs.sum() - 1.0) <= 1e-9
        assert (probs >= 0).all()

    @given(st.integers(0, 39), st.integers(0, 10**6))
    def test_sums_to_one_on_fuzzed_prefixes(self, task_idx, seed):
        tasks = toy_env.generate_tasks(5, 40)
        task = tasks[task_idx]
        vocab = toy_env.GenConfig().vocabulary()
        pol = ToySoftmaxPolicy.init(vocab, seed=1, scale=2.0)
        traj = rollout_tokens(pol, task, [], SamplingConfig(seed=seed))
        tokens = traj.tokens()
        cut = seed % max(len(tokens), 1)
        probs = pol.next_distribution(task, tokens[:cut])
        assert abs(probs.sum() - 1.0) <= 1e-9
        assert (probs >= 0).all()

    def test_fast_and_slow_paths_agree(self, vocab, tasks, sft_policy):
        task = tasks[0]
        traj = rollout_tokens(sft_policy, task, [], SamplingConfig(seed=4))
        cursor = GrammarCursor(task, vocab)
        for tok in traj.tokens():
            slow = sft_policy.next_distribution(task, [])  # placeholder replaced below
            break
        prefix = []
        cursor = GrammarCursor(task, vocab)
        for tok in traj.tokens()[:8]:
            fast = sft_policy.distribution_from_cursor(cursor)
            slow = sft_policy.next_distribution(task, prefix)
            np.testing.assert_array_equal(fast, slow)
            cursor.advance(tok)
            prefix.append(tok)


class TestRollout:
    def test_deterministic_policy_ignores_seed(self, vocab, tasks, sft_policy):
        det = ToySoftmaxPolicy(vocab, sft_policy.theta * 400)  # effectively one-hot rows
        t1 = rollout_tokens(det, tasks[0], [], SamplingConfig(seed=1))
        t2 = rollout_tokens(det, tasks[0], [], SamplingConfig(seed=99))
        assert t1.tokens() == t2.tokens()

    def test_temperature_zero_limit_is_greedy(self, vocab, tasks, sft_policy):
        greedy = rollout_tokens(sft_policy, tasks[0], [], SamplingConfig(seed=0, temperature=1e-9))
        # manual argmax decode
        cursor = GrammarCursor(tasks[0], vocab)
        toks = []
        while not cursor.done():
            ids, w = sft_policy.legal_distribution(cursor)
            toks.append(vocab.tokens()[ids[int(np.argmax(w))]])
            cursor.advance(toks[-1])
        assert greedy.tokens() == toks

    def test_seed_reproducibility(self, vocab, tasks):
        pol = ToySoftmaxPolicy.init(vocab)
        a = rollout_tokens(pol, tasks[0], [], SamplingConfig(seed=7))
        b = rollout_tokens(pol, tasks[0], [], SamplingConfig(seed=7))
        assert a == b

    def test_uniform_answer_frequencies(self, vocab, count_task):
        pol = FixedAnswerPolicy(vocab)
        counts = {k: 0 for k in (0, 1, 2, 3)}
        n = 10_000
        for i in range(n):
            t = rollout_tokens(pol, count_task, [], SamplingConfig(seed=i))
            counts[t.final_answer.count_value] += 1
        for k, c in counts.items():
            assert abs(c / n - 0.25) <= 0.02, (k, c)

    def test_step_prefix_variant(self, vocab, tasks, sft_policy):
        base = rollout_tokens(sft_policy, tasks[0], [], SamplingConfig(seed=3))
        prefix_steps = base.steps[:2]
        t = rollout(sft_policy, tasks[0], prefix_steps, SamplingConfig(seed=5))
        got = t.tokens()
        want = [tok for s in prefix_steps for tok in s.tokens]
        assert got[: len(want)] == want

    def test_invalid_distribution_raises(self, vocab, tasks):
        class BadPolicy:
            def __init__(self, vocab):
                self.vocab = vocab

            def next_distribution(self, task, prefix_tokens):
                probs = np.zeros(self.vocab.size())
                probs[0] = -0.5
                probs[1] = 1.5
                return probs

        with pytest.raises(PolicyFault):
            rollout_tokens(BadPolicy(vocab), tasks[0], [], SamplingConfig(seed=0))

    def test_top_p_sampling_restricts_support(self, vocab, count_task):
        # with top_p tiny, sampling must follow the argmax at every position
        pol = ToySoftmaxPolicy.init(vocab, seed=3, scale=1.0)
        greedy = rollout_tokens(pol, count_task, [], SamplingConfig(seed=0, temperature=1e-9))
        small_p = rollout_tokens(pol, count_task, [], SamplingConfig(seed=11, top_p=1e-9))
        assert small_p.tokens() == greedy.tokens()


class TestEntropies:
    def test_uniform_entropy_is_log_n(self, vocab, count_task):
        pol = ToySoftmaxPolicy.init(vocab)
        traj = rollout_tokens(pol, count_task, [], SamplingConfig(seed=2))
        ents = position_entropies(pol, count_task, traj)
        assert len(ents) == len(traj.tokens())
        cursor = GrammarCursor(count_task, vocab)
        for ent, tok in zip(ents, traj.tokens()):
            n_legal = len(cursor.legal_tokens())
            assert ent == pytest.approx(math.log(n_legal), abs=1e-9)
            cursor.advance(tok)

    def test_one_hot_entropy_zero(self):
        assert P.entropy_nats(np.array([0.0, 1.0, 0.0])) == 0.0

    def test_half_half(self):
        assert P.entropy_nats(np.array([0.5, 0.5, 0.0, 0.0])) == pytest.approx(math.log(2))

    def test_ln4(self):
        assert P.entropy_nats(np.array([0.25] * 4)) == pytest.approx(math.log(4), abs=1e-12)


class TestLogprob:
    def test_deterministic_policy_greedy_logprob_zero(self, vocab, tasks, sft_policy):
        det = ToySoftmaxPolicy(vocab, sft_policy.theta * 400)
        traj = rollout_tokens(det, tasks[0], [], SamplingConfig(seed=0, temperature=1e-9))
        assert logprob_of(det, tasks[0], traj) == pytest.approx(0.0, abs=1e-6)

    def test_uniform_logprob(self, vocab, count_task):
        # force a 3-token trajectory structure through the budget: steps are
        # grammar-driven, so instead check the analytic sum over legal sizes
        pol = ToySoftmaxPolicy.init(vocab)
        traj = rollout_tokens(pol, count_task, [], SamplingConfig(seed=2))
        got = logprob_of(pol, count_task, traj)
        cursor = GrammarCursor(count_task, vocab)
        expect = 0.0
        for tok in traj.tokens():
            expect += math.log(1.0 / len(cursor.legal_tokens()))
            cursor.advance(tok)
        assert got == pytest.approx(expect, abs=1e-9)

    def test_out_of_vocabulary(self, vocab, tasks):
        pol = ToySoftmaxPolicy.init(vocab)
        from treealign.core import Step, StepKind, Trajectory

        bad = Trajectory("t", (Step(StepKind.PLAN, ("plan/jump",)),), (0.0,))
        with pytest.raises(VocabularyError):
            logprob_of(pol, tasks[0], bad)

    def test_matches_recorded_logprobs(self, vocab, tasks, sft_policy):
        traj = rollout_tokens(sft_policy, tasks[1], [], SamplingConfig(seed=6))
        assert logprob_of(sft_policy, tasks[1], traj) == pytest.approx(sum(traj.token_logprobs))


def central_difference(policy, task, traj, direction, h=1e-5):
    base = policy.theta.copy()
    policy.theta = base + h * direction
    up = logprob_of(policy, task, traj)
    policy.theta = base - h * direction
    down = logprob_of(policy, task, traj)
    policy.theta = base
    return (up - down) / (2 * h)


class TestGradLogprob:
    def test_finite_differences_100_instances(self, vocab):
        tasks = toy_env.generate_tasks(17, 25)
        rng = np.random.Generator(np.random.PCG64(5))
        for i in range(100):
            task = tasks[i % len(tasks)]
            pol = ToySoftmaxPolicy.init(vocab, seed=1000 + i, scale=0.5)
            traj = rollout_tokens(pol, task, [], SamplingConfig(seed=i))
            grad = grad_logprob(pol, task, traj)
            direction = rng.standard_normal(grad.shape)
            analytic = float((grad * direction).sum())
            numeric = central_difference(pol, task, traj, direction)
            assert abs(analytic - numeric) <= 1e-4 * max(1.0, abs(numeric)), i

    def test_per_coordinate_spot_checks(self, vocab, tasks):
        pol = ToySoftmaxPolicy.init(vocab, seed=2, scale=0.5)
        task = tasks[0]
        traj = rollout_tokens(pol, task, [], SamplingConfig(seed=9))
        grad = grad_logprob(pol, task, traj)
        rows, cols = np.nonzero(grad)
        rng = np.random.Generator(np.random.PCG64(0))
        for _ in range(5):
            k = int(rng.integers(len(rows)))
            direction = np.zeros_like(grad)
            direction[rows[k], cols[k]] = 1.0
            numeric = central_difference(pol, task, traj, direction)
            assert grad[rows[k], cols[k]] == pytest.approx(numeric, rel=1e-4, abs=1e-7)


class TestSft:
    def test_strictly_decreasing_first_50_steps(self, vocab):
        tasks = toy_env.generate_tasks(23, 20)
        pol = ToySoftmaxPolicy.init(vocab)
        pairs = [(t, toy_env.gold_trajectory(t, vocab)) for t in tasks]
        report = P.train_sft(pol, pairs, P.SftConfig(lr=0.1, steps=50))
        losses = report["losses"]
        for i in range(50):
            assert losses[i + 1] < losses[i], i

    def test_seed_reproducible_minibatch(self, vocab):
        tasks = toy_env.generate_tasks(29, 12)
        pairs = [(t, toy_env.gold_trajectory(t, vocab)) for t in tasks]
        a = ToySoftmaxPolicy.init(vocab)
        b = ToySoftmaxPolicy.init(vocab)
        P.train_sft(a, pairs, P.SftConfig(lr=0.3, steps=40, batch=4, seed=3))
        P.train_sft(b, pairs, P.SftConfig(lr=0.3, steps=40, batch=4, seed=3))
        np.testing.assert_array_equal(a.theta, b.theta)


class TestSamplingDistribution:
    def test_chi_square_against_raw_distribution(self, vocab, count_task):
        # at temperature 1, top_p 1 the sampled token frequencies at a fixed
        # position must match the policy distribution (chi^2, alpha=0.001)
        pol = ToySoftmaxPolicy.init(vocab, seed=11, scale=1.0)
        cursor = GrammarCursor(count_task, vocab)
        ids, probs = pol.legal_distribution(cursor)
        n = 10_000
        counts = np.zeros(len(ids))
        rng = np.random.Generator(np.random.PCG64(123))
        for _ in range(n):
            k = P._sample_index(probs, rng)
            counts[k] += 1
        expected = probs * n
        mask = expected > 0
        chi2 = float(((counts[mask] - expected[mask]) ** 2 / expected[mask]).sum())
        # dof = legal count - 1 = 1 for the plan slot; generous critical value
        dof = int(mask.sum()) - 1
        critical = {1: 10.83, 2: 13.82, 3: 16.27}.get(dof, dof + 4 * math.sqrt(2 * dof))
        assert chi2 <= critical, (chi2, dof)

    def test_json_round_trip(self, vocab, sft_policy, tmp_path):
        path = tmp_path / "policy.json"
        sft_policy.save(path)
        again = ToySoftmaxPolicy.load(path)
        np.testing.assert_array_equal(again.theta, sft_policy.theta)
        assert again.vocab == sft_policy.vocab

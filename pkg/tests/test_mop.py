import math

import numpy as np
import pytest

import autodiff as ad
from autodiff import Tape, finite_diff_check
from context_encoder import PartnerHistory
from models import ContextConfig
from mop import MixtureOfPersonality, PersonalityBank, PersonalityEstimator, mixture_policy
from utils import sample_action

OBS_DIM = 9
SMALL_CONTEXT = ContextConfig(size=3, token_dim=8, head_dim=4, inner_dim=16)


def make_mop(k=4, seed=0, noise_enabled=True):
    return MixtureOfPersonality(OBS_DIM, np.random.default_rng(seed), k=k, hidden=8,
                                context_cfg=SMALL_CONTEXT, noise_enabled=noise_enabled)


def zero_out(module):
    for p in module.parameters():
        p.value[...] = 0.0


def test_silenced_noise_and_zero_head_give_uniform_profile(rng):
    estimator = PersonalityEstimator(8, 5, rng, hidden=8)
    zero_out(estimator.personality_head)
    estimator.noise_head.layers[-1].bias.value[...] = -1e9
    tape = Tape()
    p = estimator(tape, tape.constant(rng.standard_normal((2, 8))), estimator.draw_noise(2, rng)).value
    np.testing.assert_allclose(p, np.full((2, 5), 0.2), atol=1e-15)


def test_evaluation_profile_is_a_plain_softmax(rng):
    estimator = PersonalityEstimator(8, 12, rng, hidden=8)
    zero_out(estimator.personality_head)
    estimator.personality_head.layers[-1].bias.value[0] = 1.0
    tape = Tape()
    p = estimator(tape, tape.constant(rng.standard_normal((1, 8)))).value[0]
    assert p[0] == pytest.approx(math.e / (math.e + 11), abs=1e-12)


def test_profile_is_reproducible_for_a_fixed_noise_seed(rng):
    mop = make_mop()
    history = mop.new_history()
    history.append(rng.standard_normal(OBS_DIM), 2)
    first = mop.estimate_personality(history, np.random.default_rng(3))
    second = mop.estimate_personality(history, np.random.default_rng(3))
    np.testing.assert_array_equal(first, second)
    assert first.sum() == pytest.approx(1.0, abs=1e-12)


def test_noise_is_off_without_an_rng_or_when_disabled(rng):
    history = PartnerHistory(3, OBS_DIM)
    mop = make_mop()
    np.testing.assert_array_equal(mop.estimate_personality(history), mop.estimate_personality(history))
    quiet = make_mop(noise_enabled=False)
    np.testing.assert_array_equal(quiet.estimate_personality(history, np.random.default_rng(1)),
                                  quiet.estimate_personality(history, np.random.default_rng(2)))


def test_zero_weight_bank_is_uniform(rng):
    bank = PersonalityBank(OBS_DIM, 3, rng, hidden=8)
    zero_out(bank)
    pers = bank(Tape(), rng.standard_normal((2, OBS_DIM))).value
    np.testing.assert_allclose(pers, np.full((2, 3, 6), 1 / 6))


def test_bank_outputs_are_distinct_distributions(rng):
    bank = PersonalityBank(OBS_DIM, 4, rng, hidden=8)
    pers = bank(Tape(record=False), rng.standard_normal((1000, OBS_DIM))).value
    assert pers.shape == (1000, 4, 6)
    assert np.all(pers > 0)
    np.testing.assert_allclose(pers.sum(axis=-1), 1.0, atol=1e-9)
    assert not np.allclose(pers[:, 0], pers[:, 1])


def test_bank_rows_match_a_single_personality_forward(rng):
    bank = PersonalityBank(OBS_DIM, 3, rng, hidden=8)
    obs = rng.standard_normal((2, OBS_DIM))
    batched = bank(Tape(record=False), obs).value
    i = 1
    h = np.tanh(obs @ bank.w1.value[i] + bank.b1.value[i])
    h = np.tanh(h @ bank.w2.value[i] + bank.b2.value[i])
    logits = h @ bank.w3.value[i] + bank.b3.value[i]
    expected = np.exp(logits - logits.max(axis=-1, keepdims=True))
    np.testing.assert_allclose(batched[:, i], expected / expected.sum(axis=-1, keepdims=True), atol=1e-12)


def test_mixture_examples():
    pers = np.array([[1.0, 0, 0, 0, 0, 0], [0, 1.0, 0, 0, 0, 0]])
    np.testing.assert_allclose(mixture_policy([0.25, 0.75], pers), [0.25, 0.75, 0, 0, 0, 0])
    np.testing.assert_array_equal(mixture_policy([0.0, 1.0], pers), pers[1])
    np.testing.assert_allclose(mixture_policy([0.9, 0.1], np.full((2, 6), 1 / 6)), np.full(6, 1 / 6))


def test_mixture_of_nodes_matches_the_array_path(rng):
    p = rng.dirichlet(np.ones(4), size=3)
    pers = rng.dirichlet(np.ones(6), size=(3, 4))
    tape = Tape()
    mixed = mixture_policy(tape.constant(p), tape.constant(pers)).value
    np.testing.assert_allclose(mixed, mixture_policy(p, pers), atol=1e-14)
    np.testing.assert_allclose(mixed.sum(axis=-1), 1.0, atol=1e-12)


def test_mixture_is_linear_in_the_profile(rng):
    pers = rng.dirichlet(np.ones(6), size=5)
    p, q = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
    lam = 0.3
    np.testing.assert_allclose(mixture_policy(lam * p + (1 - lam) * q, pers),
                               lam * mixture_policy(p, pers) + (1 - lam) * mixture_policy(q, pers), atol=1e-14)


@pytest.mark.parametrize("k", [6, 8, 10, 12])
def test_guidance_is_a_distribution_for_every_k(rng, k):
    mop = make_mop(k=k)
    history = mop.new_history()
    guidance = mop.guide(rng.standard_normal(OBS_DIM), history)
    assert guidance.shape == (6,)
    assert np.all(guidance >= 0) and guidance.sum() == pytest.approx(1.0, abs=1e-12)
    assert mop.personality_forward(rng.standard_normal(OBS_DIM)).shape == (1, k, 6)


def test_guidance_is_deterministic_and_context_sensitive(rng):
    mop = make_mop()
    obs = rng.standard_normal(OBS_DIM)
    empty = mop.new_history()
    seen = mop.new_history()
    for t in range(5):
        seen.append(rng.standard_normal(OBS_DIM), t)
    np.testing.assert_array_equal(mop.guide(obs, seen), mop.guide(obs, seen))
    assert not np.array_equal(mop.guide(obs, empty), mop.guide(obs, seen))


def test_act_as_partner_returns_a_consistent_log_prob(rng):
    mop = make_mop()
    history = mop.new_history()
    action, logp = mop.act_as_partner(rng.standard_normal(OBS_DIM), history, rng)
    assert 0 <= action < 6 and logp < 0.0


def test_sample_action_log_probs():
    rng = np.random.default_rng(0)
    assert sample_action(np.eye(6)[4], rng) == (4, 0.0)
    _, logp = sample_action(np.full(6, 1 / 6), rng)
    assert logp == pytest.approx(math.log(1 / 6))
    assert logp == pytest.approx(-1.7918, abs=1e-4)


def test_sampling_frequencies_match_the_distribution():
    rng = np.random.default_rng(0)
    probs = np.array([0.05, 0.1, 0.15, 0.2, 0.25, 0.25])
    n = 100_000
    counts = np.bincount([sample_action(probs, rng)[0] for _ in range(n)], minlength=6)
    sigma = np.sqrt(n * probs * (1 - probs))
    assert np.all(np.abs(counts - n * probs) <= 4 * sigma)


def test_estimator_gradient_matches_finite_differences(rng):
    estimator = PersonalityEstimator(8, 5, rng, hidden=8)
    context = rng.standard_normal((3, 8))
    noise = estimator.draw_noise(3, rng)
    weights = rng.standard_normal((3, 5))
    loss = lambda tape: ad.sum(estimator(tape, tape.constant(context), noise) * weights)
    assert finite_diff_check(loss, estimator.parameters(), probes=100, rng=rng) <= 1e-4


def test_bank_gradient_matches_finite_differences(rng):
    bank = PersonalityBank(OBS_DIM, 4, rng, hidden=8)
    obs = rng.standard_normal((3, OBS_DIM))
    weights = rng.standard_normal((3, 4, 6))
    loss = lambda tape: ad.sum(bank(tape, obs) * weights)
    assert finite_diff_check(loss, bank.parameters(), probes=100, rng=rng) <= 1e-4

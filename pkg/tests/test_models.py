import numpy as np
import pytest

from groupfl.core import ContractError
from groupfl.models import GaussianMeanModel, TinyBigramLM, TrainableModel, grad_check, perplexity
from groupfl.optim import SgdConfig, local_sgd


class LinearModel(TrainableModel):
    """loss = c . theta, independent of the batch."""

    def __init__(self, c):
        self.c = np.asarray(c, dtype=float)
        self.param_dim = self.c.size

    def loss(self, params, batch):
        return float(self.c @ params)

    def grad(self, params, batch):
        return self.c.copy()

    def init_params(self, rng):
        return np.zeros(self.param_dim)


def random_batch(rng, V, n=4, lo=2, hi=9):
    return [rng.integers(0, V, size=int(rng.integers(lo, hi))) for _ in range(n)]


def test_bigram_param_dim_and_layout():
    lm = TinyBigramLM()
    assert lm.param_dim == 64 * 16 + 16 * 32 + 32 + 32 * 64 + 64 == 3680
    theta = np.arange(lm.param_dim, dtype=float)
    parts = lm.unpack(theta)
    assert parts["E"].shape == (64, 16) and parts["E"][0, 0] == 0
    assert parts["W1"][0, 0] == 64 * 16
    assert parts["b2"][-1] == lm.param_dim - 1
    assert np.array_equal(lm.pack(parts), theta)


def test_bigram_init_range(rng):
    theta = TinyBigramLM().init_params(rng)
    assert theta.min() >= -0.08 and theta.max() <= 0.08


def test_softmax_rows_normalised(rng):
    lm = TinyBigramLM(11, 3, 4)
    theta = rng.normal(scale=3.0, size=lm.param_dim)
    for tok in range(11):
        assert abs(lm.next_token_probs(theta, tok).sum() - 1.0) <= 1e-12


def test_perplexity_uniform_predictor():
    lm = TinyBigramLM(10, 4, 5)
    data = [np.array([1, 2, 3, 4]), np.array([9, 0, 5])]
    assert perplexity(lm, np.zeros(lm.param_dim), data) == pytest.approx(10.0, rel=1e-12)


def test_perplexity_perfect_predictor():
    lm = TinyBigramLM(10, 4, 5)
    theta = np.zeros(lm.param_dim)
    lm.unpack(theta)["b2"][3] = 1000.0  # view into theta
    assert perplexity(lm, theta, [np.full(6, 3), np.full(3, 3)]) == 1.0


def test_perplexity_matches_per_token_summation(rng):
    lm = TinyBigramLM(12, 4, 6)
    theta = rng.normal(scale=0.5, size=lm.param_dim)
    corpus = random_batch(rng, 12, n=3)

    # independent per-token evaluation of the network
    p = lm.unpack(theta)
    nll, count = 0.0, 0
    for seq in corpus:
        for a, b in zip(seq[:-1], seq[1:]):
            hidden = np.tanh(p["E"][a] @ p["W1"] + p["b1"])
            logits = hidden @ p["W2"] + p["b2"]
            nll -= logits[b] - np.log(np.sum(np.exp(logits)))
            count += 1
    assert perplexity(lm, theta, corpus) == pytest.approx(np.exp(nll / count), rel=1e-12)


def test_perplexity_contracts():
    with pytest.raises(ContractError):
        perplexity(TinyBigramLM(5, 2, 2), np.zeros(TinyBigramLM(5, 2, 2).param_dim), [])
    with pytest.raises(ContractError):
        perplexity(GaussianMeanModel(), np.zeros(1), [1.0])


def test_token_range_checked():
    lm = TinyBigramLM(5, 2, 2)
    with pytest.raises(ContractError):
        lm.loss(np.zeros(lm.param_dim), [np.array([0, 5])])


def test_grad_check_gaussian_exact():
    err = grad_check(GaussianMeanModel(), np.array([2.0]), [5.0], 1e-5)
    assert GaussianMeanModel().grad(np.array([2.0]), [5.0])[0] == -3.0
    assert err < 1e-10


def test_grad_check_bigram(rng):
    lm = TinyBigramLM(7, 4, 5)
    theta = rng.normal(scale=0.5, size=lm.param_dim)
    assert grad_check(lm, theta, random_batch(rng, 7), 1e-5) < 1e-6


def test_grad_check_linear_loss():
    assert grad_check(LinearModel([1.0, -2.0, 0.5]), np.array([0.3, 0.1, -4.0]), [None]) < 1e-10


def test_grad_check_epsilon_range():
    with pytest.raises(ContractError):
        grad_check(GaussianMeanModel(), np.zeros(1), [1.0], 1e-2)


@pytest.mark.parametrize("trial", range(20))
def test_grad_check_random_pairs(trial):
    rng = np.random.default_rng(1000 + trial)
    gm = GaussianMeanModel()
    assert grad_check(gm, rng.normal(size=1) * 5, list(rng.normal(size=4) * 3)) < 1e-5
    lm = TinyBigramLM(9, 3, 4)
    theta = rng.normal(scale=0.4, size=lm.param_dim)
    assert grad_check(lm, theta, random_batch(rng, 9)) < 1e-5


def test_gaussian_full_batch_step_hits_sample_mean(rng):
    data = list(rng.normal(size=13))
    for start in (-50.0, 0.0, 7.5):
        out = local_sgd(np.array([start]), data, SgdConfig(1.0, len(data), 1),
                        GaussianMeanModel(), rng)
        assert out[0] == pytest.approx(np.mean(data), abs=1e-12)


def test_bigram_loss_order_invariant(rng):
    lm = TinyBigramLM(8, 3, 4)
    theta = rng.normal(size=lm.param_dim)
    batch = random_batch(rng, 8, n=6)
    flipped = batch[::-1]
    assert abs(lm.loss(theta, batch) - lm.loss(theta, flipped)) <= 1e-12
    np.testing.assert_allclose(lm.grad(theta, batch), lm.grad(theta, flipped), atol=1e-12)


def test_bigram_short_sequences_contribute_nothing(rng):
    lm = TinyBigramLM(8, 3, 4)
    theta = rng.normal(size=lm.param_dim)
    assert lm.loss(theta, [np.array([3])]) == 0.0
    assert not lm.grad(theta, [np.array([3])]).any()

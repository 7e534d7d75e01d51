import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from wmoe.ctds import (PromptState, VaeParams, build_prompts, encode_sample, kl_loss, rec_loss,
                       text_embeddings)
from wmoe.encoders import EncoderSpec, TextEncoder
from wmoe.errors import ContractError, DimensionError, InputError
from wmoe.gradcheck import grad_check
from wmoe.params import NamedParamSet
from wmoe.tensor import Tensor, tsum

C = 8


def _setup(m=2, seed=0):
    rng = np.random.default_rng(seed)
    ps = NamedParamSet()
    vae = VaeParams(ps, C, None, rng)
    prompt = PromptState(ps, C, m, rng)
    text = TextEncoder(EncoderSpec(seed=1, C=C, grid=(2, 2), image_size=(4, 4)))
    return ps, vae, prompt, text


def _closed_kl(mu, lv):
    return float(np.mean(-0.5 * np.sum(1 + lv - mu ** 2 - np.exp(lv), axis=-1)))


@given(arrays(np.float64, (3, 4), elements=st.floats(-2, 2)),
       arrays(np.float64, (3, 4), elements=st.floats(-2, 2)))
def test_kl_matches_closed_form(mu, lv):
    assert_allclose(float(kl_loss(Tensor(mu), Tensor(lv)).data), _closed_kl(mu, lv), atol=1e-12)


def test_kl_zero_only_at_standard_normal():
    assert float(kl_loss(np.zeros((2, 3)), np.zeros((2, 3))).data) == 0.0
    assert float(kl_loss(np.full((1, 3), 0.1), np.zeros((1, 3))).data) > 0


def test_kl_hand_value():
    # d=1, mu=1, log_var=0 -> 0.5
    assert_allclose(float(kl_loss(np.ones((1, 1)), np.zeros((1, 1))).data), 0.5, atol=1e-15)


def test_rec_loss_hand_value():
    r = np.array([[[1.0, 2.0]], [[0.0, 0.0]]])  # m=2, B=1
    x = np.array([[1.0, 0.0]])
    assert_allclose(float(rec_loss(r, x).data), (4.0 + 1.0) / 2, atol=1e-15)


def test_shape_errors():
    _, vae, _, _ = _setup()
    with pytest.raises(DimensionError):
        encode_sample(vae, np.zeros(C + 1), 2)
    with pytest.raises(DimensionError):
        kl_loss(np.zeros(3), np.zeros(4))
    with pytest.raises(ContractError):
        encode_sample(vae, np.zeros(C), 2, "train")
    with pytest.raises(InputError):
        PromptState(NamedParamSet(), C, 0, np.random.default_rng(0))


def test_eval_mode_draws_equal_mean():
    _, vae, _, _ = _setup()
    d = encode_sample(vae, np.random.default_rng(1).standard_normal((3, C)), 4, "eval")
    assert d.samples.shape == (4, 3, C // 2)
    for i in range(4):
        assert_array_equal(d.samples.data[i], d.mu.data)


def test_train_mode_draws_differ():
    _, vae, _, _ = _setup()
    d = encode_sample(vae, np.ones(C), 3, "train", np.random.default_rng(0))
    assert not np.array_equal(d.samples.data[0], d.samples.data[1])


def test_prompts_slots_and_independence():
    _, vae, prompt, text = _setup(m=3)
    draw = encode_sample(vae, np.ones((2, C)), 3)
    sn, sa = build_prompts(prompt, draw, text)
    assert sn.tokens.shape == (2, 5 + 3, C)
    assert sn.slot_mask == [False] * 5 + [True] * 3 and sn.n_slots == 3
    base = text_embeddings(text, sn, sa).data
    assert_allclose(np.linalg.norm(base, axis=-1), 1.0, atol=1e-12)

    prompt.v_a.data = prompt.v_a.data.copy()
    prompt.v_a.data[0] += 0.5
    sn2, sa2 = build_prompts(prompt, draw, text)
    after = text_embeddings(text, sn2, sa2).data
    assert_array_equal(after[:, 0], base[:, 0])
    assert not np.array_equal(after[:, 1], base[:, 1])


def test_identical_prompts_give_identical_rows():
    _, _, prompt, text = _setup()
    prompt.v_a.data = prompt.v_n.data.copy()
    prompt.template_a = prompt.template_n
    rows = text_embeddings(text, *build_prompts(prompt, None, text)).data
    assert_array_equal(rows[0], rows[1])


def test_draw_size_mismatch():
    _, vae, prompt, text = _setup(m=2)
    with pytest.raises(ContractError):
        build_prompts(prompt, encode_sample(vae, np.ones(C), 3), text)


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 1000))
def test_gradients_reach_every_ctds_parameter(seed):
    ps, vae, prompt, text = _setup(seed=seed)
    x = np.random.default_rng(seed).standard_normal((2, C))
    w = np.random.default_rng(seed + 1).standard_normal((2, 2, C))

    def f(_):
        d = encode_sample(vae, x, 2, "train", np.random.default_rng(7))
        F_T = text_embeddings(text, *build_prompts(prompt, d, text))
        return tsum(F_T * Tensor(w)) + kl_loss(d.mu, d.log_var) + rec_loss(d.recon, x)

    assert grad_check(f, ps, eps=1e-6, n_samples=10, rng=np.random.default_rng(0)) <= 1e-5

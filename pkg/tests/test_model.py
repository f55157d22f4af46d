import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from milgrade.errors import ContractError, DimensionError, FormatError
from milgrade.model import (
    ACTIVATIONS,
    BLOCKS,
    Bag,
    MilConfig,
    init_params,
    load_params,
    mil_forward,
    mil_loss,
    mil_loss_and_grad,
    predict,
    save_params,
)
from milgrade.numerics import AdamState, adam_step, finite_diff_grad


def make_bag(rng, n, d, label=None):
    return Bag("s0", "p0", rng.normal(size=(n, d)), np.stack([np.arange(n), np.zeros(n)], 1) * 448, 448, label)


def random_instance(seed, activation, d=8, n=6, k=3, proj=10, attn=7):
    r = np.random.default_rng(seed)
    params = init_params(MilConfig(d, proj, attn, k, activation), seed)
    # non-zero biases so every gradient path is exercised
    params = params.replace(b_proj=0.3 * r.normal(size=proj), b_clf=r.normal(size=k))
    return params, make_bag(r, n, d, label=int(r.integers(k)))


def max_rel_error(analytic, numeric):
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def block_errors(params, bag):
    _, grads = mil_loss_and_grad(params, bag)
    errs = {}
    for name in BLOCKS:
        numeric = finite_diff_grad(lambda x, name=name: mil_loss(params.replace(**{name: x}), bag), getattr(params, name), 1e-5)
        errs[name] = max_rel_error(getattr(grads, name), numeric)
    return errs


def test_init_deterministic_and_shapes():
    cfg = MilConfig(input_dim=1536)
    a, b = init_params(cfg, 3), init_params(cfg, 3)
    for name in BLOCKS:
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.W_proj.shape == (512, 1536)
    assert a.V.shape == a.U.shape == (256, 512)
    assert a.w_attn.shape == (5, 256) and a.W_clf.shape == (5, 512)
    assert not a.b_clf.any() and not a.b_proj.any()
    bound = math.sqrt(6 / (1536 + 512))
    assert np.abs(a.W_proj).max() <= bound
    assert not np.array_equal(a.W_proj, init_params(cfg, 4).W_proj)


def test_config_validation():
    with pytest.raises(ContractError):
        MilConfig(input_dim=0)
    with pytest.raises(ContractError):
        MilConfig(input_dim=4, n_classes=1)
    with pytest.raises(ContractError):
        MilConfig(input_dim=4, proj_activation="gelu")


@pytest.mark.parametrize("activation", ACTIVATIONS)
def test_single_instance_bag(rng, activation):
    params = init_params(MilConfig(6, 12, 5, 5, activation), 0)
    bag = make_bag(rng, 1, 6)
    out = mil_forward(params, bag)
    np.testing.assert_array_equal(out.attention, np.ones((1, 5)))
    z = bag.embeddings[0] @ params.W_proj.T + params.b_proj
    if activation == "rectified":
        z = np.maximum(z, 0)
    for c in range(5):
        np.testing.assert_allclose(out.bag_reps[c], z, atol=1e-14)


def test_zero_attention_params_give_uniform_attention(rng):
    params = init_params(MilConfig(6, 12, 5, 4), 0)
    params = params.replace(V=np.zeros_like(params.V), U=np.zeros_like(params.U), w_attn=np.zeros_like(params.w_attn))
    out = mil_forward(params, make_bag(rng, 7, 6))
    np.testing.assert_allclose(out.attention, np.full((7, 4), 1 / 7), atol=1e-15)


def test_duplicated_patch_gets_equal_attention(rng):
    params = init_params(MilConfig(6, 12, 5, 3), 1)
    bag = make_bag(rng, 5, 6)
    emb = np.vstack([bag.embeddings, bag.embeddings[2:3]])
    dup = Bag("d", "p", emb, np.arange(12).reshape(6, 2))
    a = mil_forward(params, dup).attention
    np.testing.assert_array_equal(a[2], a[5])


def test_zero_classifier_gives_log_k(rng):
    params = init_params(MilConfig(6, 12, 5, 4), 2)
    params = params.replace(W_clf=np.zeros_like(params.W_clf), b_clf=np.zeros(4))
    for n in (1, 3, 9):
        assert mil_loss(params, make_bag(rng, n, 6, label=1)) == pytest.approx(math.log(4), abs=1e-12)


@pytest.mark.parametrize("activation", ACTIVATIONS)
@pytest.mark.parametrize("seed", range(4))
def test_gradients_match_finite_differences(seed, activation):
    params, bag = random_instance(seed, activation)
    errs = block_errors(params, bag)
    assert max(errs.values()) < 1e-4, errs


@pytest.mark.parametrize("activation", ACTIVATIONS)
def test_loss_and_grad_loss_equals_forward_loss(rng, activation):
    params, bag = random_instance(9, activation)
    loss, _ = mil_loss_and_grad(params, bag)
    assert loss == mil_loss(params, bag)


@given(st.integers(0, 2**31 - 1), st.integers(1, 40))
def test_permutation_invariance(seed, n):
    r = np.random.default_rng(seed)
    params = init_params(MilConfig(5, 9, 6, 3), seed)
    bag = Bag("s", "p", r.normal(size=(n, 5)), np.arange(2 * n).reshape(n, 2), label=0)
    perm = r.permutation(n)
    shuffled = Bag("s", "p", bag.embeddings[perm], bag.coords[perm], label=0)
    a, b = mil_forward(params, bag), mil_forward(params, shuffled)
    np.testing.assert_allclose(a.logits, b.logits, atol=1e-12, rtol=0)
    np.testing.assert_allclose(np.sort(a.attention, axis=0), np.sort(b.attention, axis=0), atol=1e-15)
    assert abs(mil_loss(params, bag) - mil_loss(params, shuffled)) < 1e-12


@given(st.integers(0, 2**31 - 1), st.integers(1, 1000))
def test_attention_columns_sum_to_one(seed, n):
    r = np.random.default_rng(seed)
    params = init_params(MilConfig(4, 8, 6, 5), seed)
    params = params.replace(w_attn=params.w_attn * 20)  # peaky scores
    out = mil_forward(params, Bag("s", "p", r.normal(size=(n, 4)) * 3, np.arange(2 * n).reshape(n, 2)))
    np.testing.assert_allclose(out.attention.sum(axis=0), 1.0, atol=1e-9)
    assert np.all(out.attention > 0) and np.all(out.attention <= 1)


def test_attention_shift_invariance(rng):
    # adding a per-class constant to every score leaves attention unchanged;
    # a constant score offset is what a bias on the score layer would add
    params = init_params(MilConfig(4, 8, 6, 3), 5)
    bag = make_bag(rng, 9, 4)
    from milgrade.model import _forward  # noqa: PLC0415

    H = bag.embeddings
    _, A, _, (_, _, _, _, G) = _forward(params, H)
    scores = G @ params.w_attn.T
    from milgrade.numerics import softmax

    shifted = softmax(scores + np.array([3.0, -7.0, 100.0]), axis=0)
    np.testing.assert_allclose(shifted, A, atol=1e-14)


def test_descent_step_decreases_loss(rng):
    params, bag = random_instance(11, "rectified", d=8, n=10, k=5, proj=32, attn=16)
    before, grads = mil_loss_and_grad(params, bag)
    updated = {}
    for name in BLOCKS:
        updated[name], _ = adam_step(getattr(params, name), getattr(grads, name), AdamState.zeros_like(getattr(params, name), learning_rate=1e-4))
    assert mil_loss(params.replace(**updated), bag) < before


def test_predict_argmax_and_ties(rng):
    params = init_params(MilConfig(4, 8, 6, 5), 0)
    params = params.replace(W_clf=np.zeros_like(params.W_clf))
    bag = make_bag(rng, 3, 4)
    params = params.replace(b_clf=np.array([0.1, 2.0, 0.3, -1.0, 0.0]))
    assert predict(params, bag)[0] == 1
    params = params.replace(b_clf=np.array([0.0, 1.0, 1.0, 0.0, 0.0]))
    assert predict(params, bag)[0] == 1
    params = params.replace(b_clf=np.zeros(5))
    assert predict(params, bag)[0] == 0


@pytest.mark.parametrize("seed", range(10))
def test_predict_consistent_with_forward(seed):
    r = np.random.default_rng(seed)
    params = init_params(MilConfig(6, 10, 8, 5), seed)
    bag = make_bag(r, int(r.integers(1, 20)), 6)
    cls, logits, attention = predict(params, bag)
    assert cls == int(np.argmax(mil_forward(params, bag).logits))
    np.testing.assert_array_equal(logits, mil_forward(params, bag).logits)


def test_forward_errors(rng):
    params = init_params(MilConfig(6, 8, 4, 3), 0)
    with pytest.raises(DimensionError):
        mil_forward(params, make_bag(rng, 3, 5))
    with pytest.raises(ContractError):
        mil_forward(params, Bag("e", "p", np.zeros((0, 6)), np.zeros((0, 2))))
    with pytest.raises(ContractError):
        mil_loss_and_grad(params, make_bag(rng, 3, 6))


@pytest.mark.parametrize("activation", ACTIVATIONS)
def test_checkpoint_round_trip(tmp_path, rng, activation):
    params = init_params(MilConfig(7, 12, 5, 5, activation), 3)
    params = params.replace(b_clf=rng.normal(size=5))
    path = tmp_path / "m.milp"
    save_params(params, path)
    raw = path.read_bytes()
    assert raw[:4] == b"MILP"
    assert int.from_bytes(raw[4:8], "little") == 1
    loaded = load_params(path)
    assert loaded.config == params.config
    for name in BLOCKS:
        assert getattr(loaded, name).tobytes() == getattr(params, name).tobytes()
    bag = make_bag(rng, 6, 7)
    assert predict(loaded, bag)[0] == predict(params, bag)[0]
    np.testing.assert_array_equal(predict(loaded, bag)[1], predict(params, bag)[1])


def test_checkpoint_layout(tmp_path):
    params = init_params(MilConfig(3, 4, 2, 2, "linear"), 0)
    path = tmp_path / "m.milp"
    save_params(params, path)
    raw = path.read_bytes()
    header = 4 + 5 * 4 + 1
    assert raw[24] == 0  # activation tag: linear
    assert len(raw) == header + 8 * (4 * 3 + 4 + 2 * 4 + 2 * 4 + 2 * 2 + 2 * 4 + 2)
    np.testing.assert_array_equal(np.frombuffer(raw, "<f8", 12, header).reshape(4, 3), params.W_proj)


def test_checkpoint_corruption(tmp_path):
    params = init_params(MilConfig(3, 4, 2, 2), 0)
    path = tmp_path / "m.milp"
    save_params(params, path)
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XILP" + raw[4:])
    with pytest.raises(FormatError):
        load_params(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        load_params(tmp_path / "short")

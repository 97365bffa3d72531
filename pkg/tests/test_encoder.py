import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moaecr import checks
from moaecr import diffcore as dc
from moaecr.diffcore import Tensor
from moaecr.encoder import (ClassTextEmbeddings, DualEncoder, EncoderConfig, class_ce,
                            contrastive_ce, encode_image, image_features, live_score, patchify,
                            similarity_matrix)
from moaecr.errors import ConfigError, DataError
from moaecr.moae import MoAEConfig
from moaecr.training import Adam


def tiny_cfg(**kw):
    return EncoderConfig(image_side=8, patch_side=4, d=8, blocks=1, embed_dim=4,
                         moae=MoAEConfig(d=8, h=2, m=2, s=1), **kw)


def prompts(vectors, scale=1.0):
    txt = ClassTextEmbeddings(len(vectors[0]), np.random.default_rng(0))
    txt.vectors.data[...] = np.asarray(vectors, dtype=float)
    txt.log_scale.data[...] = math.log(scale)
    return txt


# ----------------------------------------------------------------- encode_image

def test_embeddings_have_unit_norm():
    model = DualEncoder(tiny_cfg(), seed=0)
    x = np.random.default_rng(1).standard_normal((5, 1, 8, 8))
    z = encode_image(x, model.image).data
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)


def test_identical_images_identical_embeddings():
    model = DualEncoder(tiny_cfg(), seed=0)
    img = np.random.default_rng(2).standard_normal((1, 1, 8, 8))
    z = encode_image(np.concatenate([img, img]), model.image).data
    np.testing.assert_array_equal(z[0], z[1])


def test_same_seed_same_weights():
    a, b = DualEncoder(tiny_cfg(), seed=5), DualEncoder(tiny_cfg(), seed=5)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)


def test_indivisible_patch_size():
    with pytest.raises(ConfigError):
        EncoderConfig(image_side=10, patch_side=4)
    with pytest.raises(ConfigError):
        patchify(Tensor(np.ones((1, 1, 6, 6))), 4)


def test_wrong_image_shape():
    model = DualEncoder(tiny_cfg(), seed=0)
    with pytest.raises(ConfigError):
        image_features(np.ones((1, 1, 4, 4)), model.image)


def test_patchify_row_major():
    img = np.arange(16.0).reshape(1, 1, 4, 4)
    p = patchify(Tensor(img), 2).data
    np.testing.assert_array_equal(p[0, 0], [0, 1, 4, 5])
    np.testing.assert_array_equal(p[0, 1], [2, 3, 6, 7])
    np.testing.assert_array_equal(p[0, 3], [10, 11, 14, 15])


@pytest.mark.parametrize("name", ["encode_image", "similarity_matrix", "contrastive_ce",
                                  "class_ce"])
def test_gradchecks(name):
    result = checks.run_check(name, cases=5)
    assert result.ok, result.failures


def test_norm_holds_after_optimizer_steps():
    model = DualEncoder(tiny_cfg(), seed=3)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((6, 1, 8, 8))
    y = np.array([0, 1] * 3)
    opt = Adam(model.parameters(), lr=1e-2)
    for _ in range(5):
        opt.zero_grad()
        z = encode_image(x, model.image)
        class_ce(similarity_matrix(z, model.text), y).backward()
        opt.step()
        np.testing.assert_allclose(np.linalg.norm(encode_image(x, model.image).data, axis=1),
                                   1.0, atol=1e-9)


# ----------------------------------------------------------------- similarity

def test_similarity_live_row_scale_one():
    live, fake = np.array([1.0, 0.0, 0.0]), np.array([0.6, 0.8, 0.0])
    s = similarity_matrix(Tensor(live[None]), prompts([live, fake])).data
    np.testing.assert_allclose(s, [[1.0, 0.6]], atol=1e-15)


def test_similarity_orthonormal_fake_row():
    txt = prompts([[1.0, 0.0], [0.0, 1.0]], scale=14.3)
    s = similarity_matrix(Tensor([[0.0, 1.0]]), txt).data
    np.testing.assert_allclose(s, [[0.0, 14.3]], atol=1e-12)


def test_similarity_direct_oracle():
    rng = np.random.default_rng(6)
    img = rng.standard_normal((7, 5))
    img /= np.linalg.norm(img, axis=1, keepdims=True)
    vec = rng.standard_normal((2, 5))
    txt = prompts(vec, scale=14.3)
    expected = np.array([[14.3 * sum(img[i, k] * vec[c, k] for k in range(5))
                          / math.sqrt(sum(v * v for v in vec[c])) for c in range(2)]
                         for i in range(7)])
    np.testing.assert_allclose(similarity_matrix(Tensor(img), txt).data, expected, rtol=0,
                               atol=1e-12)


def test_logit_scale_starts_at_convention():
    assert ClassTextEmbeddings(4, np.random.default_rng(0)).logit_scale.item() == \
        pytest.approx(14.3, rel=1e-14)


def test_live_score_is_margin():
    np.testing.assert_array_equal(live_score(np.array([[3.0, 1.0], [0.0, 2.0]])), [2.0, -2.0])


# ----------------------------------------------------------------- contrastive_ce

def test_contrastive_single_pair_is_zero():
    assert contrastive_ce(Tensor([[3.7]])).item() == 0.0


def test_contrastive_saturated_diagonal():
    s = np.zeros((4, 4))
    np.fill_diagonal(s, 50.0)
    assert contrastive_ce(Tensor(s)).item() < 1e-20


def _ce_direct(s):
    n = s.shape[0]
    total = 0.0
    for i in range(n):
        row = s[i] - s[i].max()
        col = s[:, i] - s[:, i].max()
        total += row[i] - math.log(sum(math.exp(v) for v in row))
        total += col[i] - math.log(sum(math.exp(v) for v in col))
    return -total / (2 * n)


def test_contrastive_random_direct():
    s = np.random.default_rng(7).standard_normal((3, 3)) * 3
    assert abs(contrastive_ce(Tensor(s)).item() - _ce_direct(s)) < 1e-12


def test_contrastive_non_square():
    with pytest.raises(ValueError):
        contrastive_ce(Tensor(np.zeros((2, 3))))


def test_contrastive_decreases_as_diagonal_grows():
    base = np.random.default_rng(8).standard_normal((4, 4))
    vals = []
    for boost in np.linspace(0, 40, 21):
        s = base + boost * np.eye(4)
        vals.append(contrastive_ce(Tensor(s)).item())
    assert all(v >= 0 for v in vals)
    # strictly decreasing until the loss underflows
    assert all(b < a for a, b in zip(vals, vals[1:]) if a > 1e-12)
    assert all(b <= a for a, b in zip(vals, vals[1:]))


# ----------------------------------------------------------------- class_ce

def test_class_ce_confident_live():
    assert class_ce(Tensor([[10.0, -10.0]]), [0]).item() == pytest.approx(0.0, abs=1e-8)


def test_class_ce_uniform_is_ln2():
    assert class_ce(Tensor(np.zeros((3, 2))), [0, 1, 1]).item() == \
        pytest.approx(math.log(2), abs=1e-15)


def test_class_ce_direct():
    rng = np.random.default_rng(9)
    s = rng.standard_normal((10, 2)) * 4
    y = rng.integers(0, 2, 10)
    direct = -np.mean([s[i, y[i]] - math.log(math.exp(s[i, 0]) + math.exp(s[i, 1]))
                       for i in range(10)])
    assert abs(class_ce(Tensor(s), y).item() - direct) < 1e-12


def test_class_ce_label_out_of_range():
    with pytest.raises(DataError):
        class_ce(Tensor(np.zeros((2, 2))), [0, 2])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (6, 2), elements=st.floats(-20, 20)),
       arrays(np.float64, (6, 1), elements=st.floats(-100, 100)))
def test_class_ce_row_shift_invariant(s, shift):
    y = np.array([0, 1, 0, 1, 1, 0])
    a = class_ce(Tensor(s), y).item()
    b = class_ce(Tensor(s + shift), y).item()
    assert abs(a - b) < 1e-9


def test_class_ce_gradient_flows_to_prompts():
    model = DualEncoder(tiny_cfg(), seed=1)
    x = np.random.default_rng(2).standard_normal((4, 1, 8, 8))
    loss = class_ce(similarity_matrix(encode_image(x, model.image), model.text), [0, 1, 0, 1])
    loss.backward()
    assert np.any(model.text.vectors.grad != 0)
    assert model.text.log_scale.grad is not None
    assert np.any(model.image.patch_w.grad != 0)
    assert dc.as_tensor(loss).item() > 0

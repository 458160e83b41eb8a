import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ovo.alignment import AdamW, OptimizerConfig
from ovo.numerics import (AlignmentHead, FusionHead, GradientBuffer, Layer, as_tensor, bilinear_matrix,
                          cosine_matrix, cosine_similarity, finite_difference_check, head_backward,
                          head_forward, load_tensor, multiscale_fuse_forward, save_tensor, softmax, upsample)
from ovo.numerics.functional import row_cosine, row_cosine_backward, weighted_cosine_loss
from ovo.numerics.tensor import TensorFormatError
from ovo.parallel import chunk_bounds, pairwise_sum, pmap
from ovo.scenes import avg_pool

# --- tensor files ------------------------------------------------------------------


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.uint8, np.uint16, np.int32, np.int64])
def test_tensor_round_trip_bit_identical(tmp_path, dtype):
    arr = (np.random.default_rng(0).normal(size=(3, 4, 5)) * 100).astype(dtype)
    save_tensor(tmp_path / "t.json", arr)
    back = load_tensor(tmp_path / "t.json")
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_tensor_manifest_fields(tmp_path):
    save_tensor(tmp_path / "x.json", np.zeros((2, 3), np.float32))
    m = json.loads((tmp_path / "x.json").read_text())
    assert m == {"dtype": "f32", "shape": [2, 3], "layout": "row-major", "endianness": "little", "data": "x.bin"}
    assert (tmp_path / "x.bin").stat().st_size == 24


def test_tensor_payload_is_little_endian_row_major(tmp_path):
    save_tensor(tmp_path / "x.json", np.array([[1, 2], [3, 4]], dtype=np.uint16))
    assert (tmp_path / "x.bin").read_bytes() == bytes([1, 0, 2, 0, 3, 0, 4, 0])


def test_tensor_errors(tmp_path):
    save_tensor(tmp_path / "feat.json", np.zeros((2, 3)))
    with pytest.raises(TensorFormatError, match="'feat'.*shape"):
        load_tensor(tmp_path / "feat.json", expected_shape=(3, 2))
    with pytest.raises(TensorFormatError, match="'labels'"):
        load_tensor(tmp_path / "feat.json", expected_shape=(1,), name="labels")
    raw = (tmp_path / "feat.bin").read_bytes()
    (tmp_path / "feat.bin").write_bytes(raw[:-3])
    with pytest.raises(TensorFormatError, match="payload size mismatch"):
        load_tensor(tmp_path / "feat.json")
    (tmp_path / "feat.bin").unlink()
    with pytest.raises(FileNotFoundError):
        load_tensor(tmp_path / "feat.json")
    with pytest.raises(FileNotFoundError):
        load_tensor(tmp_path / "nothing.json")


def test_as_tensor_validates():
    assert as_tensor([[1, 2]]).dtype == np.float64
    with pytest.raises(ValueError):
        as_tensor([[1.0, math.nan]])
    with pytest.raises(ValueError):
        as_tensor(np.zeros((0, 3)))


# --- cosine / softmax ------------------------------------------------------------------


def test_cosine_examples():
    assert cosine_similarity([1, 0], [1, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 1], [-2, -2]) == pytest.approx(-1.0)
    with pytest.raises(ValueError, match="degenerate feature"):
        cosine_similarity([0, 0], [1, 0])


@given(hnp.arrays(np.float64, (6, 4), elements=st.floats(-10, 10)),
       hnp.arrays(np.float64, (6, 4), elements=st.floats(-10, 10)))
def test_row_cosine_matches_scalar(x, t):
    nx, nt = np.linalg.norm(x, axis=1), np.linalg.norm(t, axis=1)
    if np.any(nx < 1e-3) or np.any(nt < 1e-3):
        return
    cos, _ = row_cosine(x, t)
    for i in range(6):
        assert cos[i] == pytest.approx(cosine_similarity(x[i], t[i]), abs=1e-12)
    cm = cosine_matrix(x, t)
    assert np.allclose(np.diag(cm), cos, atol=1e-12)


def test_weighted_cosine_loss_matches_unfused():
    rng = np.random.default_rng(1)
    x, t, w = rng.normal(size=(9, 5)), rng.normal(size=(9, 5)), rng.random(9)
    loss, g = weighted_cosine_loss(x, t, w)
    cos, cache = row_cosine(x, t)
    assert loss == pytest.approx(float(np.sum(w * (1 - cos))), abs=1e-13)
    assert np.allclose(g, row_cosine_backward(cache, -w), atol=1e-14)
    x[3] = 0
    with pytest.raises(ValueError, match="degenerate feature"):
        weighted_cosine_loss(x, t, w)


def test_softmax_examples():
    assert softmax([0.0, math.log(3.0)]) == pytest.approx([0.25, 0.75], abs=1e-15)
    assert softmax([5.0, 5.0, 5.0]) == pytest.approx([1 / 3] * 3)
    assert softmax([1000.0, 0.0])[0] == 1.0  # max subtraction avoids overflow
    assert softmax([0.0, math.log(3.0)], temperature=0.5) == pytest.approx([0.1, 0.9])
    with pytest.raises(ValueError):
        softmax([])
    with pytest.raises(ValueError):
        softmax([1.0], temperature=0)


# --- heads -----------------------------------------------------------------------------------


def test_head_init_and_identity():
    rng = np.random.default_rng(0)
    h = AlignmentHead.init([4, 8, 3], rng)
    assert h.dims == [4, 8, 3]
    assert [l.activation for l in h.layers] == ["relu", "identity"]
    assert np.all(np.abs(h.layers[0].weight) <= 1 / 2) and np.all(np.abs(h.layers[1].weight) <= 1 / math.sqrt(8))
    x = rng.normal(size=(5, 6))
    assert np.array_equal(AlignmentHead.identity(6)(x), x)
    with pytest.raises(ValueError, match="dimension mismatch"):
        h(x)
    with pytest.raises(ValueError):
        AlignmentHead([Layer(np.zeros((3, 4)), np.zeros(3)), Layer(np.zeros((2, 5)), np.zeros(2))])


def test_head_backward_matches_manual_single_layer():
    rng = np.random.default_rng(2)
    W, b = rng.normal(size=(3, 4)), rng.normal(size=3)
    h = AlignmentHead([Layer(W.copy(), b.copy(), "identity")])
    x, gy = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
    buf, gx = head_backward(h, x, gy)
    assert np.allclose(buf.grads[0], gy.T @ x)
    assert np.allclose(buf.grads[1], gy.sum(0))
    assert np.allclose(gx, gy @ W)
    assert np.allclose(head_forward(h, x), x @ W.T + b)


def test_head_gradients_finite_difference():
    rng = np.random.default_rng(3)
    h = AlignmentHead.init([4, 6, 5, 3], rng)
    x, c = rng.normal(size=(7, 4)), rng.normal(size=(7, 3))

    def lg():
        y, cache = h.forward(x)
        return float(np.sum(y * c)), h.backward(cache, c)[0].grads

    assert finite_difference_check(lg, h.parameters()).passed


def test_relu_subgradient_at_zero_is_zero():
    h = AlignmentHead([Layer(np.eye(2), np.zeros(2), "relu")])
    buf, gx = head_backward(h, np.array([[0.0, 1.0]]), np.array([[1.0, 1.0]]))
    assert np.array_equal(gx, [[0.0, 1.0]])


def test_head_backward_deterministic_across_workers():
    rng = np.random.default_rng(4)
    h = AlignmentHead.init([8, 16, 4], rng)
    x, gy = rng.normal(size=(5000, 8)), rng.normal(size=(5000, 4))  # several row chunks
    a, ga = head_backward(h, x, gy, workers=1)
    b, gb = head_backward(h, x, gy, workers=4)
    assert all(np.array_equal(p, q) for p, q in zip(a.grads, b.grads))
    assert np.array_equal(ga, gb)


def test_head_save_load_bit_identical(tmp_path):
    h = AlignmentHead.init([5, 7, 3], np.random.default_rng(5))
    path = h.save(tmp_path, "head3d")
    back = AlignmentHead.load(path)
    assert all(np.array_equal(p, q) for p, q in zip(h.parameters(), back.parameters()))
    assert json.loads(path.read_text())["dims"] == [5, 7, 3]


def test_gradient_buffer_ops():
    a = GradientBuffer([np.ones(2), np.ones((2, 2))])
    b = (a + a).scale(0.25)
    assert np.array_equal(b.flat(), np.full(6, 0.5))
    b.zero_()
    assert not b.flat().any() and len(b) == 2


# --- fusion head -------------------------------------------------------------------------------


def test_upsample_hand_example():
    x = np.array([[0.0, 1.0], [2.0, 3.0]])[:, :, None]
    expected = np.array([[0, 1 / 3, 2 / 3, 1], [2 / 3, 1, 4 / 3, 5 / 3],
                         [4 / 3, 5 / 3, 2, 7 / 3], [2, 7 / 3, 8 / 3, 3]])
    assert np.allclose(upsample(x, 4, 4)[:, :, 0], expected, atol=1e-15)


@given(st.integers(1, 9), st.integers(1, 17))
def test_bilinear_rows_are_convex_weights(n_in, n_out):
    M = bilinear_matrix(n_in, n_out)
    assert M.shape == (n_out, n_in)
    assert np.allclose(M.sum(1), 1) and np.all(M >= 0)
    if n_in > 1 and n_out > 1:
        assert M[0, 0] == 1 and M[-1, -1] == 1  # corners align


def test_upsample_identity_and_constant():
    x = np.random.default_rng(0).normal(size=(3, 5, 2))
    assert np.allclose(upsample(x, 3, 5), x)
    assert np.allclose(upsample(np.full((2, 3, 1), 7.0), 9, 4), 7.0)


def _pyramid(rng, H, W, C):
    base = rng.normal(size=(H, W, C))
    return [avg_pool(base, 2 ** k) for k in range(5)]


def test_avg_pool_shapes_and_means():
    x = np.arange(5 * 7, dtype=float).reshape(5, 7, 1)
    p = avg_pool(x, 2)
    assert p.shape == (3, 4, 1)
    assert p[0, 0, 0] == np.mean([0, 1, 7, 8])
    assert p[2, 3, 0] == x[4, 6, 0]


def test_fusion_head_shapes_and_gradients():
    rng = np.random.default_rng(6)
    head = FusionHead.init(3, 4, rng, hidden=5, scale_dim=2)
    pyr = _pyramid(rng, 5, 6, 3)
    y = multiscale_fuse_forward(head, pyr, 5, 6)
    assert y.shape == (5, 6, 4)
    c = rng.normal(size=y.shape)

    def lg():
        out, cache = head.forward(pyr, 5, 6)
        return float(np.sum(out * c)), head.backward(cache, c)[0].grads

    assert finite_difference_check(lg, head.parameters()).passed


def test_fusion_head_default_widths():
    head = FusionHead.init(200, 512, np.random.default_rng(0), hidden=16)
    assert [h.dims for h in head.scale_heads] == [[200, 128]] * 5
    assert head.mixer.dims == [640, 16, 512]
    assert [l.activation for l in head.mixer.layers] == ["relu", "identity"]


def test_fusion_head_save_load(tmp_path):
    rng = np.random.default_rng(7)
    head = FusionHead.init(3, 4, rng, hidden=5, scale_dim=2)
    back = FusionHead.load(head.save(tmp_path))
    pyr = _pyramid(rng, 4, 4, 3)
    assert np.array_equal(head(pyr, 4, 4), back(pyr, 4, 4))


def test_fusion_head_rejects_bad_pyramid():
    rng = np.random.default_rng(8)
    head = FusionHead.init(3, 4, rng, hidden=5, scale_dim=2)
    with pytest.raises(ValueError):
        head(_pyramid(rng, 4, 4, 3)[:4], 4, 4)
    with pytest.raises(ValueError):
        head(_pyramid(rng, 4, 4, 2), 4, 4)


# --- gradcheck ---------------------------------------------------------------------------------


def test_gradcheck_detects_wrong_gradient():
    p = np.array([1.0, 2.0])
    good = finite_difference_check(lambda: (float(np.sum(p ** 3)), [3 * p ** 2]), [p])
    bad = finite_difference_check(lambda: (float(np.sum(p ** 3)), [3 * p ** 2 * 1.001]), [p])
    assert good.passed and good.max_rel_error < 1e-7
    assert not bad.passed and bad.failures
    assert np.array_equal(p, [1.0, 2.0])  # restored
    with pytest.raises(ValueError):
        finite_difference_check(lambda: (0.0, [p]), [p], h=0.1)


# --- parallel helpers ---------------------------------------------------------------------------


def test_chunking_and_pmap_order():
    assert chunk_bounds(5, 2) == [(0, 2), (2, 4), (4, 5)]
    assert chunk_bounds(0, 3) == []
    assert pmap(lambda v: v * v, list(range(10)), workers=4) == [v * v for v in range(10)]
    with pytest.raises(ValueError):
        pmap(abs, [1], workers=0)


def test_pairwise_sum_fixed_tree():
    vals = [0.1, 0.2, 0.3, 1e16, -1e16, 0.4, 0.5]
    assert pairwise_sum(vals) == ((0.1 + 0.2) + (0.3 + 1e16)) + ((-1e16 + 0.4) + 0.5)
    with pytest.raises(ValueError):
        pairwise_sum([])


# --- optimizer ----------------------------------------------------------------------------------


def test_adamw_matches_scalar_reference():
    cfg = OptimizerConfig(lr=0.01, weight_decay=0.1)
    p = np.array([1.0, -2.0])
    opt = AdamW([p], cfg)
    ref, m, v = [1.0, -2.0], [0.0, 0.0], [0.0, 0.0]
    rng = np.random.default_rng(0)
    for t in range(1, 6):
        g = rng.normal(size=2)
        opt.step([g])
        for i in range(2):
            ref[i] -= cfg.lr * cfg.weight_decay * ref[i]
            m[i] = 0.9 * m[i] + 0.1 * g[i]
            v[i] = 0.999 * v[i] + 0.001 * g[i] ** 2
            mh, vh = m[i] / (1 - 0.9 ** t), v[i] / (1 - 0.999 ** t)
            ref[i] -= cfg.lr * mh / (math.sqrt(vh) + 1e-8)
    assert p == pytest.approx(ref, abs=1e-14)


def test_adamw_defaults():
    cfg = OptimizerConfig()
    assert (cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps) == (1e-3, 1e-3, 0.9, 0.999, 1e-8)
    p = np.ones(3)
    AdamW([p], OptimizerConfig(lr=0.0)).step([np.ones(3)])
    assert np.array_equal(p, np.ones(3))

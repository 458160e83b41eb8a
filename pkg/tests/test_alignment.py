import numpy as np
import pytest

from ovo.alignment import (AdamW, LossOptions, LossWeights, OptimizerConfig, TrainingBatch, TrainingError,
                           composite_loss, init_heads, loss_pix_pix, loss_vox_pix, loss_vox_text, total_loss,
                           train)
from ovo.numerics import AlignmentHead
from ovo.pipeline import TrainSettings, scene_batch, train_on_scenes
from ovo.scenes import DatasetOracle, SynthConfig, synth_scene
from ovo.verify import LOSSES, check_seed
from ovo.vocab import CategorySchema, EmbeddingBank

SCHEMA = CategorySchema(("a", "b", "c"), frozenset({"c"}))
BANK = EmbeddingBank(("a", "b", "c", "background"), np.eye(4), SCHEMA)


def _batch(feat, teacher=None, conf=None, labels=None):
    feat = np.asarray(feat, dtype=float)
    n = len(feat)
    return TrainingBatch(feat, np.asarray(teacher if teacher is not None else feat, dtype=float),
                         np.asarray(conf if conf is not None else np.ones(n), dtype=float),
                         np.asarray(labels if labels is not None else [1] * n, dtype=np.uint8))


def test_vox_pix_hand_value():
    b = _batch([[1.0, 0.0]], [[0.6, 0.8]], [0.5])
    loss, _ = loss_vox_pix(b, AlignmentHead.identity(2))
    assert loss == pytest.approx(0.2, abs=1e-15)
    aligned = _batch(np.random.default_rng(0).normal(size=(5, 3)))
    assert loss_vox_pix(aligned, AlignmentHead.identity(3))[0] == pytest.approx(0.0, abs=1e-9)


def test_vox_pix_reweight_off_equals_unit_confidence():
    rng = np.random.default_rng(1)
    feat, teach = rng.normal(size=(2, 6, 4))
    head = AlignmentHead.init([4, 4], rng)
    off = loss_vox_pix(_batch(feat, teach, rng.uniform(0, 1, 6)), head, reweight=False)
    ones = loss_vox_pix(_batch(feat, teach, np.ones(6)), head)
    assert off[0] == ones[0]
    assert all(np.array_equal(p, q) for p, q in zip(off[1].grads, ones[1].grads))


def test_vox_text_hand_values():
    ident = AlignmentHead.identity(4)
    # cosines 0.6 (label a) and 1.0 (label b)
    b = _batch([[0.6, 0.8, 0, 0], [0, 1, 0, 0]], labels=[1, 2])
    assert loss_vox_text(b, ident, BANK)[0] == pytest.approx(0.2, abs=1e-15)
    assert loss_vox_text(_batch([[0, 0, 0, 1]], labels=[1]), ident, BANK)[0] == pytest.approx(1.0)
    # background voxels use the background embedding
    assert loss_vox_text(_batch([[0, 0, 0, 2.0]], labels=[SCHEMA.unknown_id]), ident, BANK)[0] == pytest.approx(0)
    with pytest.raises(KeyError):
        loss_vox_text(_batch([[1, 0, 0, 0]], labels=[3]), ident, BANK)  # novel id never trains


def test_pix_pix_hand_values():
    student = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    teacher = np.array([[[0.0, 1.0], [0.0, 3.0]]])
    ident = AlignmentHead.identity(2)
    assert loss_pix_pix(student, teacher, ident)[0] == pytest.approx(1.0)
    assert loss_pix_pix(student, teacher, ident, mean=True)[0] == pytest.approx(0.5)
    assert loss_pix_pix(teacher, teacher, ident)[0] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        loss_pix_pix(student[:, :1], teacher, ident)
    with pytest.raises(ValueError):
        loss_pix_pix(student, np.zeros((1, 2, 3)), ident)


def test_total_loss():
    assert total_loss(1, 1, 1) == pytest.approx(2.1)
    assert total_loss(0, 0, 0) == 0
    assert total_loss(0.3, 0.7, 0.9, LossWeights(0, 0, 1)) == 0.9
    base = total_loss(0.3, 0.7, 0.9)
    assert total_loss(0.3, 1.4, 0.9) - base == pytest.approx(0.7, abs=1e-15)
    with pytest.raises(ValueError):
        LossWeights(-1, 1, 1)


def test_empty_valid_set():
    empty = _batch(np.zeros((0, 4)), labels=[])
    with pytest.raises(ValueError, match="no valid voxels"):
        loss_vox_pix(empty, AlignmentHead.identity(4))
    comps, total, g3, _ = composite_loss(empty, AlignmentHead.identity(4), None, BANK)
    assert total == 0.0 and np.isnan(comps["l_vox_pix"])
    assert all(not g.any() for g in g3.grads)


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    reports = check_seed(seed)
    for loss in LOSSES:
        assert reports[loss].passed, (loss, str(reports[loss]))


def test_corrupted_gradient_is_caught():
    reports = check_seed(0, corrupt=True)
    assert not any(r.passed for r in reports.values())


def test_adamw_matches_scalar_reference():
    cfg = OptimizerConfig(lr=0.1, weight_decay=0.01)
    p = np.array([1.0, -2.0])
    opt = AdamW([p], cfg)
    ref, m, v = [1.0, -2.0], [0.0, 0.0], [0.0, 0.0]
    for t, g in enumerate([[0.5, -1.0], [0.25, 2.0], [-1.0, 0.0]], start=1):
        opt.step([np.array(g)])
        for k in range(2):
            ref[k] *= 1 - 0.1 * 0.01
            m[k] = 0.9 * m[k] + 0.1 * g[k]
            v[k] = 0.999 * v[k] + 0.001 * g[k] ** 2
            ref[k] -= 0.1 * (m[k] / (1 - 0.9 ** t)) / ((v[k] / (1 - 0.999 ** t)) ** 0.5 + 1e-8)
    assert p.tolist() == pytest.approx(ref, rel=1e-14)


SMALL = SynthConfig(grid_dims=(12, 8, 12), image_size=(32, 24), feat_dim=16, embed_dim=16, student_dim=6,
                    objects=(2, 3), object_size=(2, 4), seed=3)


@pytest.fixture(scope="module")
def small_scenes():
    oracle = DatasetOracle(SMALL)
    return [synth_scene(SMALL, i, oracle) for i in range(3)], oracle.bank


def _settings(**kw):
    base = dict(epochs=5, seed=1, fusion_hidden=8, options=LossOptions(pix_mean=True),
                optimizer=OptimizerConfig(lr=1e-2))
    base.update(kw)
    return TrainSettings(**base)


def test_zero_learning_rate_is_flat(small_scenes):
    scenes, bank = small_scenes
    res, _ = train_on_scenes(scenes, bank, _settings(optimizer=OptimizerConfig(lr=0.0)))
    first = {k: v for k, v in res.log[0].items() if k != "epoch"}
    for row in res.log[1:]:
        assert {k: v for k, v in row.items() if k != "epoch"} == first


def test_training_reduces_loss_and_is_deterministic(small_scenes):
    scenes, bank = small_scenes
    s = _settings(epochs=200)
    a, _ = train_on_scenes(scenes, bank, s)
    totals = [r["total"] for r in a.log]
    assert all(y < x for x, y in zip(totals[:10], totals[1:11]))
    assert totals[-1] < 0.1 * totals[0]
    b, _ = train_on_scenes(scenes, bank, s)
    assert a.log_csv() == b.log_csv()


def test_head3d_trajectory_independent_of_2d_head(small_scenes):
    # pix-pix gradients reach only the 2D head, and the optimizer is per-parameter
    scenes, bank = small_scenes
    with2d, _ = train_on_scenes(scenes, bank, _settings(epochs=8))
    without, _ = train_on_scenes(scenes, bank, _settings(epochs=8, use_2d=False))
    assert with2d.head2d is not None and without.head2d is None
    for p, q in zip(with2d.head3d.parameters(), without.head3d.parameters()):
        assert np.array_equal(p, q)
    assert [r["l_vox_pix"] for r in with2d.log] == [r["l_vox_pix"] for r in without.log]


def test_non_finite_loss_names_scene(small_scenes):
    scenes, bank = small_scenes
    b, _ = scene_batch(scenes[0])
    b.feat3d[0, 0] = np.nan
    b.name = "broken_scene"
    h3, _ = init_heads(b.feat3d.shape[1], None, bank.dim, 0)
    with pytest.raises(TrainingError, match="broken_scene"):
        train([b], h3, None, bank)

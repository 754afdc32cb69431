import itertools
import json

import numpy as np
import pytest
import torch
from scipy import stats

from tumorquery.model import ModelConfig, TumorQueryModel, load_checkpoint
from tumorquery.phantom import case_seed, default_phantom_spec, generate_phantom
from tumorquery.taxonomy import TOY_CONFIG, toy_taxonomy
from tumorquery.train import (
    CaseData, CaseSampler, TrainConfig, TrainingDivergedError, augment, sample_patch, train,
)

SMALL = dict(patch=(8, 8, 8), batch_size=2, d=8, channels=(2, 4, 4, 8), steps_per_epoch=10)


@pytest.fixture(scope="module")
def cases():
    t = toy_taxonomy()
    spec = default_phantom_spec(t, dims=(16, 16, 16), tumor_prob=1.0, normal_prob=0.0)
    out = []
    for i in range(3):
        ph = generate_phantom(case_seed(0, i), spec, t)
        out.append(CaseData.build(ph.volume.voxels, ph.labelmap.labels))
    return out


def test_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(patch=(12, 16, 16))
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"lr": 1e-3, "momentum": 0.9})
    cfg = TrainConfig.from_dict(json.loads(json.dumps(TrainConfig().to_dict())))
    assert cfg == TrainConfig()


# ---- sampling -------------------------------------------------------------

def test_full_size_patch_returns_whole_volume(cases):
    c = cases[0]
    v, l, _, start = sample_patch(c, np.random.default_rng(0), c.volume.shape)
    assert start == (0, 0, 0)
    assert np.array_equal(v, c.volume) and np.array_equal(l, c.labels)


def test_patch_larger_than_volume_rejected(cases):
    with pytest.raises(ValueError):
        sample_patch(cases[0], np.random.default_rng(0), (32, 8, 8))


def test_sampling_deterministic(cases):
    a = [sample_patch(cases[0], np.random.default_rng(5), (8, 8, 8))[3] for _ in range(3)]
    assert len(set(a)) == 1


def test_balanced_target_always_in_patch(cases):
    rng = np.random.default_rng(1)
    for _ in range(200):
        _, l, target, _ = sample_patch(cases[1], rng, (8, 8, 8), balanced=True)
        assert (l == target).any()


def test_balanced_class_frequencies():
    labels = np.zeros((16, 16, 16), np.uint8)
    labels[:4] = 1
    labels[6:8, :4] = 2
    labels[12:, 12:, 12:] = 3
    case = CaseData.build(np.zeros(labels.shape, np.float32), labels)
    rng = np.random.default_rng(0)
    counts = np.bincount([sample_patch(case, rng, (8, 8, 8))[2] for _ in range(1000)], minlength=4)[1:]
    # 1000/3 expected per class; +-50 is wider than a 99.9% binomial interval
    assert stats.binom.ppf(0.9995, 1000, 1 / 3) - 1000 / 3 < 50
    assert all(abs(c - 1000 / 3) <= 50 for c in counts), counts


def test_case_sampler_balances_rare_classes():
    common = np.zeros((8, 8, 8), np.uint8)
    common[:4] = 1
    rare = common.copy()
    rare[6:, 6:, 6:] = 2
    cs = [CaseData.build(np.zeros_like(common, np.float32), x) for x in (common, common, common, rare)]
    sampler = CaseSampler(cs, balanced=True)
    rng = np.random.default_rng(0)
    hits = sum(sampler.draw(rng)[1] == 2 for _ in range(2000))
    lo, hi = stats.binom.ppf([0.0005, 0.9995], 2000, 0.5)
    assert lo <= hits <= hi
    plain = CaseSampler(cs, balanced=False)
    assert plain.draw(rng)[1] is None


# ---- augmentation ---------------------------------------------------------

def test_augment_identity_when_off():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(4, 4, 4)).astype(np.float32)
    l = rng.integers(0, 5, (4, 4, 4)).astype(np.uint8)
    v2, l2 = augment(v, l, rng, flip=False, noise_std=0.0)
    assert np.array_equal(v, v2) and np.array_equal(l, l2)


def _loop_flip(a, axes):
    out = np.empty_like(a)
    n = a.shape
    for idx in itertools.product(*[range(s) for s in n]):
        dst = tuple(n[k] - 1 - idx[k] if k in axes else idx[k] for k in range(3))
        out[dst] = a[idx]
    return out


@pytest.mark.parametrize("seed", range(8))
def test_flip_moves_labels_with_volume(seed):
    v = np.arange(64, dtype=np.float32).reshape(4, 4, 4)
    l = np.arange(64, dtype=np.uint8).reshape(4, 4, 4)
    v2, l2 = augment(v, l, np.random.default_rng(seed), flip=True)
    matches = [axes for r in range(4) for axes in itertools.combinations(range(3), r)
               if np.array_equal(l2, _loop_flip(l, axes))]
    assert len(matches) == 1
    assert np.array_equal(v2, _loop_flip(v, matches[0]))


def test_double_flip_is_identity():
    l = np.arange(64, dtype=np.uint8).reshape(4, 4, 4)
    for axes in ((0,), (1,), (2,)):
        assert np.array_equal(_loop_flip(_loop_flip(l, axes), axes), l)


def test_noise_touches_volume_only():
    rng = np.random.default_rng(0)
    v = np.zeros((4, 4, 4), np.float32)
    l = np.arange(64, dtype=np.uint8).reshape(4, 4, 4)
    v2, l2 = augment(v, l, rng, flip=False, noise_std=5.0)
    assert np.array_equal(l, l2)
    assert v2.std() > 1


# ---- training -------------------------------------------------------------

def test_zero_lr_leaves_parameters_unchanged(cases):
    cfg = TrainConfig(lr=0.0, **SMALL)
    ref = TumorQueryModel(cfg.model_config(TOY_CONFIG)).state_dict()
    res = train(cases, cfg, TOY_CONFIG)
    for k, v in res.model.state_dict().items():
        assert torch.equal(v, ref[k]), k


def test_zero_gradient_step_leaves_parameters_unchanged():
    model = TumorQueryModel(ModelConfig(d=8, channels=(2, 4, 4, 8)))
    before = {k: v.clone() for k, v in model.state_dict().items()}
    opt = torch.optim.AdamW(model.parameters(), lr=1e-2, weight_decay=0.0)
    for p in model.parameters():
        p.grad = torch.zeros_like(p)
    opt.step()
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_first_losses_reproducible(cases):
    cfg = TrainConfig(lr=1e-3, **SMALL)
    a = train(cases, cfg, TOY_CONFIG).trace
    b = train(cases, cfg, TOY_CONFIG).trace
    for ra, rb in zip(a[:10], b[:10]):
        assert abs(ra["total"] - rb["total"]) <= 1e-7


def test_outputs_written_and_loadable(cases, tmp_path):
    cfg = TrainConfig(lr=1e-3, **SMALL)
    res = train(cases, cfg, TOY_CONFIG, out_dir=tmp_path)
    lines = (tmp_path / "loss.jsonl").read_text().splitlines()
    assert len(lines) == 10
    rec = json.loads(lines[0])
    assert set(rec) == {"step", "total", "ce_det", "dice_det", "ce_diag", "dice_diag"}
    assert all(np.isfinite(r["total"]) for r in res.trace)
    model, blob = load_checkpoint(res.checkpoint)
    assert blob["digest"] == res.digest
    assert blob["extra"]["train_config"] == cfg.to_dict()


@pytest.mark.parametrize("mode", ["parallel", "plain"])
def test_other_modes_train(cases, mode):
    cfg = TrainConfig(lr=1e-3, mode=mode, **{**SMALL, "steps_per_epoch": 3})
    res = train(cases, cfg, TOY_CONFIG)
    assert res.model.mode == mode and len(res.trace) == 3


def test_non_finite_input_aborts(cases):
    bad = CaseData.build(np.full_like(cases[0].volume, np.nan), cases[0].labels)
    with pytest.raises(TrainingDivergedError):
        train([bad], TrainConfig(**SMALL), TOY_CONFIG)


def test_empty_case_list_rejected():
    with pytest.raises(ValueError):
        train([], TrainConfig(**SMALL), TOY_CONFIG)


def test_single_case_overfits():
    t = toy_taxonomy()
    spec = default_phantom_spec(t, dims=(32, 32, 32), tumor_prob=1.0, normal_prob=0.0)
    ph = generate_phantom(case_seed(0, 0), spec, t)
    case = CaseData.build(ph.volume.voxels, ph.labelmap.labels)
    res = train([case], TrainConfig(patch=(32, 32, 32), steps_per_epoch=200, flip=False), TOY_CONFIG)
    with torch.no_grad():
        p = res.model(torch.from_numpy(case.volume)[None, None]).diag[0].double().numpy()
    scores = []
    for k in t.tumor_ids("diagnosis"):
        g = case.labels == k
        if g.any():
            scores.append((2 * (p[k] * g).sum() + 1) / (p[k].sum() + g.sum() + 1))
    assert scores and np.mean(scores) >= 0.8, scores

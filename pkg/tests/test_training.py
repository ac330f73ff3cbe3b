import math

import pytest
import torch
import torch.nn as nn

from sflowgan.core import TrainingAbort, ValidationError
from sflowgan.datakit import load_paired_dataset, synth_toy_dataset
from sflowgan.training import (
    LOG_FIELDS,
    TrainConfig,
    build_models,
    load_checkpoint,
    save_checkpoint,
    train_cg2real,
)

TINY = dict(
    n_classes=6,
    resolution=(32, 64),
    gen_base=8,
    gen_res=1,
    disc_base=8,
    dned_widths=(4, 4, 8, 8, 8, 8),
    epochs=2,
    warmup_epochs=1,
)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return load_paired_dataset(synth_toy_dataset(root, seed=2, n_samples=3, resolution=(32, 64)))


def test_config_roundtrip_and_validation():
    cfg = TrainConfig(**TINY)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValidationError):
        TrainConfig.from_dict({**cfg.to_dict(), "bogus": 1})
    for bad in ({"epochs": 0}, {"warmup_epochs": 5}, {"num_scales": 0}, {"lambda1": -1},
                {"dned_input": "depth"}, {"alpha": 0}, {"laplacian_kernel": "sobel"}, {"lr": 0}):
        with pytest.raises(ValidationError):
            TrainConfig(**{**TINY, **bad})


def test_two_runs_are_identical(dataset, tmp_path):
    cfg = TrainConfig(**TINY)
    _, rows_a = train_cg2real(cfg, dataset, out_dir=tmp_path / "a")
    _, rows_b = train_cg2real(cfg, dataset, out_dir=tmp_path / "b")
    assert rows_a == rows_b
    assert (tmp_path / "a/logs/loss.csv").read_bytes() == (tmp_path / "b/logs/loss.csv").read_bytes()
    for name in ("generator.pt", "dned.pt", "manifest.json"):
        a = (tmp_path / "a/checkpoints" / name).read_bytes()
        assert a == (tmp_path / "b/checkpoints" / name).read_bytes()


def test_log_rows(dataset, tmp_path):
    cfg = TrainConfig(**TINY)
    models, rows = train_cg2real(cfg, dataset, out_dir=tmp_path)
    assert len(rows) == 6
    assert [r["phase"] for r in rows] == ["A"] * 3 + ["B"] * 3
    assert tuple(rows[0]) == LOG_FIELDS
    for r in rows:
        for k in ("loss_D", "loss_G_adv", "fm", "percep", "dned", "total"):
            assert math.isfinite(r[k]) and r[k] >= 0
    header = (tmp_path / "logs/loss.csv").read_text().splitlines()[0]
    assert header.split(",") == list(LOG_FIELDS)
    assert models.uses_dned


def test_pure_warmup_never_uses_dned(dataset):
    cfg = TrainConfig(**{**TINY, "warmup_epochs": 2})
    models, rows = train_cg2real(cfg, dataset)
    assert {r["phase"] for r in rows} == {"A"}
    assert not models.uses_dned
    e = torch.rand(1, 1, 32, 64)
    assert models.generator_edges(e, e) is e


def test_output_range_after_every_step(dataset):
    seen = []

    def check(step, models):
        with torch.no_grad():
            s = torch.zeros(1, 6, 32, 64)
            s[:, 0] = 1
            out = models.generator(s, torch.rand(1, 1, 32, 64))
        seen.append(step)
        assert out.min() >= -1 and out.max() <= 1

    train_cg2real(TrainConfig(**{**TINY, "max_steps": 4}), dataset, callback=check)
    assert seen == [1, 2, 3, 4]


def test_max_steps(dataset):
    _, rows = train_cg2real(TrainConfig(**{**TINY, "max_steps": 2}), dataset)
    assert len(rows) == 2


def test_multi_scale_and_image_input(dataset):
    cfg = TrainConfig(**{**TINY, "num_scales": 3, "dned_input": "image", "max_steps": 4, "epochs": 2})
    _, rows = train_cg2real(cfg, dataset)
    assert all(math.isfinite(r["total"]) for r in rows)


def test_checkpoint_roundtrip(dataset, tmp_path):
    models, _ = train_cg2real(TrainConfig(**{**TINY, "max_steps": 4}), dataset)
    save_checkpoint(models, tmp_path / "ck")
    loaded = load_checkpoint(tmp_path / "ck")
    assert loaded.config == models.config
    assert loaded.uses_dned == models.uses_dned and loaded.step == models.step
    s = torch.zeros(1, 6, 32, 64)
    s[:, 1] = 1
    e = torch.rand(1, 1, 32, 64)
    models.generator.eval(), loaded.generator.eval()
    with torch.no_grad():
        assert torch.equal(models.generator(s, e), loaded.generator(s, e))
    assert not (tmp_path / "ck.tmp").exists()


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nowhere")


class NaNExtractor(nn.Module):
    def forward(self, x):
        return [x * float("nan")]


def test_divergence_aborts_and_keeps_checkpoint(dataset, tmp_path):
    cfg = TrainConfig(**{**TINY, "checkpoint_every": 1})
    good, _ = train_cg2real(TrainConfig(**{**TINY, "max_steps": 2}), dataset, out_dir=tmp_path)
    before = (tmp_path / "checkpoints/generator.pt").read_bytes()
    with pytest.raises(TrainingAbort) as info:
        train_cg2real(cfg, dataset, out_dir=tmp_path, perceptual=NaNExtractor())
    assert info.value.part == "percep"
    assert (tmp_path / "checkpoints/generator.pt").read_bytes() == before
    assert load_checkpoint(tmp_path / "checkpoints").step == good.step


def test_empty_dataset():
    with pytest.raises(ValidationError):
        train_cg2real(TrainConfig(**TINY), [])


def test_build_models_seeded():
    a, b = build_models(TrainConfig(**TINY)), build_models(TrainConfig(**TINY))
    for p, q in zip(a.generator.parameters(), b.generator.parameters()):
        assert torch.equal(p, q)

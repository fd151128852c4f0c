"""Saliency rollout contracts and embedding export behavior."""

import csv

import numpy as np
import pytest
import torch

from peadapt.data import ClipLoader
from peadapt.host import DualEncoderModel, HostConfig
from peadapt.synthetic import specs_for_dataset
from peadapt.visualize import (
    collect_embeddings,
    export_attention,
    export_embeddings,
    gradient_attention_rollout,
)


def clip_batch(run, index):
    loader = ClipLoader(run.dataset, [index], frames=8, image_size=64,
                        batch_size=1, train=False, seed=0)
    return next(iter(loader.iter_epoch(0)))


def full_loader(run, indices=None):
    return ClipLoader(run.dataset, indices or list(range(len(run.dataset))),
                      frames=8, image_size=64, batch_size=8, train=False, seed=0)


def test_rollout_shape_and_normalization(overfit_run):
    batch = clip_batch(overfit_run, 0)
    maps, pred = gradient_attention_rollout(overfit_run.model, batch.frames[0])
    grid = overfit_run.model.config.image_size // overfit_run.model.config.patch_size
    assert maps.shape == (8, grid, grid)
    assert pred in (0, 1)
    for t in range(8):
        assert maps[t].min() == 0.0
        assert maps[t].max() == 1.0
        assert np.all(maps[t] >= 0.0) and np.all(maps[t] <= 1.0)


def test_rollout_localizes_blob(overfit_run):
    run = overfit_run
    specs = specs_for_dataset(run.root)
    patch = run.model.config.patch_size
    for index in (0, 9, 33, 50):
        batch = clip_batch(run, index)
        maps, _ = gradient_attention_rollout(run.model, batch.frames[0])
        spec = specs[batch.ids[0]]
        inside = 0
        for t in range(maps.shape[0]):
            r, c = np.unravel_index(int(maps[t].argmax()), maps[t].shape)
            center = (c * patch + patch // 2, r * patch + patch // 2)
            x0, y0, x1, y1 = spec.bbox(t, run.model.config.image_size)
            inside += int(x0 <= center[0] <= x1 and y0 <= center[1] <= y1)
        assert inside / maps.shape[0] >= 0.8, batch.ids[0]


def test_rollout_works_at_init():
    model = DualEncoderModel(HostConfig(), seed=0)
    clip = torch.rand(8, 64, 64, 3) * 2 - 1
    maps, pred = gradient_attention_rollout(model, clip)
    assert maps.shape == (8, 4, 4)
    assert np.isfinite(maps).all()


def test_rollout_rejects_batches(overfit_run):
    clips = torch.rand(2, 8, 64, 64, 3)
    with pytest.raises(ValueError, match="single clip"):
        gradient_attention_rollout(overfit_run.model, clips)


def test_export_does_not_mutate_model(overfit_run, tmp_path):
    run = overfit_run
    before = {n: p.detach().clone() for n, p in run.model.named_parameters()}
    batch = clip_batch(run, 3)
    export_attention(run.model, batch.frames[0], tmp_path / "att")
    for n, p in run.model.named_parameters():
        assert torch.equal(p, before[n]), n
        assert p.grad is None


def test_export_attention_files(overfit_run, tmp_path):
    batch = clip_batch(overfit_run, 1)
    out = export_attention(overfit_run.model, batch.frames[0], tmp_path / "att")
    assert len(out["images"]) == 8
    for path in out["images"]:
        assert path.is_file()
    with open(out["csv"], newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["frame", "row", "col", "value"]
    assert len(rows) == 1 + 8 * 4 * 4
    # raw values round-trip the in-memory maps
    maps = out["maps"]
    for row in rows[1:5]:
        f, r, c, v = int(row[0]), int(row[1]), int(row[2]), float(row[3])
        assert abs(maps[f, r, c] - v) < 1e-9


def test_collect_embeddings_counts(overfit_run):
    ids, labels, emb = collect_embeddings(overfit_run.model, full_loader(overfit_run))
    assert len(ids) == len(overfit_run.dataset)
    assert emb.shape == (len(ids), overfit_run.model.config.joint_dim)
    assert set(labels.tolist()) == {0, 1}
    norms = np.linalg.norm(emb, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-5)


def test_export_raw_csv_rows(overfit_run, tmp_path):
    out = tmp_path / "emb.csv"
    coords = export_embeddings(overfit_run.model, full_loader(overfit_run), out, method="raw")
    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == len(overfit_run.dataset) + 1
    assert rows[0][:2] == ["clip_id", "label"]
    assert coords.shape[1] == overfit_run.model.config.joint_dim


def test_tsne_seeded_determinism(overfit_run, tmp_path):
    loader = full_loader(overfit_run, list(range(16)))
    a = export_embeddings(overfit_run.model, loader, tmp_path / "a.csv",
                          method="tsne", seed=3)
    b = export_embeddings(overfit_run.model, loader, tmp_path / "b.csv",
                          method="tsne", seed=3)
    assert a.shape == (16, 2)
    assert np.array_equal(a, b)
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()


def test_two_means_separates_overfit_embeddings(overfit_run):
    from sklearn.cluster import KMeans

    ids, labels, emb = collect_embeddings(overfit_run.model, full_loader(overfit_run))
    km = KMeans(n_clusters=2, random_state=0, n_init=10).fit(emb)
    assign = km.labels_
    # map each cluster to its majority label, then score agreement
    agree = 0
    for cluster in (0, 1):
        members = labels[assign == cluster]
        if len(members):
            agree += int(np.bincount(members).max())
    assert agree / len(labels) >= 0.9


def test_export_embeddings_validates_method(overfit_run, tmp_path):
    with pytest.raises(ValueError, match="raw or tsne"):
        export_embeddings(overfit_run.model, full_loader(overfit_run),
                          tmp_path / "x.csv", method="umap")

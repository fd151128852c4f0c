"""Release gate: eleven end-to-end checks, one test per criterion, so a
verbose run prints one pass/fail line each. Covers the trainable-parameter
budget, identity at initialization, adapter gradient correctness, temporal
contracts, the ablation grid, augmentation statistics, recall metrics, an
overfit smoke test, reproducibility, prompt text fidelity, and the
classification head."""

import math

import numpy as np
import pytest
import torch

from peadapt.adapters import (
    CELL_KINDS,
    SCALE_PLACEMENTS,
    AdapterConfig,
    BottleneckAdapter,
    TemporalDynamicAdapter,
)
from peadapt.data import (
    AugmentConfig,
    ClipLoader,
    apply_fmix,
    apply_mixup,
    choose_augmentation,
    fmix_mask,
)
from peadapt.host import AdapterFlags, DualEncoderModel, HostConfig
from peadapt.metrics import ConfusionMatrix, compute_metrics
from peadapt.prompts import EXPRESSION_CLASSES, PromptConfig, build_au_prompt, class_prompts
from peadapt.evaluation import evaluate
from peadapt.training import TrainingConfig, soft_cross_entropy, train_loop
from peadapt.weights import backbone_state, export_backbone, import_backbone, load_checkpoint


def _randomize(module: torch.nn.Module, seed: int) -> None:
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.uniform_(-0.8, 0.8, generator=g)


def test_c01_trainable_parameter_budget(full_model):
    """Full-size preset: 6M..12M trainable, under 6% of the total."""
    audit = full_model.audit_trainable()
    print(f"trainable parameters: {audit.trainable}")
    assert 6_000_000 <= audit.trainable <= 12_000_000
    assert audit.fraction < 0.06
    again = full_model.audit_trainable()
    assert (again.trainable, again.total) == (audit.trainable, audit.total)


def test_c02_identity_at_initialization(tmp_path):
    """Fresh adapters with prompts off leave both encoders' outputs intact."""
    no_prompt = PromptConfig(learn_mode="none", text_mode="class_name")
    adapted = DualEncoderModel(HostConfig(), prompt_config=no_prompt, seed=0)
    bare = DualEncoderModel(
        HostConfig(),
        flags=AdapterFlags(sha_vision=False, tda=False, sha_text=False, ta=False),
        prompt_config=no_prompt,
        seed=1,
    )
    export_backbone(adapted, tmp_path / "bb.npz")
    import_backbone(bare, tmp_path / "bb.npz")

    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for _ in range(50):
            clip = torch.rand(1, 8, 64, 64, 3, generator=g)
            gap = (adapted.encode_video(clip) - bare.encode_video(clip)).abs().max()
            assert gap < 1e-5
        texts = class_prompts()
        gap = (adapted.encode_text(texts) - bare.encode_text(texts)).abs().max()
        assert gap < 1e-5


def _grads_match_fd(module: torch.nn.Module, loss_fn, tag: str, eps: float = 1e-5) -> None:
    module.zero_grad()
    loss_fn().backward()
    for name, p in module.named_parameters():
        analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        flat = p.data.view(-1)
        fd = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            with torch.no_grad():
                up = loss_fn().item()
            flat[i] = orig - eps
            with torch.no_grad():
                dn = loss_fn().item()
            flat[i] = orig
            fd[i] = (up - dn) / (2 * eps)
        fd = fd.view_as(p)
        err = (analytic - fd).abs()
        tol = 1e-7 + 1e-4 * torch.maximum(analytic.abs(), fd.abs())
        assert bool((err <= tol).all()), (
            f"{tag}: gradient mismatch in {name}, max err {err.max():.3e}"
        )


def test_c03_adapter_gradients_match_finite_differences():
    """Central differences agree with autograd for the bottleneck adapter and
    every temporal cell/scale-placement combination, float64, 20 seeds."""
    for seed in range(20):
        g = torch.Generator().manual_seed(1000 + seed)

        adapter = BottleneckAdapter(AdapterConfig(model_dim=6, reduction=2)).double()
        _randomize(adapter, seed)
        x2 = torch.randn(3, 6, dtype=torch.float64, generator=g)
        w2 = torch.randn(3, 6, dtype=torch.float64, generator=g)
        _grads_match_fd(adapter, lambda: (adapter(x2) * w2).sum(), f"bottleneck/{seed}")

        for cell in CELL_KINDS:
            for placement in SCALE_PLACEMENTS:
                cfg = AdapterConfig(
                    model_dim=6, reduction=2, cell_kind=cell, scale_placement=placement
                )
                tda = TemporalDynamicAdapter(cfg).double()
                _randomize(tda, seed * 31 + 7)
                x3 = torch.randn(2, 3, 6, dtype=torch.float64, generator=g)
                w3 = torch.randn(2, 3, 6, dtype=torch.float64, generator=g)
                _grads_match_fd(
                    tda, lambda: (tda(x3) * w3).sum(), f"{cell}/{placement}/{seed}"
                )


def test_c04_temporal_contracts():
    """Recurrent cells are causal and order sensitive; the stateless cell is
    permutation equivariant. 100 random trials per property."""
    t_frames, d = 6, 8
    for kind in ("rnn", "lstm", "gru"):
        for trial in range(100):
            placement = SCALE_PLACEMENTS[trial % len(SCALE_PLACEMENTS)]
            cfg = AdapterConfig(model_dim=d, reduction=2, cell_kind=kind,
                                scale_placement=placement)
            adapter = TemporalDynamicAdapter(cfg)
            _randomize(adapter, trial)
            g = torch.Generator().manual_seed(trial)
            x = torch.randn(t_frames, d, generator=g)

            cut = 1 + trial % (t_frames - 1)
            y = x.clone()
            y[cut:] += torch.randn(t_frames - cut, d, generator=g)
            assert torch.equal(adapter(x)[:cut], adapter(y)[:cut]), (kind, trial)

            # a rectified scale head can zero the whole output, which would
            # make any permutation comparison vacuous; probe the bare cell
            bare = TemporalDynamicAdapter(
                AdapterConfig(model_dim=d, reduction=2, cell_kind=kind,
                              scale_placement="none")
            )
            _randomize(bare, trial)
            perm = torch.randperm(t_frames, generator=g)
            while torch.equal(perm, torch.arange(t_frames)):
                perm = torch.randperm(t_frames, generator=g)
            assert not torch.allclose(
                bare(x[perm]), bare(x)[perm], atol=1e-6
            ), (kind, trial)

    for trial in range(100):
        cfg = AdapterConfig(model_dim=d, reduction=2, cell_kind="vanilla")
        adapter = TemporalDynamicAdapter(cfg)
        _randomize(adapter, 10_000 + trial)
        g = torch.Generator().manual_seed(10_000 + trial)
        x = torch.randn(t_frames, d, generator=g)
        perm = torch.randperm(t_frames, generator=g)
        assert torch.allclose(adapter(x[perm]), adapter(x)[perm], atol=1e-6), trial


def test_c05_ablation_grid_instantiates_and_trains(overfit_run, tmp_path):
    """Every configuration axis builds a model, trains on synthetic clips, and
    reports the expected trainable-parameter relationships."""
    dataset = overfit_run.dataset
    indices = list(range(8)) + list(range(32, 40))  # 8 clips per class
    cfg = TrainingConfig(epochs=1, warmup_epochs=0, batch_size=8,
                         holdout_fraction=0.1, jitter=False, seed=0)

    def run_row(tag: str, flags=None, prompt=None) -> DualEncoderModel:
        model = DualEncoderModel(
            HostConfig(), flags=flags, prompt_config=prompt, seed=0
        )
        res = train_loop(dataset, cfg, model, tmp_path / tag,
                         train_indices=indices, augment=None)
        assert res.step_losses, tag
        assert all(math.isfinite(l) for l in res.step_losses), tag
        assert res.best_path.is_file() and res.final_path.is_file(), tag
        return model

    combo_counts = {}
    for tag, kwargs in (
        ("ta_only", dict(ta=True, sha_text=False, sha_vision=False, tda=False)),
        ("text_pair", dict(ta=True, sha_text=True, sha_vision=False, tda=False)),
        ("vision_pair", dict(ta=False, sha_text=False, sha_vision=True, tda=True)),
        ("no_tda", dict(ta=True, sha_text=True, sha_vision=True, tda=False)),
        ("all_adapters", dict()),
    ):
        model = run_row(f"combo_{tag}", flags=AdapterFlags(**kwargs))
        combo_counts[tag] = model.audit_trainable().trainable
    assert len(set(combo_counts.values())) == len(combo_counts), combo_counts

    placement_counts = set()
    for placement in SCALE_PLACEMENTS:
        model = run_row(f"scale_{placement}", flags=AdapterFlags(scale_placement=placement))
        placement_counts.add(model.audit_trainable().trainable)
    assert len(placement_counts) == 1, placement_counts

    cell_counts = {}
    for cell in CELL_KINDS:
        model = run_row(f"cell_{cell}", flags=AdapterFlags(cell_kind=cell))
        cell_counts[cell] = model.audit_trainable().trainable
    assert cell_counts["vanilla"] < cell_counts["rnn"] < cell_counts["gru"] < cell_counts["lstm"]

    reduction_counts = []
    for r in (4, 8, 16):
        model = run_row(f"reduction_{r}", flags=AdapterFlags(reduction=r))
        reduction_counts.append(model.audit_trainable().trainable)
    assert reduction_counts[0] > reduction_counts[1] > reduction_counts[2]

    described = tmp_path / "descriptions.txt"
    described.write_text("".join(
        f"{name}\ta face showing {name.lower()}\n" for name in EXPRESSION_CLASSES
    ))
    prompt_counts = {}
    for tag, pc in (
        ("names_fixed", PromptConfig(text_mode="class_name", learn_mode="none")),
        ("names_learned", PromptConfig(text_mode="class_name", learn_mode="text_only")),
        ("described_learned", PromptConfig(text_mode="au_description", learn_mode="text_only")),
        ("file_learned", PromptConfig(text_mode="chatgpt_file", learn_mode="text_only",
                                      description_file=str(described))),
        ("described_coupled", PromptConfig(text_mode="au_description", learn_mode="coupled")),
    ):
        model = run_row(f"prompt_{tag}", prompt=pc)
        prompt_counts[tag] = model.audit_trainable().breakdown.get("prompts", 0)
    assert prompt_counts["names_fixed"] == 0
    text_only = {prompt_counts[k] for k in ("names_learned", "described_learned", "file_learned")}
    assert len(text_only) == 1
    assert prompt_counts["names_fixed"] < prompt_counts["names_learned"]
    assert prompt_counts["described_coupled"] > prompt_counts["described_learned"]


def test_c06_augmentation_schedule_statistics():
    """Branch rates 40/30/30 within 2 points over 10k draws; mixed labels stay
    on the simplex in 1000 of 1000 batches; masks are strictly binary."""
    cfg = AugmentConfig()
    rng = np.random.default_rng(0)
    counts = {"mixup": 0, "fmix": 0, "none": 0}
    for _ in range(10_000):
        counts[choose_augmentation(rng, cfg)] += 1
    assert abs(counts["mixup"] / 10_000 - 0.40) < 0.02
    assert abs(counts["fmix"] / 10_000 - 0.30) < 0.02
    assert abs(counts["none"] / 10_000 - 0.30) < 0.02

    rng = np.random.default_rng(1)
    frames = torch.rand(6, 2, 8, 8, 3)
    eye = torch.eye(3)
    for trial in range(1000):
        labels = eye[torch.from_numpy(rng.integers(0, 3, size=6))]
        if trial % 2 == 0:
            _, mixed, info = apply_mixup(frames, labels, cfg.mixup_alpha, rng)
            assert info["kind"] == "mixup"
        else:
            _, mixed, info = apply_fmix(
                frames, labels, cfg.fmix_alpha, cfg.fmix_decay_power, rng
            )
            assert info["kind"] == "fmix"
        assert float(mixed.min()) >= 0.0
        assert torch.allclose(mixed.sum(dim=-1), torch.ones(6), atol=1e-6)

    rng = np.random.default_rng(2)
    for _ in range(50):
        mask = fmix_mask(16, 16, float(rng.beta(1.0, 1.0)), 3.0, rng)
        assert set(np.unique(mask)) <= {0.0, 1.0}


def test_c07_recall_metrics_match_brute_force():
    """Library UAR/WAR equal a per-sample pure-python computation, exactly."""
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n_classes = int(rng.integers(2, 8))
        n = int(rng.integers(1, 120))
        true = rng.integers(0, n_classes, size=n)
        pred = rng.integers(0, n_classes, size=n)
        cm = ConfusionMatrix.from_predictions(true, pred, n_classes)
        report = compute_metrics(cm)

        hits = [0] * n_classes
        seen = [0] * n_classes
        for t, p in zip(true.tolist(), pred.tolist()):
            seen[t] += 1
            hits[t] += int(t == p)
        recalls = [hits[c] / seen[c] for c in range(n_classes) if seen[c] > 0]
        assert report.uar == sum(recalls) / len(recalls)
        assert report.war == sum(hits) / n

    counts = np.zeros((2, 2), dtype=np.int64)
    counts[0, 0] = 10          # class 0: support 10, all correct
    counts[1, 0] = 90          # class 1: support 90, all wrong
    hand = compute_metrics(ConfusionMatrix(counts))
    assert hand.uar == 0.5
    assert hand.war == pytest.approx(0.1, abs=1e-12)


def test_c08_overfit_smoke(overfit_run):
    """200 training steps memorize the 64-clip synthetic set; the backbone is
    untouched and every trainable tensor received gradient."""
    result = overfit_run.result
    assert len(result.step_losses) == 200
    assert result.log_rows[-1]["war"] >= 0.95

    fresh = DualEncoderModel(HostConfig(), seed=0)
    trained_bb = backbone_state(overfit_run.model)
    for name, tensor in backbone_state(fresh).items():
        assert np.array_equal(trained_bb[name], tensor), name

    trainable = {
        n for n, p in overfit_run.model.named_parameters() if p.requires_grad
    }
    assert result.touched_params == trainable


def test_c09_reproducibility_and_checkpoint_fidelity(overfit_run, tmp_path):
    """Same seed, same data: equal loss curves and metrics. Reloading the
    checkpoint reproduces the eval logits bitwise."""
    dataset = overfit_run.dataset
    indices = list(range(16)) + list(range(32, 48))
    cfg = TrainingConfig(epochs=2, warmup_epochs=1, batch_size=8,
                         holdout_fraction=0.1, jitter=False, seed=0)

    runs = []
    for tag in ("a", "b"):
        model = DualEncoderModel(HostConfig(), seed=0)
        res = train_loop(dataset, cfg, model, tmp_path / tag,
                         train_indices=indices, augment=None)
        runs.append((model, res))
    (model_a, res_a), (_, res_b) = runs
    assert len(res_a.step_losses) == len(res_b.step_losses)
    for la, lb in zip(res_a.step_losses, res_b.step_losses):
        assert abs(la - lb) < 1e-6
    assert res_a.log_rows[-1]["uar"] == res_b.log_rows[-1]["uar"]
    assert res_a.log_rows[-1]["war"] == res_b.log_rows[-1]["war"]

    reloaded = DualEncoderModel(HostConfig(), seed=0)
    load_checkpoint(reloaded, res_a.final_path)
    loader = ClipLoader(dataset, indices, frames=8, image_size=64,
                        batch_size=8, train=False, seed=0)
    assert np.array_equal(
        evaluate(model_a, loader).logits, evaluate(reloaded, loader).logits
    )


def test_c10_prompt_text_fidelity():
    """The seven canonical muscle-movement prompt strings, verbatim."""
    expected = {
        "Happiness": "Cheek Raiser, Lip Corner Puller.",
        "Sadness": "Inner Brow Raiser, Brow Lowerer, Lip Corner Depressor",
        "Neutral": "Relaxed Muscles, Even Eyebrows, Closed Lips, Calm Eyes, Smooth Forehead",
        "Anger": "Brow Lowerer, Upper Lid Raiser, Lid Tightener, Lip Tightener",
        "Surprise": "Inner Brow Raiser, Outer Brow Raiser, Upper Lid Raiser, Jaw Drop",
        "Disgust": "Nose Wrinkler, Lip Corner Depressor, Lower Lip Depressor",
        "Fear": ("Inner Brow Raiser, Outer Brow Raiser, Brow Lowerer, Upper Lid Raiser, "
                 "Lid Tightener, Lip Stretcher, Jaw Drop"),
    }
    assert set(EXPRESSION_CLASSES) == set(expected)
    for name, text in expected.items():
        assert build_au_prompt(name) == text
    assert class_prompts() == [expected[c] for c in EXPRESSION_CLASSES]


def test_c11_classification_head_contracts():
    """Probabilities sum to one, the prediction ignores positive temperature
    rescaling, and uniform logits cost ln C."""
    model = DualEncoderModel(HostConfig(), seed=3)
    g = torch.Generator().manual_seed(3)
    clips = torch.rand(4, 8, 64, 64, 3, generator=g)
    with torch.no_grad():
        probs = model.predict_proba(clips, class_prompts())
        logits = model(clips, class_prompts())
    assert probs.shape == (4, 7)
    assert torch.all(probs >= 0)
    assert torch.allclose(probs.sum(dim=-1), torch.ones(4), atol=1e-6)

    sims = logits * model.temperature.detach()
    base = sims.argmax(dim=-1)
    for tau in (0.01, 0.07, 1.0, 42.0):
        assert torch.equal((sims / tau).argmax(dim=-1), base)

    uniform = soft_cross_entropy(
        torch.zeros(5, 7, dtype=torch.float64), torch.eye(7, dtype=torch.float64)[:5]
    )
    assert abs(float(uniform) - math.log(7)) < 1e-9

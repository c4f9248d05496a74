"""Acceptance criteria run against the full default synthetic world.

The expensive pipeline (synthesis, pretraining, both inversion stages, evaluation) is run once per
session through the command-line driver. Its outputs are cached under a directory keyed by the
source tree and the preset, so a second session with unchanged code reuses them. Set
FACTORLAB_ACCEPTANCE_DIR to move the cache, or delete it to force a fresh run.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from factorlab import cli
from factorlab.diffusion.backbone import Backbone, diffusion_loss, guided_sample
from factorlab.diffusion.schedule import NoiseSchedule, forward_noise
from factorlab.evalsuite.metrics import MetricReport, frechet_distance, project_embeddings
from factorlab.factorspace import CATEGORIES, FactorRegistry, FactorTuple, default_registry, novel_tuples
from factorlab.multitrain import (InversionState, OverlapSampler, TrainConfig, init_specific, init_state,
                                  lr_schedule, stage1_train, stage2_train)
from factorlab.synthworld.dataset import LabeledSample, group_by_dataset, read_samples
from factorlab.synthworld.oracle import oracle_classify
from factorlab.tensorio import file_sha256
from factorlab.textencode import Stage

from conftest import record_criterion, tiny_backbone

pytestmark = pytest.mark.acceptance

ROOT = Path(__file__).resolve().parents[1]

# Desk preset for the default world. Inversion learning rates are raised from the 1e-4 default,
# which barely moves tokens of the toy encoder within ten epochs; see README.
PRESET = {
    "samples": 128,
    "resolution": 32,
    "pretrain_steps": 5000,
    "pretrain_lr": 2e-3,
    "n": 15,
    "s1_epochs": 10,
    "s1_lr": 3e-2,
    "s2_epochs": 10,
    "s2_lr": 1e-2,
    "batch_size": 4,
    "existing_count": 16,
    "novel_count": 32,
    "novel_tuples": 20,
    "seed": 0,
}
BUDGET_SECONDS = 60 * 60
BUDGET_CORES = 8


def _cache_dir() -> Path:
    h = hashlib.sha256(json.dumps(PRESET, sort_keys=True).encode())
    for path in sorted((ROOT / "src" / "factorlab").rglob("*.py")):
        h.update(path.relative_to(ROOT).as_posix().encode())
        h.update(path.read_bytes())
    base = Path(os.environ.get("FACTORLAB_ACCEPTANCE_DIR", ROOT / ".acceptance"))
    return base / h.hexdigest()[:16]


def run(*argv) -> None:
    code = cli.dispatch([str(a) for a in argv])
    assert code == cli.EXIT_OK, f"{argv[0]} exited with {code}"


def _pipeline(root: Path) -> None:
    p = PRESET
    data, ck = root / "data", root / "ck"
    common = ["--data-root", data, "--seed", p["seed"]]
    train = ["--n", p["n"], "--batch-size", p["batch_size"]]
    run("synth", *common, "--preset", "default", "--samples", p["samples"], "--resolution", p["resolution"])
    run("pretrain", *common, "--out", ck / "backbone.ckpt", "--train-steps", p["pretrain_steps"],
        "--lr", p["pretrain_lr"])
    run("invert-s1", *common, *train, "--backbone", ck / "backbone.ckpt", "--out", ck / "stage1.ckpt",
        "--epochs", p["s1_epochs"], "--lr", p["s1_lr"])
    run("invert-s2", *common, *train, "--backbone", ck / "backbone.ckpt", "--state", ck / "stage1.ckpt",
        "--out", ck / "stage2.ckpt", "--epochs", p["s2_epochs"], "--lr", p["s2_lr"])
    shared = [*common, "--backbone", ck / "backbone.ckpt", "--state", ck / "stage2.ckpt",
              "--classifier", root / "classifier.ckpt"]
    run("evaluate", *shared, "--suite", "existing", "--conditioning", "all", "--count", p["existing_count"],
        "--out", root / "eval-existing")
    run("evaluate", *shared, "--suite", "novel", "--conditioning", "text", "--count", p["novel_count"],
        "--max-tuples", p["novel_tuples"], "--out", root / "eval-novel")
    run("project", "--state", ck / "stage2.ckpt", "--out", root / "projection.json")


@pytest.fixture(scope="session")
def full_run():
    root = _cache_dir()
    done = root / "complete.json"
    if not done.exists():
        root.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        _pipeline(root)
        done.write_text(json.dumps({"preset": PRESET, "seconds": time.perf_counter() - start}, indent=1))
    return root


def _report(root: Path, suite: str, mode: str, method: str) -> MetricReport:
    return MetricReport.load(root / f"eval-{suite}" / f"metrics.{suite}.{mode}.{method}.json")


def _pipeline_seconds(root: Path) -> float:
    """Sum of the wall-clock times recorded in every command manifest of the run."""
    return sum(json.loads(m.read_text())["wall_clock_seconds"] for m in root.rglob("manifest.*.json"))


def _fmt(faa: dict) -> str:
    return " ".join(f"{c}={faa[c]:.3f}" for c in (*CATEGORIES, "average"))


# ----------------------------------------------------------------------------- 1. existing combinations

def test_criterion_1_existing_combinations(full_run):
    multi = _report(full_run, "existing", "text", "multi")
    zero = _report(full_run, "existing", "text", "zeroshot")
    gap = multi.faa["average"] - zero.faa["average"]
    seconds = _pipeline_seconds(full_run)
    cores = os.cpu_count() or 1
    # The time budget is defined for an 8-core machine; on fewer cores it is reported, not judged.
    budget_known = cores >= BUDGET_CORES
    ok = gap >= 0.15 and multi.faa["average"] >= 0.85 and (not budget_known or seconds <= BUDGET_SECONDS)
    budget = (f"pipeline {seconds / 60:.1f} min on {cores} core(s)" +
              ("" if budget_known else f", budget needs {BUDGET_CORES} cores: not verified"))
    record_criterion(1, ok, f"MULTI [{_fmt(multi.faa)}] vs zeroshot avg {zero.faa['average']:.3f} "
                            f"(gap {gap:+.3f}); {budget}")
    assert multi.faa["average"] >= 0.85, _fmt(multi.faa)
    assert gap >= 0.15, (_fmt(multi.faa), _fmt(zero.faa))
    if budget_known:
        assert seconds <= BUDGET_SECONDS


# ----------------------------------------------------------------------------- 2. novel combinations

def test_criterion_2_novel_combinations(full_run):
    multi = _report(full_run, "novel", "text", "multi")
    zero = _report(full_run, "novel", "text", "zeroshot")
    registry = FactorRegistry.load(full_run / "data" / "registry.yaml")
    novel = {t.to_string() for t in novel_tuples(registry)}
    tuples = multi.descriptor["tuples"]
    ok = (multi.faa["average"] > zero.faa["average"] and len(tuples) >= 20
          and multi.descriptor["images_per_tuple"] >= 32)
    record_criterion(2, ok, f"{len(tuples)} novel tuples x {multi.descriptor['images_per_tuple']}: "
                            f"MULTI [{_fmt(multi.faa)}] vs zeroshot [{_fmt(zero.faa)}]")
    assert set(tuples) <= novel and len(tuples) >= 20
    assert multi.descriptor["images_per_tuple"] >= 32
    assert multi.sample_count == len(tuples) * multi.descriptor["images_per_tuple"]
    assert set(multi.faa) == {*CATEGORIES, "average"}
    assert multi.faa["average"] > zero.faa["average"]


# ----------------------------------------------------------------------------- 3. spatial control

def test_criterion_3_edge_control_uplift(full_run):
    lines, ok = [], True
    for method in ("multi", "zeroshot"):
        text = _report(full_run, "existing", "text", method).faa
        edge = _report(full_run, "existing", "edge", method).faa
        for c in ("viewpoint", "lens"):
            ok &= edge[c] > text[c]
            lines.append(f"{method}/{c} {text[c]:.3f}->{edge[c]:.3f}")
    record_criterion(3, ok, ", ".join(lines))
    assert ok, lines


# ----------------------------------------------------------------------------- 4. oracle cross-check

def test_criterion_4_oracle_agrees_on_lens(full_run):
    saved = np.load(full_run / "eval-existing" / "images.existing.text.multi.npz")
    images = saved["images"].astype(np.float64) / 255.0
    per = int(saved["per_tuple"])
    intended = [FactorTuple.parse(str(t)) for t in saved["tuples"] for _ in range(per)]
    confident = agree = 0
    for img, t in zip(images, intended):
        res = oracle_classify(img)
        if res.confident["lens"]:
            confident += 1
            agree += res.tuple.lens == t.lens
    rate = agree / confident if confident else float("nan")
    record_criterion(4, confident > 0 and rate >= 0.80,
                     f"oracle lens agreement {rate:.3f} on {confident}/{len(images)} confident images")
    assert confident > 0
    assert rate >= 0.80


# ----------------------------------------------------------------------------- 5. gradient isolation

def test_criterion_5_gradient_isolation(full_run, tmp_path):
    ck = full_run / "ck"
    registry = FactorRegistry.load(full_run / "data" / "registry.yaml")
    groups = group_by_dataset(read_samples(full_run / "data"))
    bb = Backbone.load(ck / "backbone.ckpt")
    sha_before = file_sha256(ck / "backbone.ckpt")

    state = init_state(bb, registry, n=PRESET["n"])
    stage1_train(state, bb, registry, groups, TrainConfig(lr=PRESET["s1_lr"], max_steps=100))
    bb.save(tmp_path / "after-s1.ckpt")
    s1_ok = file_sha256(tmp_path / "after-s1.ckpt") == sha_before == file_sha256(ck / "backbone.ckpt")

    violations, steps, logged = [], 0, Counter()
    dataset = registry.datasets[0].id
    previous = {}

    def check(step, k_star, updated, loss):
        nonlocal steps
        now = state.snapshot()
        changed = {k for k in now if k in previous and not torch.equal(now[k], previous[k])}
        if now.keys() != previous.keys() or changed - set(updated):
            violations.append((step, sorted(changed - set(updated))))
        if not all(name.startswith(f"<{k_star}:") and name.endswith(f"@{dataset}>") for name in updated):
            violations.append((step, updated))
        logged[k_star] += 1
        steps += 1
        previous.clear()
        previous.update(now)

    general_before = {k: v.detach().clone() for k, v in state.general.items()}
    init_specific(state, registry, dataset)
    previous.update(state.snapshot())
    stage2_train(state, bb, registry, dataset, groups[dataset],
                 TrainConfig(stage=Stage.S2, lr=PRESET["s2_lr"], epochs=100, max_steps=100), on_step=check)
    general_ok = all(torch.equal(general_before[k], v) for k, v in state.general.items())
    bb.save(tmp_path / "after-s2.ckpt")
    s2_ok = not violations and steps == 100 and general_ok
    s2_ok &= file_sha256(tmp_path / "after-s2.ckpt") == sha_before
    record_criterion(5, s1_ok and s2_ok, f"backbone sha256 unchanged after 100 S1 steps: {s1_ok}; "
                                         f"S2 100 steps, k* counts {dict(logged)}, violations {len(violations)}")
    assert s1_ok
    assert steps == 100 and not violations, violations[:3]
    assert general_ok


# ----------------------------------------------------------------------------- 6. batch sampler

def test_criterion_6_batch_sampler():
    registry = default_registry()
    blank = np.zeros((1, 1, 3), np.float32)
    world = {d.id: [LabeledSample(blank, t, (2,), d.id, i) for i, t in enumerate(d.tuples())]
             for d in registry.datasets}
    sampler = OverlapSampler(registry, world)
    rng = np.random.default_rng(2024)
    counts, bad = Counter(), 0
    for _ in range(10_000):
        b = sampler.sample(4, rng)
        bad += b.fallback or len(set(b.dataset_ids)) < 2 or any(s.tuple[b.category] != b.value for s in b.samples)
        counts[(b.category, b.value)] += 1
    eligible = sorted(sampler.eligible)
    p = chisquare([counts[k] for k in eligible]).pvalue
    ok = bad == 0 and set(counts) <= set(eligible) and p > 0.01
    record_criterion(6, ok, f"10000 batches, {bad} invariant violations, {len(eligible)} eligible pairs, "
                            f"chi-square p={p:.3f}")
    assert bad == 0
    assert p > 0.01


# ----------------------------------------------------------------------------- 7. numerical suite

def _gradient_check() -> float:
    """Worst relative error between analytic directional derivatives and central differences."""
    bb = tiny_backbone(resolution=8)
    g = torch.Generator().manual_seed(0)
    z0 = torch.rand(8, 3, 8, 8, generator=g) * 2 - 1
    t = torch.linspace(0, 249, 8).long()
    eps = torch.randn(8, 3, 8, 8, generator=g)
    cond = bb.text_encoder.encode_words([[5 + i, 6] for i in range(8)]).detach()
    c32 = cond.clone().requires_grad_(True)
    grad32, = torch.autograd.grad(diffusion_loss(bb.denoiser, bb.schedule, z0, c32, t=t, eps=eps), c32)
    den = bb.denoiser.double()
    for prm in den.parameters():
        prm.requires_grad_(True)
    z64, e64, c64 = z0.double(), eps.double(), cond.double()

    def loss(c=c64):
        return diffusion_loss(den, bb.schedule, z64, c, t=t, eps=e64)

    worst = 0.0
    gen = torch.Generator().manual_seed(1)
    for _ in range(3):
        d = torch.randn(cond.shape, generator=gen, dtype=torch.float64)
        d /= d.norm()
        with torch.no_grad():
            fd = float((loss(c64 + 1e-2 * d) - loss(c64 - 1e-2 * d)) / 2e-2)
        worst = max(worst, abs(float((grad32.double() * d).sum()) - fd) / abs(fd))
    grads = torch.autograd.grad(loss(), list(den.parameters()))
    for p, gr in zip(den.parameters(), grads):
        d = torch.randn(p.shape, generator=gen, dtype=torch.float64)
        d /= d.norm()
        base = p.detach().clone()
        with torch.no_grad():
            p.copy_(base + 1e-4 * d)
            up = loss()
            p.copy_(base - 1e-4 * d)
            down = loss()
            p.copy_(base)
        fd = float((up - down) / 2e-4)
        worst = max(worst, abs(float((gr * d).sum()) - fd) / max(abs(fd), 1e-9))
    return worst


def _guidance_exact() -> bool:
    bb = tiny_backbone()
    cond = bb.text_encoder.encode_words([[5, 6], [7]]).detach()
    null = bb.text_encoder.null_conditioning().detach()
    kw = dict(steps=5, seed=3, resolution=16)
    one = guided_sample(bb.denoiser, bb.schedule, cond, null, guidance=1.0, **kw)
    cond_only = guided_sample(bb.denoiser, bb.schedule, cond, cond, guidance=0.0, **kw)
    zero = guided_sample(bb.denoiser, bb.schedule, cond, null, guidance=0.0, **kw)
    null_only = guided_sample(bb.denoiser, bb.schedule, null.expand(2, -1, -1), null, guidance=1.0, **kw)
    return torch.equal(one, cond_only) and torch.equal(zero, null_only)


def _variance_error() -> float:
    s = NoiseSchedule.linear()
    worst = 0.0
    for t in (0, 60, 125, 249):
        g = torch.Generator().manual_seed(t)
        z0 = torch.randn(20_000, 3, 2, 2, generator=g, dtype=torch.float64) * 0.6
        eps = torch.randn(z0.shape, generator=g, dtype=torch.float64)
        var = forward_noise(z0, torch.full((len(z0),), t), eps, s).var(0)
        expected = s.alpha_bar[t] * 0.36 + 1 - s.alpha_bar[t]
        worst = max(worst, float((var / expected - 1).abs().max()))
    return worst


def _ffd_checks() -> tuple[float, float]:
    rng = np.random.default_rng(0)
    x = rng.normal(size=(500, 16))
    a = rng.normal(0.0, 1.0, size=200_000)
    b = rng.normal(1.0, 2.0, size=200_000)
    # 1-D closed form: (mu_a - mu_b)^2 + (s_a - s_b)^2 = 1 + 1 = 2
    return frechet_distance(x, x), abs(frechet_distance(a, b) - 2.0)


def _lr_error() -> float:
    cfg = TrainConfig()
    total = 1000
    peak = cfg.lr
    points = {0: 0.0, 50: peak / 2, 100: peak, 550: peak / 2, 1000: 0.0}
    points[325] = peak * 0.5 * (1 + math.cos(math.pi * 0.25))
    return max(abs(lr_schedule(s, total, cfg) - v) for s, v in points.items())


def test_criterion_7_numerical_suite():
    grad_err = _gradient_check()
    guidance = _guidance_exact()
    var_err = _variance_error()
    ffd_self, ffd_1d = _ffd_checks()
    lr_err = _lr_error()
    ok = grad_err <= 1e-3 and guidance and var_err < 0.05 and ffd_self <= 1e-6 and ffd_1d < 0.05 and lr_err <= 1e-9
    record_criterion(7, ok, f"grad rel err {grad_err:.1e}, guidance bit-exact {guidance}, MC var err {var_err:.3f}, "
                            f"FFD(X,X) {ffd_self:.1e}, 1-D FFD err {ffd_1d:.3f}, lr err {lr_err:.1e}")
    assert grad_err <= 1e-3
    assert guidance
    assert var_err < 0.05
    assert ffd_self <= 1e-6 and ffd_1d < 0.05
    assert lr_err <= 1e-9


# ----------------------------------------------------------------------------- 8. embedding geometry

def test_criterion_8_specific_tokens_cluster_with_general(full_run):
    state = InversionState.load(full_run / "ck" / "stage2.ckpt")
    datasets = {k[2] for k in state.specific}
    proj = project_embeddings(state.general, state.specific)
    rate = proj.specific_self_match_rate()
    saved = json.loads((full_run / "projection.json").read_text())
    record_criterion(8, len(datasets) >= 8 and rate >= 0.9,
                     f"{len(proj.nearest_general)} specific tokens over {len(datasets)} datasets, "
                     f"self-match rate {rate:.3f}")
    assert len(datasets) >= 8
    assert saved["specific_self_match_rate"] == rate
    assert rate >= 0.9


# ----------------------------------------------------------------------------- 9. ablation harness

def test_criterion_9_ablation_harness(full_run, tmp_path):
    data, ck = full_run / "data", full_run / "ck"
    common = ["--data-root", data, "--backbone", ck / "backbone.ckpt", "--classifier", full_run / "classifier.ckpt"]
    over = cli.dispatch([str(a) for a in ["ablate", *common, "--ns", "1,5,16", "--out", tmp_path / "over"]])
    over_ok = over == cli.EXIT_PROMPT and not (tmp_path / "over").exists()
    out = tmp_path / "sweep"
    code = cli.dispatch([str(a) for a in ["ablate", *common, "--ns", "1,5,15", "--lr", PRESET["s1_lr"],
                                           "--epochs", 1, "--max-steps", 150, "--count", 4, "--out", out]])
    complete = code == cli.EXIT_OK
    summary = []
    if complete:
        summary = json.loads((out / "ablation.json").read_text())
        complete = [s["n"] for s in summary] == [1, 5, 15]
        complete &= all((out / f"inversion.n{n}.ckpt").exists() and (out / f"ablation.n{n}.json").exists()
                        for n in (1, 5, 15))
        complete &= all(set(s["faa"]) == {*CATEGORIES, "average"} and s["ffd"] is not None for s in summary)
    detail = ", ".join(f"n={s['n']}: FAA {s['faa']['average']:.3f} FFD {s['ffd']:.2f}" for s in summary)
    record_criterion(9, over_ok and complete, f"{detail}; n=16 rejected before work: {over_ok}")
    assert over_ok
    assert complete


# ----------------------------------------------------------------------------- 10. determinism

def _smoke_pipeline(root: Path) -> dict[str, bytes]:
    data, ck = root / "data", root / "ck"
    common = ["--data-root", data, "--seed", 3]
    run("synth", *common, "--preset", "smoke", "--samples", 8, "--resolution", 16)
    run("pretrain", *common, "--out", ck / "bb.ckpt", "--train-steps", 30, "--batch-size", 8, "--widths", "8,16,16")
    run("invert-s1", *common, "--backbone", ck / "bb.ckpt", "--out", ck / "s1.ckpt", "--n", 3, "--epochs", 2,
        "--lr", 1e-2)
    run("invert-s2", *common, "--backbone", ck / "bb.ckpt", "--state", ck / "s1.ckpt", "--out", ck / "s2.ckpt",
        "--n", 3, "--epochs", 1, "--lr", 1e-2)
    run("generate", "lens=fisheye,sensor=thermal,view=drone,domain=real", *common, "--backbone", ck / "bb.ckpt",
        "--state", ck / "s2.ckpt", "--count", 4, "--steps", 10, "--out", root / "gen")
    files = sorted([*ck.glob("*.ckpt"), *(root / "gen").glob("*.png")])
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in files}


def test_criterion_10_determinism(tmp_path):
    a = _smoke_pipeline(tmp_path / "a")
    b = _smoke_pipeline(tmp_path / "b")
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    record_criterion(10, same, f"{len(a)} artifacts compared ({sum(k.endswith('.ckpt') for k in a)} checkpoints, "
                               f"{sum(k.endswith('.png') for k in a)} images), bit-identical: {same}")
    assert len(a) == 7
    assert same

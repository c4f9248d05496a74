"""Command-line driver: synth, pretrain, invert-s1, invert-s2, generate, evaluate, project, report, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml

from . import __version__
from .diffusion.backbone import Backbone, BackboneConfig
from .diffusion.denoiser import ControlChannelError, DenoiserConfig
from .diffusion.pretrain import PretrainConfig, pretrain_backbone
from .evalsuite.classifier import ClassifierConfig, FAAClassifier, train_faa_classifier
from .evalsuite.metrics import (MetricReport, TooFewSamplesError, compute_faa, diversity_score,
                                frechet_feature_distance, project_embeddings, write_montage)
from .factorspace import (FactorRegistry, FactorTuple, Membership, RegistryError, TupleParseError,
                          default_registry, enumerate_full_space, novel_tuples, observed_tuples,
                          smoke_registry, sorted_tuples, validate_tuple)
from .generate import SamplerConfig, generate, scene_requests, GenerationRequest
from .multitrain import (DivergenceError, InversionState, StageError, TrainConfig, append_jsonl, init_state,
                         stage1_train, stage2_train)
from .synthworld.dataset import (build_world, group_by_dataset, load_png, read_samples, render_tuples, save_png,
                                 to_uint8, write_samples)
from .synthworld.edges import extract_edges
from .synthworld.render import RenderConfig
from .tensorio import CheckpointError, config_digest, file_sha256, load_state, save_state
from .textencode import L_MAX, PromptError, PromptOverflowError, Stage

log = logging.getLogger("factorlab")

DATA_ROOT_ENV = "FACTORLAB_DATA_ROOT"

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_INVALID_TUPLE = 3
EXIT_MISSING_FILE = 4
EXIT_CHECKPOINT = 5
EXIT_PROMPT = 6
EXIT_MODULE = 7


class MissingInputError(FileNotFoundError):
    pass


class UsageError(ValueError):
    pass


# ----------------------------------------------------------------------------- manifest

@dataclass
class ExperimentManifest:
    command: str
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    tool_version: str = __version__
    wall_clock_seconds: float = 0.0

    @property
    def config_digest(self) -> str:
        return config_digest(self.config)

    def add_input(self, path) -> None:
        path = Path(path)
        if path.is_file():
            self.inputs[str(path)] = file_sha256(path)

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"manifest.{self.command}.json"
        body = asdict(self)
        body["config_digest"] = self.config_digest
        body["artifacts"] = sorted(str(a) for a in self.artifacts)
        path.write_text(json.dumps(body, indent=1, sort_keys=True), encoding="utf-8")
        return path


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"{what} not found: {path}")
    return path


def _data_root(args) -> Path:
    root = args.data_root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise UsageError(f"no data root: pass --data-root or set {DATA_ROOT_ENV}")
    return Path(root)


def _registry(args) -> FactorRegistry:
    if getattr(args, "registry", None):
        return FactorRegistry.load(_require(args.registry, "registry"))
    path = _data_root(args) / "registry.yaml"
    return FactorRegistry.load(_require(path, "registry"))


def _load_backbone(path) -> Backbone:
    bb = Backbone.load(_require(path, "backbone checkpoint"))
    if not bb.frozen:
        bb.freeze()
    return bb


def _load_state(path, backbone: Backbone) -> InversionState:
    return InversionState.load(_require(path, "inversion checkpoint"), backbone)


def _specific_map(text: str | None) -> dict[str, str]:
    if not text:
        return {}
    out = {}
    for part in text.split(","):
        if "=" not in part:
            raise UsageError(f"bad --specific entry {part!r}; expected category=dataset_id")
        k, v = part.split("=", 1)
        out["viewpoint" if k.strip() == "view" else k.strip()] = v.strip()
    return out


def _train_config(args, stage: Stage) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, stage=stage, seed=args.seed,
                       max_steps=args.max_steps)


def _sampler(args) -> SamplerConfig:
    return SamplerConfig(steps=args.steps, guidance=args.guidance)


# ----------------------------------------------------------------------------- commands

def cmd_synth(args, manifest: ExperimentManifest) -> None:
    root = _data_root(args)
    if args.registry:
        registry = FactorRegistry.load(_require(args.registry, "registry"))
        manifest.add_input(args.registry)
    else:
        registry = (smoke_registry if args.preset == "smoke" else default_registry)()
    if args.samples is not None:
        registry = registry.with_sample_count(args.samples)
    root.mkdir(parents=True, exist_ok=True)
    registry.save(root / "registry.yaml")
    samples = build_world(registry, RenderConfig(args.resolution, args.resolution), seed=args.seed)
    write_samples(root, samples)
    manifest.artifacts += [str(root / "registry.yaml"), str(root / "metadata.jsonl")]
    log.info("wrote %d samples for %d datasets under %s", len(samples), len(registry.datasets), root)


def cmd_pretrain(args, manifest: ExperimentManifest) -> None:
    root = _data_root(args)
    registry = _registry(args)
    samples = read_samples(root)
    manifest.add_input(root / "metadata.jsonl")
    res = samples[0].image.shape[0]
    widths = tuple(int(w) for w in args.widths.split(","))
    cfg = BackboneConfig(resolution=res, denoiser=DenoiserConfig(widths=widths, control=not args.no_control))
    bb, report = pretrain_backbone(samples, cfg, PretrainConfig(steps=args.train_steps, batch_size=args.batch_size,
                                                                lr=args.lr, seed=args.seed))
    sha = bb.save(args.out)
    report["sha256"] = sha
    report["datasets"] = len(registry.datasets)
    Path(args.out).with_suffix(".json").write_text(json.dumps(report, indent=1, sort_keys=True))
    manifest.artifacts += [str(args.out), str(Path(args.out).with_suffix(".json"))]


def cmd_invert_s1(args, manifest: ExperimentManifest) -> None:
    root = _data_root(args)
    registry = _registry(args)
    bb = _load_backbone(args.backbone)
    manifest.add_input(args.backbone)
    samples = read_samples(root)
    train, val = _holdout(samples, args.val_fraction, args.seed)
    state = init_state(bb, registry, n=args.n)
    stage1_train(state, bb, registry, group_by_dataset(train), _train_config(args, Stage.S1), validation=val)
    state.save(args.out)
    log_path = Path(args.out).with_suffix(".jsonl")
    log_path.write_text("")
    for entry in state.log:
        append_jsonl(log_path, entry)
    manifest.artifacts += [str(args.out), str(log_path)]


def _holdout(samples, fraction: float, seed: int):
    rng = np.random.default_rng([seed, 99])
    mask = rng.random(len(samples)) < fraction
    return [s for s, m in zip(samples, mask) if not m], [s for s, m in zip(samples, mask) if m]


def cmd_invert_s2(args, manifest: ExperimentManifest) -> None:
    root = _data_root(args)
    registry = _registry(args)
    bb = _load_backbone(args.backbone)
    state = _load_state(args.state, bb)
    manifest.add_input(args.backbone)
    manifest.add_input(args.state)
    groups = group_by_dataset(read_samples(root))
    targets = args.datasets.split(",") if args.datasets else [d.id for d in registry.datasets]
    for ds in targets:
        if ds not in groups:
            raise RegistryError(f"unknown dataset {ds!r}")
        stage2_train(state, bb, registry, ds, groups[ds], _train_config(args, Stage.S2))
    state.save(args.out)
    log_path = Path(args.out).with_suffix(".jsonl")
    log_path.write_text("")
    for entry in state.log:
        append_jsonl(log_path, entry)
    manifest.artifacts += [str(args.out), str(log_path)]


def cmd_generate(args, manifest: ExperimentManifest) -> None:
    registry = _registry(args)
    t = FactorTuple.parse(args.tuple)
    membership = validate_tuple(t, registry)
    if membership is Membership.INVALID:
        raise TupleParseError(f"{t.to_string()} is not in the factor space")
    bb = _load_backbone(args.backbone)
    manifest.add_input(args.backbone)
    state = None
    if args.method == "multi":
        state = _load_state(_require(args.state, "inversion checkpoint") if args.state else
                            _missing("--state is required for multi generation"), bb)
        manifest.add_input(args.state)
    req = scene_requests([t], args.count, args.seed)
    if args.control_from:
        edges = extract_edges(load_png(_require(args.control_from, "control image")))
        req = GenerationRequest(req.tuples, req.captions, [edges] * args.count)
        manifest.add_input(args.control_from)
    images = generate(bb, req, args.method, args.seed, state, _specific_map(args.specific), _sampler(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, im in enumerate(images):
        path = out / f"{i:04d}.png"
        save_png(path, im)
        manifest.artifacts.append(str(path))
    meta = out / "generation.json"
    meta.write_text(json.dumps({"tuple": t.to_string(), "membership": membership.value, "method": args.method,
                                "count": args.count, "seed": args.seed,
                                "captions": [list(c) for c in req.captions]}, indent=1))
    manifest.artifacts.append(str(meta))


def _missing(message: str):
    raise MissingInputError(message)


def _classifier(args, registry: FactorRegistry, manifest: ExperimentManifest) -> FAAClassifier:
    path = Path(args.classifier)
    if path.exists():
        manifest.add_input(path)
        return FAAClassifier.from_state(load_state(path), registry)
    res = args.resolution
    cfg = RenderConfig(res, res)
    full = enumerate_full_space(registry)
    per = max(1, -(-ClassifierConfig.min_label_count * 2 // len(full)))
    trunk = render_tuples(full, max(per, args.classifier_per_tuple), cfg, seed=args.seed, dataset_id="faa-trunk")
    heads = render_tuples(full, max(per, args.classifier_per_tuple), cfg, seed=args.seed, dataset_id="faa-heads")
    held = render_tuples(full, max(1, args.classifier_per_tuple // 2), cfg, seed=args.seed, dataset_id="faa-heldout")
    clf, report = train_faa_classifier(trunk, heads, held, registry, ClassifierConfig(seed=args.seed))
    path.parent.mkdir(parents=True, exist_ok=True)
    save_state(path, clf.state())
    path.with_suffix(".json").write_text(json.dumps(report, indent=1, sort_keys=True))
    manifest.artifacts += [str(path), str(path.with_suffix(".json"))]
    return clf


def evaluate_suite(bb: Backbone, state: InversionState, clf: FAAClassifier, registry: FactorRegistry,
                   tuples: Sequence[FactorTuple], count: int, seed: int, control: bool,
                   sampler: SamplerConfig = SamplerConfig(), methods=("multi", "zeroshot"),
                   reference: bool = True) -> dict[str, tuple[MetricReport, np.ndarray]]:
    """Generate ``count`` images per tuple with each method on paired scenes and score them."""
    req = scene_requests(tuples, count, seed, control=control and bb.control, resolution=bb.config.resolution)
    if control and not bb.control:
        raise ControlChannelError("edge-conditioned evaluation needs a backbone with a control channel")
    ref = None
    if reference:
        ref = render_tuples(tuples, count, RenderConfig(bb.config.resolution, bb.config.resolution),
                            seed=seed, dataset_id="reference")
        ref = np.stack([s.image for s in ref])
    out = {}
    for method in methods:
        images = generate(bb, req, method, seed, state if method == "multi" else None, sampler=sampler)
        faa = compute_faa(images, req.tuples, clf)
        ffd = None
        if ref is not None:
            try:
                ffd = frechet_feature_distance(images, ref, clf.trunk)
            except TooFewSamplesError:
                ffd = None
        div = diversity_score(images, clf.trunk) if len(images) >= 2 else None
        descriptor = {"method": method, "conditioning": "edge" if control else "text",
                      "tuples": [t.to_string() for t in tuples], "images_per_tuple": count,
                      "guidance": sampler.guidance, "steps": sampler.steps}
        out[method] = (MetricReport(faa, len(images), descriptor, ffd, div), images)
    return out


def cmd_evaluate(args, manifest: ExperimentManifest) -> None:
    registry = _registry(args)
    bb = _load_backbone(args.backbone)
    state = _load_state(args.state, bb)
    manifest.add_input(args.backbone)
    manifest.add_input(args.state)
    args.resolution = bb.config.resolution
    clf = _classifier(args, registry, manifest)
    suites = ["existing", "novel"] if args.suite == "all" else [args.suite]
    modes = ["text", "edge"] if args.conditioning == "all" else [args.conditioning]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for suite in suites:
        pool = sorted_tuples(observed_tuples(registry) if suite == "existing" else novel_tuples(registry), registry)
        if args.max_tuples and len(pool) > args.max_tuples:
            rng = np.random.default_rng([args.seed, 5])
            pool = [pool[i] for i in sorted(rng.choice(len(pool), args.max_tuples, replace=False))]
        for mode in modes:
            results = evaluate_suite(bb, state, clf, registry, pool, args.count, args.seed, mode == "edge", _sampler(args))
            rows = []
            for method, (report, images) in results.items():
                report.descriptor["suite"] = suite
                path = out / f"metrics.{suite}.{mode}.{method}.json"
                report.save(path)
                samples = out / f"images.{suite}.{mode}.{method}.npz"
                np.savez_compressed(samples, images=to_uint8(images),
                                    tuples=np.array(report.descriptor["tuples"]), per_tuple=args.count)
                manifest.artifacts += [str(path), str(samples)]
                rows.append([images[i * args.count] for i in range(min(len(pool), 12))])
            montage = out / f"montage.{suite}.{mode}.png"
            write_montage(montage, rows)
            manifest.artifacts.append(str(montage))


def cmd_project(args, manifest: ExperimentManifest) -> None:
    state = InversionState.load(_require(args.state, "inversion checkpoint"))
    manifest.add_input(args.state)
    proj = project_embeddings(state.general, state.specific)
    Path(args.out).write_text(json.dumps(proj.to_dict(), indent=1, sort_keys=True))
    manifest.artifacts.append(str(args.out))


def cmd_report(args, manifest: ExperimentManifest) -> None:
    src = _require(args.metrics_dir, "metrics directory")
    rows = []
    for path in sorted(Path(src).glob("metrics.*.json")):
        rep = MetricReport.load(path)
        manifest.add_input(path)
        rows.append({"file": path.name, **rep.descriptor, "faa": rep.faa, "ffd": rep.ffd,
                     "diversity": rep.diversity, "samples": rep.sample_count})
    lines = ["| suite | conditioning | method | lens | sensor | viewpoint | domain | avg | FFD | DS |",
             "|---|---|---|---|---|---|---|---|---|---|"]
    for r in rows:
        f = r["faa"]
        lines.append(f"| {r.get('suite', '')} | {r['conditioning']} | {r['method']} | " +
                     " | ".join(f"{f[c]:.3f}" for c in ("lens", "sensor", "viewpoint", "domain", "average")) +
                     f" | {r['ffd'] if r['ffd'] is None else round(r['ffd'], 3)} | "
                     f"{r['diversity'] if r['diversity'] is None else round(r['diversity'], 3)} |")
    Path(args.out).with_suffix(".md").write_text("\n".join(lines) + "\n")
    Path(args.out).with_suffix(".json").write_text(json.dumps(rows, indent=1, sort_keys=True))
    manifest.artifacts += [str(Path(args.out).with_suffix(".md")), str(Path(args.out).with_suffix(".json"))]


def cmd_ablate(args, manifest: ExperimentManifest) -> None:
    """Sweep the number of vectors per factor token; each n runs stage 1 and evaluates observed tuples."""
    ns = [int(x) for x in args.ns.split(",")]
    root = _data_root(args)
    registry = _registry(args)
    bb = _load_backbone(args.backbone)
    manifest.add_input(args.backbone)
    samples = read_samples(root)
    longest = max(len(s.caption) for s in samples)
    for n in ns:
        if 4 * n + longest > L_MAX:
            raise PromptOverflowError(f"n={n}: 4*{n} + {longest} caption tokens = {4 * n + longest} > {L_MAX}")
    args.resolution = bb.config.resolution
    clf = _classifier(args, registry, manifest)
    train, val = _holdout(samples, args.val_fraction, args.seed)
    pool = sorted_tuples(observed_tuples(registry), registry)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for n in ns:
        state = init_state(bb, registry, n=n)
        stage1_train(state, bb, registry, group_by_dataset(train), _train_config(args, Stage.S1), validation=val)
        ckpt = out / f"inversion.n{n}.ckpt"
        state.save(ckpt)
        report, _ = evaluate_suite(bb, state, clf, registry, pool, args.count, args.seed, False, _sampler(args),
                                   methods=("multi",))["multi"]
        report.descriptor["n"] = n
        path = out / f"ablation.n{n}.json"
        report.save(path)
        manifest.artifacts += [str(ckpt), str(path)]
        summary.append({"n": n, "faa": report.faa, "ffd": report.ffd})
    path = out / "ablation.json"
    path.write_text(json.dumps(summary, indent=1, sort_keys=True))
    manifest.artifacts.append(str(path))


# ----------------------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", help="YAML file whose keys override command-line flags")
    p.add_argument("--data-root", help=f"dataset directory (default: ${DATA_ROOT_ENV})")
    p.add_argument("--registry", help="registry YAML (default: <data-root>/registry.yaml)")
    p.add_argument("--manifest-dir", help="where the run manifest is written (default: next to outputs)")
    if seed:
        p.add_argument("--seed", type=int, default=0)


def _training(p, epochs=10, batch=4):
    p.add_argument("--n", type=int, default=15, help="vectors per factor token")
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=batch)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--val-fraction", type=float, default=0.05)


def _sampling(p):
    p.add_argument("--steps", type=int, default=25)
    p.add_argument("--guidance", type=float, default=2.5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="factorlab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render the synthetic datasets of a registry")
    _common(p)
    p.add_argument("--preset", choices=["default", "smoke"], default="default")
    p.add_argument("--samples", type=int, default=None, help="samples per dataset")
    p.add_argument("--resolution", type=int, default=32)

    p = sub.add_parser("pretrain", help="train the frozen backbone")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--train-steps", type=int, default=PretrainConfig.steps)
    p.add_argument("--batch-size", type=int, default=PretrainConfig.batch_size)
    p.add_argument("--lr", type=float, default=PretrainConfig.lr)
    p.add_argument("--widths", default="32,64,64")
    p.add_argument("--no-control", action="store_true", help="omit the edge-control input channel")

    p = sub.add_parser("invert-s1", help="learn general factor tokens")
    _common(p)
    _training(p)
    p.add_argument("--backbone", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("invert-s2", help="learn dataset-specific factor tokens")
    _common(p)
    _training(p)
    p.add_argument("--backbone", required=True)
    p.add_argument("--state", required=True)
    p.add_argument("--datasets", help="comma-separated dataset ids (default: all)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("generate", help="sample images for one factor tuple")
    _common(p)
    _sampling(p)
    p.add_argument("tuple", help="e.g. lens=fisheye,sensor=thermal,view=drone,domain=real")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--backbone", required=True)
    p.add_argument("--state")
    p.add_argument("--method", choices=["multi", "zeroshot"], default="multi")
    p.add_argument("--specific", help="per-category specific tokens, e.g. lens=toy_fisheye,domain=toy_sim")
    p.add_argument("--control-from", help="image whose edges condition sampling")
    p.add_argument("--out", required=True)

    for name, helptext in (("evaluate", "FAA/FFD/DS for MULTI and the zeroshot baseline"),
                           ("ablate", "sweep the number of vectors per token")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _sampling(p)
        p.add_argument("--backbone", required=True)
        p.add_argument("--count", type=int, default=16, help="images per tuple")
        p.add_argument("--classifier", required=True, help="FAA classifier checkpoint (trained and saved if absent)")
        p.add_argument("--classifier-per-tuple", type=int, default=20)
        p.add_argument("--out", required=True)
        if name == "evaluate":
            p.add_argument("--state", required=True)
            p.add_argument("--suite", choices=["existing", "novel", "all"], default="all")
            p.add_argument("--conditioning", choices=["text", "edge", "all"], default="all")
            p.add_argument("--max-tuples", type=int, default=None)
        else:
            _training(p)
            p.add_argument("--ns", default="1,5,15")

    p = sub.add_parser("project", help="PCA projection of the learned token embeddings")
    _common(p, seed=False)
    p.add_argument("--state", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="collect metric files into a table")
    _common(p, seed=False)
    p.add_argument("--metrics-dir", required=True)
    p.add_argument("--out", required=True)
    return parser


COMMANDS = {
    "synth": cmd_synth, "pretrain": cmd_pretrain, "invert-s1": cmd_invert_s1, "invert-s2": cmd_invert_s2,
    "generate": cmd_generate, "evaluate": cmd_evaluate, "project": cmd_project, "report": cmd_report,
    "ablate": cmd_ablate,
}


def _apply_config(args) -> None:
    if not args.config:
        return
    data = yaml.safe_load(_require(args.config, "config file").read_text()) or {}
    if not isinstance(data, dict):
        raise UsageError("config file must hold a mapping of flag names to values")
    for key, value in data.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr) or attr in ("command", "config"):
            raise UsageError(f"config key {key!r} is not a flag of {args.command}")
        setattr(args, attr, value)


def _validate(args) -> None:
    for name in ("n", "epochs", "count", "steps", "train_steps", "resolution", "samples"):
        value = getattr(args, name, None)
        if value is not None and value < (0 if name == "samples" else 1):
            raise UsageError(f"--{name.replace('_', '-')} must be positive")
    if getattr(args, "guidance", 0) < 0:
        raise UsageError("--guidance must be non-negative")
    if getattr(args, "resolution", 32) not in (8, 16, 32, 64):
        raise UsageError("--resolution must be one of 8, 16, 32, 64")
    if getattr(args, "n", None) is not None and 4 * args.n > L_MAX:
        raise PromptOverflowError(f"4*{args.n} factor rows exceed the {L_MAX}-position budget")


def _out_dir(args) -> Path:
    if args.manifest_dir:
        return Path(args.manifest_dir)
    out = Path(getattr(args, "out", None) or getattr(args, "data_root", None) or os.environ.get(DATA_ROOT_ENV, "."))
    return out if out.suffix == "" else out.parent


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        _apply_config(args)
        _validate(args)
        config = {k: v for k, v in sorted(vars(args).items()) if k not in ("verbose", "config")}
        manifest = ExperimentManifest(args.command, config)
        if args.config:
            manifest.add_input(args.config)
        out = getattr(args, "out", None)
        if out and Path(out).suffix:
            Path(out).parent.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        COMMANDS[args.command](args, manifest)
        manifest.wall_clock_seconds = round(time.perf_counter() - start, 3)
        path = manifest.write(_out_dir(args))
        print(path)
        return EXIT_OK
    except (TupleParseError, RegistryError) as exc:
        return _fail(EXIT_INVALID_TUPLE, "invalid tuple or registry", exc)
    except (MissingInputError, FileNotFoundError) as exc:
        return _fail(EXIT_MISSING_FILE, "missing input", exc)
    except CheckpointError as exc:
        return _fail(EXIT_CHECKPOINT, "checkpoint error", exc)
    except (PromptOverflowError, PromptError) as exc:
        return _fail(EXIT_PROMPT, "prompt error", exc)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage error", exc)
    except (ControlChannelError, DivergenceError, StageError, TooFewSamplesError, ValueError, KeyError) as exc:
        return _fail(EXIT_MODULE, "error", exc)


def _fail(code: int, kind: str, exc: BaseException) -> int:
    print(f"factorlab: {kind}: {exc}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()

"""physrefine command line: synth, train, refine, variance, eval.

Every command reads an optional JSON run config (--config); flags given on
the command line override it. Exit codes: 0 success, 2 invalid input,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import metrics
from .denoiser import LaplacePosterior, MLPDenoiser, fit_laplace, load_checkpoint, save_checkpoint
from .diffusion import ShiftSchedule, build_schedule, refine
from .dynamics import RigidBodySet, load_bodies, pseudoforce, residual_metric
from .inertia import read_part_weights
from .kinematics import (DEFAULT_DT, KinematicTree, Trajectory, joint_positions, load_trajectory, load_tree,
                         save_json)
from .training import (AdamW, CorruptionConfig, Normalizer, TrainConfig, fit_input_stats, laplace_inputs,
                       load_dataset, mini_hand, read_loss_csv, save_dataset, synth_dataset, train,
                       write_loss_csv)
from .uncertainty import propagate

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Run configuration


@dataclass
class SynthSection:
    count: int = 256
    T: int = 16
    dt: float = DEFAULT_DT


@dataclass
class ScheduleSection:
    N: int = 4
    kappa: float = 1.0
    eta1: float = 1e-3
    etaN: float = 0.999
    curve_exponent: float = 1.0


@dataclass
class ModelSection:
    window: int = 2
    hidden: list = field(default_factory=lambda: [64, 64])
    embed_dim: int = 8


@dataclass
class VarianceSection:
    S: int = 20
    prior_precision: float = 1.0


@dataclass
class RunConfig:
    seed: int = 0
    jobs: int = 1
    synth: SynthSection = field(default_factory=SynthSection)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=3e-3, epochs=20, lambda2=0.5))
    variance: VarianceSection = field(default_factory=VarianceSection)

    def build_schedule(self) -> ShiftSchedule:
        s = self.schedule
        return build_schedule(s.N, s.eta1, s.etaN, s.kappa, s.curve_exponent)

    def to_json(self) -> dict:
        return asdict(self)


_SECTIONS = {"synth": SynthSection, "corruption": CorruptionConfig, "schedule": ScheduleSection,
             "model": ModelSection, "train": TrainConfig, "variance": VarianceSection}


def _section(cls, doc, name):
    if not isinstance(doc, dict):
        raise ConfigError(f"section '{name}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {', '.join(unknown)}")
    base = asdict(cls()) if cls is not TrainConfig else asdict(RunConfig().train)
    base.update(doc)
    try:
        return cls(**base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def parse_config(doc: dict) -> RunConfig:
    """Validate a run-config document; unknown keys anywhere are rejected."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - {"seed", "jobs", *_SECTIONS})
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig()
    for key in ("seed", "jobs"):
        if key in doc:
            if not isinstance(doc[key], int) or isinstance(doc[key], bool):
                raise ConfigError(f"'{key}' must be an integer")
            setattr(cfg, key, doc[key])
    for name, cls in _SECTIONS.items():
        if name in doc:
            setattr(cfg, name, _section(cls, doc[name], name))
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.jobs < 1:
        raise ConfigError("jobs must be >= 1")
    if cfg.seed < 0:
        raise ConfigError("seed must be nonnegative")
    if cfg.synth.count < 0 or cfg.synth.T < 3 or not cfg.synth.dt > 0:
        raise ConfigError("synth needs count >= 0, T >= 3 and dt > 0")
    if cfg.variance.S < 2 or not cfg.variance.prior_precision > 0:
        raise ConfigError("variance needs S >= 2 and a positive prior precision")
    if cfg.model.window < 1 or cfg.model.embed_dim < 0 or any(int(h) < 1 for h in cfg.model.hidden):
        raise ConfigError("invalid model section")
    if cfg.train.N != cfg.schedule.N:
        raise ConfigError("train.N and schedule.N disagree")
    try:
        cfg.build_schedule()
    except ValueError as exc:
        raise ConfigError(f"invalid schedule: {exc}") from exc


_FLAG_TARGETS = {
    "seed": ("", "seed"), "jobs": ("", "jobs"), "epochs": ("train", "epochs"), "S": ("variance", "S"),
    "kappa": ("schedule", "kappa"), "lambda1": ("train", "lambda1"), "lambda2": ("train", "lambda2"),
    "c": ("train", "c"), "count": ("synth", "count"), "T": ("synth", "T"),
}


def resolve_config(args) -> RunConfig:
    doc = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    doc = json.loads(json.dumps(doc))
    for flag, (section, key) in _FLAG_TARGETS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        target = doc if not section else doc.setdefault(section, {})
        target[key] = value
    if getattr(args, "N", None) is not None:
        doc.setdefault("schedule", {})["N"] = args.N
        doc.setdefault("train", {})["N"] = args.N
    if "train" in doc and "seed" not in doc["train"] and "seed" in doc:
        doc["train"]["seed"] = doc["seed"]
    return parse_config(doc)


# ---------------------------------------------------------------------------
# Helpers


def _map(fn, items, jobs: int):
    """Order-preserving map, optionally across processes."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*items)))


def _seq_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _load_model(path):
    denoiser, extra = load_checkpoint(path)
    try:
        tree = KinematicTree.from_json(extra["tree"])
        bodies = RigidBodySet.from_json(extra["bodies"])
        schedule = ShiftSchedule.from_json(extra["schedule"])
        normalizer = Normalizer.from_json(extra["normalizer"])
    except KeyError as exc:
        raise ConfigError(f"checkpoint lacks '{exc.args[0]}'") from exc
    return denoiser, extra, tree, bodies, schedule, normalizer


def _with_kappa(schedule: ShiftSchedule, kappa) -> ShiftSchedule:
    return schedule if kappa is None else ShiftSchedule(schedule.etas, kappa)


def _inputs(path: Path) -> list[tuple[str, Path]]:
    """(name, file) pairs: a single trajectory file or every observation in a dataset dir."""
    if path.is_dir():
        manifest = json.loads((path / "manifest.json").read_text())
        return [(e["obs"].replace("_obs.json", ""), path / e["obs"]) for e in manifest["sequences"]]
    return [(path.stem, path)]


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(cfg: RunConfig, out_dir) -> int:
    tree, bodies = mini_hand()
    samples = synth_dataset(tree, bodies, cfg.synth.count, cfg.synth.T, cfg.corruption,
                            np.random.default_rng(cfg.seed), cfg.synth.dt)
    save_dataset(samples, out_dir, tree, bodies, cfg.synth.dt, cfg.corruption, cfg.seed)
    return len(samples)


def cmd_train(cfg: RunConfig, data_dir, out_dir, resume=None, log=print) -> dict:
    samples, _ = load_dataset(data_dir)
    if not samples:
        raise ConfigError("dataset is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tree, bodies = samples[0].tree, samples[0].bodies
    history = []
    if resume is not None:
        denoiser, extra, _, _, schedule, normalizer = _load_model(resume)
        optimizer = AdamW(cfg.train.lr, cfg.train.weight_decay)
        optimizer.load_json(extra["optimizer"])
        start = int(extra["epoch"])
        loss_path = Path(resume).parent / "loss.csv"
        if loss_path.exists():
            history = read_loss_csv(loss_path)
        rng = np.random.default_rng([cfg.seed, 1, start])
    else:
        schedule = cfg.build_schedule()
        normalizer = Normalizer.fit(samples)
        m = cfg.model
        denoiser = MLPDenoiser(tree.dim, m.window, tuple(m.hidden), m.embed_dim,
                               rng=np.random.default_rng([cfg.seed, 0]), n_steps=schedule.N)
        fit_input_stats(denoiser, samples, schedule, normalizer, np.random.default_rng([cfg.seed, 2]))
        optimizer, start = None, 0
        rng = np.random.default_rng([cfg.seed, 1, 0])
    on_epoch = (lambda r: log(f"epoch {r['epoch']}: data {r['data']:.4g} geo {r['geo']:.4g} "
                              f"el {r['el']:.4g} total {r['total']:.4g}")) if log else None
    result = train(denoiser, samples, schedule, cfg.train, rng, normalizer, optimizer, start, on_epoch=on_epoch)
    history = history + result.history
    write_loss_csv(history, out / "loss.csv")
    posterior = fit_laplace(denoiser, laplace_inputs(samples, schedule, normalizer,
                                                     np.random.default_rng([cfg.seed, 3])),
                            cfg.variance.prior_precision)
    save_json(posterior.to_json(), out / "laplace.json")
    save_checkpoint(out / "checkpoint.json", denoiser, {
        "tree": tree.to_json(), "bodies": bodies.to_json(), "schedule": schedule.to_json(),
        "normalizer": normalizer.to_json(), "optimizer": result.optimizer.to_json(),
        "epoch": start + cfg.train.epochs, "laplace": posterior.to_json(), "config": cfg.to_json()})
    return {"epochs": start + cfg.train.epochs, "history": history}


def _refine_one(ckpt, kappa, seed, index, src, dst):
    denoiser, _, _, _, schedule, normalizer = _load_model(ckpt)
    schedule = _with_kappa(schedule, kappa)
    traj = load_trajectory(src)
    z = refine(normalizer.normalize(traj.values), denoiser, schedule, _seq_rng(seed, index))
    save_json(Trajectory(normalizer.denormalize(z), traj.dt).to_json(), dst)
    return str(dst)


def cmd_refine(cfg: RunConfig, checkpoint, input_path, out, kappa=None) -> list[str]:
    inputs = _inputs(Path(input_path))
    out = Path(out)
    if Path(input_path).is_dir():
        out.mkdir(parents=True, exist_ok=True)
        dsts = [out / f"{name}_refined.json" for name, _ in inputs]
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        dsts = [out]
    jobs = [(str(checkpoint), kappa, cfg.seed, i, src, dst) for i, ((_, src), dst) in enumerate(zip(inputs, dsts))]
    return _map(_refine_one, jobs, cfg.jobs)


def cmd_variance(cfg: RunConfig, checkpoint, laplace, input_path, out_dir, kappa=None,
                 part_weights=None):
    denoiser, extra, tree, bodies, schedule, normalizer = _load_model(checkpoint)
    schedule = _with_kappa(schedule, kappa)
    doc = json.loads(Path(laplace).read_text()) if laplace else extra.get("laplace")
    if doc is None:
        raise ConfigError("no Laplace posterior given")
    posterior = LaplacePosterior.from_json(doc)
    traj = load_trajectory(input_path)
    report = propagate(traj.values, denoiser, posterior, schedule, cfg.variance.S, np.random.default_rng(cfg.seed),
                       tree=tree, bodies=bodies, dt=traj.dt, normalizer=normalizer, part_weights=part_weights)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "variance.csv")
    report.to_svg(out / "variance.svg")
    return report


def _eval_one(gt_dir, name, gt_file, refined_file):
    manifest = json.loads((Path(gt_dir) / "manifest.json").read_text())
    tree = load_tree(Path(gt_dir) / manifest["tree"])
    bodies = load_bodies(Path(gt_dir) / manifest["bodies"])
    gt = load_trajectory(gt_file)
    ref = load_trajectory(refined_file)
    if ref.values.shape != gt.values.shape:
        raise ConfigError(f"{name}: refined shape {ref.values.shape} differs from ground truth {gt.values.shape}")
    F_gt = pseudoforce(tree, bodies, gt)
    R = residual_metric(tree, bodies, Trajectory(ref.values, gt.dt), F_gt)
    return metrics.evaluate_sequence(joint_positions(tree, ref.values) * metrics.M_TO_MM,
                                     joint_positions(tree, gt.values) * metrics.M_TO_MM, R)


def cmd_eval(cfg: RunConfig, refined_dir, gt_dir, out_dir) -> dict:
    manifest = json.loads((Path(gt_dir) / "manifest.json").read_text())
    names, jobs = [], []
    for e in manifest["sequences"]:
        name = e["gt"].replace("_gt.json", "")
        ref = Path(refined_dir) / f"{name}_refined.json"
        if not ref.exists():
            raise ConfigError(f"missing refined trajectory {ref}")
        names.append(name)
        jobs.append((str(gt_dir), name, Path(gt_dir) / e["gt"], ref))
    rows = _map(_eval_one, jobs, cfg.jobs)
    return metrics.write_report(rows, names, out_dir)


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--out", required=True)

    p = argparse.ArgumentParser(prog="physrefine", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--count", type=int)
    s.add_argument("--T", type=int)

    t = sub.add_parser("train", parents=[common], help="train a denoiser")
    t.add_argument("--data", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    for flag, typ in (("--epochs", int), ("--N", int), ("--kappa", float), ("--lambda1", float),
                      ("--lambda2", float), ("--c", float)):
        t.add_argument(flag, type=typ)

    r = sub.add_parser("refine", parents=[common], help="refine a trajectory or dataset")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--kappa", type=float)

    v = sub.add_parser("variance", parents=[common], help="propagate uncertainty to force variance")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--laplace")
    v.add_argument("--input", required=True)
    v.add_argument("--S", type=int)
    v.add_argument("--kappa", type=float)
    v.add_argument("--part-weights")

    e = sub.add_parser("eval", parents=[common], help="score refined trajectories")
    e.add_argument("--refined", required=True)
    e.add_argument("--gt", required=True)
    return p


def _run(args) -> None:
    if args.command == "train":
        kappa = args.kappa
        args.kappa = None if args.resume else kappa
        cfg = resolve_config(args)
        cmd_train(cfg, args.data, args.out, args.resume)
        return
    kappa = getattr(args, "kappa", None)
    if hasattr(args, "kappa"):
        args.kappa = None  # applied to the stored schedule, not the run config
    cfg = resolve_config(args)
    if args.command == "synth":
        n = cmd_synth(cfg, args.out)
        print(f"wrote {n} sequences to {args.out}")
    elif args.command == "refine":
        for path in cmd_refine(cfg, args.checkpoint, args.input, args.out, kappa):
            print(path)
    elif args.command == "variance":
        weights = None
        if args.part_weights:
            weights = read_part_weights(args.part_weights)
        report = cmd_variance(cfg, args.checkpoint, args.laplace, args.input, args.out, kappa, weights)
        if report.floored:
            print(f"warning: {report.floored} negative variance entries floored at zero", file=sys.stderr)
    elif args.command == "eval":
        print(json.dumps(cmd_eval(cfg, args.refined, args.gt, args.out), indent=2))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _run(args)
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, IndexError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

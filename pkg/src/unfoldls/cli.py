"""Command-line driver.

Every command writes its outputs plus a ``key = value`` manifest recording
each resolved setting and where it came from (flag, config file or default).
Exit codes: 0 success, 1 usage or configuration error, 2 data or file-format
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy.fft
from threadpoolctl import threadpool_limits

from . import io, perfusion, simulate as sim, unfolded as uf
from .data import CoilSensitivities, ImageSequence, KSpaceDataset, NumericalError
from .metrics import mae, mae_loss
from .operators import EncodingOperator
from .solver import Problem, SolveConfig, StepSizeError, cpa_iterate, grid_search

log = logging.getLogger("unfoldls")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "simulate": {"nx": 32, "ny": 32, "nt": 64, "ncoils": 4, "spokes_per_frame": 8,
                 "decimation": 16, "noise_sigma": 1e-3, "n_sequences": 1,
                 "signal_mode": "linear"},
    "solver": {"lambda_l": 0.0234, "lambda_s": 1.6e-5, "iters": 100},
    "train": {"mode": "soft", "tied": False, "layers": 100, "lambda_l": 0.0234,
              "lambda_s": 1.6e-5, "epochs": 200, "learning_rate": 2e-4, "loss_fraction": 0.15,
              "batch_size": 1, "lr_scale": "absolute", "slope_lr_factor": 1.0,
              "backend": "exact"},
    "grid": {"lambda_l_grid": "0.01,0.03,0.1", "lambda_s_grid": "0.003,0.01,0.03"},
}

TABLE1_HEADER = ["experiment", "activation", "tied", "layers", "trained_parameters",
                 "init_lambda_L", "init_lambda_S", "seed", "train_loss", "test_mae"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- settings ---------------------------------------------------------------

def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


class Settings:
    """Resolves ``flag > config file > default`` and remembers the source."""

    def __init__(self, config_path=None):
        self.config = configparser.ConfigParser(inline_comment_prefixes=("#",))
        if config_path is not None:
            if not Path(config_path).is_file():
                raise UsageError(f"config file {config_path} not found")
            try:
                self.config.read(config_path)
            except configparser.Error as exc:
                raise UsageError(f"bad config file: {exc}") from exc
        self.resolved: dict[str, tuple[object, str]] = {}

    def get(self, section: str, key: str, flag=None):
        default = DEFAULTS[section][key]
        kind = type(default)
        if flag is not None:
            value, source = flag, "flag"
        elif self.config.has_option(section, key):
            value, source = self.config.get(section, key), "config"
        else:
            value, source = default, "default"
        try:
            value = _parse_bool(value) if kind is bool else kind(value)
        except ValueError as exc:
            raise UsageError(f"[{section}] {key}: {exc}") from exc
        self.resolved[f"{section}.{key}"] = (value, source)
        return value

    def manifest(self) -> dict:
        out = {}
        for key, (value, source) in self.resolved.items():
            out[key] = repr(value) if isinstance(value, float) else value
            out[f"source.{key}"] = source
        return out


def resolve_seed(flag) -> int:
    """``--seed`` if given, else ``LPS_SEED`` from the environment, else 0."""
    if flag is not None:
        return int(flag)
    env = os.environ.get("LPS_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise UsageError(f"LPS_SEED must be an integer, got {env!r}") from exc


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad number list {text!r}") from exc


# -- previews ---------------------------------------------------------------

def write_pgm(image, path, vmax: float | None = None) -> None:
    """16-bit binary PGM of a non-negative 2-D image scaled to ``vmax``."""
    img = np.asarray(image, dtype=np.float64)
    vmax = float(np.max(img)) if vmax is None else vmax
    scaled = np.zeros(img.shape) if vmax <= 0 else np.clip(img / vmax, 0, 1) * 65535
    pixels = np.round(scaled).astype(">u2")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode()
    Path(path).write_bytes(header + pixels.tobytes())


def write_image_csv(image, path) -> None:
    img = np.asarray(image, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y", "x", "value"])
        for y in range(img.shape[0]):
            for x in range(img.shape[1]):
                w.writerow([y, x, format(img[y, x], ".9g")])


def montage(seq: np.ndarray, frames=None) -> np.ndarray:
    """Magnitudes of selected frames side by side."""
    seq = np.abs(np.asarray(seq))
    nt = seq.shape[0]
    frames = sorted({0, nt // 4, nt // 2, nt - 1}) if frames is None else frames
    return np.concatenate([seq[f] for f in frames], axis=1)


def write_preview(seq, stem: Path) -> None:
    img = montage(seq)
    write_pgm(img, stem.with_suffix(".pgm"))
    write_image_csv(img, stem.with_suffix(".preview.csv"))


# -- stored collections -----------------------------------------------------

@dataclass
class StoredSequence:
    kspace: KSpaceDataset
    gt: ImageSequence
    masks: np.ndarray
    maps: sim.PerfusionMaps
    baseline: np.ndarray


def _seq_dir(root: Path, i: int) -> Path:
    return root / f"seq{i:03d}"


def save_collection(datasets, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    first = datasets[0]
    io.write_array(first.sens.maps, root / "sens.cseq")
    io.write_array(first.times, root / "times.rseq")
    io.write_array(first.aif, root / "aif.rseq")
    for i, ds in enumerate(datasets):
        d = _seq_dir(root, i)
        d.mkdir(exist_ok=True)
        io.write_array(ds.kspace, d / "kspace.cseq")
        io.write_array(ds.ground_truth, d / "gt.cseq")
        io.write_array(ds.masks.astype(np.float64), d / "masks.rseq")
        io.write_array(ds.maps.stack(), d / "maps.rseq")
        io.write_array(ds.baseline, d / "baseline.rseq")
        write_preview(ds.ground_truth.data, d / "gt")


def _read_sens(path) -> CoilSensitivities:
    obj = io.read_array(path)
    return CoilSensitivities(obj.data if isinstance(obj, ImageSequence) else obj)


def _maps_from_stack(stack) -> sim.PerfusionMaps:
    return sim.PerfusionMaps(*[np.asarray(s) for s in stack])


def load_collection(root):
    """Returns ``(sens, times, aif, [StoredSequence, ...])``."""
    root = Path(root)
    if not (root / "sens.cseq").is_file():
        raise FileNotFoundError(f"{root} is not a simulated collection (no sens.cseq)")
    sens = _read_sens(root / "sens.cseq")
    times = io.read_array(root / "times.rseq")
    aif = io.read_array(root / "aif.rseq")
    seqs = []
    i = 0
    while _seq_dir(root, i).is_dir():
        d = _seq_dir(root, i)
        seqs.append(StoredSequence(io.read_array(d / "kspace.cseq"), io.read_array(d / "gt.cseq"),
                                   io.read_array(d / "masks.rseq") > 0.5,
                                   _maps_from_stack(io.read_array(d / "maps.rseq")),
                                   io.read_array(d / "baseline.rseq")))
        i += 1
    if not seqs:
        raise FileNotFoundError(f"{root} contains no sequences")
    return sens, times, aif, seqs


def build_problems(sens, kspaces) -> list[Problem]:
    """One Problem per dataset, sharing the operator while trajectories agree."""
    problems = []
    for ksp in kspaces:
        prev = problems[-1] if problems else None
        if (prev is not None and np.array_equal(prev.op.traj, ksp.traj)
                and np.array_equal(prev.op.binning, ksp.binning)):
            problems.append(prev.with_samples(ksp.samples))
        else:
            problems.append(Problem(EncodingOperator.from_dataset(sens, ksp), ksp.samples))
    return problems


# -- experiments ------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """One row of the experiment matrix.

    ``lambda_L`` / ``lambda_S`` of None mean "start from the grid-searched
    baseline values"; ``init_scale`` multiplies them in that case.
    """

    name: str
    mode: str
    tied: bool
    layers: int = 100
    lambda_L: float | None = None
    lambda_S: float | None = None
    init_scale: tuple[float, float] = (1.0, 1.0)
    train: uf.TrainConfig = field(default_factory=uf.TrainConfig)
    seed: int = 0

    def init_lambdas(self, baseline=None) -> tuple[float, float]:
        if self.lambda_L is not None and self.lambda_S is not None:
            return self.lambda_L, self.lambda_S
        if baseline is None:
            raise ValueError(f"{self.name}: no initial lambdas and no baseline to start from")
        return baseline[0] * self.init_scale[0], baseline[1] * self.init_scale[1]

    def manifest(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name == "train":
                continue
            v = getattr(self, f.name)
            out[f"experiment.{f.name}"] = repr(v)
        for k, v in asdict(self.train).items():
            out[f"experiment.train.{k}"] = repr(v)
        return out

    @classmethod
    def from_manifest(cls, fields_: dict) -> "ExperimentConfig":
        import ast

        top, train = {}, {}
        for key, value in fields_.items():
            if key.startswith("experiment.train."):
                train[key[len("experiment.train."):]] = ast.literal_eval(value)
            elif key.startswith("experiment."):
                top[key[len("experiment."):]] = ast.literal_eval(value)
        return cls(**top, train=uf.TrainConfig(**train))


def table1_configs(train_cfg: uf.TrainConfig = uf.TrainConfig(), layers: int = 100,
                   seed: int = 0) -> list[ExperimentConfig]:
    """The six rows: simple/soft tied and untied from the baseline lambdas, then
    soft and garrote untied from a small-L, large-S starting point."""
    alt = (0.043, 6.25)
    rows = [("1", "simple", True, (1.0, 1.0)), ("2", "simple", False, (1.0, 1.0)),
            ("3", "soft", True, (1.0, 1.0)), ("4", "soft", False, (1.0, 1.0)),
            ("5", "soft", False, alt), ("6", "garrote", False, alt)]
    return [ExperimentConfig(name, mode, tied, layers, init_scale=scale, train=train_cfg,
                             seed=seed) for name, mode, tied, scale in rows]


def run_experiment(cfg: ExperimentConfig, train_set, test_set, baseline=None):
    """Train one configuration; returns ``(model, history, test_mae)``."""
    lam_L, lam_S = cfg.init_lambdas(baseline)
    model = uf.UnfoldedModel(cfg.mode, cfg.layers, cfg.tied, lam_L, lam_S)
    model, history = uf.train(model, train_set, replace(cfg.train, seed=cfg.seed))
    test = uf.evaluate(model, test_set) if test_set else float("nan")
    return model, history, test


def run_table1_matrix(configs, train_set=(), test_set=(), out_path=None, baseline=None):
    """Train every configuration and tabulate training loss and test MAE.

    Returns the rows as dicts; with ``out_path`` also writes them as CSV
    (header only for an empty list).
    """
    rows = []
    for cfg in configs:
        lam_L, lam_S = cfg.init_lambdas(baseline)
        model, history, test = run_experiment(cfg, train_set, test_set, baseline)
        rows.append({"experiment": cfg.name, "activation": cfg.mode, "tied": cfg.tied,
                     "layers": cfg.layers, "trained_parameters": model.n_params,
                     "init_lambda_L": lam_L, "init_lambda_S": lam_S, "seed": cfg.seed,
                     "train_loss": history[-1] if history else float("nan"),
                     "test_mae": test})
        log.info("experiment %s seed %d: test MAE %.6g", cfg.name, cfg.seed, test)
    if out_path is not None:
        write_table(rows, out_path)
    return rows


def write_table(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE1_HEADER, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: format(v, ".17g") if isinstance(v, float) else v
                        for k, v in row.items()})


# -- commands ---------------------------------------------------------------

def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _manifest_for(args, settings: Settings, **extra) -> dict:
    out = {"command": args.command}
    out.update(settings.manifest())
    out.update({k: v for k, v in extra.items()})
    return out


def cmd_simulate(args, settings: Settings) -> int:
    g = lambda key, flag=None: settings.get("simulate", key, flag)  # noqa: E731
    nx, ny, nt = g("nx", args.nx), g("ny", args.ny), g("nt", args.nt)
    n = g("n_sequences", args.n)
    acq = sim.desk_acquisition(nt, ncoils=g("ncoils", args.ncoils),
                               spokes_per_frame=g("spokes_per_frame", args.spokes_per_frame),
                               decimation=g("decimation", args.decimation),
                               noise_sigma=g("noise_sigma", args.noise_sigma),
                               signal_mode=g("signal_mode"), seed=args.seed)
    spec = sim.default_phantom(nx, ny, acq.frame_period, nt)
    if n == 1:
        datasets = [sim.simulate_dataset(spec, acq)]
    else:
        datasets = sim.simulate_collection(n, args.seed, spec, acq)
    out = _out_dir(args.out)
    save_collection(datasets, out)
    man = _manifest_for(args, settings, seed=args.seed)
    for i, ds in enumerate(datasets):
        man.update({f"seq{i:03d}.{k}": v for k, v in ds.manifest().items()})
    io.write_manifest(man, out / "manifest.txt")
    print(f"wrote {n} sequence(s) to {out}")
    return EXIT_OK


def _load_problem(args) -> tuple[Problem, KSpaceDataset]:
    ksp = io.read_array(args.kspace)
    if not isinstance(ksp, KSpaceDataset):
        raise io.ArrayFileError(f"{args.kspace} does not hold a k-space dataset")
    sens = _read_sens(args.sens)
    return Problem(EncodingOperator.from_dataset(sens, ksp), ksp.samples), ksp


def _write_recon(recon: np.ndarray, out, man: dict) -> None:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_array(ImageSequence(recon), out)
    write_preview(recon, out.with_suffix(""))
    io.write_manifest(man, out.with_suffix(".manifest.txt"))


def cmd_reconstruct(args, settings: Settings) -> int:
    if args.mode == "unfolded":
        if args.params is None:
            raise UsageError("--mode unfolded needs --params")
        return cmd_infer(args, settings)
    lam_L = settings.get("solver", "lambda_l", args.lambda_l)
    lam_S = settings.get("solver", "lambda_s", args.lambda_s)
    iters = settings.get("solver", "iters", args.iters)
    problem, _ = _load_problem(args)
    state = cpa_iterate(problem, SolveConfig(lam_L, lam_S, iters))
    _write_recon(state.recon(), args.out,
                 _manifest_for(args, settings, mode="baseline", kspace=args.kspace))
    return EXIT_OK


def cmd_infer(args, settings: Settings) -> int:
    model = uf.load_params(args.params)
    problem, _ = _load_problem(args)
    recon = uf.reconstruct(model, problem).data
    _write_recon(recon, args.out, _manifest_for(args, settings, mode="unfolded",
                                                params=args.params, kspace=args.kspace))
    return EXIT_OK


def _split(seqs, train_count: int, test_count: int):
    if train_count < 1 or train_count + test_count > len(seqs):
        raise UsageError(f"need {train_count}+{test_count} sequences, collection has {len(seqs)}")
    return seqs[:train_count], seqs[train_count:train_count + test_count]


def _pairs(sens, seqs):
    problems = build_problems(sens, [s.kspace for s in seqs])
    return [(p, s.gt.data) for p, s in zip(problems, seqs)]


def cmd_grid_search(args, settings: Settings) -> int:
    sens, _, _, seqs = load_collection(args.data)
    train_seqs, _ = _split(seqs, args.train_count or len(seqs), 0)
    grid_L = _floats(settings.get("grid", "lambda_l_grid", args.lambda_l_grid))
    grid_S = _floats(settings.get("grid", "lambda_s_grid", args.lambda_s_grid))
    iters = settings.get("solver", "iters", args.iters)
    best, scores = grid_search(_pairs(sens, train_seqs), grid_L, grid_S,
                               SolveConfig(1.0, 1.0, iters))
    out = _out_dir(args.out)
    with open(out / "grid.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda_L", "lambda_S", "mean_mae"])
        for (lL, lS), v in scores.items():
            w.writerow([repr(lL), repr(lS), format(v, ".17g")])
    io.write_manifest(_manifest_for(args, settings, best_lambda_L=repr(best[0]),
                                    best_lambda_S=repr(best[1]), data=args.data),
                      out / "manifest.txt")
    print(f"best lambda_L = {best[0]!r}, lambda_S = {best[1]!r}")
    return EXIT_OK


def _train_config(args, settings: Settings, seed: int) -> uf.TrainConfig:
    g = lambda key, flag=None: settings.get("train", key, flag)  # noqa: E731
    return uf.TrainConfig(epochs=g("epochs", args.epochs),
                          learning_rate=g("learning_rate", args.learning_rate),
                          loss_fraction=g("loss_fraction", args.loss_fraction),
                          batch_size=g("batch_size", args.batch_size),
                          lr_scale=g("lr_scale", args.lr_scale),
                          slope_lr_factor=g("slope_lr_factor", args.slope_lr_factor),
                          backend=g("backend", args.backend), seed=seed)


def _experiment(args, settings: Settings) -> ExperimentConfig:
    g = lambda key, flag=None: settings.get("train", key, flag)  # noqa: E731
    return ExperimentConfig(name="cli", mode=g("mode", args.mode), tied=g("tied", args.tied),
                            layers=g("layers", args.layers),
                            lambda_L=g("lambda_l", args.lambda_l),
                            lambda_S=g("lambda_s", args.lambda_s),
                            train=_train_config(args, settings, args.seed), seed=args.seed)


def cmd_train(args, settings: Settings) -> int:
    sens, _, _, seqs = load_collection(args.data)
    train_seqs, _ = _split(seqs, args.train_count or len(seqs), 0)
    exp = _experiment(args, settings)
    model, history, _ = run_experiment(exp, _pairs(sens, train_seqs), ())
    out = _out_dir(args.out)
    uf.save_params(model, out / "params.txt")
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for e, v in enumerate(history):
            w.writerow([e, format(v, ".17g")])
    man = _manifest_for(args, settings, data=args.data, train_count=len(train_seqs))
    man.update(exp.manifest())
    io.write_manifest(man, out / "manifest.txt")
    print(f"final training loss {history[-1]:.6g}" if history else "no epochs run")
    return EXIT_OK


def cmd_fit_perfusion(args, settings: Settings) -> int:
    recon = io.read_array(args.recon)
    if not isinstance(recon, ImageSequence):
        raise io.ArrayFileError(f"{args.recon} does not hold an image sequence")
    root = Path(args.data)
    times = io.read_array(root / "times.rseq")
    aif = io.read_array(root / "aif.rseq")
    d = _seq_dir(root, args.index)
    masks = io.read_array(d / "masks.rseq") > 0.5
    maps = perfusion.fit_maps(recon, masks, aif, times)
    out = _out_dir(args.out)
    io.write_array(maps.stack(), out / "maps.rseq")
    ref = _maps_from_stack(io.read_array(d / "maps.rseq"))
    report = perfusion.roi_relative_error(maps, ref, masks)
    report.to_csv(out / "roi_report.csv")
    io.write_manifest(_manifest_for(args, settings, recon=args.recon, data=args.data,
                                    index=args.index, magnitude_fit="true",
                                    concentration="linear"), out / "manifest.txt")
    for label, name, v in report.rows():
        if name in ("Fp", "Ktrans"):
            print(f"ROI {label} {name}: {v:.2f} %")
    return EXIT_OK


def cmd_evaluate(args, settings: Settings) -> int:
    est = io.read_array(args.est)
    ref = io.read_array(args.ref)
    for path, obj in ((args.est, est), (args.ref, ref)):
        if not isinstance(obj, ImageSequence):
            raise io.ArrayFileError(f"{path} does not hold an image sequence")
    value = mae_loss(est.data, ref.data, args.fraction)
    print(f"mae = {value!r}")
    if args.out is not None:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["est", "ref", "fraction", "mae"])
            w.writerow([args.est, args.ref, repr(args.fraction), format(value, ".17g")])
    return EXIT_OK


def cmd_table1(args, settings: Settings) -> int:
    sens, _, _, seqs = load_collection(args.data)
    train_seqs, test_seqs = _split(seqs, args.train_count, args.test_count)
    train_set, test_set = _pairs(sens, train_seqs), _pairs(sens, test_seqs)
    grid_L = _floats(settings.get("grid", "lambda_l_grid", args.lambda_l_grid))
    grid_S = _floats(settings.get("grid", "lambda_s_grid", args.lambda_s_grid))
    iters = settings.get("solver", "iters", args.iters)
    best, _ = grid_search(train_set, grid_L, grid_S, SolveConfig(1.0, 1.0, iters))
    base = uf.UnfoldedModel("simple", iters, True, *best)
    base_mae = uf.evaluate(base, test_set)
    wanted = set(args.rows.split(",")) if args.rows else None
    configs = []
    for seed in (int(s) for s in args.seeds.split(",")):
        tc = _train_config(args, settings, seed)
        configs += [c for c in table1_configs(tc, settings.get("train", "layers", args.layers), seed)
                    if wanted is None or c.name in wanted]
    rows = run_table1_matrix(configs, train_set, test_set, baseline=best)
    rows.append({"experiment": "baseline", "activation": "simple", "tied": True,
                 "layers": iters, "trained_parameters": 0, "init_lambda_L": best[0],
                 "init_lambda_S": best[1], "seed": -1, "train_loss": float("nan"),
                 "test_mae": base_mae})
    out = _out_dir(args.out)
    write_table(rows, out / "table1.csv")
    io.write_manifest(_manifest_for(args, settings, data=args.data, seeds=args.seeds,
                                    rows=args.rows or "all"), out / "manifest.txt")
    print(f"baseline test MAE {base_mae:.6g}; {len(rows) - 1} trained rows in {out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def _add_train_flags(p) -> None:
    p.add_argument("--mode", choices=("simple", "soft", "garrote"))
    p.add_argument("--tied", type=_parse_bool, default=None)
    p.add_argument("--layers", type=int)
    p.add_argument("--lambda-l", type=float)
    p.add_argument("--lambda-s", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", "--lr", type=float)
    p.add_argument("--loss-fraction", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-scale", choices=("absolute", "relative"))
    p.add_argument("--slope-lr-factor", type=float)
    p.add_argument("--backend", choices=uf.BACKENDS)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file with [section] headers")
    common.add_argument("--seed", type=int, help="defaults to $LPS_SEED, then 0")
    common.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    common.add_argument("--log-level", default="WARNING")

    parser = _Parser(prog="unfoldls", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="simulate phantom k-space data")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="number of sequences")
    for name in ("nx", "ny", "nt", "ncoils", "spokes-per-frame", "decimation"):
        p.add_argument(f"--{name}", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.set_defaults(func=cmd_simulate)

    for name, func, text in (("reconstruct", cmd_reconstruct, "classical L+S reconstruction"),
                             ("infer", cmd_infer, "reconstruct with a trained network")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--kspace", required=True)
        p.add_argument("--sens", required=True)
        p.add_argument("--out", required=True)
        if name == "reconstruct":
            p.add_argument("--mode", choices=("baseline", "unfolded"), default="baseline")
            p.add_argument("--params")
            p.add_argument("--lambda-l", type=float)
            p.add_argument("--lambda-s", type=float)
            p.add_argument("--iters", type=int)
        else:
            p.add_argument("--params", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("grid-search", parents=[common], help="pick baseline lambdas")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-count", type=int)
    p.add_argument("--lambda-l-grid")
    p.add_argument("--lambda-s-grid")
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_grid_search)

    p = sub.add_parser("train", parents=[common], help="train an unfolded network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-count", type=int)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit-perfusion", parents=[common], help="fit perfusion maps")
    p.add_argument("--recon", required=True)
    p.add_argument("--data", required=True, help="collection holding masks, AIF and true maps")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_perfusion)

    p = sub.add_parser("evaluate", parents=[common], help="MAE between two sequences")
    p.add_argument("--est", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("table1", parents=[common], help="run the experiment matrix")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--train-count", type=int, default=8)
    p.add_argument("--test-count", type=int, default=2)
    p.add_argument("--seeds", default="0")
    p.add_argument("--rows", help="comma-separated experiment names, default all")
    p.add_argument("--lambda-l-grid")
    p.add_argument("--lambda-s-grid")
    p.add_argument("--iters", type=int)
    _add_train_flags(p)
    p.set_defaults(func=cmd_table1)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required (see --help)")
        logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        args.seed = resolve_seed(args.seed)
        settings = Settings(args.config)
        with threadpool_limits(args.threads), scipy.fft.set_workers(args.threads):
            return args.func(args, settings)
    except (UsageError, sim.ConfigError, StepSizeError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, uf.TrainingDivergedError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (io.ArrayFileError, OSError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Command-line experiment runner driven by flat ``section.key = value`` config files."""

from __future__ import annotations

import argparse
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from transferlab.advverify import AobjConfig, verify_nesting
from transferlab.augment import AugmentationSpec, parse_b_dist, parse_w_dist
from transferlab.bounds import tightness_construct, tightness_verify, toy_curve
from transferlab.data import EmpiricalDataset, SyntheticSpec, csv_io, generate_synthetic, make_rng, make_toy_instance
from transferlab.daverify import verify_da_identity
from transferlab.nnet import init_network, load_network
from transferlab.pseudometric import FunctionClassSample, estimate_pseudometric
from transferlab.robustness import AttackConfig, robust_accuracy_curve
from transferlab.sweep import SweepConfig, report, run_sweep, split_dataset, write_sweep
from transferlab.train import (
    ArchSpec,
    LinearHead,
    RegularizerSpec,
    TrainConfig,
    TrainedModel,
    evaluate,
    fine_tune_linear,
    sgd_train,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


class ConfigError(ValueError):
    pass


_MISSING = object()


def split_list(value: str) -> list[str]:
    """Split on commas that are not inside parentheses."""
    parts, depth, cur = [], 0, []
    for ch in value:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    tail = "".join(cur).strip()
    if tail or parts:
        parts.append(tail)
    if any(p == "" for p in parts):
        raise ConfigError(f"empty element in list {value!r}")
    return parts


def _to_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class Config:
    values: dict[str, str]

    def has(self, key: str) -> bool:
        return key in self.values

    def get(self, key: str, cast: Callable = str, default=_MISSING):
        if key not in self.values:
            if default is _MISSING:
                raise ConfigError(f"missing config key {key!r}")
            return default
        raw = self.values[key]
        try:
            return _to_bool(raw) if cast is bool else cast(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc

    def get_list(self, key: str, cast: Callable = float, default=_MISSING) -> list:
        if key not in self.values:
            if default is _MISSING:
                raise ConfigError(f"missing config key {key!r}")
            return list(default)
        try:
            return [cast(v) for v in split_list(self.values[key])]
        except ValueError as exc:
            raise ConfigError(f"bad list for {key!r}: {self.values[key]!r} ({exc})") from exc


def parse_config(text: str) -> Config:
    """Parse ``section.key = value`` lines; ``#`` starts a comment."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key = key.strip()
        if not eq or "." not in key or not key.replace(".", "").replace("_", "").isalnum():
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return Config(values)


def load_config(path: str | None) -> Config:
    if path is None:
        return Config({})
    try:
        return parse_config(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


# --- builders ------------------------------------------------------------------------------------


def build_dataset(cfg: Config, section: str) -> EmpiricalDataset:
    """A dataset from ``<section>.path`` (CSV) or from synthetic ``<section>.kind`` keys."""
    if cfg.has(f"{section}.path"):
        return csv_io(cfg.get(f"{section}.path"), "read")
    g = lambda k, c=str, d=_MISSING: cfg.get(f"{section}.{k}", c, d)  # noqa: E731
    n = g("n", int, 200)
    shift = cfg.get_list(f"{section}.shift", float, default=()) or None
    spec = SyntheticSpec(
        kind=g("kind"),
        input_dim=g("input_dim", int),
        output_dim=g("output_dim", int),
        n_source=n,
        n_target=n,
        shift=tuple(shift) if shift else None,
        label_map=g("label_map", str, "same"),
        seed=g("seed", int, 0),
        separation=g("separation", float, 3.0),
        noise=g("noise", float, 1.0),
        manifold_dim=g("manifold_dim", int, 1),
        teacher_scale=g("teacher_scale", float, 2.0),
    )
    half = g("half", str, "target" if section == "target" else "source")
    if half not in ("source", "target"):
        raise ConfigError(f"{section}.half must be source or target")
    src, tgt = generate_synthetic(spec)
    return src if half == "source" else tgt


def build_arch(cfg: Config, data: EmpiricalDataset) -> ArchSpec:
    return ArchSpec(
        data.input_dim,
        tuple(cfg.get_list("arch.hidden", int, default=(32, 32))),
        data.target_dim,
        cfg.get("arch.activation", str, "relu"),
    )


def build_augmentation(cfg: Config) -> AugmentationSpec | None:
    if not any(k.startswith("augment.") for k in cfg.values):
        return None
    return AugmentationSpec(
        level=cfg.get("augment.level", str, "data"),
        algorithm=cfg.get("augment.algorithm", str, "loss-averaging"),
        w_dist=parse_w_dist(cfg.get("augment.w_dist", str, "identity")),
        b_dist=parse_b_dist(cfg.get("augment.b_dist", str, "zero")),
        independent=cfg.get("augment.independent", bool, True),
        seed=cfg.get("augment.seed", int, 0),
    )


def build_train_config(cfg: Config, seed: int | None) -> TrainConfig:
    step = cfg.get("regularizer.step_size", float, None)
    reg = RegularizerSpec(
        kind=cfg.get("regularizer.kind", str, "none"),
        strength=cfg.get("regularizer.strength", float, 0.0),
        target_norm=cfg.get("regularizer.target_norm", float, 1.0),
        epsilon=cfg.get("regularizer.epsilon", float, 0.0),
        steps=cfg.get("regularizer.steps", int, 20),
        step_size=step,
        norm=cfg.get("regularizer.norm", str, "linf"),
    )
    return TrainConfig(
        epochs=cfg.get("train.epochs", int, 50),
        batch_size=cfg.get("train.batch_size", int, 32),
        lr=cfg.get("train.lr", float, 0.05),
        momentum=cfg.get("train.momentum", float, 0.9),
        lr_decay_epochs=tuple(cfg.get_list("train.lr_decay_epochs", int, default=())),
        decay_factor=cfg.get("train.decay_factor", float, 0.1),
        seed=seed if seed is not None else cfg.get("train.seed", int, 0),
        regularizer=reg,
        augmentation=build_augmentation(cfg),
        aug_draws=cfg.get("train.aug_draws", int, 4),
    )


def build_attack(cfg: Config, seed: int | None, random_start_default: bool) -> AttackConfig:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return AttackConfig(
            epsilon=cfg.get("attack.epsilon", float, 0.1),
            steps=cfg.get("attack.steps", int, 20),
            step_size=cfg.get("attack.step_size", float, None),
            random_start=cfg.get("attack.random_start", bool, random_start_default),
            seed=seed if seed is not None else cfg.get("attack.seed", int, 0),
            norm=cfg.get("attack.norm", str, "linf"),
        )


def build_sweep_config(cfg: Config, seed: int | None) -> SweepConfig:
    frac = cfg.get("sweep.test_fraction", float, 0.5)
    source = split_dataset(build_dataset(cfg, "source"), frac)
    target = split_dataset(build_dataset(cfg, "target"), frac)
    seeds = cfg.get_list("sweep.seeds", int, default=(seed if seed is not None else 0,))
    return SweepConfig(
        base=build_train_config(cfg, None),
        arch=build_arch(cfg, source.train),
        knob=cfg.get("sweep.knob"),
        values=tuple(cfg.get_list("sweep.values", float)),
        seeds=tuple(seeds),
        source=source,
        target=target,
        attack=build_attack(cfg, None, True),
        vanilla_value=cfg.get("sweep.vanilla", float, 0.0),
        ridge=cfg.get("finetune.ridge", float, 0.0),
    )


def _load_model(cfg: Config) -> TrainedModel:
    path = cfg.get("model.path")
    try:
        return TrainedModel.load(path)
    except OSError as exc:
        raise ConfigError(f"cannot read model {path}: {exc}") from exc


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    def fmt(v):
        if isinstance(v, (bool, np.bool_)):
            return str(bool(v)).lower()
        if isinstance(v, (float, np.floating)):
            return repr(float(v))
        return str(v)

    lines = [",".join(header)] + [",".join(fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


# --- subcommands ---------------------------------------------------------------------------------


def cmd_train(cfg: Config, out: Path, seed: int | None, threads: int) -> None:
    split = split_dataset(build_dataset(cfg, "source"), cfg.get("train.test_fraction", float, 0.5))
    model = sgd_train(build_train_config(cfg, seed), split.train, build_arch(cfg, split.train))
    model.save(out / "model.txt")
    _write_csv(out / "history.csv", ["epoch", "loss"], [(r.epoch, r.loss) for r in model.history])
    _write_csv(
        out / "metrics.csv",
        ["split", "squared_loss", "accuracy"],
        [(name, evaluate(model, d), evaluate(model, d, "argmax_accuracy")) for name, d in
         (("train", split.train), ("test", split.test))],
    )


def cmd_attack(cfg: Config, out: Path, seed: int | None, threads: int) -> None:
    model = _load_model(cfg)
    data = build_dataset(cfg, "source")
    eps = cfg.get_list("attack.epsilons", float, default=(0.0, 0.05, 0.1, 0.25))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        curve = robust_accuracy_curve(model, data, eps, build_attack(cfg, seed, False))
    _write_csv(out / "robust.csv", ["epsilon", "robust_acc"], list(zip(eps, curve)))


def cmd_finetune(cfg: Config, out: Path, seed: int | None, threads: int) -> None:
    model = _load_model(cfg)
    split = split_dataset(build_dataset(cfg, "target"), cfg.get("finetune.test_fraction", float, 0.5))
    head, loss = fine_tune_linear(model.extractor, split.train, cfg.get("finetune.ridge", float, 0.0))
    tuned = model.with_head(head)
    tuned.save(out / "model_ft.txt")
    _write_csv(
        out / "finetune.csv",
        ["split", "squared_loss", "accuracy"],
        [(name, evaluate(tuned, d), evaluate(tuned, d, "argmax_accuracy")) for name, d in
         (("train", split.train), ("test", split.test))],
    )


def cmd_sweep(cfg: Config, out: Path, seed: int | None, threads: int) -> None:
    rep = run_sweep(build_sweep_config(cfg, seed), threads=threads)
    write_sweep(rep, out)
    if rep.n_failed:
        print(f"warning: {rep.n_failed} cell(s) failed", file=sys.stderr)


def cmd_report(cfg: Config, out: Path, seed: int | None, threads: int) -> None:
    dirs = cfg.get_list("report.dirs", str, default=(str(out),))
    report(dirs, out)


def _extractor_class(cfg: Config, input_dim: int, seed: int) -> FunctionClassSample:
    ridge = cfg.get("pseudometric.ridge", float, 0.0)
    kind = "linear-ridge" if ridge > 0 else "linear"
    if cfg.has("pseudometric.extractors"):
        nets = []
        for p in cfg.get_list("pseudometric.extractors", str):
            try:
                nets.append(TrainedModel.load(p).extractor)
            except (OSError, ValueError):
                nets.append(load_network(p))
        return FunctionClassSample(tuple(nets), kind, ridge)
    n = cfg.get("pseudometric.n_extractors", int, 8)
    dims = [input_dim] + cfg.get_list("pseudometric.hidden", int, default=(16,))
    act = cfg.get("pseudometric.activation", str, "tanh")
    nets = tuple(init_network(dims, act, make_rng(seed, 30, i), final_activation=act) for i in range(n))
    return FunctionClassSample(nets, kind, ridge)


def cmd_pseudometric(cfg: Config, out: Path, seed: int | None, threads: int) -> None:
    D_S, D_T = build_dataset(cfg, "source"), build_dataset(cfg, "target")
    cls = _extractor_class(cfg, D_S.input_dim, seed if seed is not None else cfg.get("pseudometric.seed", int, 0))
    est = estimate_pseudometric(cls, D_S, D_T)
    rows = [(i, s, t, abs(s - t)) for i, (s, t) in enumerate(est.per_extractor)]
    _write_csv(out / "pseudometric.csv", ["extractor", "inf_loss_S", "inf_loss_T", "gap"], rows)
    _write_csv(out / "summary.csv", ["d", "argmax"], [(est.value, est.argmax_extractor)])


def cmd_toy(cfg: Config, out: Path, seed: int | None, threads: int) -> None:
    def matrix(key):
        rows = [r for r in cfg.get(key).split(";")]
        return [[float(v) for v in r.split()] for r in rows]

    try:
        inst = make_toy_instance(matrix("toy.atoms"), matrix("toy.yS"), matrix("toy.yT"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    grid = cfg.get_list("toy.c_grid", float, default=np.linspace(0, 2 * max(inst.norm_yS, 1e-12), 21))
    pts = toy_curve(inst, grid)
    _write_csv(out / "toy.csv", ["c", "loss_S", "loss_T", "relative"],
               [(p.c, p.loss_S, p.loss_T, p.relative) for p in pts])


def cmd_tightness(cfg: Config, out: Path, seed: int | None, threads: int) -> None:
    D_S = build_dataset(cfg, "source")
    cls = _extractor_class(cfg, D_S.input_dim, seed if seed is not None else cfg.get("pseudometric.seed", int, 0))
    k = cfg.get("tightness.extractor", int, 0)
    head, _ = fine_tune_linear(cls.extractors[k], D_S, cls.ridge)
    model = TrainedModel(cls.extractors[k], head, ())
    construction, D_T = tightness_construct(D_S)
    rep = tightness_verify(cls, model, D_S, D_T)
    _write_csv(out / "tightness.csv", ["tau", "d", "eps_opt", "gap", "radius", "within"],
               [(rep.tau, rep.d, rep.eps_opt, rep.gap, construction.radius, rep.within)])


def cmd_verify_da(cfg: Config, out: Path, seed: int | None, threads: int) -> None:
    seed = seed if seed is not None else cfg.get("da.seed", int, 0)
    data = build_dataset(cfg, "source")
    if cfg.has("model.path"):
        model = _load_model(cfg)
    else:
        dims = [data.input_dim] + cfg.get_list("arch.hidden", int, default=(8,))
        act = cfg.get("arch.activation", str, "tanh")
        ext = init_network(dims, act, make_rng(seed, 40), final_activation=act)
        head = LinearHead(make_rng(seed, 41).normal(size=(data.target_dim, dims[-1])), np.zeros(data.target_dim))
        model = TrainedModel(ext, head, ())
    spec = build_augmentation(cfg) or AugmentationSpec()
    grid = cfg.get_list("da.s_grid", float, default=(0.1, 0.05, 0.025, 0.0125))
    res = verify_da_identity(model, data, spec, grid, cfg.get("da.n_mc", int, 10_000), seed,
                             cfg.get("da.max_atoms", int, 64))
    _write_csv(
        out / "da.csv",
        ["s", "lhs", "stderr", "rhs", "residual", "exact", "omega", "hessian_skipped"],
        [(r.s, r.lhs_mc, r.stderr, r.rhs_exact, r.residual, r.exact, r.breakdown.omega,
          r.breakdown.hessian_skipped) for r in res.reports],
    )
    _write_csv(out / "slope.csv", ["slope"], [(res.slope,)])


def cmd_verify_advreg(cfg: Config, out: Path, seed: int | None, threads: int) -> None:
    data = build_dataset(cfg, "source")
    acfg = AobjConfig(0.0, cfg.get("advreg.epsilon", float, 0.1))
    rep = verify_nesting(
        data,
        cfg.get_list("advreg.lambdas", float, default=(0.1, 0.5, 1.0, 2.0)),
        cfg.get("advreg.delta", float, 0.05),
        acfg,
        cfg.get("advreg.depth", int, 2),
        cfg.get("advreg.width", int, 4),
    )
    _write_csv(
        out / "nesting.csv",
        ["lam1", "lam2", "witness_T", "J0", "obj_lam1", "obj_lam2", "member_lam1", "member_lam2",
         "B_found", "B_doublings", "B_certified"],
        [(r.lam1, r.lam2, r.witness_T, r.J0, r.obj_lam1, r.obj_lam2, r.member_lam1, r.member_lam2,
          "" if r.B_found is None else r.B_found, r.B_doublings, r.B_certified) for r in rep.rows],
    )


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "finetune": cmd_finetune,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "pseudometric": cmd_pseudometric,
    "toy": cmd_toy,
    "tightness": cmd_tightness,
    "verify-da": cmd_verify_da,
    "verify-advreg": cmd_verify_advreg,
}


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("threads must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transferlab", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="path to a section.key = value config file")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=_u64, default=None)
    parser.add_argument("--threads", type=_positive, default=1)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    out = Path(args.out)
    try:
        cfg = load_config(args.config)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, args.seed, args.threads)
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Batch experiment driver: ``muon-ogd run <config.json> [--jobs N] [--trace]``.

Modes
-----
solve_step   one constrained step on a fixture ``{g, constraints, warm?}`` -> ``step_result.json``
curriculum   one toy curriculum per seed -> ``seed_<s>.csv`` + ``summary.json``
ablation     sweep one optimizer field; per value either a fixture solve or a
             multi-seed curriculum -> ``ablation.csv`` + ``summary.json``

Exit codes: 0 ok, 2 invalid config (message names the field path), 3 numerical abort.
All files are written from the main thread after every run finishes, in seed
order, so outputs are byte-identical across repeated runs and ``--jobs`` values.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import statistics
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .constraints import EMPTY, ConstraintSet, constraints_from_json
from .dualsolver import DualState, StepResult, dual_objective, solve_step, solve_step_exact
from .errors import MuonOGDError, NumericalError
from .harness import Generator, Loss, ToyModel, make_stream, run_curriculum
from .matlin import matrix_from_json, spectral_norm
from .optim import Kind, OptimizerConfig, OptimizerState

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

ABLATABLE = ("eta", "eta_dual", "beta", "t_in", "rank_fraction", "max_rank", "ns_steps", "vector_lr")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class OptimizerBlock(_Strict):
    kind: Kind = Kind.MUON_OGD_LOWRANK
    eta: float = Field(5e-3, gt=0)
    eta_dual: float = Field(1e-4, gt=0)
    beta: float = Field(0.95, ge=0, lt=1)
    t_in: int = Field(2, ge=1)
    rank_fraction: float = Field(0.08, gt=0, le=1)
    max_rank: int = Field(48, ge=1)
    ns_steps: int = Field(5, ge=1)
    vector_lr: float = Field(1e-3, gt=0)
    exact: bool = False
    exact_msign: bool = False

    def build(self, **override) -> OptimizerConfig:
        return OptimizerConfig(**{**self.model_dump(), **override})


class StreamBlock(_Strict):
    generator: Generator = Generator.ROTATED_REGRESSION
    n_tasks: int = Field(2, ge=1)
    dim: int = Field(16, ge=1)
    rank: Optional[int] = Field(None, ge=1)
    n_classes: Optional[int] = Field(None, ge=2)
    n_train: int = Field(256, ge=1)
    n_test: int = Field(256, ge=1)
    noise: Optional[float] = Field(None, ge=0)
    angle: Optional[float] = Field(None, ge=0)
    steps_per_task: int = Field(300, ge=0)
    batch_size: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _generator_fields(self):
        if self.generator is Generator.ROTATED_REGRESSION and self.n_classes is not None:
            raise ValueError("n_classes does not apply to rotated_regression")
        if self.generator is not Generator.ROTATED_REGRESSION and self.angle is not None:
            raise ValueError("angle only applies to rotated_regression")
        if self.generator is Generator.PERMUTED_PATTERNS and self.rank is not None:
            raise ValueError("rank does not apply to permuted_patterns")
        if self.rank is not None and self.rank > self.dim:
            raise ValueError("rank must not exceed dim")
        return self

    def make(self, seed: int):
        kw = {k: v for k, v in self.model_dump(exclude={"generator", "steps_per_task", "batch_size"}).items()
              if v is not None}
        return make_stream(self.generator, seed=seed, **kw)


class ModelBlock(_Strict):
    hidden: list[int] = Field(default_factory=list)
    activation: Literal["identity", "tanh", "relu"] = "identity"
    loss: Optional[Loss] = None
    init_scale: float = Field(0.1, ge=0)

    @field_validator("hidden")
    @classmethod
    def _positive(cls, v):
        if any(h < 1 for h in v):
            raise ValueError("hidden sizes must be positive")
        return v


class AblationBlock(_Strict):
    param: Literal[ABLATABLE]  # type: ignore[valid-type]
    values: list[float] = Field(min_length=1)


class ExperimentConfig(_Strict):
    mode: Literal["solve_step", "curriculum", "ablation"]
    optimizer: OptimizerBlock = Field(default_factory=OptimizerBlock)
    stream: StreamBlock = Field(default_factory=StreamBlock)
    model: ModelBlock = Field(default_factory=ModelBlock)
    fixture: Optional[Path] = None
    ablation: Optional[AblationBlock] = None
    seeds: list[int] = Field(min_length=1)
    output_dir: Path
    trace: bool = False

    @model_validator(mode="after")
    def _mode_fields(self):
        if self.mode == "solve_step" and self.fixture is None:
            raise ValueError("fixture is required in solve_step mode")
        if self.mode == "ablation" and self.ablation is None:
            raise ValueError("ablation block is required in ablation mode")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        return self


class ConfigError(Exception):
    """Invalid configuration; ``path`` is the dotted location of the bad field."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path


# -- loading ----------------------------------------------------------------


def _fmt_loc(loc) -> str:
    out = ""
    for part in loc:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("", f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path} is not valid JSON: {exc}") from None
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(_fmt_loc(err["loc"]), err["msg"]) from None
    base = path.parent
    updates: dict[str, Any] = {}
    if not cfg.output_dir.is_absolute():
        updates["output_dir"] = base / cfg.output_dir
    if cfg.fixture is not None:
        fx = cfg.fixture if cfg.fixture.is_absolute() else base / cfg.fixture
        if not fx.is_file():
            raise ConfigError("fixture", f"file {fx} does not exist")
        updates["fixture"] = fx
    if cfg.ablation is not None:
        _check_ablation(cfg)
    return cfg.model_copy(update=updates)


def _check_ablation(cfg: ExperimentConfig) -> None:
    for i, v in enumerate(cfg.ablation.values):
        try:
            cfg.optimizer.build(**{cfg.ablation.param: _cast(cfg.ablation.param, v)})
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"ablation.values[{i}]", str(exc)) from None


def _cast(param: str, v: float):
    if param in ("t_in", "max_rank", "ns_steps"):
        if v != int(v):
            raise ValueError(f"{param} must be an integer, got {v}")
        return int(v)
    return float(v)


Fixture = tuple  # (g, constraints, warm)


def load_fixture(path: Path) -> Fixture:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("fixture", f"not valid JSON: {exc}") from None
    for key, parse in (("g", matrix_from_json), ("constraints", constraints_from_json),
                       ("warm", DualState.from_json)):
        if key not in obj:
            if key == "g":
                raise ConfigError("fixture.g", "missing")
            continue
        try:
            obj[key] = parse(obj[key])
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"fixture.{key}", str(exc)) from None
    g = obj["g"]
    cs: ConstraintSet = obj.get("constraints", EMPTY)
    warm = obj.get("warm")
    if cs.k and tuple(cs.shape) != g.shape:
        raise ConfigError("fixture.constraints", f"shape {cs.shape} does not match g {g.shape}")
    if warm is not None and not warm.matches(cs):
        raise ConfigError("fixture.warm", "dual shape does not match the constraint set")
    return g, cs, warm


# -- running ----------------------------------------------------------------


def _solve(fixture: Fixture, opt: OptimizerConfig, trace: list | None) -> StepResult:
    g, cs, warm = fixture
    scfg = opt.solver_config()
    sink = trace.append if trace is not None else None
    if opt.exact:
        return solve_step_exact(g, cs, scfg, trace=sink)
    return solve_step(g, cs, warm, scfg, trace=sink)


def _run_seed(cfg: ExperimentConfig, opt: OptimizerConfig, seed: int, trace: bool):
    records: list | None = [] if trace else None
    stream = cfg.stream.make(seed)
    loss = cfg.model.loss or (Loss.CROSS_ENTROPY if stream.tasks[0].classification else Loss.SQUARED_ERROR)
    sizes = [stream.n_in, *cfg.model.hidden, stream.n_out]
    model = ToyModel.build(sizes, cfg.model.activation, loss, cfg.model.init_scale, seed=seed)

    def sink(rec):
        records.append({"seed": seed, **rec})

    state = OptimizerState.from_config(opt, trace=sink if trace else None)
    res = run_curriculum(model, stream, state, cfg.stream.steps_per_task, policy=opt.rank_policy(),
                         batch_size=cfg.stream.batch_size, seed=seed)
    return res.log, records or []


def _run_seeds(cfg, opt, jobs: int, trace: bool):
    if jobs <= 1:
        return [_run_seed(cfg, opt, s, trace) for s in cfg.seeds]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda s: _run_seed(cfg, opt, s, trace), cfg.seeds))


def _mean_std(xs: list[float]) -> tuple[float, float | None]:
    return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else None)


def _pct_text(mean: float, std: float | None) -> str:
    return f"{100 * mean:.1f}" if std is None else f"{100 * mean:.1f} ± {100 * std:.1f}"


def aggregate(logs, seeds) -> dict:
    """Summary JSON: means over seeds plus per-seed summaries.

    Accuracy-style values keep the log's units (fractions); ``*_text`` fields
    render ``mean ± sample std`` in percent to one decimal.
    """
    runs = [{"seed": s, **log.summary()} for s, log in zip(seeds, logs)]
    aa_m, aa_s = _mean_std([r["aa"] for r in runs])
    out = {"aa": aa_m, "aa_std": aa_s, "aa_text": _pct_text(aa_m, aa_s)}
    if runs[0]["bt"] is None:
        out.update(bt=None, bt_std=None, bt_text=None)
    else:
        bt_m, bt_s = _mean_std([r["bt"] for r in runs])
        out.update(bt=bt_m, bt_std=bt_s, bt_text=_pct_text(bt_m, bt_s))
    out["per_task_final"] = np.mean([r["per_task_final"] for r in runs], axis=0).tolist()
    out["per_task_diag"] = np.mean([r["per_task_diag"] for r in runs], axis=0).tolist()
    out["seeds"] = list(seeds)
    out["runs"] = runs
    return out


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, ensure_ascii=False) + "\n"


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _write_trace(out: Path, records: list) -> None:
    with open(out / "trace.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _fixture_row(fixture: Fixture, res: StepResult) -> dict:
    g, cs, _ = fixture
    return {
        "residual": res.residual,
        "dual_objective": dual_objective(g, cs, res.dual),
        "delta_spectral_norm": spectral_norm(res.delta),
        "inner_iters": res.inner_iters,
    }


def run(cfg: ExperimentConfig, jobs: int = 1, trace: bool = False) -> int:
    trace = trace or cfg.trace
    fixture = load_fixture(cfg.fixture) if cfg.fixture is not None else None
    opt = cfg.optimizer.build()
    records: list = []
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)

    if cfg.mode == "solve_step":
        res = _solve(fixture, opt, records if trace else None)
        _write(out / "step_result.json", _dump({**res.to_json(), **_fixture_row(fixture, res)}))

    elif cfg.mode == "curriculum":
        results = _run_seeds(cfg, opt, jobs, trace)
        for seed, (log, recs) in zip(cfg.seeds, results):
            _write(out / f"seed_{seed}.csv", log.to_csv())
            records.extend(recs)
        _write(out / "summary.json", _dump(aggregate([r[0] for r in results], cfg.seeds)))

    else:
        param = cfg.ablation.param
        rows = []
        for value in cfg.ablation.values:
            v = _cast(param, value)
            vopt = cfg.optimizer.build(**{param: v})
            if fixture is not None:
                recs: list | None = [] if trace else None
                res = _solve(fixture, vopt, recs)
                rows.append({param: v, **_fixture_row(fixture, res)})
                records.extend({param: v, **r} for r in recs or [])
            else:
                results = _run_seeds(cfg, vopt, jobs, trace)
                summ = aggregate([r[0] for r in results], cfg.seeds)
                rows.append({param: v, **{k: summ[k] for k in ("aa", "aa_std", "bt", "bt_std")}})
                for _, recs in results:
                    records.extend({param: v, **r} for r in recs)
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if x is None else x) for k, x in row.items()})
        _write(out / "ablation.csv", buf.getvalue())
        _write(out / "summary.json", _dump({"param": param, "rows": rows}))

    if trace:
        _write_trace(out, records)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="muon-ogd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("config", help="path to the experiment JSON")
    p_run.add_argument("--jobs", type=int, default=1, help="worker threads for independent seeds")
    p_run.add_argument("--trace", action="store_true", help="write per-inner-iteration trace.jsonl")
    args = parser.parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        return run(cfg, jobs=args.jobs, trace=args.trace)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except MuonOGDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Experiment orchestration behind the command-line front door.

Five stages mirror the study protocol: ``generate`` synthesizes a dataset
and its updating problem, ``train`` meta-learns the strategy networks on
one problem, ``sample`` runs any engine and stores the trace, ``evaluate``
turns a stored trace into metrics and plot data, and ``compare`` runs two
engines on the same data and emits a side-by-side table.

Configuration is a JSON document with explicit keys; unknown keys are
rejected so a misspelled constant cannot silently fall back to a default.
Every report embeds the resolved configuration and seed.  Reports are
deterministic given the seed; wall-clock timing lives in separate files
(``timing.json``, ``metrics.json``) because it can never be.
"""

from __future__ import annotations

import dataclasses
import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation, samplers, structural, target, training
from . import strategy as sn

STAGES = ("generate", "train", "sample", "evaluate", "compare")

_SAMPLER_ALIASES = {
    "hmc": "hmc",
    "sghmc": "sghmc",
    "am-sghmc": "amsghmc",
    "amsghmc": "amsghmc",
}


class ConfigError(ValueError):
    """Bad configuration or unreadable input file; raised before compute."""


class StageError(RuntimeError):
    """A stage failed after outputs may have been written."""

    def __init__(self, stage: str, partial_outputs: list, message: str):
        super().__init__(message)
        self.stage = stage
        self.partial_outputs = list(partial_outputs)


def canonical_sampler(name: str) -> str:
    key = str(name).lower()
    if key not in _SAMPLER_ALIASES:
        known = ", ".join(sorted(set(_SAMPLER_ALIASES) - {"amsghmc"}))
        raise ConfigError(f"unknown sampler {name!r} (expected one of {known})")
    return _SAMPLER_ALIASES[key]


# --- configuration ---------------------------------------------------------------


def _build(cls, data, where: str):
    """Dataclass from a mapping, rejecting keys the class does not declare."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


@dataclass(frozen=True)
class GenerateSettings:
    """Synthetic-dataset stage: building family and measurement setup."""

    n_stories: int = 5
    duration: float = 3.0
    dt: float = 0.01
    noise_ratio: float = 1.0
    perturbation_cov: float = 0.10
    ground_std: float = 1.0
    observed_dofs: tuple | None = None
    k0: float = 2.0e7
    c0: float = 6.0e4
    mass: float = 2.0e5
    sigma0: float = 1.0

    def __post_init__(self):
        if self.n_stories < 1:
            raise ConfigError("n_stories must be at least 1")
        if self.duration <= 0 or self.dt <= 0:
            raise ConfigError("duration and dt must be positive")
        if self.noise_ratio < 0:
            raise ConfigError("noise_ratio must be nonnegative")


@dataclass(frozen=True)
class RunSettings:
    """Sampling-run parameters; keys follow the symbols of the method."""

    K: int = 32
    T: int = 9000
    burn_in: int = 3000
    tau: int = 1
    eta: float = samplers.DEFAULT_ETA
    window: tuple = (300, 2800)
    betas_theta: tuple = (0.99, 0.995)
    betas_u: tuple = (0.99, 0.998)
    v0_scale: float = 1.0
    sghmc_G: float = 1.0
    sghmc_C: float = 1.0
    hmc_step0: float = 0.1
    hmc_leapfrog: int = 10
    hmc_target_accept: float = 0.7
    hmc_adapt: bool = True

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if not 0 <= self.burn_in < self.T:
            raise ConfigError("need 0 <= burn_in < T")
        if self.tau < 1:
            raise ConfigError("tau must be at least 1")
        if self.eta <= 0:
            raise ConfigError("eta must be positive")
        if self.v0_scale <= 0:
            raise ConfigError("v0_scale must be positive")
        lo, hi = self.window
        if not 0 <= lo <= hi:
            raise ConfigError("window must satisfy 0 <= start <= end")


@dataclass(frozen=True)
class TrainSettings:
    """Meta-training parameters; keys follow the symbols of the method."""

    K0: int = 64
    K: int = 10
    epochs: int = 100
    sub_epochs: int = 10
    steps_per_sub_epoch: int = 90
    T_T: int = 15
    tau: int = 1
    M: int = 3
    eta: float = samplers.DEFAULT_ETA
    lr: float = 0.01
    betas: tuple = (0.5, 0.75)
    grad_clip: float = 10.0
    replay_prob: float = 0.2
    replay_capacity: int = 10000
    adapt_epochs: int = 50
    adapt_last: int = 6
    betas_theta: tuple = (0.99, 0.999)
    betas_u: tuple = (0.99, 0.998)
    v0_star: float = 1.0
    detach_gamma: bool = False
    stein_bandwidth: float = 4.0
    stein_ridge: float = 0.1
    M_Q: float = 100.0
    M_D: float = 30.0
    c1: float = 0.01
    c2: float = 0.01
    hidden: tuple = (10, 10, 10)
    use_shortcut: bool = False
    n_rbf: int = 8

    def __post_init__(self):
        for name in ("K0", "K", "epochs", "sub_epochs", "steps_per_sub_epoch",
                     "T_T", "tau"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.K > self.K0:
            raise ConfigError("K cannot exceed K0")
        if self.eta <= 0 or self.lr <= 0:
            raise ConfigError("eta and lr must be positive")
        if not 0 <= self.replay_prob <= 1:
            raise ConfigError("replay_prob must lie in [0, 1]")

    def to_training_config(self) -> training.TrainingConfig:
        scfg = sn.StrategyConfig(
            m_q=self.M_Q,
            m_d=self.M_D,
            c1=self.c1,
            c2=self.c2,
            hidden=tuple(self.hidden),
            use_shortcut=self.use_shortcut,
            n_rbf=self.n_rbf,
        )
        try:
            return training.TrainingConfig(
                k0=self.K0,
                k_loss=self.K,
                epochs=self.epochs,
                sub_epochs=self.sub_epochs,
                steps_per_sub_epoch=self.steps_per_sub_epoch,
                t_t=self.T_T,
                tau=self.tau,
                m_skip=self.M,
                eta=self.eta,
                lr=self.lr,
                betas=tuple(self.betas),
                grad_clip=self.grad_clip,
                replay_prob=self.replay_prob,
                replay_capacity=self.replay_capacity,
                adapt_epochs=self.adapt_epochs,
                adapt_last=self.adapt_last,
                stat_beta_theta=tuple(self.betas_theta),
                stat_beta_u=tuple(self.betas_u),
                v0_star=self.v0_star,
                detach_gamma=self.detach_gamma,
                stein_bandwidth=self.stein_bandwidth,
                stein_ridge=self.stein_ridge,
                strategy=scfg,
            )
        except ValueError as exc:
            raise ConfigError(f"invalid training settings: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: input files, engine choice, and stage parameters."""

    problem: str | None = None
    sampler: str = "am-sghmc"
    seed: int = 0
    out: str = "runs/experiment"
    checkpoint: str | None = None
    trace: str | None = None
    run: RunSettings = field(default_factory=RunSettings)
    training: TrainSettings = field(default_factory=TrainSettings)
    generate: GenerateSettings = field(default_factory=GenerateSettings)
    compare: tuple = ("am-sghmc", "sghmc")

    def __post_init__(self):
        canonical_sampler(self.sampler)
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")
        if len(self.compare) != 2:
            raise ConfigError("compare needs exactly two sampler names")
        if len({canonical_sampler(s) for s in self.compare}) != 2:
            raise ConfigError("compare needs two distinct samplers")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        sections = {"run": RunSettings, "training": TrainSettings,
                    "generate": GenerateSettings}
        scalars = {f.name for f in dataclasses.fields(cls)} - set(sections)
        unknown = sorted(set(data) - scalars - set(sections))
        if unknown:
            raise ConfigError(f"unknown keys in config: {', '.join(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key in sections:
                kwargs[key] = _build(sections[key], value, f"config section {key!r}")
            elif isinstance(value, list):
                kwargs[key] = tuple(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    def resolved(self) -> dict:
        """Plain nested dict of every setting, for embedding in reports."""
        return json.loads(json.dumps(dataclasses.asdict(self)))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def resolve_config(path=None, *, seed=None, out=None, checkpoint=None,
                   sampler=None) -> ExperimentConfig:
    """Config file plus command-line overrides; flags win over file keys."""
    cfg = load_config(path) if path is not None else ExperimentConfig()
    overrides = {}
    if seed is not None:
        overrides["seed"] = int(seed)
    if out is not None:
        overrides["out"] = str(out)
    if checkpoint is not None:
        overrides["checkpoint"] = str(checkpoint)
    if sampler is not None:
        overrides["sampler"] = str(sampler)
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


# --- input loading ---------------------------------------------------------------


def _load_problem(path) -> target.UpdatingProblem:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"problem file not found: {path}")
    try:
        return target.load_problem(path)
    except Exception as exc:
        raise ConfigError(f"problem file {path} failed to parse: {exc}") from exc


def _load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        return training.load_checkpoint(path)
    except Exception as exc:
        raise ConfigError(f"checkpoint {path} failed to parse: {exc}") from exc


def _preflight(stage: str, cfg: ExperimentConfig) -> dict:
    """Load and parse every referenced file before any compute starts."""
    loaded = {}
    if stage in ("train", "sample", "compare"):
        if cfg.problem is None:
            raise ConfigError(f"stage {stage!r} needs a problem file")
        loaded["problem"] = _load_problem(cfg.problem)
    if stage == "sample":
        engines = [canonical_sampler(cfg.sampler)]
    elif stage == "compare":
        engines = [canonical_sampler(s) for s in cfg.compare]
    else:
        engines = []
    if "amsghmc" in engines:
        if cfg.checkpoint is None:
            raise ConfigError("the meta-learned engine needs a checkpoint")
        loaded["checkpoint"] = _load_checkpoint(cfg.checkpoint)
    if stage == "evaluate":
        trace_dir = Path(cfg.trace) if cfg.trace else Path(cfg.out) / "trace"
        if not trace_dir.exists():
            raise ConfigError(f"trace directory not found: {trace_dir}")
        try:
            loaded["trace"] = samplers.load_trace(trace_dir)
        except Exception as exc:
            raise ConfigError(f"trace {trace_dir} failed to parse: {exc}") from exc
        loaded["trace_dir"] = trace_dir
    return loaded


# --- stage implementations ---------------------------------------------------------


def _write_json(path: Path, payload: dict, written: list) -> None:
    path.write_text(json.dumps(payload, indent=1) + "\n")
    written.append(path)


def _relative(path: Path, out: Path) -> str:
    try:
        return str(path.relative_to(out))
    except ValueError:
        return str(path)


def _stage_generate(cfg: ExperimentConfig, loaded: dict, out: Path,
                    written: list) -> dict:
    g = cfg.generate
    building = structural.nominal_building(g.n_stories, g.k0, g.c0, g.mass)
    dcfg = structural.DatasetConfig(
        duration=g.duration,
        dt=g.dt,
        noise_ratio=g.noise_ratio,
        perturbation_cov=g.perturbation_cov,
        ground_std=g.ground_std,
        observed_dofs=g.observed_dofs,
    )
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    dataset, truth = structural.generate_dataset(building, dcfg, rng)
    dataset_path = out / "dataset.csv"
    structural.save_dataset(dataset_path, dataset, truth)
    written += [dataset_path, Path(str(dataset_path) + ".meta.json")]
    problem = target.default_problem(building, dataset, sigma0=g.sigma0)
    problem_path = out / "problem.json"
    target.save_problem(problem_path, problem, "dataset.csv")
    written.append(problem_path)
    summary = {
        "n_stories": g.n_stories,
        "n_steps": dataset.n_steps,
        "n_observed": dataset.n_obs,
        "observed_dofs": list(dataset.observed_dofs),
        "noise_std": truth["noise_std"],
        "stiffness_true": truth["stiffness"].tolist(),
        "damping_true": truth["damping"].tolist(),
    }
    outputs = {"dataset": "dataset.csv", "problem": "problem.json"}
    return {"outputs": outputs, "summary": summary}


def _stage_train(cfg: ExperimentConfig, loaded: dict, out: Path,
                 written: list) -> dict:
    problem = loaded["problem"]
    tcfg = cfg.training.to_training_config()
    history_path = out / "history.csv"
    result = training.train(problem, tcfg, seed=cfg.seed, log_path=history_path)
    written.append(history_path)
    ckpt_path = Path(cfg.checkpoint) if cfg.checkpoint else out / "checkpoint.npz"
    training.save_checkpoint(
        ckpt_path,
        result.nets,
        result.stats,
        extra={
            "seed": cfg.seed,
            "problem": str(cfg.problem),
            "n_stories": problem.building.n_stories,
            "categories": list(problem.categories),
        },
    )
    written.append(ckpt_path)
    last = result.history[-1]
    summary = {
        "epochs": tcfg.epochs,
        "updates": len(result.history),
        "final_loss_energy": last["loss_energy"],
        "final_loss_entropy": last["loss_entropy"],
        "divergence_events": result.meta["divergence_events"],
        "skipped_segments": result.meta["skipped_segments"],
    }
    outputs = {"checkpoint": _relative(ckpt_path, out), "history": "history.csv"}
    return {"outputs": outputs, "summary": summary}


def _run_sampler(cfg: ExperimentConfig, problem, checkpoint, name: str,
                 out_dir: Path, written: list):
    """One timed sampling run; returns (trace, wall seconds, summary)."""
    engine = canonical_sampler(name)
    run = cfg.run
    rcfg = samplers.RunConfig(
        eta=run.eta,
        sghmc_g=run.sghmc_G,
        sghmc_c=run.sghmc_C,
        hmc_step0=run.hmc_step0,
        hmc_leapfrog=run.hmc_leapfrog,
        hmc_target_accept=run.hmc_target_accept,
        hmc_adapt=run.hmc_adapt,
    )
    kwargs = {}
    if engine == "amsghmc":
        nets, train_stats, extra = checkpoint
        if run.window[0] >= run.T:
            raise ConfigError("adaptive window starts after the run ends")
        if run.window[1] > run.burn_in:
            warnings.warn("adaptive window extends past burn-in; kept samples "
                          "will mix normalization regimes")
        v0_star: float | tuple = run.v0_scale
        if train_stats is not None and "categories" in extra:
            v0 = samplers.v0_from_training(train_stats.sigma_i,
                                           extra["categories"],
                                           problem.categories,
                                           scale=run.v0_scale)
            v0_star = tuple(float(v) for v in v0)
        else:
            warnings.warn("checkpoint lacks training scales or categories; "
                          "seeding test-time variances at v0_scale")
        kwargs["nets"] = nets
        kwargs["stats_config"] = samplers.StatsConfig(
            window=tuple(int(v) for v in run.window),
            beta_theta=run.betas_theta,
            beta_u=run.betas_u,
            v0_star=v0_star,
            mode="testing",
        )
    start = time.perf_counter()
    trace = samplers.run_chains(engine, problem, run.K, run.T, run.burn_in,
                                run.tau, seed=cfg.seed, config=rcfg, **kwargs)
    wall = time.perf_counter() - start
    trace.meta["problem"] = str(cfg.problem)
    trace.meta["sampler_label"] = name
    trace_dir = out_dir / "trace"
    samplers.save_trace(trace, trace_dir)
    written.append(trace_dir / "trace.json")
    _write_json(trace_dir / "timing.json", {"wall_time_s": wall}, written)
    summary = {
        "sampler": name,
        "K": run.K,
        "T": run.T,
        "burn_in": run.burn_in,
        "tau": run.tau,
        "kept_chains": trace.k_chains,
        "samples_per_chain": trace.n_samples,
        "diverged_chains": trace.meta["diverged"],
        "eta": trace.meta["eta"],
    }
    if engine == "hmc":
        summary["acceptance_rate"] = trace.meta["acceptance_rate"]
    return trace, wall, summary


def compute_metrics(trace: samplers.Trace, wall_time_s: float | None) -> dict:
    """The metric document for one trace: fit quality, mixing, and rate."""
    flat = trace.flat()
    pots = trace.potentials.reshape(-1)
    kde = evaluation.fit_cop(flat)
    loss = evaluation.naive_loss(flat, pots, kde)
    agg, per_chain = evaluation.aggregate_ess(trace.samples)
    per_dim = per_chain.mean(axis=0)
    per_hour = None
    if wall_time_s is not None and wall_time_s > 0:
        per_hour = agg / wall_time_s * 3600.0
    return {
        "naive_loss": float(loss),
        "ess_per_dim": [float(v) for v in per_dim],
        "ess_aggregate": float(agg),
        "wall_time_s": wall_time_s,
        "ess_per_hour": per_hour,
    }


def _read_timing(trace_dir: Path) -> float | None:
    path = trace_dir / "timing.json"
    if not path.exists():
        return None
    return float(json.loads(path.read_text())["wall_time_s"])


def _stage_sample(cfg: ExperimentConfig, loaded: dict, out: Path,
                  written: list) -> dict:
    trace, wall, summary = _run_sampler(cfg, loaded["problem"],
                                        loaded.get("checkpoint"),
                                        cfg.sampler, out, written)
    outputs = {"trace": "trace", "timing": "trace/timing.json"}
    return {"outputs": outputs, "summary": summary}


def _emit_plot_data(trace: samplers.Trace, out: Path, written: list) -> dict:
    """Principal-direction projection and, when possible, the conditional
    mean surface of the third component over the first two."""
    components, projected = evaluation.pca_project(trace.flat())
    projection_path = out / "projection.csv"
    evaluation.save_projection(projection_path, projected, components)
    written.append(projection_path)
    outputs = {"projection": "projection.csv"}
    if projected.shape[1] >= 3:
        gx, gy, values = evaluation.conditional_mean_surface(projected, 0, 1, 2)
        surface_path = out / "surface.csv"
        evaluation.save_surface(surface_path, gx, gy, values)
        written.append(surface_path)
        outputs["surface"] = "surface.csv"
    return outputs


def _stage_evaluate(cfg: ExperimentConfig, loaded: dict, out: Path,
                    written: list) -> dict:
    trace = loaded["trace"]
    wall = _read_timing(loaded["trace_dir"])
    metrics = compute_metrics(trace, wall)
    _write_json(out / "metrics.json", {
        "seed": cfg.seed,
        "config": cfg.resolved(),
        "metrics": metrics,
    }, written)
    outputs = {"metrics": "metrics.json"}
    outputs.update(_emit_plot_data(trace, out, written))
    summary = {
        "sampler": trace.meta.get("sampler_label", trace.meta.get("sampler")),
        "kept_chains": trace.k_chains,
        "samples_per_chain": trace.n_samples,
        "naive_loss": metrics["naive_loss"],
        "ess_aggregate": metrics["ess_aggregate"],
        "ess_per_dim": metrics["ess_per_dim"],
    }
    return {"outputs": outputs, "summary": summary}


def _stage_compare(cfg: ExperimentConfig, loaded: dict, out: Path,
                   written: list) -> dict:
    names = [str(s) for s in cfg.compare]
    table = {}
    runs = {}
    for name in names:
        sub = out / name
        sub.mkdir(parents=True, exist_ok=True)
        trace, wall, summary = _run_sampler(cfg, loaded["problem"],
                                            loaded.get("checkpoint"),
                                            name, sub, written)
        metrics = compute_metrics(trace, wall)
        _write_json(sub / "metrics.json", {
            "seed": cfg.seed,
            "config": cfg.resolved(),
            "metrics": metrics,
        }, written)
        _emit_plot_data(trace, sub, written)
        table[name] = metrics
        runs[name] = summary
    first, second = names
    ratios = {}
    if table[second]["ess_aggregate"] > 0:
        ratios["ess_aggregate_ratio"] = (table[first]["ess_aggregate"]
                                         / table[second]["ess_aggregate"])
    if table[first]["ess_per_hour"] and table[second]["ess_per_hour"]:
        ratios["ess_per_hour_ratio"] = (table[first]["ess_per_hour"]
                                        / table[second]["ess_per_hour"])
    if table[second]["naive_loss"] != 0:
        gap = abs(table[first]["naive_loss"] - table[second]["naive_loss"])
        ratios["naive_loss_rel_gap"] = gap / abs(table[second]["naive_loss"])
    _write_json(out / "comparison.json", {
        "seed": cfg.seed,
        "config": cfg.resolved(),
        "problem": str(cfg.problem),
        "table": table,
        "ratios": ratios,
    }, written)
    summary = {
        "samplers": names,
        "runs": runs,
        "naive_loss": {n: table[n]["naive_loss"] for n in names},
        "ess_aggregate": {n: table[n]["ess_aggregate"] for n in names},
    }
    outputs = {"comparison": "comparison.json",
               **{n: f"{n}/trace" for n in names}}
    return {"outputs": outputs, "summary": summary}


_STAGE_FUNCS = {
    "generate": _stage_generate,
    "train": _stage_train,
    "sample": _stage_sample,
    "evaluate": _stage_evaluate,
    "compare": _stage_compare,
}


# --- entry point -------------------------------------------------------------------


def run_experiment(stage: str, cfg: ExperimentConfig) -> dict:
    """Run one stage; returns the report document written to out/report.json.

    Configuration problems raise ConfigError before anything is written.
    Later failures raise StageError carrying the paths already written, and
    leave an error.json marker flagging the output directory as partial.
    """
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r} (expected one of "
                          f"{', '.join(STAGES)})")
    loaded = _preflight(stage, cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    written: list = []
    try:
        body = _STAGE_FUNCS[stage](cfg, loaded, out, written)
    except ConfigError:
        raise
    except Exception as exc:
        partial = [_relative(Path(p), out) for p in written]
        marker = {
            "stage": stage,
            "error": type(exc).__name__,
            "message": str(exc),
            "partial_outputs": partial,
        }
        (out / "error.json").write_text(json.dumps(marker, indent=1) + "\n")
        raise StageError(stage, partial,
                         f"stage {stage!r} failed: {exc}") from exc
    (out / "error.json").unlink(missing_ok=True)
    report = {
        "stage": stage,
        "seed": cfg.seed,
        "config": cfg.resolved(),
        "outputs": body["outputs"],
        "summary": body["summary"],
    }
    (out / "report.json").write_text(json.dumps(report, indent=1) + "\n")
    return report

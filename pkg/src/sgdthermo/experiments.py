"""Declarative experiment configs and the pipelines behind each figure.

A config is a TOML file with [experiment], [model], [engine], [analysis] and
[output] tables.  ``load_config`` validates everything before any run starts;
``run_experiment`` executes and writes artifacts into an output directory.
"""

from __future__ import annotations

import hashlib
import json
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__, engines, io, models, stationary, trajstats
from .errors import InvalidArgument

KINDS = ("stationary", "training-curve", "posterior-kl")
DATA_ENV = "SGDTHERMO_DATA_DIR"
MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")


@dataclass(frozen=True)
class ModelSection:
    kind: str = "nonlinear-regression"
    lam: float = 10.0
    eps: float = 0.1
    data: str = "regression"  # regression | mnist
    M: int = 200
    data_seed: int = 1


@dataclass(frozen=True)
class EngineSection:
    modes: tuple = ("sgd-wr",)
    eta: float = 1e-7
    m: int = 10
    steps: int = 1_000_000
    burn_in: int = 200_000
    runs: int = 1
    seed: int = 0
    zeta: float = 0.0
    init: str = "stationary"  # minimum | stationary | random
    init_sd: float = 0.1
    thinning: int = 1
    record_every: int = 1000  # training-curve sampling interval


@dataclass(frozen=True)
class AnalysisSection:
    ells: tuple = (1, 2, 3)
    entropy: bool = True
    fdt: bool = False
    fdt_records: int = 2000
    eta_grid: tuple = (1e-7, 3.1622776601683795e-7, 1e-6, 3.1622776601683795e-6, 1e-5)
    wor_variant: str = "exact"


@dataclass(frozen=True)
class OutputSection:
    svg: bool = False
    trajectories: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    kind: str
    model: ModelSection = field(default_factory=ModelSection)
    engine: EngineSection = field(default_factory=EngineSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    output: OutputSection = field(default_factory=OutputSection)
    source_hash: str = ""

    def to_dict(self):
        d = asdict(self)
        d.pop("source_hash")
        return d

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(canon.encode()).hexdigest()


def _section(cls, raw, name):
    raw = dict(raw or {})
    known = {f for f in cls.__dataclass_fields__}
    unknown = set(raw) - known
    if unknown:
        raise InvalidArgument(f"[{name}] has unknown keys: {sorted(unknown)}")
    for key, value in list(raw.items()):
        if isinstance(value, list):
            raw[key] = tuple(value)
    try:
        return cls(**raw)
    except TypeError as exc:
        raise InvalidArgument(f"[{name}]: {exc}") from exc


def parse_config(text: str, name="experiment") -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise InvalidArgument(f"config does not parse: {exc}") from exc
    unknown = set(raw) - {"experiment", "model", "engine", "analysis", "output"}
    if unknown:
        raise InvalidArgument(f"unknown config tables: {sorted(unknown)}")
    exp = dict(raw.get("experiment", {}))
    cfg = ExperimentConfig(
        name=str(exp.get("name", name)),
        kind=str(exp.get("kind", "")),
        model=_section(ModelSection, raw.get("model"), "model"),
        engine=_section(EngineSection, raw.get("engine"), "engine"),
        analysis=_section(AnalysisSection, raw.get("analysis"), "analysis"),
        output=_section(OutputSection, raw.get("output"), "output"),
        source_hash=hashlib.sha256(text.encode()).hexdigest(),
    )
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise InvalidArgument(f"config file {path} not found")
    return parse_config(p.read_text(), p.stem)


def mnist_paths():
    root = Path(os.environ.get(DATA_ENV, "data"))
    found = []
    for base in MNIST_FILES:
        for cand in (root / base, root / (base + ".gz"), root / base.replace("-idx", ".idx")):
            if cand.is_file():
                found.append(cand)
                break
        else:
            raise InvalidArgument(f"MNIST file {base} not found under {root} (set {DATA_ENV})")
    return found


def validate(cfg: ExperimentConfig) -> None:
    if cfg.kind not in KINDS:
        raise InvalidArgument(f"experiment.kind must be one of {KINDS}, got {cfg.kind!r}")
    mo, en, an = cfg.model, cfg.engine, cfg.analysis
    if mo.kind not in models.KINDS:
        raise InvalidArgument(f"unknown model kind {mo.kind!r}")
    if mo.data not in ("regression", "mnist"):
        raise InvalidArgument("model.data must be 'regression' or 'mnist'")
    if (mo.data == "mnist") != (mo.kind == "linear-classifier"):
        raise InvalidArgument("the linear classifier goes with MNIST data and only with it")
    if mo.lam < 0 or mo.eps <= 0 or mo.M < 1:
        raise InvalidArgument("model needs lam >= 0, eps > 0, M >= 1")
    if not en.modes or any(md not in engines.MODES for md in en.modes):
        raise InvalidArgument(f"engine.modes must be drawn from {engines.MODES}")
    if not en.eta > 0 or en.runs < 1 or en.steps < 0 or en.burn_in < 0 or en.thinning < 1:
        raise InvalidArgument("engine needs eta > 0, runs >= 1, steps >= 0, burn_in >= 0, thinning >= 1")
    if en.init not in ("minimum", "stationary", "random"):
        raise InvalidArgument("engine.init must be minimum, stationary or random")
    if en.record_every < 1:
        raise InvalidArgument("engine.record_every must be >= 1")
    M = mo.M if mo.data == "regression" else 60000
    if not 1 <= en.m <= M:
        raise InvalidArgument(f"engine.m={en.m} must lie in [1, {M}]")
    if any(md in engines.WOR_MODES for md in en.modes) and M % en.m:
        raise InvalidArgument(f"WOR modes need M={M} divisible by m={en.m}")
    if "earthquake" in en.modes and en.zeta <= 0:
        raise InvalidArgument("earthquake mode needs zeta > 0")
    if cfg.kind == "stationary" and en.burn_in >= en.steps:
        raise InvalidArgument("engine.burn_in must be smaller than engine.steps")
    if any(int(l) < 1 for l in an.ells):
        raise InvalidArgument("analysis.ells must be positive")
    if cfg.kind == "posterior-kl":
        if mo.kind != "linearized-regression":
            raise InvalidArgument("posterior-kl needs the linearized regression model")
        if not an.eta_grid or any(e <= 0 for e in an.eta_grid):
            raise InvalidArgument("analysis.eta_grid must hold positive learning rates")
    if an.wor_variant not in ("exact", "full", "dominant", "hdh"):
        raise InvalidArgument("analysis.wor_variant must be exact, full, dominant or hdh")
    if mo.data == "mnist":
        mnist_paths()


# ---------------------------------------------------------------------------
# building blocks shared with the tests

def build_problem(mo: ModelSection):
    if mo.data == "mnist":
        imgs, labels = mnist_paths()
        data = models.load_mnist(imgs, labels)
        model = models.linear_classifier(data.d_in, data.d_out, mo.lam, M=data.M)
        return model, data
    data = models.gen_regression_dataset(mo.M, mo.eps, mo.data_seed)
    if mo.kind == "nonlinear-regression":
        return models.nonlinear_regression(mo.eps, mo.lam), data
    return models.linearized_regression(mo.eps, mo.lam), data


def default_start(model, seed=0, sd=0.1):
    return np.random.default_rng([int(seed), 2**31 - 1]).normal(0.0, sd, model.N)


def locate_minimum(model, data, seed=0):
    """Stage one: gradient-free start, then Newton on the full loss."""
    if model.kind == "nonlinear-regression":
        # a deterministic start in the basin used throughout
        start = np.array([1.2, -1.2, -0.6, -0.6, -0.9, -0.9, 0.0])
    else:
        start = np.zeros(model.N)
    return stationary.find_minimum(model, data, start)


def _start_point(theory, init, rng, init_sd, N):
    if init == "minimum":
        return np.array(theory.theta0, dtype=float)
    if init == "random":
        return rng.normal(0.0, init_sd, N)
    L = np.linalg.cholesky(theory.Sigma + 1e-300 * np.eye(N))
    return theory.theta0 + L @ rng.standard_normal(N)


def _one_run(args):
    model, data, theory, cfg, burn_in, ells, entropy, init, init_sd = args
    rng = np.random.default_rng([cfg.seed, cfg.run_index, 17])
    start = _start_point(theory, init, rng, init_sd, model.N)
    acc = trajstats.StationaryAccumulator(theory.theta0, theory if entropy else None, ells, burn_in)
    for steps, thetas in engines.stream(model, data, start, cfg):
        acc.update(steps, thetas)
    return acc


def map_runs(fn, tasks, workers=1):
    """Run tasks in a process pool (or inline for one worker); results keep task order."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def stationary_ensemble(model, data, theory, base_cfg: engines.EngineConfig, runs, burn_in,
                        ells=(1, 2, 3), entropy=True, init="stationary", init_sd=0.1, workers=1):
    """Independent runs started near the stationary state, merged into one FluctuationReport."""
    tasks = [(model, data, theory, engines.with_run(base_cfg, r), burn_in, ells, entropy, init, init_sd)
             for r in range(runs)]
    accs = map_runs(_one_run, tasks, workers)
    return trajstats.merge_report(accs, theory if entropy else None, base_cfg.mode)


def _final_error(args):
    model, data, start, cfg, L0, every = args
    losses = []
    for steps, thetas in engines.stream(model, data, start, cfg):
        for s, th in zip(steps, thetas):
            if s % every == 0:
                losses.append((int(s), models.loss(model, data, th) / L0 - 1.0))
    return losses


def training_curves(model, data, theta0, eta, m, steps, runs, seed, init_sd=0.1, every=1000,
                    modes=("sgd-wr", "sgd-wor"), workers=1):
    """Relative loss error L/L(theta0) - 1 averaged over runs, WR and WOR sharing each start."""
    L0 = models.loss(model, data, theta0)
    n = data.M // m
    every = int(np.lcm(every, n))
    out = {}
    for mode in modes:
        thin = every if mode not in engines.WOR_MODES else every // n
        tasks = []
        for r in range(runs):
            start = np.random.default_rng([seed, r, 23]).normal(0.0, init_sd, model.N)
            cfg = engines.EngineConfig(mode=mode, eta=eta, m=m, steps=steps, seed=seed, run_index=r, thinning=thin)
            tasks.append((model, data, start, cfg, L0, every))
        out[mode] = map_runs(_final_error, tasks, workers)
    return out


def posterior_kl_table(model, data, etas, m, wor_variant="hdh"):
    rows = []
    for eta in etas:
        row = [float(eta)]
        for alg in ("sgld", "sgworld", "sgworld-uncorrected"):
            try:
                row.append(stationary.posterior_kl(model, data, eta, m, alg, wor_variant)["kl"])
            except (stationary.NotAMinimum, stationary.NoMinimum, stationary.CorrectionTooLarge):
                # no stationary Gaussian exists at this learning rate
                row.append(float("inf"))
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# orchestration

def code_version() -> str:
    try:
        here = Path(__file__).resolve().parent
        rev = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


TOLERANCES = {
    "sigma_rel": 0.15,
    "circulation_rel": 0.15,
    "magnitude_mask": 1e-3,
    "ift_abs": 0.01,
    "dft_slope_abs": 0.1,
    "entropy_rate_rel": 0.10,
    "earthquake_sigma_rel": 0.10,
    "earthquake_c_se": 3.0,
    "wor_trace_ratio": [1e-5, 1e-3],
    "wor_center_rel": 0.2,
    "kl_slope_sgld": [2.0, 0.3],
    "kl_slope_sgworld": [6.0, 0.8],
    "newton_grad_rel": 1e-10,
    "lyapunov_fixed_point_rel": 1e-10,
}


def run_experiment(cfg: ExperimentConfig, out_dir, workers=1, seed_override=None, log=print) -> dict:
    """Execute a validated config and write its artifacts; returns the summary dict."""
    if seed_override is not None:
        cfg = replace(cfg, engine=replace(cfg.engine, seed=int(seed_override)))
    t0 = time.time()
    model, data = build_problem(cfg.model)
    theta0 = locate_minimum(model, data)
    results, files = {}, {}
    staging = {}
    if cfg.kind == "stationary":
        _stationary_pipeline(cfg, model, data, theta0, workers, results, staging, log)
    elif cfg.kind == "training-curve":
        _training_pipeline(cfg, model, data, theta0, workers, results, staging, log)
    else:
        _posterior_pipeline(cfg, model, data, results, staging)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, writer in staging.items():
        writer(out / name)
        files[name] = str(out / name)
    summary = {
        "name": cfg.name,
        "kind": cfg.kind,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "config_source_hash": cfg.source_hash,
        "code_version": code_version(),
        "seeds": {"base": cfg.engine.seed, "runs": list(range(cfg.engine.runs)),
                  "derivation": "SeedSequence([base, run_index])"},
        "wall_time_s": time.time() - t0,
        "tolerances": TOLERANCES,
        "results": results,
        "artifacts": sorted(files),
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, default=_json_default)
    return summary


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def _mat_writer(A, symbol, theta):
    return lambda p: io.write_matrix_csv(p, A, symbol, theta)


def _stationary_pipeline(cfg, model, data, theta0, workers, results, staging, log):
    en, an = cfg.engine, cfg.analysis
    results["theta0"] = theta0.tolist()
    staging["theta0.csv"] = _mat_writer(theta0[None, :], "theta0", theta0)
    reports = {}
    for mode in en.modes:
        if mode == "sgd-wr":
            theory = stationary.theory_sgd_wr(model, data, en.eta, en.m, theta0)
        elif mode == "sgd-wor":
            theory = stationary.theory_sgd_wor(model, data, en.eta, en.m, theta0, an.wor_variant)
        elif mode == "earthquake":
            theory = stationary.theory_earthquake(model, data, en.eta, en.zeta, theta0)
        else:
            raise InvalidArgument(f"stationary experiments support sgd-wr, sgd-wor and earthquake, not {mode}")
        thin = en.thinning
        steps = en.steps
        if mode in engines.WOR_MODES:
            n = data.M // en.m
            steps = (steps // n) * n
        base = engines.EngineConfig(mode=mode, eta=en.eta, m=en.m, steps=steps, seed=en.seed,
                                    zeta=en.zeta, thinning=thin)
        log(f"[{cfg.name}] {mode}: {en.runs} runs x {steps} steps")
        rep = stationary_ensemble(model, data, theory, base, en.runs, en.burn_in, tuple(an.ells),
                                  an.entropy and mode == "sgd-wr", en.init, en.init_sd, workers)
        if an.fdt and mode != "sgd-wor":
            rep.fdt_trace = _fdt(model, data, theory, base, en, an)
        reports[mode] = rep
        tag = {"sgd-wr": "", "sgd-wor": "_wor", "earthquake": "_earthquake"}[mode]
        th = theory.theta0
        staging[f"sigma_theory{tag}.csv"] = _mat_writer(theory.Sigma, "Sigma_theory", th)
        staging[f"sigma_empirical{tag}.csv"] = _mat_writer(rep.Sigma_emp, "Sigma_empirical", th)
        staging[f"C_theory{tag}.csv"] = _mat_writer(theory.C, "C_theory", th)
        staging[f"C_empirical{tag}.csv"] = _mat_writer(rep.area_rate_emp, "C_empirical", th)
        staging[f"C_empirical_se{tag}.csv"] = _mat_writer(rep.area_se, "C_empirical_se", th)
        staging[f"D_theory{tag}.csv"] = _mat_writer(theory.D0, "D_theory", th)
        staging[f"theory{tag}.json"] = (lambda t: (lambda p: t.to_json(p)))(theory)
        staging[f"fluctuations{tag}.json"] = (lambda r: (lambda p: r.to_json(p)))(rep)
        if rep.sigma:
            staging[f"dft_curve{tag}.csv"] = (lambda r: (lambda p: r.write_dft_csv(p)))(rep)
            staging[f"sigma_samples{tag}.csv"] = (lambda r: (lambda p: r.write_sigma_hist_csv(p)))(rep)
            rows = [[ell, st["ift"], st["mean_sigma"] / ell, theory.entropy_rate, st["dft_slope"], st["count"]]
                    for ell, st in sorted(rep.sigma.items())]
            staging[f"fluctuation_summary{tag}.csv"] = (lambda rw: (lambda p: io.write_table_csv(
                p, ["ell", "ift", "mean_sigma_per_step", "entropy_rate_theory", "dft_slope", "count"], rw)))(rows)
        results[mode] = _compare(theory, rep)
    if "sgd-wr" in reports and "sgd-wor" in reports:
        tw, tr = np.trace(reports["sgd-wor"].Sigma_emp), np.trace(reports["sgd-wr"].Sigma_emp)
        results["wor_wr_trace_ratio"] = float(tw / tr)
    if cfg.output.svg:
        staging["sigma_scatter.svg"] = lambda p: _svg_scatter(p, results)


def _fdt(model, data, theory, base, en, an):
    cfg = replace(base, run_index=0, steps=min(base.steps, en.burn_in + an.fdt_records * max(1, base.thinning)))
    traj = engines.run(model, data, theory.theta0, cfg)
    burn = int(np.searchsorted(traj.steps, en.burn_in))
    return trajstats.fdt_trace_check(traj, model, data, theory.theta0, theory.eta, theory.D0, burn)


def _compare(theory, rep):
    S, Se = theory.Sigma, rep.Sigma_emp
    C, Ce = theory.C, rep.area_rate_emp
    out = {
        "Sigma_rel_err_max_dominant": _rel_err(S, Se),
        "C_rel_err_max_dominant": _rel_err(C, Ce) if np.any(C) else None,
        "Sigma_norm_rel": float(np.linalg.norm(Se - S) / max(np.linalg.norm(Se), 1e-300)),
        "mean_offset": rep.mu_emp.tolist(),
        "records": rep.records,
        "entropy_rate_theory": float(theory.entropy_rate),
    }
    if rep.sigma:
        out["ift"] = {str(l): st["ift"] for l, st in rep.sigma.items()}
        out["mean_sigma_per_step"] = {str(l): st["mean_sigma"] / l for l, st in rep.sigma.items()}
        out["dft_slope"] = {str(l): st["dft_slope"] for l, st in rep.sigma.items()}
    if rep.fdt_trace is not None:
        out["fdt_trace"] = list(rep.fdt_trace)
    return out


def _rel_err(T, E, mask_rel=1e-3):
    T = np.asarray(T)
    mask = np.abs(T) >= mask_rel * np.abs(T).max()
    if not mask.any():
        return None
    return float(np.max(np.abs(E - T)[mask] / np.abs(T)[mask]))


def _training_pipeline(cfg, model, data, theta0, workers, results, staging, log):
    en = cfg.engine
    modes = tuple(m for m in en.modes if m in ("sgd-wr", "sgd-wor"))
    log(f"[{cfg.name}] training curves: {en.runs} runs x {en.steps} steps for {modes}")
    curves = training_curves(model, data, theta0, en.eta, en.m, en.steps, en.runs, en.seed,
                             en.init_sd, en.record_every, modes, workers)
    steps = [s for s, _ in curves[modes[0]][0]]
    cols = ["step"] + [f"{m}_mean" for m in modes]
    rows = []
    for k, s in enumerate(steps):
        rows.append([s] + [float(np.mean([run[k][1] for run in curves[m]])) for m in modes])
    staging["loss_curve.csv"] = lambda p: io.write_table_csv(p, cols, rows)
    finals = {m: [run[-1][1] for run in curves[m]] for m in modes}
    staging["final_errors.csv"] = lambda p: io.write_table_csv(
        p, ["run"] + list(modes), [[r] + [finals[m][r] for m in modes] for r in range(en.runs)])
    results["final_mean_rel_error"] = {m: float(np.mean(v)) for m, v in finals.items()}


def _posterior_pipeline(cfg, model, data, results, staging):
    an = cfg.analysis
    rows = posterior_kl_table(model, data, an.eta_grid, cfg.engine.m)
    staging["kl_vs_eta.csv"] = lambda p: io.write_table_csv(
        p, ["eta", "kl_sgld", "kl_sgworld", "kl_sgworld_uncorrected"], rows)
    etas = [r[0] for r in rows]
    fin = lambda k: [(e, r[k]) for e, r in zip(etas, rows) if np.isfinite(r[k]) and r[k] > 0]
    slope = lambda pts: stationary.loglog_slope(*zip(*pts)) if len(pts) >= 2 else None
    results["kl_slope"] = {"sgld": slope(fin(1)), "sgworld": slope(fin(2)),
                           "sgworld_uncorrected_small_eta": slope(fin(3)[:2])}
    results["kl_table"] = rows


def _svg_scatter(path, results):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    for mode, res in results.items():
        if isinstance(res, dict) and "Sigma_norm_rel" in res:
            ax.bar(mode, res["Sigma_norm_rel"])
    ax.set_ylabel("|Sigma_emp - Sigma_theory| / |Sigma_emp|")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)

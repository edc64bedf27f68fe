"""Experiment orchestration: configs, seeded trials, sweeps, and CSV persistence."""
from __future__ import annotations

import csv
import dataclasses
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps

from . import committee as cm
from . import data as dt
from . import mlp as ml
from . import perceptron as pc
from . import routing as rt

SWEEPABLE = ("alpha", "sigma", "mu", "M")

MODEL_METHODS = {
    "perceptron": ("vanilla", "rsa", "mcover"),
    "committee": ("sgd", "rsgd", "mcover"),
    "mlp": ("mcover",),
}

# per-model defaults for fields left unset in the config
_RESOLVED_DEFAULTS = {
    "perceptron": {"kernel": "ring", "lr": 0.5, "batch": 100, "epochs": 500},
    "committee": {"kernel": "uniform", "lr": 0.5, "batch": 100, "epochs": 500},
    "mlp": {"kernel": "ring", "lr": 0.05, "batch": 256, "epochs": 40},
}


class ConfigError(ValueError):
    """Malformed experiment configuration."""


def _parse_bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"cannot parse boolean from {v!r}")


@dataclass
class ExperimentConfig:
    """Flat experiment description; unknown keys are rejected at parse time."""

    model: str = "perceptron"
    method: str = "mcover"
    trials: int = 20
    seed: int = 0
    out: str = "results.csv"
    workers: int = 1
    # cover / kernel
    m: int = 3
    kernel: str = ""
    mu: float = 2.0
    sigma: float = 3.0
    s_perm: int = 10
    dest_s: int = 10
    mode: str = "empirical"
    shared_mixers: bool = False
    # perceptron
    n: int = 1000
    alpha: float = 1.58
    gamma: float = 1.0
    t_max: float = 0.4
    t_min: float = 0.01
    dt: float = 1e-4
    # committee
    k: int = 9
    n_input: int = 200
    p_train: int = 1000
    p_test: int = 2000
    class_a: int = 0
    class_b: int = 1
    threshold: float = 0.5
    beta0: float = 1.0
    beta_growth: float = 1.005
    lr: float = math.nan
    lr_decay: float = 1.0
    coupling: float = 0.5
    coupling_growth: float = 1.001
    batch: int = 0
    epochs: int = 0
    loss_stop: float = 1e-7
    binarize_readout: bool = False
    # mlp
    arch: str = "784,512,512,10"
    blocks: str = ""
    momentum: float = 0.9
    nesterov: bool = True
    init_noise: float = 0.01
    n_train: int = 10000
    n_test: int = 2000
    dtype: str = "float64"
    eval_batch: int = 4096
    data: str = "synthetic"

    def validate(self) -> "ExperimentConfig":
        if self.model not in MODEL_METHODS:
            raise ConfigError(f"unknown model {self.model!r}")
        if self.method not in MODEL_METHODS[self.model]:
            raise ConfigError(
                f"method {self.method!r} not available for model {self.model!r} "
                f"(choose from {MODEL_METHODS[self.model]})")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.m < 1:
            raise ConfigError("cover count m must be >= 1")
        if self.kernel and self.kernel not in ("ring", "gaussian_ring", "uniform", "identity"):
            raise ConfigError(f"unknown kernel family {self.kernel!r}")
        if self.mode not in ("empirical", "exact"):
            raise ConfigError(f"unknown mixer mode {self.mode!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        return self

    def resolved(self) -> "ExperimentConfig":
        """Fill model-dependent defaults for fields left unset."""
        cfg = dataclasses.replace(self)
        defaults = _RESOLVED_DEFAULTS[self.model]
        if not cfg.kernel:
            cfg.kernel = defaults["kernel"]
        if math.isnan(cfg.lr):
            cfg.lr = defaults["lr"]
        if cfg.batch == 0:
            cfg.batch = defaults["batch"]
        if cfg.epochs == 0:
            cfg.epochs = defaults["epochs"]
        return cfg.validate()

    def echo(self) -> dict:
        return dataclasses.asdict(self)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def config_from_mapping(mapping: dict) -> ExperimentConfig:
    """Build a config from string-or-typed key/value pairs; unknown keys are errors."""
    kwargs = {}
    for key, value in mapping.items():
        name = key.strip().replace("-", "_")
        if name == "M":
            name = "m"
        if name not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        ftype = _FIELD_TYPES[name]
        try:
            if ftype in ("int", int):
                kwargs[name] = int(value)
            elif ftype in ("float", float):
                kwargs[name] = float(value)
            elif ftype in ("bool", bool):
                kwargs[name] = value if isinstance(value, bool) else _parse_bool(value)
            else:
                kwargs[name] = str(value)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})")
    return ExperimentConfig(**kwargs)


def load_config_file(path) -> dict:
    """Flat ``key = value`` text file; '#' starts a comment."""
    mapping = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            mapping[key.strip()] = value.strip()
    return mapping


@dataclass
class TrialResult:
    trial: int
    seed: int
    metrics: dict = field(default_factory=dict)
    wall_ms: float = 0.0
    diverged: bool = False
    error: str = ""
    trace: list | None = None
    data_checksum: str = ""
    config_echo: dict = field(default_factory=dict)


def _build_kernel(cfg: ExperimentConfig) -> rt.MixKernel:
    return rt.kernel_from_family(cfg.kernel, cfg.m, cfg.mu, cfg.sigma)


def _perceptron_streams(seed: int):
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(4)
    return [np.random.default_rng(c) for c in children]


def run_perceptron_trial(cfg: ExperimentConfig, trial: int, seed: int) -> TrialResult:
    rng_data, rng_route, rng_init, rng_dyn = _perceptron_streams(seed)
    t0 = time.perf_counter()
    instance = pc.generate_instance(cfg.n, cfg.alpha, rng_data)
    schedule = pc.AnnealSchedule(cfg.t_max, cfg.t_min, cfg.dt)
    try:
        if cfg.method == "vanilla":
            w0 = pc.random_ensemble(1, cfg.n, rng_init)
            w, trace = pc.vanilla_anneal(instance, w0[0], schedule, rng_dyn)
            final = w[None, :]
        elif cfg.method == "rsa":
            ens = pc.random_ensemble(cfg.m, cfg.n, rng_init)
            rngs = [np.random.default_rng(c) for c in
                    np.random.SeedSequence(seed + 7_777_777).spawn(cfg.m)]
            final, trace = pc.rsa_anneal(instance, ens, cfg.gamma, schedule, rngs)
        else:  # mcover
            kernel = _build_kernel(cfg)
            bank = rt.sample_bank(kernel, cfg.s_perm, rng_route)
            dbank = pc.build_destination_bank(cfg.n, bank, min(cfg.dest_s, cfg.n),
                                              rng_route)
            ens = pc.random_ensemble(cfg.m, cfg.n, rng_init)
            cache = pc.RoutedMarginCache(instance, ens, dbank)
            final, trace = pc.mcover_anneal(instance, ens, dbank, cache, schedule,
                                            rng_dyn)
        try:
            r, eps = pc.collapse_and_score(final, instance.w_star)
        except pc.DegenerateCollapseError:
            r, eps = 0.0, 0.5
        metrics = {"R": r, "eps_g": eps, "final_energy": trace[-1],
                   "sweeps": schedule.num_sweeps}
        return TrialResult(trial=trial, seed=seed, metrics=metrics,
                           wall_ms=(time.perf_counter() - t0) * 1000.0,
                           trace=trace, data_checksum=f"instance:{seed}",
                           config_echo=cfg.echo())
    except (pc.CacheConsistencyError, rt.DegenerateKernelError) as exc:
        return TrialResult(trial=trial, seed=seed, metrics={}, diverged=True,
                           error=str(exc),
                           wall_ms=(time.perf_counter() - t0) * 1000.0,
                           config_echo=cfg.echo())


def load_committee_dataset(cfg: ExperimentConfig):
    """Synthetic committee-teacher data, or a binarized two-class IDX pair."""
    if cfg.data == "synthetic":
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xDA7A)))
        train, test = dt.synthetic_committee_teacher(cfg.n_input, cfg.k,
                                                     cfg.p_train, cfg.p_test, rng)
        return train, test, f"synthetic-teacher:{cfg.seed}"
    root = Path(os.environ.get("MCOVER_DATA", "."))
    base = Path(cfg.data)
    if not base.is_absolute():
        base = root / base
    train_raw = dt.read_idx(base / "train-images-idx3-ubyte",
                            base / "train-labels-idx1-ubyte")
    test_raw = dt.read_idx(base / "t10k-images-idx3-ubyte",
                           base / "t10k-labels-idx1-ubyte")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xDA7A)))
    train = dt.binarize_two_class(train_raw, cfg.class_a, cfg.class_b,
                                  cfg.threshold, cfg.p_train, rng)
    test = dt.binarize_two_class(test_raw, cfg.class_a, cfg.class_b, cfg.threshold)
    checksum = train_raw.provenance["images_sha256"][:16]
    return train, test, checksum


def run_committee_trial(cfg: ExperimentConfig, trial: int, seed: int,
                        dataset) -> TrialResult:
    train, test, checksum = dataset
    ss = np.random.SeedSequence(seed)
    rng_route, rng_train = [np.random.default_rng(c) for c in ss.spawn(2)]
    schedule = cm.SurrogateSchedule(
        beta0=cfg.beta0, beta_growth=cfg.beta_growth, lr0=cfg.lr,
        lr_decay=cfg.lr_decay, max_epochs=cfg.epochs, loss_stop=cfg.loss_stop,
        batch_size=cfg.batch, coupling0=cfg.coupling,
        coupling_growth=cfg.coupling_growth)
    n = train.inputs.shape[1]
    t0 = time.perf_counter()
    try:
        routing = None
        if cfg.method == "mcover" and cfg.m > 1:
            kernel = _build_kernel(cfg)
            bank = rt.sample_bank(kernel, cfg.s_perm, rng_route)
            routing = cm.build_committee_routing(cfg.k, n, bank,
                                                 min(cfg.dest_s, cfg.k * n),
                                                 rng_route)
        res = cm.train_committee(cfg.method, train.inputs.astype(np.float64),
                                 train.labels.astype(np.float64),
                                 test.inputs.astype(np.float64),
                                 test.labels.astype(np.float64),
                                 cfg.k, cfg.m, schedule, rng_train,
                                 routing=routing,
                                 binarize_readout=cfg.binarize_readout)
        metrics = {"test_error": res.test_error, "train_error": res.train_error,
                   "final_loss": res.final_loss, "epochs": res.epochs_run}
        return TrialResult(trial=trial, seed=seed, metrics=metrics,
                           wall_ms=(time.perf_counter() - t0) * 1000.0,
                           trace=res.loss_trace, data_checksum=checksum,
                           config_echo=cfg.echo())
    except cm.DivergenceError as exc:
        return TrialResult(trial=trial, seed=seed, metrics={}, diverged=True,
                           error=str(exc),
                           wall_ms=(time.perf_counter() - t0) * 1000.0,
                           data_checksum=checksum, config_echo=cfg.echo())


def load_mlp_dataset(cfg: ExperimentConfig):
    """Normalized flattened image data: (train_x, train_y, test_x, test_y, checksum)."""
    if cfg.data == "synthetic":
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x1D8)))
        train, test = dt.synthetic_image_classes(cfg.n_train, cfg.n_test, rng)
        checksum = f"synthetic-images:{cfg.seed}"
    else:
        root = Path(os.environ.get("MCOVER_DATA", "."))
        base = Path(cfg.data)
        if not base.is_absolute():
            base = root / base
        train = dt.read_idx(base / "train-images-idx3-ubyte",
                            base / "train-labels-idx1-ubyte")
        test = dt.read_idx(base / "t10k-images-idx3-ubyte",
                           base / "t10k-labels-idx1-ubyte")
        if cfg.n_train < train.count:
            train = dt.IdxDataset(train.images[:cfg.n_train],
                                  train.labels[:cfg.n_train], train.provenance)
        checksum = train.provenance.get("images_sha256", "")[:16]
    train_x = dt.normalize_mnist(train)
    test_x = dt.normalize_mnist(test)
    return (train_x, train.labels.astype(np.int64), test_x,
            test.labels.astype(np.int64), checksum)


def _parse_arch(cfg: ExperimentConfig) -> ml.MlpArchitecture:
    try:
        dims = tuple(int(v) for v in cfg.arch.split(","))
    except ValueError:
        raise ConfigError(f"bad architecture string {cfg.arch!r}")
    blocks = None
    if cfg.blocks:
        try:
            blocks = tuple(int(v) for v in cfg.blocks.split(","))
        except ValueError:
            raise ConfigError(f"bad blocks string {cfg.blocks!r}")
    return ml.MlpArchitecture(dims, blocks)


def run_mlp_trial(cfg: ExperimentConfig, trial: int, seed: int, dataset) -> TrialResult:
    train_x, train_y, test_x, test_y, checksum = dataset
    arch = _parse_arch(cfg)
    ss = np.random.SeedSequence(seed)
    rng_route, rng_init, rng_train = [np.random.default_rng(c) for c in ss.spawn(3)]
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    t0 = time.perf_counter()
    try:
        kernel = _build_kernel(cfg)
        mixers = ml.build_mixers(arch, kernel, cfg.s_perm, cfg.mode, rng_route,
                                 shared_per_layer=cfg.shared_mixers)
        ens = ml.init_ensemble(arch, cfg.m, mixers, rng_init,
                               init_noise=cfg.init_noise, dtype=dtype)
        res = ml.train_mlp(ens, train_x.astype(dtype), train_y,
                           test_x.astype(dtype), test_y, cfg.epochs, cfg.batch,
                           cfg.lr, cfg.momentum, cfg.nesterov, rng_train,
                           eval_batch=cfg.eval_batch)
        metrics = {"test_error": res.test_error, "train_error": res.train_error,
                   "final_loss": res.final_loss, "epochs": res.epochs_run}
        return TrialResult(trial=trial, seed=seed, metrics=metrics,
                           wall_ms=(time.perf_counter() - t0) * 1000.0,
                           trace=res.loss_trace, data_checksum=checksum,
                           config_echo=cfg.echo())
    except ml.DivergenceError as exc:
        return TrialResult(trial=trial, seed=seed, metrics={}, diverged=True,
                           error=str(exc),
                           wall_ms=(time.perf_counter() - t0) * 1000.0,
                           data_checksum=checksum, config_echo=cfg.echo())


_WORKER_STATE = {}


def _pool_init(cfg: ExperimentConfig, dataset):
    _WORKER_STATE["cfg"] = cfg
    _WORKER_STATE["dataset"] = dataset


def _pool_task(args):
    trial, seed = args
    cfg = _WORKER_STATE["cfg"]
    dataset = _WORKER_STATE["dataset"]
    return _dispatch_trial(cfg, trial, seed, dataset)


def _dispatch_trial(cfg: ExperimentConfig, trial: int, seed: int, dataset) -> TrialResult:
    if cfg.model == "perceptron":
        return run_perceptron_trial(cfg, trial, seed)
    if cfg.model == "committee":
        return run_committee_trial(cfg, trial, seed, dataset)
    return run_mlp_trial(cfg, trial, seed, dataset)


def prepare_dataset(cfg: ExperimentConfig):
    if cfg.model == "committee":
        return load_committee_dataset(cfg)
    if cfg.model == "mlp":
        return load_mlp_dataset(cfg)
    return None


def run_trials(cfg: ExperimentConfig, dataset=None) -> list:
    """Execute ``cfg.trials`` seeded trials; failures become diverged rows."""
    cfg = cfg.resolved()
    if dataset is None:
        dataset = prepare_dataset(cfg)
    tasks = [(t, cfg.seed + t) for t in range(cfg.trials)]
    if cfg.workers == 1:
        return [_dispatch_trial(cfg, t, s, dataset) for t, s in tasks]
    with ProcessPoolExecutor(max_workers=cfg.workers, initializer=_pool_init,
                             initargs=(cfg, dataset)) as pool:
        results = list(pool.map(_pool_task, tasks))
    return results


@dataclass
class SweepSummary:
    parameter: str
    value: float
    n_trials: int
    mean: float
    se: float
    ci95: float


def summarize(values) -> tuple:
    """Mean, standard error, and 95% CI half-width of a metric sample.

    The standard error uses the population standard deviation over the rows
    (s / sqrt(n) with ddof = 0); the CI uses a t quantile below 30 rows and
    the normal quantile above.
    """
    arr = np.asarray([v for v in values if math.isfinite(v)], dtype=np.float64)
    n = arr.size
    if n == 0:
        return 0, math.nan, math.nan, math.nan
    mean = float(arr.mean())
    if n == 1:
        return 1, mean, math.nan, math.nan
    se = float(arr.std(ddof=0) / math.sqrt(n))
    quantile = float(sps.t.ppf(0.975, n - 1)) if n < 30 else 1.959963984540054
    return n, mean, se, quantile * se


def format_mean_ci(mean: float, ci: float) -> str:
    """Benchmark-table layout, e.g. '0.0420 ± 0.0319'."""
    return f"{mean:.4f} ± {ci:.4f}"


PRIMARY_METRIC = {"perceptron": "eps_g", "committee": "test_error", "mlp": "test_error"}


def sweep(cfg: ExperimentConfig, parameter: str, values) -> tuple:
    """Run trials for each swept value; returns (rows, summaries).

    ``rows`` is a list of (value, TrialResult) in execution order.
    """
    if parameter not in SWEEPABLE:
        raise ConfigError(f"sweep parameter must be one of {SWEEPABLE}, got {parameter!r}")
    field_name = "m" if parameter == "M" else parameter
    rows, summaries = [], []
    for value in values:
        if parameter == "M":
            sub = dataclasses.replace(cfg, m=int(value))
        else:
            sub = dataclasses.replace(cfg, **{field_name: float(value)})
        results = run_trials(sub)
        rows.extend((value, r) for r in results)
        metric = PRIMARY_METRIC[cfg.model]
        vals = [r.metrics.get(metric, math.nan) for r in results if not r.diverged]
        n, mean, se, ci = summarize(vals)
        summaries.append(SweepSummary(parameter=parameter, value=float(value),
                                      n_trials=n, mean=mean, se=se, ci95=ci))
    return rows, summaries


PERCEPTRON_COLUMNS = ("trial", "seed", "method", "N", "alpha", "M", "mu", "sigma",
                      "R", "eps_g", "final_energy", "sweeps", "wall_ms")
COMMITTEE_COLUMNS = ("trial", "seed", "method", "K", "n", "M", "mu", "sigma",
                     "sperm", "dest_s", "test_error", "train_error", "final_loss",
                     "epochs", "wall_ms", "diverged")
MLP_COLUMNS = ("trial", "seed", "method", "arch", "M", "kernel", "mu", "sigma",
               "sperm", "mode", "test_error", "train_error", "final_loss",
               "epochs", "wall_ms", "diverged")


def csv_columns(model: str, method: str = "") -> tuple:
    if model == "perceptron":
        return PERCEPTRON_COLUMNS
    if model == "committee":
        return COMMITTEE_COLUMNS
    return MLP_COLUMNS


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def result_row(cfg: ExperimentConfig, res: TrialResult) -> dict:
    m = res.metrics
    nan = math.nan
    if cfg.model == "perceptron":
        return {"trial": res.trial, "seed": res.seed, "method": cfg.method,
                "N": cfg.n, "alpha": cfg.alpha, "M": cfg.m, "mu": cfg.mu,
                "sigma": cfg.sigma, "R": m.get("R", nan),
                "eps_g": m.get("eps_g", nan),
                "final_energy": m.get("final_energy", nan),
                "sweeps": m.get("sweeps", 0), "wall_ms": round(res.wall_ms, 3)}
    if cfg.model == "committee":
        return {"trial": res.trial, "seed": res.seed, "method": cfg.method,
                "K": cfg.k, "n": cfg.n_input, "M": cfg.m, "mu": cfg.mu,
                "sigma": cfg.sigma, "sperm": cfg.s_perm, "dest_s": cfg.dest_s,
                "test_error": m.get("test_error", nan),
                "train_error": m.get("train_error", nan),
                "final_loss": m.get("final_loss", nan),
                "epochs": m.get("epochs", 0), "wall_ms": round(res.wall_ms, 3),
                "diverged": int(res.diverged)}
    return {"trial": res.trial, "seed": res.seed, "method": cfg.method,
            "arch": cfg.arch, "M": cfg.m, "kernel": cfg.kernel, "mu": cfg.mu,
            "sigma": cfg.sigma, "sperm": cfg.s_perm, "mode": cfg.mode,
            "test_error": m.get("test_error", nan),
            "train_error": m.get("train_error", nan),
            "final_loss": m.get("final_loss", nan),
            "epochs": m.get("epochs", 0), "wall_ms": round(res.wall_ms, 3),
            "diverged": int(res.diverged)}


def write_results_csv(cfg: ExperimentConfig, results, path) -> None:
    """RFC-4180 CSV, one row per trial, column set fixed by model+method."""
    cols = csv_columns(cfg.model, cfg.method)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for res in results:
            row = result_row(cfg, res)
            writer.writerow([_fmt(row[c]) for c in cols])


def write_sweep_csv(cfg: ExperimentConfig, parameter: str, rows, path) -> None:
    cols = ("param", "value") + csv_columns(cfg.model, cfg.method)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for value, res in rows:
            sub = dataclasses.replace(cfg, **({"m": int(value)} if parameter == "M"
                                              else {parameter: float(value)}))
            row = result_row(sub, res)
            writer.writerow([parameter, _fmt(value)] + [_fmt(row[c]) for c in cols[2:]])


def write_summary_csv(cfg: ExperimentConfig, summaries, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("model", "method", "M", "param", "value", "n", "mean",
                         "se", "ci95"))
        for s in summaries:
            m_val = int(s.value) if s.parameter == "M" else cfg.m
            writer.writerow([cfg.model, cfg.method, m_val, s.parameter,
                             _fmt(s.value), s.n_trials, _fmt(s.mean), _fmt(s.se),
                             _fmt(s.ci95)])


def write_config_json(cfg: ExperimentConfig, path) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.echo(), fh, indent=2, sort_keys=True)
        fh.write("\n")

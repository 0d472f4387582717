"""Optimiser, training loops, evaluation and the experiment-suite driver."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .adjoint import GradientSet, backward, rel_l2_loss_grad, rel_l2_per_sample
from .blocks import centered_stencil
from .datasets import Dataset, generate, resample
from .exceptions import NumericError, UsageError
from .model import ArchConfig, SknoModel, config_hash, forward

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "train_loss", "test_rel_l2", "wall_seconds", "lr"]
SUITE_HEADER = ["suite", "config_hash", "arch_summary", "final_rel_l2", "wall_seconds"]
TEST_SEED_OFFSET = 1_000_003
AUGMENTS = (None, "dihedral")
SUITES = ("heat_linear", "advection_linear", "burgers", "darcy_ablation", "pq_variants")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 20
    lr0: float = 1e-3
    seed: int = 0
    eval_every: int = 1
    clip_norm: float | None = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if not self.lr0 > 0:
            raise UsageError("lr0 must be positive")
        if self.eval_every < 1:
            raise UsageError("eval_every must be >= 1")
        if self.augment not in AUGMENTS:
            raise UsageError(f"augment must be one of {AUGMENTS}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown training keys: {sorted(unknown)}")
        return cls(**data)


def cosine_lr(lr0: float, epoch: int, epochs: int) -> float:
    """Cosine annealing from ``lr0`` at epoch 0 to 0 at the last epoch."""
    if epochs <= 1:
        return lr0
    return 0.5 * lr0 * (1.0 + np.cos(np.pi * epoch / (epochs - 1)))


class Adam:
    """Adam with bias correction, updating a parameter dict in place."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads, lr: float):
        if not self.m:
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        updates = {}
        for k, g in grads.items():
            m = self.m[k] = b1 * self.m[k] + (1 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            upd = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(upd)):
                raise NumericError(f"non-finite Adam update for {k}")
            updates[k] = upd
        for k, upd in updates.items():
            params[k] = params[k] - upd
        if "local.stencil" in params:
            params["local.stencil"] = centered_stencil(params["local.stencil"])


def clip_gradients(grads: GradientSet, max_norm: float | None) -> GradientSet:
    if max_norm is None:
        return grads
    norm = grads.global_norm()
    if norm > max_norm:
        return grads.scale(max_norm / norm)
    return grads


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    test_rel_l2: float
    wall_seconds: float
    lr: float

    def as_list(self):
        return [self.epoch, f"{self.train_loss:.10e}", f"{self.test_rel_l2:.10e}",
                f"{self.wall_seconds:.3f}", f"{self.lr:.10e}"]


@dataclass
class TrainResult:
    model: SknoModel
    metrics: list
    best_rel_l2: float
    final_rel_l2: float
    checkpoint: Path | None = None


def check_compatible(model: SknoModel, ds: Dataset):
    if len(ds) == 0:
        raise UsageError("empty dataset")
    if ds.a.ndim - 2 != model.arch.d:
        raise UsageError(f"dataset is {ds.a.ndim - 2}-D but the model expects d={model.arch.d}")
    if ds.a.shape[-1] != model.in_channels or ds.u.shape[-1] != model.out_channels:
        raise UsageError(
            f"dataset channels ({ds.a.shape[-1]} -> {ds.u.shape[-1]}) do not match the model "
            f"({model.in_channels} -> {model.out_channels})"
        )
    need = 2 * model.arch.modes
    if min(ds.resolution) < need:
        raise UsageError(f"resolution {ds.resolution} below the minimum {need} for {model.arch.modes} modes")


def evaluate(model: SknoModel, ds: Dataset, batch_size: int = 64, csv_path=None):
    """Mean and per-sample relative L2 in eval mode."""
    check_compatible(model, ds)
    errs = []
    for s in range(0, len(ds), batch_size):
        pred = forward(model, ds.a[s:s + batch_size], training=False)
        errs.append(rel_l2_per_sample(pred, ds.u[s:s + batch_size]))
    errs = np.concatenate(errs)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "rel_l2"])
            for i, e in enumerate(errs):
                w.writerow([i, f"{e:.10e}"])
    return float(errs.mean()), errs


def dihedral(x: np.ndarray, code: int) -> np.ndarray:
    """Apply one of the 8 symmetries of the square to axes 1 and 2 of ``x``.

    Bit 0 transposes, bit 1 flips axis 1 and bit 2 flips axis 2.
    """
    if code & 1:
        x = np.swapaxes(x, 1, 2)
    if code & 2:
        x = x[:, ::-1]
    if code & 4:
        x = x[:, :, ::-1]
    return np.ascontiguousarray(x)


def _fit(model, train_sets: dict, test_ds, cfg: TrainConfig, out_dir=None, callback=None):
    resolutions = sorted(train_sets)
    n = {len(d) for d in train_sets.values()}
    if len(n) != 1:
        raise UsageError("mixed-resolution datasets must hold the same samples")
    n = n.pop()
    for ds in train_sets.values():
        check_compatible(model, ds)
    check_compatible(model, test_ds)
    if cfg.augment == "dihedral":
        for r in (ds.resolution for ds in train_sets.values()):
            if len(r) != 2 or r[0] != r[1]:
                raise UsageError(f"dihedral augmentation needs square 2-D grids, got {r}")

    aug_rng = np.random.default_rng([cfg.seed, 6])
    shuffle_rng = np.random.default_rng([cfg.seed, 2])
    res_rng = np.random.default_rng([cfg.seed, 3])
    opt = Adam(cfg.beta1, cfg.beta2, cfg.adam_eps)
    metrics, best, best_params = [], np.inf, None
    ckpt = None
    writer = fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / "checkpoint"
        fh = open(out_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
    t0 = time.perf_counter()
    try:
        for epoch in range(cfg.epochs):
            lr = cosine_lr(cfg.lr0, epoch, cfg.epochs)
            perm = shuffle_rng.permutation(n)
            losses, weights = [], []
            for s in range(0, n, cfg.batch_size):
                idx = perm[s:s + cfg.batch_size]
                r = resolutions[0] if len(resolutions) == 1 else resolutions[res_rng.integers(len(resolutions))]
                ds = train_sets[r]
                a, u = ds.a[idx], ds.u[idx]
                if cfg.augment == "dihedral":
                    code = int(aug_rng.integers(8))
                    a, u = dihedral(a, code), dihedral(u, code)
                assert a.shape[1:-1] == ds.resolution, "batch must be resolution-homogeneous"
                pred, tape = forward(model, a, training=True, record=True)
                loss, g = rel_l2_loss_grad(pred, u)
                grads, _ = backward(model, tape, g)
                opt.step(model.params, clip_gradients(grads, cfg.clip_norm), lr)
                losses.append(loss)
                weights.append(len(idx))
            train_loss = float(np.average(losses, weights=weights))
            last = epoch == cfg.epochs - 1
            if (epoch + 1) % cfg.eval_every == 0 or last:
                test_err, _ = evaluate(model, test_ds)
                row = MetricsRow(epoch, train_loss, test_err, time.perf_counter() - t0, lr)
                metrics.append(row)
                if writer is not None:
                    writer.writerow(row.as_list())
                    fh.flush()
                if test_err < best:
                    best = test_err
                    best_params = {k: v.copy() for k, v in model.params.items()}
                    if ckpt is not None:
                        model.save(ckpt)
                if callback is not None:
                    callback(row)
                log.debug("epoch %d loss %.4e test %.4e", epoch, train_loss, test_err)
    finally:
        if fh is not None:
            fh.close()
    final = metrics[-1].test_rel_l2
    model.params = best_params
    return TrainResult(model, metrics, best, final, ckpt)


def train(model: SknoModel, train_ds: Dataset, test_ds: Dataset, cfg: TrainConfig,
          out_dir=None, callback=None) -> TrainResult:
    """Adam + cosine annealing on the relative L2 loss; keeps the best test checkpoint."""
    return _fit(model, {train_ds.resolution[0]: train_ds}, test_ds, cfg, out_dir, callback)


def train_mixed_resolution(model: SknoModel, train_sets, test_ds: Dataset, cfg: TrainConfig,
                           out_dir=None, callback=None) -> TrainResult:
    """Like :func:`train`, drawing one resolution per batch from ``train_sets``.

    ``train_sets`` is either a ``{resolution: Dataset}`` mapping holding the same
    samples at each resolution, or ``(Dataset, resolutions)`` in which case the
    dataset is spectrally resampled. ``test_ds`` should sit at the largest one.
    """
    if isinstance(train_sets, tuple):
        base, resolutions = train_sets
        train_sets = {r: resample_dataset(base, r) for r in resolutions}
    for r, ds in train_sets.items():
        if r < 2 * model.arch.modes:
            raise UsageError(f"resolution {r} below the minimum {2 * model.arch.modes}")
    return _fit(model, dict(train_sets), test_ds, cfg, out_dir, callback)


def resample_dataset(ds: Dataset, n: int) -> Dataset:
    """Band-limited resampling of a 1-D dataset to ``n`` points."""
    if ds.a.ndim != 3:
        raise UsageError("resampling is implemented for 1-D datasets")
    if ds.resolution[0] == n:
        return ds
    a = np.moveaxis(resample(np.moveaxis(ds.a, 1, -1), n), -1, 1)
    u = np.moveaxis(resample(np.moveaxis(ds.u, 1, -1), n), -1, 1)
    return Dataset(a, u, {**ds.meta, "resolution": [n]})


# --- experiment suites -----------------------------------------------------

LINEAR_BLOCK = dict(activation="identity", with_linear_residual=False,
                    with_nonlinear_residual=False)


@dataclass(frozen=True)
class DataSpec:
    benchmark: str
    n_train: int
    n_test: int
    resolution: tuple
    seed: int = 0

    def key(self):
        return (self.benchmark, self.n_train, self.n_test, tuple(self.resolution), self.seed)


@dataclass(frozen=True)
class Experiment:
    name: str
    arch: ArchConfig
    train: TrainConfig
    data: DataSpec
    normalise: bool = False

    def config_hash(self) -> str:
        return config_hash(dict(name=self.name, arch=self.arch.to_dict(),
                                train=self.train.to_dict(), data=asdict(self.data),
                                normalise=self.normalise))[:16]


SCALES = {
    # epochs, train/test sizes for each suite at the acceptance ("full") and smoke scale
    "full": dict(heat=(500, 1000, 100, 256), advection=(500, 1000, 200, 256),
                 burgers=(500, 256, 64, 128), darcy=(200, 200, 40, 32)),
    "smoke": dict(heat=(2, 40, 10, 64), advection=(2, 20, 10, 64),
                  burgers=(2, 16, 8, 64), darcy=(2, 16, 8, 16)),
}


def _heat_arch(**kw):
    base = dict(d=1, n_layers=1, modes=2, n_p=4, **LINEAR_BLOCK)
    base.update(kw)
    return ArchConfig(**base)


def suite_experiments(suite: str, scale: str = "full", seed: int = 0) -> list[Experiment]:
    if suite not in SUITES:
        raise UsageError(f"unknown suite {suite!r}; expected one of {SUITES}")
    if scale not in SCALES:
        raise UsageError(f"unknown scale {scale!r}; expected one of {tuple(SCALES)}")
    sc = SCALES[scale]
    out = []
    if suite in ("heat_linear", "pq_variants"):
        ep, ntr, nte, n = sc["heat"]
        data = DataSpec("heat", ntr, nte, (n,), seed)
        tc = TrainConfig(epochs=ep, batch_size=20, seed=seed)
        if suite == "heat_linear":
            out.append(Experiment("skno", _heat_arch(), tc, data))
            out.append(Experiment("no_a_tilde", _heat_arch(with_a_tilde=False), tc, data))
        else:
            for q in ("delta", "step", "mean", "linear", "mlp", "mlp_dropout"):
                out.append(Experiment(f"Q={q}", _heat_arch(recover_kind=q), tc, data))
            for p in ("constant", "linear", "mlp", "mlp_dropout"):
                out.append(Experiment(f"P={p}", _heat_arch(lift_kind=p), tc, data))
    elif suite == "advection_linear":
        ep, ntr, nte, n = sc["advection"]
        data = DataSpec("advection", ntr, nte, (n,), seed)
        tc = TrainConfig(epochs=ep, batch_size=20, seed=seed)
        arch = ArchConfig(d=1, n_layers=1, modes=8, n_p=16, **LINEAR_BLOCK)
        out.append(Experiment("skno", arch, tc, data))
        out.append(Experiment("no_a_tilde", arch.replace(with_a_tilde=False), tc, data))
    elif suite == "burgers":
        ep, ntr, nte, n = sc["burgers"]
        data = DataSpec("burgers", ntr, nte, (n,), seed)
        tc = TrainConfig(epochs=ep, batch_size=20, seed=seed)
        modes, n_p = (16, 64) if scale == "full" else (8, 8)
        arch = ArchConfig(d=1, n_layers=4, modes=modes, n_p=n_p, with_positional_features=True,
                          activation="gelu_tanh")
        out.append(Experiment("skno", arch, tc, data, normalise=True))
    elif suite == "darcy_ablation":
        ep, ntr, nte, n = sc["darcy"]
        data = DataSpec("darcy", ntr, nte, (n, n), seed)
        # the problem is symmetric under the square's dihedral group; 200 samples overfit without it
        tc = TrainConfig(epochs=ep, batch_size=20, seed=seed, augment="dihedral")
        modes, n_p = (8, 16) if scale == "full" else (4, 4)
        base = ArchConfig(d=2, n_layers=4, modes=modes, n_p=n_p, lift_kind="linear",
                          recover_kind="mlp", with_local_propagator=True, a_tilde_form="full",
                          with_positional_features=True, activation="gelu_tanh")
        variants = [
            ("baseline", {}),
            ("no_double_res", dict(with_linear_residual=False, with_nonlinear_residual=False)),
            ("no_linear_res", dict(with_linear_residual=False)),
            ("no_nonlinear_res", dict(with_nonlinear_residual=False)),
            ("no_a_tilde", dict(with_a_tilde=False)),
            ("no_bias_b", dict(with_bias_b=False)),
            ("no_global", dict(with_global_propagators=False)),
            ("no_local", dict(with_local_propagator=False)),
        ]
        for name, change in variants:
            out.append(Experiment(name, base.replace(**change), tc, data, normalise=True))
    return out


def fit_normaliser(arch: ArchConfig, ds: Dataset) -> ArchConfig:
    """Scalar input standardisation and output scale from training statistics."""
    return arch.replace(in_shift=float(ds.a.mean()), in_scale=float(ds.a.std()),
                        out_scale=float(ds.u.std()))


def load_data(spec: DataSpec, cache: dict | None = None) -> tuple[Dataset, Dataset]:
    """Generate train and test sets with disjoint seeds."""
    if cache is not None and spec.key() in cache:
        return cache[spec.key()]
    train = generate(spec.benchmark, spec.n_train, spec.resolution, seed=spec.seed)
    test = generate(spec.benchmark, spec.n_test, spec.resolution, seed=spec.seed + TEST_SEED_OFFSET)
    if cache is not None:
        cache[spec.key()] = (train, test)
    return train, test


def run_experiment(exp: Experiment, cache: dict | None = None, out_dir=None) -> TrainResult:
    train_ds, test_ds = load_data(exp.data, cache)
    arch = fit_normaliser(exp.arch, train_ds) if exp.normalise else exp.arch
    model = SknoModel(arch, train_ds.a.shape[-1], train_ds.u.shape[-1], seed=exp.train.seed)
    return train(model, train_ds, test_ds, exp.train, out_dir=out_dir)


def _read_done(csv_path: Path) -> dict:
    done = {}
    if csv_path.exists():
        with open(csv_path, newline="") as fh:
            for row in csv.DictReader(fh):
                done[row["config_hash"]] = row
    return done


def run_experiment_suite(suite: str, out_dir, scale: str = "full", seed: int = 0,
                         experiments: list | None = None, save_runs: bool = True) -> Path:
    """Run every configuration of ``suite`` and append one CSV row per configuration.

    Rows whose config hash is already present in ``<out_dir>/<suite>.csv`` are skipped.
    """
    exps = experiments if experiments is not None else suite_experiments(suite, scale, seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{suite}.csv"
    done = _read_done(csv_path)
    new_file = not csv_path.exists()
    cache: dict = {}
    with open(csv_path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new_file:
            w.writerow(SUITE_HEADER)
            fh.flush()
        for exp in exps:
            h = exp.config_hash()
            if h in done:
                log.info("%s/%s already done, skipping", suite, exp.name)
                continue
            t0 = time.perf_counter()
            run_dir = out_dir / "runs" / f"{exp.name.replace('=', '_')}-{h}" if save_runs else None
            res = run_experiment(exp, cache, run_dir)
            w.writerow([suite, h, f"{exp.name}: {exp.arch.summary()}",
                        f"{res.final_rel_l2:.10e}", f"{time.perf_counter() - t0:.3f}"])
            fh.flush()
            log.info("%s/%s final rel L2 %.4e", suite, exp.name, res.final_rel_l2)
    return csv_path


def read_suite_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))

"""Command-line entry point: ``skno <subcommand> [--config cfg.json] [flags]``.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .exceptions import NumericError, UsageError
from .training import TEST_SEED_OFFSET

log = logging.getLogger("skno")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class VerificationFailed(Exception):
    pass


# --- helpers ---------------------------------------------------------------

def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: top-level JSON value must be an object")
    return cfg


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


class RunManifest:
    def __init__(self, command: str, config: dict, seed: int):
        from .model import config_hash

        self.command = command
        self.config_hash = config_hash(config)
        self.seed = seed
        self.started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.artifacts: list[str] = []

    def add(self, *paths):
        self.artifacts.extend(str(p) for p in paths)

    def write(self, out_dir: Path, status: str) -> Path:
        path = out_dir / "manifest.json"
        data = dict(command=self.command, config_hash=self.config_hash, seed=self.seed,
                    started=self.started, finished=time.strftime("%Y-%m-%dT%H:%M:%S%z"),
                    status=status, artifacts=self.artifacts)
        _atomic_write(path, json.dumps(data, indent=2, sort_keys=True))
        return path


def _guard(paths, force: bool):
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise UsageError(f"refusing to overwrite {', '.join(existing)}; pass --force")


def _dataset_from(spec: dict, seed: int, split_index: int = 0):
    """Load ``{"dir", "name"}`` from disk or generate ``{"benchmark", "n_samples", "resolution"}``."""
    from .datasets import Dataset, generate

    if "dir" in spec:
        d = Path(spec["dir"])
        name = spec.get("name", "train")
        if not (d / f"{name}_a.skt").exists():
            raise UsageError(f"dataset {d / name} not found")
        return Dataset.load(d, name)
    try:
        bench, n, res = spec["benchmark"], int(spec["n_samples"]), spec["resolution"]
    except KeyError as exc:
        raise UsageError(f"data spec missing key {exc}") from exc
    s = int(spec.get("seed", seed + TEST_SEED_OFFSET * split_index))
    return generate(bench, n, res, seed=s)


# --- subcommands -----------------------------------------------------------

def cmd_gen(cfg, args, out: Path, manifest: RunManifest):
    from .datasets import BENCHMARKS, generate

    bench = cfg.get("benchmark")
    if bench not in BENCHMARKS:
        raise UsageError(f"unknown benchmark {bench!r}; choose from {', '.join(BENCHMARKS)}")
    if "resolution" not in cfg:
        raise UsageError("gen config needs 'resolution'")
    splits = cfg.get("splits") or {cfg.get("name", "train"): cfg.get("n_samples", 10)}
    targets = [out / f"{name}{suffix}" for name in splits for suffix in ("_a.skt", "_u.skt", ".json")]
    _guard(targets, args.force)
    for k, (name, n) in enumerate(splits.items()):
        ds = generate(bench, int(n), cfg["resolution"], seed=args.seed + TEST_SEED_OFFSET * k)
        for p in ds.save(out, name):
            print(p)
            manifest.add(p)


def cmd_oracle_verify(cfg, args, out: Path, manifest: RunManifest):
    from .oracle import OracleConfig, PhaseGrid, oracle_verify

    path = out / "oracle_verify.csv"
    _guard([path], args.force)
    t0 = time.process_time()
    pg = PhaseGrid(cfg.get("p_min", -16.0), cfg.get("p_max", 16.0), cfg.get("n_p", 128))
    oc = OracleConfig(c=cfg.get("c", 0.05), t=cfg.get("t", 1.0))
    rows = oracle_verify(cfg.get("n", 256), pg, oc, cfg.get("tol", 1e-3))
    cpu = time.process_time() - t0
    keys = ["check", "kind", "n_p", "p_max", "error", "bound", "passed"]
    lines = [",".join(keys)]
    for r in rows:
        lines.append(",".join(f"{r[k]:.6e}" if isinstance(r[k], float) else str(r[k]) for k in keys))
    path.write_text("\n".join(lines) + "\n")
    manifest.add(path)
    print("\n".join(lines))
    print(f"cpu_seconds,{cpu:.3f}")
    failed = [r for r in rows if not r["passed"]]
    if failed:
        worst = max(failed, key=lambda r: r["error"] / r["bound"])
        raise VerificationFailed(
            f"{len(failed)} oracle check(s) failed; worst: {worst['check']}/{worst['kind']} "
            f"error {worst['error']:.3e} vs bound {worst['bound']:.3e}"
        )


def _arch_and_train(cfg, seed):
    from .model import ArchConfig
    from .training import TrainConfig

    arch = ArchConfig.from_dict(cfg.get("arch", {}))
    tc = TrainConfig.from_dict({**cfg.get("train", {}), "seed": seed})
    return arch, tc


def cmd_train(cfg, args, out: Path, manifest: RunManifest):
    from .model import SknoModel
    from .training import fit_normaliser, train, train_mixed_resolution

    _guard([out / "metrics.csv", out / "checkpoint"], args.force)
    arch, tc = _arch_and_train(cfg, args.seed)
    data = cfg.get("data")
    if not data or "train" not in data or "test" not in data:
        raise UsageError("train config needs data.train and data.test")
    train_ds = _dataset_from(data["train"], args.seed, 0)
    test_ds = _dataset_from(data["test"], args.seed, 1)
    if cfg.get("normalise", False):
        arch = fit_normaliser(arch, train_ds)
    model = SknoModel(arch, train_ds.a.shape[-1], train_ds.u.shape[-1], seed=args.seed)
    mixed = cfg.get("mixed_resolutions")
    if mixed:
        res = train_mixed_resolution(model, (train_ds, list(mixed)), test_ds, tc, out_dir=out)
    else:
        res = train(model, train_ds, test_ds, tc, out_dir=out)
    manifest.add(out / "metrics.csv", res.checkpoint)
    print(f"final_rel_l2,{res.final_rel_l2:.6e}")
    print(f"best_rel_l2,{res.best_rel_l2:.6e}")


def cmd_eval(cfg, args, out: Path, manifest: RunManifest):
    from .model import SknoModel
    from .training import evaluate

    if "checkpoint" not in cfg or "data" not in cfg:
        raise UsageError("eval config needs 'checkpoint' and 'data'")
    per_sample, summary = out / "eval_samples.csv", out / "eval.csv"
    _guard([per_sample, summary], args.force)
    model = SknoModel.load(cfg["checkpoint"])
    ds = _dataset_from(cfg["data"], args.seed, 1)
    mean, _ = evaluate(model, ds, csv_path=per_sample)
    summary.write_text(f"resolution,rel_l2\n{'x'.join(map(str, ds.resolution))},{mean:.10e}\n")
    manifest.add(per_sample, summary)
    print(summary.read_text().strip())


def cmd_suite(cfg, args, out: Path, manifest: RunManifest):
    from .training import SUITES, run_experiment_suite

    suite = cfg.get("suite")
    if suite not in SUITES:
        raise UsageError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    path = out / f"{suite}.csv"
    if args.force and path.exists():
        path.unlink()
    # an existing CSV is resumed (completed rows are skipped by config hash)
    csv_path = run_experiment_suite(suite, out, scale=cfg.get("scale", "full"), seed=args.seed)
    manifest.add(csv_path)
    print(csv_path.read_text().strip())


def cmd_diagnose(cfg, args, out: Path, manifest: RunManifest):
    from . import diagnostics as dg
    from .datasets import generate
    from .model import SknoModel

    if "checkpoint" not in cfg:
        raise UsageError("diagnose config needs 'checkpoint'")
    analyses = cfg.get("analyses", ["entropy"])
    unknown = set(analyses) - {"entropy", "dictionary", "superres"}
    if unknown:
        raise UsageError(f"unknown analyses {sorted(unknown)}")
    targets = []
    if "entropy" in analyses:
        targets.append(out / "traces")
    if "dictionary" in analyses:
        targets.append(out / "dictionary.csv")
    if "superres" in analyses:
        targets.append(out / "superres.csv")
    _guard(targets, args.force)
    model = SknoModel.load(cfg["checkpoint"])
    if "entropy" in analyses or "dictionary" in analyses:
        if "data" not in cfg:
            raise UsageError("entropy/dictionary analyses need 'data'")
        ds = _dataset_from(cfg["data"], args.seed, 1)
    if "entropy" in analyses:
        n = min(int(cfg.get("n_samples", 5)), len(ds))
        idx = np.random.default_rng([args.seed, 5]).choice(len(ds), n, replace=False)
        manifest.add(*dg.write_trace_files(model, ds.a[np.sort(idx)], out / "traces"))
    if "dictionary" in analyses:
        dg.dictionary_report(model, ds.a, out / "dictionary.csv")
        manifest.add(out / "dictionary.csv")
    if "superres" in analyses:
        sr = cfg.get("superres", {})
        bench = sr.get("benchmark", "heat")
        n = int(sr.get("n_samples", 20))
        seed = int(sr.get("seed", args.seed + TEST_SEED_OFFSET))
        res = dg.superres_sweep(model, lambda r: generate(bench, n, r, seed=seed),
                                sr.get("resolutions", [128, 256, 512, 1024]), out / "superres.csv")
        manifest.add(out / "superres.csv")
        print(f"superres_variance,{res['variance']:.6e}")
        print(f"superres_ratio,{res['ratio']:.6f}")


COMMANDS = {
    "gen": cmd_gen,
    "oracle-verify": cmd_oracle_verify,
    "train": cmd_train,
    "eval": cmd_eval,
    "suite": cmd_suite,
    "diagnose": cmd_diagnose,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--threads", type=int, default=1, help="cap on BLAS/FFT worker threads")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--out", default="skno_out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="skno", description="d+1 dimensional spectral neural operators")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        if not isinstance(seed, int) or seed < 0:
            raise UsageError(f"seed must be a non-negative integer, got {seed!r}")
        args.seed = seed
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    except UsageError as exc:
        print(f"skno: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    from threadpoolctl import threadpool_limits

    manifest = RunManifest(args.command, cfg, args.seed)
    status, code = "ok", EXIT_OK
    try:
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](cfg, args, out, manifest)
    except VerificationFailed as exc:
        print(f"skno: verification failed: {exc}", file=sys.stderr)
        status, code = "failed", EXIT_FAIL
    except UsageError as exc:
        print(f"skno: error: {exc}", file=sys.stderr)
        status, code = "usage_error", EXIT_USAGE
    except NumericError as exc:
        print(f"skno: numeric error: {exc}", file=sys.stderr)
        status, code = "numeric_error", EXIT_NUMERIC
    manifest.write(out, status)
    return code


if __name__ == "__main__":
    sys.exit(main())

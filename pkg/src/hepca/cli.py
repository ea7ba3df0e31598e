"""Command-line entry point.

Settings are resolved in order: built-in defaults, a flat ``key = value``
config file (``--config``), ``HEPCA_<KEY>`` environment variables, then
command-line flags. Every command writes one JSON report (stdout or
``--report``) and exits 1 when an embedded oracle check fails.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from .covariance import hcov, hcov_depth, pack_dataset, plain_covariance
from .matmul import MatMulConfig, MatMulKit, cost_report, get_kit, hmm_mult
from .pca import (pca_keys, plan_normalization, pp_pca, random_unit_vector, replicate,
                  summarize)
from .permtrans import dcd_for_T, dcd_for_Z, gen_perm, verify_chain_sparse
from .slot_engine import EngineConfig, SlotEngine

SCHEMA_VERSION = 1
ENV_PREFIX = "HEPCA_"
PCA_MIN_LEVEL = 24


@dataclass
class RunConfig:
    n: int = 8
    nz: int | None = None
    nt: int | None = None
    n1z: int = 2
    n1t: int = 2
    nprime: int | None = None
    le: int = 2
    lp: int = 14
    mode: str = "exact"
    seed: int = 0
    workers: int = os.cpu_count() or 1
    report: str | None = None
    dataset: str | None = None
    synthetic: str | None = None
    matrix_csv: str | None = None
    trials: int = 5
    max_level: int = 0          # 0 picks a level budget from the circuit depth
    precision_bits: int = 20
    segment_rows: int = 1408
    padding: str = "tail"
    s: float = 0.5
    e: float = 1e-5
    floor: float = 1e-3
    b: float = 256.0
    order: int = 1
    paired: bool = True

    def engine(self, depth: int) -> EngineConfig:
        level = self.max_level or depth
        return EngineConfig(self.n, level, precision_bits=self.precision_bits,
                            quantize=self.mode == "quantized")

    def matmul(self) -> MatMulConfig:
        return MatMulConfig(self.n, nz=self.nz, nt=self.nt, n1_z=self.n1z, n1_t=self.n1t)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    default = _FIELDS[name].default
    raw = raw.strip()
    if raw.lower() in ("", "none", "null") and default is None:
        return None
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int) or name in ("nz", "nt", "nprime"):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def read_config_file(path: str) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.lower().replace("-", "_")
            if key not in _FIELDS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = _coerce(key, value)
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name in _FIELDS:
        raw = environ.get(ENV_PREFIX + name.upper())
        if raw is not None:
            out[name] = _coerce(name, raw)
    return out


def resolve_config(args: argparse.Namespace, environ=None) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    values.update(env_overrides(environ))
    for name in _FIELDS:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    cfg = RunConfig(**values)
    if cfg.mode not in ("exact", "quantized"):
        raise ValueError(f"mode must be exact or quantized, got {cfg.mode!r}")
    if cfg.workers < 1:
        raise ValueError("workers must be >= 1")
    return cfg


# datasets

def read_csv(path: str) -> np.ndarray:
    """Numeric CSV with an optional header row; any malformed row is an error."""
    rows = []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                vals = [float(cell) for cell in row]
            except ValueError:
                if lineno == 1:
                    width = len(row)
                    continue
                raise ValueError(f"{path}:{lineno}: non-numeric value") from None
            if width is None:
                width = len(vals)
            if len(vals) != width:
                raise ValueError(f"{path}:{lineno}: expected {width} fields, got {len(vals)}")
            if not all(math.isfinite(v) for v in vals):
                raise ValueError(f"{path}:{lineno}: non-finite value")
            rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return np.array(rows)


def synthetic_dataset(s: int, t: int, seed: int) -> np.ndarray:
    """Low-rank-dominated data: covariance spectrum 16, 7, 3.5, then 0.1."""
    rng = np.random.default_rng(seed)
    spectrum = np.full(t, 0.1)
    spectrum[:3] = [16.0, 7.0, 3.5][:t]
    q, _ = np.linalg.qr(rng.standard_normal((t, t)))
    z = rng.standard_normal((s, t))
    z -= z.mean(axis=0)
    if s > t:
        # whiten so the sample covariance has exactly the intended spectrum
        w, u = np.linalg.eigh(z.T @ z / s)
        z = z @ u @ np.diag(w ** -0.5) @ u.T
    return (z * np.sqrt(spectrum)) @ q.T


def load_dataset(cfg: RunConfig) -> np.ndarray:
    if cfg.dataset:
        return read_csv(cfg.dataset)
    if cfg.synthetic:
        try:
            s, t = (int(v) for v in cfg.synthetic.lower().split("x"))
        except ValueError:
            raise ValueError(f"synthetic shape must look like 256x16, got {cfg.synthetic!r}") from None
        return synthetic_dataset(s, t, cfg.seed)
    raise ValueError("give --dataset PATH or --synthetic SxT")


def write_matrix_csv(path: str, matrix: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in matrix:
            writer.writerow([repr(float(v)) for v in row])


# commands

def _reduction(before: int, after: int) -> float:
    return round(100.0 * (before - after) / before, 1) if before else 0.0


def cmd_decompose_verify(cfg: RunConfig) -> tuple[dict, bool]:
    n = cfg.n
    nprime = cfg.nprime if cfg.nprime is not None else max(1, n // 4)
    z_chains = dcd_for_Z(n, nprime)
    t_chain = dcd_for_T(n, nprime)
    z_ok = verify_chain_sparse(z_chains, gen_perm("Z", n))
    t_ok = verify_chain_sparse(t_chain, gen_perm("T", n))
    base = MatMulKit(MatMulConfig(n, n1_z=cfg.n1z, n1_t=cfg.n1z))
    dcd = MatMulKit(MatMulConfig(n, nz=nprime, nt=nprime, n1_z=cfg.n1z, n1_t=cfg.n1z))
    keys = {}
    for name, getter in (("Z", "z_keys"), ("T", "t_keys")):
        before = len(getattr(base, getter)())
        after = len(getattr(dcd, getter)())
        keys[name] = {"dh_bsgs": before, "dcd": after, "reduction_pct": _reduction(before, after)}
    result = {
        "n": n,
        "nprime": nprime,
        "n1": cfg.n1z,
        "reconstruction": {"Z": z_ok, "T": t_ok},
        "factors": {"Z1": z_chains[0].depth, "Z2": z_chains[1].depth, "T": t_chain.depth},
        "keys": keys,
    }
    return result, z_ok and t_ok


def _bench_one(cfg: RunConfig, mm: MatMulConfig, label: str, rng) -> tuple[dict, bool]:
    kit = get_kit(mm)
    depth = kit.mult_depth
    eng = SlotEngine(cfg.engine(depth))
    kit.register(eng)
    tol = 1e-4 if cfg.mode == "quantized" else 1e-9
    worst = 0.0
    ledgers = []
    for _ in range(cfg.trials):
        a = rng.uniform(-1, 1, (cfg.n, cfg.n))
        b = rng.uniform(-1, 1, (cfg.n, cfg.n))
        start = eng.ledger.copy()
        out = hmm_mult(eng, eng.encode(a.ravel()), eng.encode(b.ravel()), kit)
        ledgers.append(eng.ledger - start)
        worst = max(worst, float(np.abs(out.slots.reshape(cfg.n, cfg.n) - a @ b).max()))
    row = {"config": label, "max_abs_error": worst, "trials": cfg.trials}
    if ledgers:
        row.update(cost_report(kit, ledgers[0], eng.config.max_level - out.level))
    return row, worst < tol


def cmd_matmul_bench(cfg: RunConfig) -> tuple[dict, bool]:
    rng = np.random.default_rng(cfg.seed)
    configs = [("dh_bsgs", MatMulConfig(cfg.n, n1_z=cfg.n1z, n1_t=cfg.n1t))]
    if cfg.nz is not None or cfg.nt is not None:
        configs.append(("dcd", cfg.matmul()))
    rows, ok = [], True
    for label, mm in configs:
        row, good = _bench_one(cfg, mm, label, rng)
        rows.append(row)
        ok = ok and good
    return {"n": cfg.n, "mode": cfg.mode, "rows": rows}, ok


def _cov_engine(cfg: RunConfig, kit, depth: int) -> SlotEngine:
    eng = SlotEngine(cfg.engine(depth))
    kit.register(eng)
    eng.register_keys(pca_keys(cfg.n))
    return eng


def _cov_result(cfg: RunConfig, data: np.ndarray, eng: SlotEngine, kit) -> tuple[dict, object, object, bool]:
    pd = pack_dataset(eng, data, cfg.padding)
    res = hcov(eng, pd, kit, cfg.segment_rows, cfg.workers)
    matrix = res.cov.to_matrix()
    oracle = plain_covariance(pd.padded())
    err = float(np.abs(matrix - oracle).max())
    tol = (1e-3 if cfg.mode == "quantized" else 1e-9) * max(1.0, float(np.abs(oracle).max()))
    logical = matrix[np.ix_(pd.feature_columns, pd.feature_columns)]
    if cfg.matrix_csv:
        write_matrix_csv(cfg.matrix_csv, logical)
    out = {
        "samples": pd.s,
        "features": pd.t,
        "blocks": pd.row_blocks * pd.k,
        "grid": [pd.row_blocks, pd.k],
        "max_abs_error": err,
        "levels_used": res.levels_used,
        "expected_levels": hcov_depth(kit),
        "symmetric": bool(np.array_equal(matrix, matrix.T)),
        "stats": res.stats,
        "covariance": logical.tolist(),
    }
    good = err <= tol and out["symmetric"] and res.levels_used == hcov_depth(kit)
    return out, pd, res, good


def cmd_covariance(cfg: RunConfig) -> tuple[dict, bool]:
    data = load_dataset(cfg)
    kit = get_kit(cfg.matmul())
    eng = _cov_engine(cfg, kit, hcov_depth(kit) + 1)
    out, _, _, good = _cov_result(cfg, data, eng, kit)
    out["ledger"] = eng.ledger.as_dict()
    return out, good


def cmd_simulate_norm(cfg: RunConfig) -> tuple[dict, bool]:
    plan = plan_normalization(cfg.lp, cfg.s, cfg.e, cfg.floor, cfg.b, cfg.order)
    out = plan.as_dict()
    out["round_depth"] = plan.round_depth(cfg.paired)
    return out, abs(1 - plan.trajectory[-1]) < cfg.e


def cmd_pca(cfg: RunConfig) -> tuple[dict, bool]:
    data = load_dataset(cfg)
    kit = get_kit(cfg.matmul())
    # room for the covariance plus a few power-method stages between refreshes
    eng = _cov_engine(cfg, kit, max(hcov_depth(kit) + 2, PCA_MIN_LEVEL))
    cov_out, pd, res, good = _cov_result(cfg, data, eng, kit)
    out = {"covariance": cov_out}
    if cfg.le == 0:
        out["ledger"] = eng.ledger.as_dict()
        return out, good
    plan = plan_normalization(cfg.lp, cfg.s, cfg.e, cfg.floor, cfg.b, cfg.order)
    v0 = replicate(eng, random_unit_vector(pd.t, cfg.seed), 1, cfg.padding)
    pairs = pp_pca(eng, res.cov, cfg.le, plan, v0, cfg.paired, True, cfg.workers)
    summary = summarize(pairs, data, pd.feature_columns)
    norms = [float(np.linalg.norm(p.vector.values())) for p in pairs]
    oracle = plain_covariance(pd.padded())
    lam_max = float(np.linalg.eigvalsh(oracle)[-1])
    tol = 1e-6 if cfg.mode == "exact" else 1e-2
    checks = {
        "norm_within_e": all(abs(1 - v) < cfg.e for v in norms),
        "eigenvalue_below_max": all(v <= lam_max + tol * max(1.0, lam_max) for v in summary.eigenvalues),
    }
    out.update({
        "plan": plan.as_dict(),
        "eigenvalues": summary.eigenvalues,
        "reference_eigenvalues": summary.reference_values,
        "eigenvectors": summary.eigenvectors.T.tolist(),
        "vector_norms": norms,
        "trajectories": [list(p.trajectory) for p in pairs],
        "refreshes": eng.ledger.refreshes,
        "refreshes_per_round": [list(p.refreshes_per_round) for p in pairs],
        "r2_x": summary.r2_x,
        "r2_v": summary.r2_v,
        "warnings": summary.warnings,
        "checks": checks,
        "ledger": eng.ledger.as_dict(),
    })
    return out, good and all(checks.values())


COMMANDS = {
    "decompose-verify": cmd_decompose_verify,
    "matmul-bench": cmd_matmul_bench,
    "covariance": cmd_covariance,
    "simulate-norm": cmd_simulate_norm,
    "pca": cmd_pca,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value settings file")
    common.add_argument("--n", type=int, help="block dimension (power of two)")
    common.add_argument("--nz", type=int, help="decomposition target for Z")
    common.add_argument("--nt", type=int, help="decomposition target for T")
    common.add_argument("--n1z", type=int, help="inner loop count for Z")
    common.add_argument("--n1t", type=int, help="inner loop count for T")
    common.add_argument("--le", type=int, help="number of eigenpairs")
    common.add_argument("--lp", type=int, help="power-method rounds")
    common.add_argument("--mode", choices=["exact", "quantized"])
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--report", help="write the JSON report here instead of stdout")
    common.add_argument("--dataset", help="CSV file, rows are samples")
    common.add_argument("--synthetic", help="generate a seeded SxT dataset, e.g. 256x16")
    common.add_argument("--matrix-csv", dest="matrix_csv", help="export the covariance as CSV")
    common.add_argument("--nprime", type=int, help="decomposition target for decompose-verify")
    common.add_argument("--trials", type=int, help="random products per configuration")
    common.add_argument("--max-level", dest="max_level", type=int, help="level budget, 0 for automatic")
    common.add_argument("--segment-rows", dest="segment_rows", type=int)
    common.add_argument("--padding", choices=["tail", "spread"])
    common.add_argument("--S", dest="s", type=float, help="contraction coefficient")
    common.add_argument("--e", type=float, help="final length error bound")
    common.add_argument("--floor", type=float, help="precision floor")
    common.add_argument("--B", dest="b", type=float, help="norm upper bound")
    common.add_argument("--order", type=int, help="Taylor order (odd)")
    parser = argparse.ArgumentParser(prog="hepca", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        result, ok = COMMANDS[args.command](cfg)
    except (ValueError, OSError) as exc:
        print(f"hepca: error: {exc}", file=sys.stderr)
        return 2
    settings = dataclasses.asdict(cfg)
    for key in ("workers", "report"):
        settings.pop(key)  # reports must not depend on either
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": args.command,
        "config": settings,
        "ok": ok,
        "result": result,
    }
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if cfg.report:
        with open(cfg.report, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())

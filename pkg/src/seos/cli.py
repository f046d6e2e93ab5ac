"""Experiment driver: seeded sweep runs over (eta, batch size) grids.

Three subcommands:

* ``stability-sweep``  analytic stability measures (and optionally final
  losses of simulated trajectories) on a log-spaced learning-rate grid.
* ``sharpening``       quadratic-model sharpening ensembles with
  discrete-derivative vs. theory summaries.
* ``validate``         one-shot stability report for a single instance,
  JSON on stdout; exit code 0 = stable, 2 = unstable, 1 = error.

Outputs are CSV with a ``#``-prefixed metadata header.  Bodies are
byte-identical across reruns of the same config and root seed (only the
``# timestamp`` line varies); every worker gets its own RNG stream
derived from (root seed, cell index), so the CSV does not depend on the
worker count.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

import scipy

from . import __version__
from .kernel_norm import knorm_l2_hd, knorm_momentum_hd, stability_verdict
from .linear_sgd import LinearModel, simulate_trajectory
from .quadratic import monte_carlo_sharpening
from .second_moment import (
    TRANSFER_OPERATOR_MAX_DIM,
    SpectrumDecomposition,
    build_diagonal_dynamics,
    build_transfer_operator,
    decompose_kernel,
    max_abs_eigenvalue,
)
from .spectrum_factory import (
    Dispersed,
    IidGaussianJacobian,
    LocalizedEigenvectors,
    generate,
)

ENV_WORKERS = "SEOS_WORKERS"

ANALYTIC_MEASURES = (
    "K",
    "K_hd",
    "K_tr",
    "K_mom",
    "K_l2",
    "t_max_abs_eig",
    "eta_lambda_max",
    "max_growth",
)
ALL_MEASURES = ANALYTIC_MEASURES + ("final_loss",)
DEFAULT_MEASURES = ("K", "K_hd", "K_tr", "eta_lambda_max", "max_growth")

_FLOAT_FMT = "%.17g"


@dataclass
class SweepConfig:
    """Everything a stability sweep needs, JSON-round-trippable."""

    spectrum: dict = field(
        default_factory=lambda: {"family": "iid_gaussian", "D": 100, "P": 120}
    )
    eta_min: float = 1e-3
    eta_max: float = 10.0
    eta_points: int = 50
    eta_relative: bool = True  # grid bounds are multiples of 1/lambda_max
    batch_sizes: List[int] = field(default_factory=lambda: [5])
    steps: int = 10_000
    seeds: int = 1
    measures: List[str] = field(default_factory=lambda: list(DEFAULT_MEASURES))
    momentum_mu: float = 0.9
    l2_rho: float = 0.0
    loss_cap: float = 10.0
    root_seed: int = 0

    def validate(self) -> None:
        if self.eta_points < 1 or self.eta_min <= 0 or self.eta_max < self.eta_min:
            raise ValueError("bad eta grid")
        if not self.batch_sizes:
            raise ValueError("need at least one batch size")
        if self.seeds < 1:
            raise ValueError("need seeds >= 1")
        unknown = set(self.measures) - set(ALL_MEASURES)
        if unknown:
            raise ValueError(f"unknown measures: {sorted(unknown)}")
        if "t_max_abs_eig" in self.measures:
            dim = int(self.spectrum.get("D", 0))
            if dim > TRANSFER_OPERATOR_MAX_DIM:
                raise ValueError(
                    f"t_max_abs_eig needs D <= {TRANSFER_OPERATOR_MAX_DIM}, got D={dim}"
                )


@dataclass
class SharpeningCliConfig:
    dim: int = 400
    n_params: int = 600
    variance_profile: str = "flat"
    v_z: float = 1.0
    eta: float = 0.05
    batch_sizes: List[int] = field(default_factory=lambda: [16, 64, 256])
    steps: int = 2
    seeds: int = 30
    n_tracked: int = 8
    resample_model: bool = True
    include_full_batch_baseline: bool = True
    root_seed: int = 0

    def validate(self) -> None:
        if self.dim < 2 or self.n_params < 1:
            raise ValueError("need D >= 2 and P >= 1")
        if any(not (1 <= b <= self.dim) for b in self.batch_sizes):
            raise ValueError("batch sizes must lie in [1, D]")
        if self.variance_profile not in ("flat", "linear"):
            raise ValueError("variance profile must be 'flat' or 'linear'")
        if self.seeds < 1 or self.steps < 0:
            raise ValueError("need seeds >= 1 and steps >= 0")


def parse_spectrum_spec(raw: "dict | str"):
    """Accept {"family": ...} dicts or inline "family:k=v,k=v" strings."""
    if isinstance(raw, str):
        name, _, args = raw.partition(":")
        params = {}
        if args:
            for item in args.split(","):
                key, _, val = item.partition("=")
                params[key.strip()] = float(val)
        raw = {"family": name.strip(), **params}
    family = raw.get("family")
    if family == "iid_gaussian":
        return IidGaussianJacobian(int(raw["D"]), int(raw["P"]))
    if family == "dispersed":
        return Dispersed(int(raw["D"]))
    if family == "localized":
        return LocalizedEigenvectors(
            int(raw["D"]), int(raw["P"]), float(raw.get("sigma_s", 0.1))
        )
    raise ValueError(f"unknown spectrum family: {family!r}")


def _config_hash(config_dict: dict) -> str:
    blob = json.dumps(config_dict, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _fmt(value: float) -> str:
    if value is None:
        return "inf"
    value = float(value)
    if np.isnan(value):
        return "inf"
    if np.isinf(value):
        return "inf" if value > 0 else "-inf"
    return _FLOAT_FMT % value


def _write_csv(
    path: Path, metadata: dict, header: Sequence[str], rows: Sequence[Sequence]
) -> None:
    lines = []
    for key, value in metadata.items():
        lines.append(f"# {key}: {value}")
    lines.append(",".join(header))
    for row in rows:
        cells = [c if isinstance(c, str) else _fmt(c) for c in row]
        lines.append(",".join(cells))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def _n_workers() -> int:
    try:
        return max(1, int(os.environ.get(ENV_WORKERS, "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# stability sweep

_TRAJ_CONTEXT: dict = {}


def _init_traj_worker(jacobian, eta_list, batch_list, cfg_dict) -> None:
    _TRAJ_CONTEXT["jacobian"] = jacobian
    _TRAJ_CONTEXT["etas"] = eta_list
    _TRAJ_CONTEXT["batches"] = batch_list
    _TRAJ_CONTEXT["config"] = cfg_dict


def _run_traj_cell(cell: tuple) -> tuple:
    """(cell_index, eta_i, batch_i, seed_i) -> (cell_index, final_loss, diverged)."""
    cell_index, eta_i, batch_i, _seed_i = cell
    cfg = _TRAJ_CONTEXT["config"]
    jac = _TRAJ_CONTEXT["jacobian"]
    eta = _TRAJ_CONTEXT["etas"][eta_i]
    batch = _TRAJ_CONTEXT["batches"][batch_i]
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=cfg["root_seed"], spawn_key=(1, cell_index))
    )
    z0 = rng.standard_normal(jac.shape[0])
    model = LinearModel(jac, z0)
    trace = simulate_trajectory(
        model, eta, batch, cfg["steps"], rng, cap=cfg["loss_cap"]
    )
    reported = min(trace.final_loss, cfg["loss_cap"])
    return cell_index, reported, trace.diverged


def run_stability_sweep(config: SweepConfig, out_path: Path) -> Path:
    wall_start = time.time()
    config.validate()
    spec = parse_spectrum_spec(config.spectrum)
    gen_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.root_seed, spawn_key=(0,))
    )
    generated = generate(spec, gen_rng)
    spectrum = generated.spectrum
    lam_max = spectrum.lambda_max
    scale = 1.0 / lam_max if config.eta_relative else 1.0
    etas = np.geomspace(config.eta_min * scale, config.eta_max * scale, config.eta_points)

    want = list(config.measures)
    need_traj = "final_loss" in want
    batch_sizes = list(config.batch_sizes)

    # analytic measures per (eta, batch); identical across seeds
    analytic: dict = {}
    for b_i, batch in enumerate(batch_sizes):
        for e_i, eta in enumerate(etas):
            dyn = build_diagonal_dynamics(spectrum, eta, batch)
            t_eig = None
            if "t_max_abs_eig" in want:
                t_eig = max_abs_eigenvalue(build_transfer_operator(spectrum, eta, batch))
            report = stability_verdict(dyn, eta, spectrum, t_max_abs_eig=t_eig)
            row = {
                "K": report.knorm,
                "a_op_norm": report.a_op_norm,
                "K_hd": report.knorm_hd,
                "K_tr": report.knorm_tr,
                "eta_lambda_max": report.eta_lambda_max,
                "max_growth": dyn.max_growth_rate(),
                "t_max_abs_eig": t_eig,
                "verdict": report.verdict.value,
            }
            if "K_mom" in want:
                try:
                    row["K_mom"] = knorm_momentum_hd(
                        spectrum.eigenvalues, eta, batch, spectrum.dim, config.momentum_mu
                    )
                except ValueError:
                    row["K_mom"] = np.inf
            if "K_l2" in want:
                try:
                    row["K_l2"] = knorm_l2_hd(
                        spectrum.eigenvalues, eta, batch, spectrum.dim, config.l2_rho
                    )
                except ValueError:
                    row["K_l2"] = np.inf
            analytic[(e_i, b_i)] = row

    # trajectory cells, deterministic order eta x batch x seed
    cells = []
    cell_index = 0
    for e_i in range(len(etas)):
        for b_i in range(len(batch_sizes)):
            for s_i in range(config.seeds):
                cells.append((cell_index, e_i, b_i, s_i))
                cell_index += 1
    traj_results: dict = {}
    if need_traj:
        if generated.jacobian is None:
            jac = _jacobian_from_spectrum(spectrum)
        else:
            jac = generated.jacobian
        cfg_dict = {
            "root_seed": config.root_seed,
            "steps": config.steps,
            "loss_cap": config.loss_cap,
        }
        workers = _n_workers()
        if workers > 1:
            with concurrent.futures.ProcessPoolExecutor(
                max_workers=workers,
                initializer=_init_traj_worker,
                initargs=(jac, etas, batch_sizes, cfg_dict),
            ) as pool:
                for idx, loss, div in pool.map(_run_traj_cell, cells, chunksize=8):
                    traj_results[idx] = (loss, div)
        else:
            _init_traj_worker(jac, etas, batch_sizes, cfg_dict)
            for cell in cells:
                idx, loss, div = _run_traj_cell(cell)
                traj_results[idx] = (loss, div)

    header = ["eta", "batch_size", "seed", "K", "a_op_norm", "eta_lambda_max"]
    optional = [
        m
        for m in ("K_hd", "K_tr", "K_mom", "K_l2", "max_growth", "t_max_abs_eig")
        if m in want
    ]
    header += optional
    if need_traj:
        header += ["final_loss", "diverged"]
    header.append("verdict")

    rows = []
    for idx, e_i, b_i, s_i in cells:
        a = analytic[(e_i, b_i)]
        row: list = [etas[e_i], batch_sizes[b_i], "%d" % s_i]
        row += [a["K"], a["a_op_norm"], a["eta_lambda_max"]]
        row += [a[m] for m in optional]
        if need_traj:
            loss, div = traj_results[idx]
            row += [loss, "%d" % int(div)]
        row.append(a["verdict"])
        rows.append(row)

    cfg_dict_full = asdict(config)
    metadata = {
        "seos-version": __version__,
        "versions": f"numpy {np.__version__}, scipy {scipy.__version__}",
        "kind": "stability-sweep",
        "config-hash": _config_hash(cfg_dict_full),
        "config": json.dumps(cfg_dict_full, sort_keys=True),
        "spectrum-meta": json.dumps(generated.metadata, sort_keys=True),
        "lambda-max": _fmt(lam_max),
        "root-seed": config.root_seed,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")
        + f" (wall {time.time() - wall_start:.2f}s)",
    }
    _write_csv(out_path, metadata, header, rows)
    return out_path


def _jacobian_from_spectrum(spectrum: SpectrumDecomposition) -> np.ndarray:
    """A Jacobian realizing the spectrum exactly: J = V sqrt(D Lambda) V^T."""
    lam = spectrum.eigenvalues
    v = spectrum.eigenvectors
    return (v * np.sqrt(lam * spectrum.dim)) @ v.T


# ---------------------------------------------------------------------------
# sharpening experiment


def run_sharpening_experiment(config: SharpeningCliConfig, out_path: Path) -> Path:
    wall_start = time.time()
    config.validate()
    batches = list(config.batch_sizes)
    if config.include_full_batch_baseline and config.dim not in batches:
        batches.append(config.dim)
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.root_seed, spawn_key=(0,))
    )
    result = monte_carlo_sharpening(
        config.dim,
        config.n_params,
        config.variance_profile,
        config.v_z,
        config.eta,
        batches,
        config.steps,
        config.seeds,
        rng,
        n_tracked=config.n_tracked,
        resample_model=config.resample_model,
    )

    header = ["eta", "batch_size", "seed", "step", "lambda_hat_max", "sigma_hat_max"]
    rows = []
    for batch in batches:
        for trace in result.traces:
            if trace.batch_size != batch:
                continue
            for t in range(config.steps + 1):
                rows.append(
                    [
                        config.eta,
                        batch,
                        "%d" % trace.seed_index,
                        "%d" % t,
                        trace.lambda_hat[t, 0],
                        trace.sigma_hat[t, 0],
                    ]
                )

    cfg_dict = asdict(config)
    metadata = {
        "seos-version": __version__,
        "versions": f"numpy {np.__version__}, scipy {scipy.__version__}",
        "kind": "sharpening",
        "config-hash": _config_hash(cfg_dict),
        "config": json.dumps(cfg_dict, sort_keys=True),
        "root-seed": config.root_seed,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")
        + f" (wall {time.time() - wall_start:.2f}s)",
    }
    _write_csv(out_path, metadata, header, rows)

    if config.steps >= 2:
        _write_derivative_table(config, result, batches, out_path, metadata)
    return out_path


def _write_derivative_table(config, result, batches, out_path: Path, metadata) -> None:
    """Per-batch discrete-derivative summary vs. theory, with the
    full-batch cell as the deterministic baseline for d2."""
    by_batch = {
        b: sorted(
            (t for t in result.traces if t.batch_size == b),
            key=lambda t: t.seed_index,
        )
        for b in batches
    }
    baseline = by_batch.get(config.dim)
    header = [
        "batch_size",
        "d1_lambda_mc",
        "d1_lambda_se",
        "d1_lambda_theory",
        "d2_sigma_mc",
        "d2_sigma_se",
        "d2_correction_mc",
        "d2_correction_se",
        "d2_correction_lowvar",
        "d2_correction_lowvar_se",
        "d2_correction_theory",
    ]
    rows = []
    for b in batches:
        traces = by_batch[b]
        d1 = np.array([t.d1_lambda(0)[0] for t in traces])
        d2 = np.array([t.d2_sigma(0)[0] for t in traces])
        lowvar = np.array([t.d2_sigma_top_lowvar for t in traces])
        theory_d1 = np.array([t.theory_d1_lambda for t in traces])
        theory_d2 = np.array([t.theory_d2_stoch for t in traces])
        row = [
            "%d" % b,
            d1.mean(),
            _sem(d1),
            theory_d1.mean(),
            d2.mean(),
            _sem(d2),
        ]
        if baseline is not None:
            paired = d2 - np.array([t.d2_sigma(0)[0] for t in baseline])
            paired_lv = lowvar - np.array(
                [t.d2_sigma_top_lowvar for t in baseline]
            )
            row += [
                paired.mean(),
                _sem(paired),
                paired_lv.mean(),
                _sem(paired_lv),
                theory_d2.mean(),
            ]
        else:
            row += [np.inf, np.inf, np.inf, np.inf, theory_d2.mean()]
        rows.append(row)
    deriv_path = out_path.with_name(out_path.stem + "_derivatives.csv")
    _write_csv(deriv_path, {**metadata, "kind": "sharpening-derivatives"}, header, rows)


def _sem(values: np.ndarray) -> float:
    if values.size < 2:
        return 0.0
    return float(values.std(ddof=1) / np.sqrt(values.size))


# ---------------------------------------------------------------------------
# validate


def load_spectrum_for_validation(
    raw: str, root_seed: int
) -> tuple[SpectrumDecomposition, dict]:
    """Resolve --spectrum: a JSON file with an explicit kernel/eigensystem/
    jacobian, a JSON file with a family spec, or an inline family string."""
    path = Path(raw)
    if path.exists():
        payload = json.loads(path.read_text())
        if "kernel" in payload:
            return decompose_kernel(np.asarray(payload["kernel"], dtype=float)), {
                "source": "kernel"
            }
        if "eigenvalues" in payload:
            spec = SpectrumDecomposition(
                np.asarray(payload["eigenvalues"], dtype=float),
                np.asarray(payload["eigenvectors"], dtype=float),
            )
            return spec, {"source": "eigensystem"}
        if "jacobian" in payload:
            jac = np.asarray(payload["jacobian"], dtype=float)
            return decompose_kernel(jac @ jac.T / jac.shape[0]), {"source": "jacobian"}
        raw_spec = payload
    else:
        raw_spec = raw
    family = parse_spectrum_spec(raw_spec)
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=root_seed, spawn_key=(0,))
    )
    generated = generate(family, rng)
    return generated.spectrum, generated.metadata


def run_validate(args: argparse.Namespace) -> int:
    spectrum, meta = load_spectrum_for_validation(args.spectrum, args.seed)
    dyn = build_diagonal_dynamics(spectrum, args.eta, args.batch_size)
    t_eig = None
    if args.with_transfer_operator:
        t_eig = max_abs_eigenvalue(
            build_transfer_operator(spectrum, args.eta, args.batch_size)
        )
    report = stability_verdict(dyn, args.eta, spectrum, t_max_abs_eig=t_eig)
    payload = report.to_dict()
    payload["eta"] = args.eta
    payload["batch_size"] = args.batch_size
    payload["spectrum"] = meta
    print(json.dumps(payload, indent=2, default=_json_float))
    return 0 if report.verdict.value == "Stable" else 2


def _json_float(value):
    if isinstance(value, (np.floating, np.integer)):
        return float(value)
    raise TypeError(f"not JSON-serializable: {type(value)}")


# ---------------------------------------------------------------------------
# argument plumbing


def _load_config(cls, args: argparse.Namespace):
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text())
    cfg = cls(**base)
    return cfg


def _apply_overrides(cfg, args: argparse.Namespace, mapping: dict) -> None:
    for attr, arg_name in mapping.items():
        value = getattr(args, arg_name, None)
        if value is not None:
            setattr(cfg, attr, value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seos",
        description="Stability sweeps for minibatch SGD on synthetic models",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sweep = sub.add_parser("stability-sweep", help="analytic measures over an eta grid")
    sweep.add_argument("--config", help="JSON config file")
    sweep.add_argument("--seed", type=int, help="root seed override")
    sweep.add_argument("--out", default="stability_sweep.csv")
    sweep.add_argument("--measures", help="comma-separated measure list")
    sweep.add_argument("--eta-min", type=float, dest="eta_min")
    sweep.add_argument("--eta-max", type=float, dest="eta_max")
    sweep.add_argument("--eta-points", type=int, dest="eta_points")
    sweep.add_argument("--batch-sizes", dest="batch_sizes")
    sweep.add_argument("--steps", type=int)
    sweep.add_argument("--spectrum", help='e.g. "iid_gaussian:D=100,P=120"')

    sharp = sub.add_parser("sharpening", help="quadratic-model sharpening ensembles")
    sharp.add_argument("--config", help="JSON config file")
    sharp.add_argument("--seed", type=int, help="root seed override")
    sharp.add_argument("--out", default="sharpening.csv")
    sharp.add_argument("--batch-sizes", dest="batch_sizes")
    sharp.add_argument("--steps", type=int)
    sharp.add_argument("--eta", type=float)
    sharp.add_argument("--profile", choices=("flat", "linear"))
    sharp.add_argument("--seeds", type=int)

    val = sub.add_parser("validate", help="single-instance stability report")
    val.add_argument("--spectrum", required=True, help="file or inline family spec")
    val.add_argument("--eta", type=float, required=True)
    val.add_argument("--batch-size", type=int, required=True)
    val.add_argument("--seed", type=int, default=0)
    val.add_argument(
        "--with-transfer-operator",
        action="store_true",
        help="also compute the exact transfer-operator eigenvalue (small D)",
    )
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "stability-sweep":
            cfg = _load_config(SweepConfig, args)
            _apply_overrides(
                cfg,
                args,
                {
                    "root_seed": "seed",
                    "eta_min": "eta_min",
                    "eta_max": "eta_max",
                    "eta_points": "eta_points",
                    "steps": "steps",
                },
            )
            if args.batch_sizes:
                cfg.batch_sizes = [int(x) for x in args.batch_sizes.split(",")]
            if args.measures:
                cfg.measures = [m.strip() for m in args.measures.split(",")]
            if args.spectrum:
                cfg.spectrum = _inline_to_dict(args.spectrum)
            run_stability_sweep(cfg, Path(args.out))
            return 0
        if args.command == "sharpening":
            cfg = _load_config(SharpeningCliConfig, args)
            _apply_overrides(
                cfg,
                args,
                {
                    "root_seed": "seed",
                    "steps": "steps",
                    "eta": "eta",
                    "variance_profile": "profile",
                    "seeds": "seeds",
                },
            )
            if args.batch_sizes:
                cfg.batch_sizes = [int(x) for x in args.batch_sizes.split(",")]
            run_sharpening_experiment(cfg, Path(args.out))
            return 0
        if args.command == "validate":
            return run_validate(args)
        parser.error(f"unknown command {args.command}")
        return 1
    except (ValueError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _inline_to_dict(raw: str) -> dict:
    spec = parse_spectrum_spec(raw)
    return spec.describe()


if __name__ == "__main__":
    sys.exit(main())

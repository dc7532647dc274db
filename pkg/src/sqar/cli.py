"""Command-line front end: fit, tune, and simulate."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import io as sio
from .estimator import FitResult, QuantileGrid, fit_fused, fit_rq, fit_sar_2sls, tune
from .exceptions import DimensionMismatch, InvalidBudget, ParseError, SqarError
from .simulate import DEFAULT_TAUS, SimDesign, run_study

EXIT_OK = 0
EXIT_DATA = 2
EXIT_SOLVER = 3

_METHODS = ("rq", "fl", "fal", "fs", "fas", "sar2sls")


@dataclass(frozen=True)
class RunConfig:
    command: str
    data_path: str | None = None
    weights_path: str | None = None
    weights_format: str = "dense_csv"
    taus: tuple = DEFAULT_TAUS
    method: str = "fal"
    criterion: str = "BIC"
    t: float | None = None
    grid_size: int = 50
    normalize: bool = True
    seed: int = 0
    out_dir: str = "."
    study_config: str | None = None


def parse_taus(spec: str) -> tuple:
    """Parse ``start:stop:step`` or a comma-separated list of levels."""
    spec = spec.strip()
    try:
        if ":" in spec:
            start, stop, step = (float(v) for v in spec.split(":"))
            if step <= 0:
                raise ValueError("step must be positive")
            count = int(round((stop - start) / step)) + 1
            taus = [start + i * step for i in range(count) if start + i * step <= stop + 1e-12]
        else:
            taus = [float(v) for v in spec.split(",") if v.strip()]
    except ValueError as exc:
        raise ParseError(f"bad quantile grid {spec!r}: {exc}") from exc
    if not taus:
        raise ParseError(f"bad quantile grid {spec!r}: no levels")
    return tuple(round(t, 12) for t in taus)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sqar",
                                     description="Spatial quantile autoregression with fusion penalties")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_fit_args(p, with_t):
        p.add_argument("--data", required=True, help="dataset CSV: header row, first column y")
        p.add_argument("--weights", required=True, help="spatial weights file")
        p.add_argument("--weights-format", choices=["dense_csv", "triplet_csv"],
                       default="dense_csv")
        p.add_argument("--taus", default="0.1:0.9:0.1",
                       help="quantile grid, start:stop:step or comma list")
        p.add_argument("--method", default="fal",
                       choices=_METHODS if with_t else ["fl", "fal", "fs", "fas"])
        p.add_argument("--criterion", choices=["aic", "bic"], default="bic")
        if with_t:
            p.add_argument("--t", type=float, default=None,
                           help="fixed fusion budget; skips tuning")
        p.add_argument("--grid-size", type=int, default=50)
        p.add_argument("--no-normalize", action="store_true",
                       help="keep weights exactly as loaded")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")

    add_fit_args(sub.add_parser("fit", help="estimate a model and write results"), with_t=True)
    add_fit_args(sub.add_parser("tune", help="fit with the tuning trace always written"),
                 with_t=False)

    sim = sub.add_parser("simulate", help="run a replication study from a JSON config")
    sim.add_argument("--config", required=True, help="study configuration JSON")
    sim.add_argument("--out", required=True, help="output directory")
    return parser


def _config_from_args(args) -> RunConfig:
    if args.command == "simulate":
        return RunConfig(command="simulate", study_config=args.config, out_dir=args.out)
    return RunConfig(
        command=args.command,
        data_path=args.data,
        weights_path=args.weights,
        weights_format=args.weights_format,
        taus=parse_taus(args.taus),
        method=args.method,
        criterion=args.criterion.upper(),
        t=getattr(args, "t", None),
        grid_size=args.grid_size,
        normalize=not args.no_normalize,
        seed=args.seed,
        out_dir=args.out,
    )


def _run_fit(config: RunConfig) -> None:
    data = sio.load_dataset(config.data_path, config.weights_path,
                            config.weights_format, normalize=config.normalize)
    grid = QuantileGrid(np.asarray(config.taus))
    method = config.method.upper()

    if method == "SAR2SLS":
        sheet = fit_sar_2sls(data)
        result = FitResult(sheet=sheet, method="SAR2SLS",
                           fused_mask=np.zeros((0, data.p + 1), dtype=bool))
        taus = None
    elif method == "RQ":
        result = fit_rq(data, grid)
        taus = grid.taus
    elif config.t is not None:
        result = fit_fused(data, grid, method, config.t)
        taus = grid.taus
    else:
        result = tune(data, grid, method, criterion=config.criterion,
                      grid_size=config.grid_size)
        taus = grid.taus

    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    sio.atomic_write_text(os.path.join(out, "coefficients.csv"),
                          sio.coefficients_csv_text(result, taus))
    sio.atomic_write_text(os.path.join(out, "fused_mask.csv"),
                          sio.fused_mask_csv_text(result, taus))
    sio.atomic_write_text(os.path.join(out, "tuning_trace.csv"),
                          sio.tuning_trace_csv_text(result.trace))
    sio.write_result_json(os.path.join(out, "result.json"), result, taus)


def _design_from_config(doc: dict) -> tuple[SimDesign, list, str]:
    try:
        methods = [str(m) for m in doc["methods"]]
        design = SimDesign(
            example=int(doc["example"]),
            m1=int(doc["m1"]),
            m2=int(doc["m2"]),
            lam=float(doc["lambda"]),
            alpha=float(doc.get("alpha", 3.0)),
            beta=tuple(np.atleast_1d(doc.get("beta", [3.0])).astype(float)),
            b=float(doc.get("b", 0.5)),
            c0=float(doc.get("c0", 0.0)),
            c1=float(doc.get("c1", 0.0)),
            c2=float(doc.get("c2", 0.0)),
            fn=str(doc.get("fn", "standard_normal")),
            taus=tuple(doc.get("taus", DEFAULT_TAUS)),
            reps=int(doc["reps"]),
            seed=int(doc.get("seed", 0)),
            noise_scale=float(doc.get("noise_scale", 1.0)),
        )
    except KeyError as exc:
        raise ParseError(f"study config is missing required key {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad study config: {exc}") from exc
    return design, methods, str(doc.get("criterion", "BIC")).upper()


def _run_simulate(config: RunConfig) -> None:
    try:
        with open(config.study_config) as handle:
            doc = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{config.study_config}: {exc}") from exc
    design, methods, criterion = _design_from_config(doc)
    table = run_study(design, methods, criterion=criterion)
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    sio.atomic_write_text(os.path.join(out, "medse.csv"), sio.medse_csv_text(table))
    sio.atomic_write_text(os.path.join(out, "coefficient_paths.csv"),
                          sio.coef_paths_csv_text(table))


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    config = _config_from_args(args)
    try:
        if config.command == "simulate":
            _run_simulate(config)
        else:
            _run_fit(config)
    except (ParseError, DimensionMismatch, InvalidBudget, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SqarError, RuntimeError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

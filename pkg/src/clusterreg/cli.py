"""Command-line front end: ``simulate``, ``fit`` and ``summarize``.

Settings come from an optional INI file (sections ``[model]``, ``[priors]``,
``[mcmc]`` and ``[simulate]``) overridden by command-line flags. Failures
are reported on stderr as one JSON object ``{"error": {"code", "message"}}``
with an exit code per failure class.
"""

import argparse
import configparser
import csv
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np
from scipy.interpolate import BSpline
from scipy.optimize import minimize_scalar

from . import __version__
from . import posterior as po
from .datagen import SimSpec, Truth, replicate_seeds, simulate
from .model import MODES, Curve, Dataset, ModelConfig, NumericalError, Priors
from .sampler import McmcConfig, Trace, run_chain
from .splines import make_knots

EXIT_CODES = {"config": 2, "data": 3, "numerical": 4, "io": 5}


class CliError(Exception):
    def __init__(self, kind, message, **detail):
        super().__init__(message)
        self.kind = kind
        self.detail = detail

    def __reduce__(self):
        return (_rebuild_error, (self.kind, str(self), self.detail))

    def to_json(self):
        body = {"code": self.kind, "message": str(self), **self.detail}
        return json.dumps({"error": body}, sort_keys=True)


def _rebuild_error(kind, message, detail):
    return CliError(kind, message, **detail)


# ---------------------------------------------------------------------------
# data files


def load_csv(path):
    """Read long-format ``curve_id,time,value`` rows into a Dataset.

    Curves keep the order of first appearance; times are sorted per curve.
    """
    try:
        with open(path, newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError("io", f"cannot read {path}: {exc.strerror}", path=str(path)) from exc
    return parse_csv(text, str(path))


def parse_csv(text, source="<text>"):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise CliError("data", f"{source} is empty", path=source)
    if [h.strip() for h in rows[0]] != ["curve_id", "time", "value"]:
        raise CliError("data", "header must be curve_id,time,value", path=source, row=1)
    curves = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise CliError("data", f"row {lineno} must have 3 fields", row=lineno)
        cid = row[0].strip()
        try:
            t, v = float(row[1]), float(row[2])
        except ValueError:
            raise CliError("data", f"row {lineno} has a non-numeric time or value",
                           row=lineno) from None
        if not (math.isfinite(t) and math.isfinite(v)):
            raise CliError("data", f"row {lineno} has a non-finite time or value", row=lineno)
        points = curves.setdefault(cid, {})
        if t in points:
            raise CliError("data", f"row {lineno} repeats time {t} for curve {cid!r}", row=lineno)
        points[t] = v
    if not curves:
        raise CliError("data", f"{source} has no data rows", path=source)
    out = []
    for cid, points in curves.items():
        times = np.array(sorted(points))
        try:
            out.append(Curve(cid, times, np.array([points[t] for t in times])))
        except ValueError as exc:
            raise CliError("data", f"curve {cid!r}: {exc}") from None
    return Dataset(out)


def write_text(path, text):
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise CliError("io", f"cannot write {path}: {exc.strerror}", path=str(path)) from exc


def _mkdir(path):
    try:
        Path(path).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("io", f"cannot create {path}: {exc.strerror}", path=str(path)) from exc
    return Path(path)


# ---------------------------------------------------------------------------
# derivative preprocessing


def _pspline_basis(times, n_segments, degree=3):
    lo, hi = times[0], times[-1]
    h = (hi - lo) / n_segments
    knots = lo + h * np.arange(-degree, n_segments + degree + 1)
    B = BSpline.design_matrix(times, knots, degree).toarray()
    return knots, B


def smooth_derivative(data, smoothing=None, n_segments=None, degree=3):
    """First derivatives of penalized-spline fits, evaluated at the sampling times.

    Each curve is fitted with equally spaced cubic B-splines (knots extended
    past the ends so that a zero second-difference penalty leaves exactly
    the straight lines) and coefficients solving
    ``(B'B + lambda D'D) c = B'y``. ``smoothing`` fixes lambda; otherwise it
    is chosen per curve by generalized cross-validation.
    """
    out = []
    for curve in data:
        t, y = curve.times, curve.values
        n = t.size
        if n < degree + 2:
            raise ValueError(f"curve {curve.id!r} needs at least {degree + 2} points, has {n}")
        segs = n_segments or max((n - 1) // 2, 4)
        knots, B = _pspline_basis(t, segs, degree)
        D = np.diff(np.eye(B.shape[1]), 2, axis=0)
        BtB, Bty, DtD = B.T @ B, B.T @ y, D.T @ D

        def solve(lam):
            return np.linalg.solve(BtB + lam * DtD, Bty)

        def gcv(loglam):
            lam = 10.0 ** loglam
            H = B @ np.linalg.solve(BtB + lam * DtD, B.T)
            resid = y - H @ y
            return n * float(resid @ resid) / (n - np.trace(H)) ** 2

        if smoothing is None:
            lam = 10.0 ** minimize_scalar(gcv, bounds=(-8.0, 8.0), method="bounded").x
        else:
            lam = float(smoothing)
            if lam < 0:
                raise ValueError("smoothing parameter must be nonnegative")
        coef = solve(lam)
        deriv = BSpline(knots, coef, degree).derivative()(t)
        out.append(Curve(curve.id, t, deriv))
    return Dataset(out)


# ---------------------------------------------------------------------------
# configuration


def _floats(text):
    return [float(v) for v in text.replace(",", " ").split()]


def _knot_spec(text):
    """An integer count of equidistant knots or an explicit list of positions."""
    values = text.replace(",", " ").split()
    if len(values) == 1 and values[0].lstrip("+").isdigit():
        return int(values[0])
    return [float(v) for v in values]


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


MODEL_KEYS = {"delta": float, "degree": int, "shape_domain": _floats, "shape_interior": _knot_spec,
              "shape_span": _floats, "warp_interior": _knot_spec, "positive_amplitude": _bool,
              "mode": str}
MCMC_KEYS = {"iterations": int, "burn_in": int, "thin": int, "seed": int, "step": float,
             "adapt": _bool, "adapt_every": int, "parallel_copies": _bool, "chains": int}
SIM_KEYS = {"sizes": lambda s: tuple(int(v) for v in _floats(s)), "times": _floats,
            "noise_sd": float, "level_sd": float, "amplitude_sd": float, "warp_scale": float,
            "warp_interior": _floats, "delta": float, "seed": int, "max_rejections": int}


def _parse_section(parser, section, keys):
    out = {}
    if not parser.has_section(section):
        return out
    for key, raw in parser.items(section):
        if key not in keys:
            raise CliError("config", f"unknown key {key!r} in [{section}]", field=f"{section}.{key}")
        try:
            out[key] = keys[key](raw)
        except ValueError as exc:
            raise CliError("config", f"bad value for {section}.{key}: {exc}",
                           field=f"{section}.{key}") from None
    return out


def read_config(path):
    """Parse an INI run/simulation file into per-section dictionaries."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise CliError("io", f"cannot read {path}: {exc.strerror}", path=str(path)) from exc
    except configparser.Error as exc:
        raise CliError("config", f"malformed config {path}: {exc}") from None
    prior_keys = {f.name: float for f in fields(Priors)}
    known = {"model", "priors", "mcmc", "simulate"}
    extra = set(parser.sections()) - known
    if extra:
        raise CliError("config", f"unknown section(s) {sorted(extra)}", field=sorted(extra)[0])
    return {"model": _parse_section(parser, "model", MODEL_KEYS),
            "priors": _parse_section(parser, "priors", prior_keys),
            "mcmc": _parse_section(parser, "mcmc", MCMC_KEYS),
            "simulate": _parse_section(parser, "simulate", SIM_KEYS)}


def default_model_settings(window):
    """Defaults scaled to the sampling window.

    On ``[0, 20]`` these reproduce the engineered-data study: expansion
    5, 31 equidistant shape knots inside ``[-5, 25]`` and warp knots at
    5, 10 and 15.
    """
    lo, hi = window
    width = hi - lo
    return {"delta": 0.25 * width, "degree": 3, "shape_interior": 31,
            "warp_interior": [lo + 0.25 * width, lo + 0.5 * width, lo + 0.75 * width],
            "positive_amplitude": True, "mode": "joint"}


def build_model_config(settings, priors, window):
    s = {**default_model_settings(window), **settings}
    lo, hi = window
    try:
        delta = s["delta"]
        domain = s.get("shape_domain") or [lo - delta, hi + delta]
        shape = make_knots(tuple(domain), s["shape_interior"], s["degree"],
                           span=tuple(s["shape_span"]) if "shape_span" in s else None)
        warp = make_knots((lo, hi), s["warp_interior"], s["degree"])
        return ModelConfig(shape, warp, delta, s["positive_amplitude"], s["mode"],
                           Priors(**priors))
    except (ValueError, TypeError) as exc:
        raise CliError("config", f"invalid model configuration: {exc}", field="model") from None


def build_mcmc_config(settings):
    s = dict(settings)
    s.pop("chains", None)
    try:
        return McmcConfig(**s)
    except (ValueError, TypeError) as exc:
        raise CliError("config", f"invalid mcmc configuration: {exc}", field="mcmc") from None


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args):
    cfg = read_config(args.config) if args.config else {"simulate": {}}
    settings = dict(cfg["simulate"])
    if args.seed is not None:
        settings["seed"] = args.seed
    try:
        base = SimSpec.from_dict(settings)
    except (ValueError, TypeError) as exc:
        raise CliError("config", f"invalid simulation spec: {exc}", field="simulate") from None
    out = _mkdir(args.out)
    seeds = [base.seed] if args.replicates == 1 else replicate_seeds(base.seed, args.replicates)
    written = []
    for r, seed in enumerate(seeds):
        spec = SimSpec.from_dict({**base.to_dict(), "seed": seed})
        try:
            data, truth = simulate(spec)
        except RuntimeError as exc:
            raise CliError("config", str(exc), field="simulate.warp_scale") from None
        target = out if args.replicates == 1 else _mkdir(out / f"rep_{r:03d}")
        write_text(target / "data.csv", data.to_csv_text())
        write_text(target / "truth.json", truth.to_json())
        manifest = {"command": "simulate", "version": __version__, "spec": spec.to_dict(),
                    "base_seed": base.seed, "replicate": r, "dataset_hash": data.content_hash()}
        write_text(target / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        written.append(str(target))
    return {"datasets": written}


def _fit_one(job):
    data_text, model_dict, mcmc_dict, out = job
    data = parse_csv(data_text)
    return _fit_and_write(data, ModelConfig.from_dict(model_dict),
                          McmcConfig(**mcmc_dict), Path(out))


def _fit_and_write(data, config, mcmc, out):
    _mkdir(out)
    try:
        trace = run_chain(data, config, mcmc)
    except NumericalError as exc:
        raise CliError("numerical", str(exc), seed=mcmc.seed) from None
    trace.save(out / "trace")
    write_text(out / "data.csv", data.to_csv_text())
    manifest = {"command": "fit", "version": __version__, "model": config.to_dict(),
                "mcmc": mcmc.to_dict(), "dataset_hash": data.content_hash(),
                "trace_hashes": trace.block_hashes()}
    write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    log_cpo, lpml = po.cpo_lpml(trace)
    hist = po.k_histogram(trace)
    write_text(out / "k_histogram.csv",
               "K,count\n" + "".join(f"{k},{c}\n" for k, c in sorted(hist.items())))
    report = {"n_draws": trace.n_draws, "lpml": lpml, "k_mode": po.posterior_mode_k(trace),
              "k_histogram": {str(k): v for k, v in hist.items()},
              "log_cpo": dict(zip(data.ids, log_cpo.tolist())),
              "acceptance": trace.meta["acceptance"], "final_steps": trace.meta["final_steps"]}
    write_text(out / "report.json", json.dumps(report, indent=2, sort_keys=True))
    return {"out": str(out), "k_mode": report["k_mode"], "lpml": lpml}


def cmd_fit(args):
    if args.manifest:
        try:
            manifest = json.loads(Path(args.manifest).read_text())
            config = ModelConfig.from_dict(manifest["model"])
            mcmc_d = dict(manifest["mcmc"])
            mcmc_d["fixed"] = tuple(mcmc_d["fixed"])
            mcmc = McmcConfig(**mcmc_d)
        except OSError as exc:
            raise CliError("io", f"cannot read {args.manifest}: {exc.strerror}") from None
        except (KeyError, ValueError, TypeError) as exc:
            raise CliError("config", f"invalid manifest: {exc}", field="manifest") from None
        data = load_csv(args.data)
        if data.content_hash() != manifest.get("dataset_hash"):
            raise CliError("data", "dataset does not match the manifest hash")
        chains = 1
    else:
        cfg = read_config(args.config) if args.config else {"model": {}, "priors": {}, "mcmc": {}}
        data = load_csv(args.data)
        if args.derivative:
            try:
                data = smooth_derivative(data, args.smoothing)
            except ValueError as exc:
                raise CliError("data", str(exc)) from None
        model_s = dict(cfg["model"])
        for key in ("mode", "delta"):
            if getattr(args, key) is not None:
                model_s[key] = getattr(args, key)
        mcmc_s = dict(cfg["mcmc"])
        for key in ("iterations", "burn_in", "thin", "seed", "step"):
            if getattr(args, key) is not None:
                mcmc_s[key] = getattr(args, key)
        if args.parallel_copies:
            mcmc_s["parallel_copies"] = True
        chains = args.chains or mcmc_s.get("chains", 1)
        config = build_model_config(model_s, cfg["priors"], data.window)
        mcmc = build_mcmc_config(mcmc_s)
    out = _mkdir(args.out)
    if chains == 1:
        return _fit_and_write(data, config, mcmc, out)
    if chains < 1:
        raise CliError("config", "chains must be positive", field="mcmc.chains")
    seeds = replicate_seeds(mcmc.seed, chains)
    jobs = [(data.to_csv_text(), config.to_dict(), {**mcmc.to_dict(), "seed": s,
                                                     "fixed": tuple(mcmc.fixed)},
             str(out / f"chain_{c:03d}")) for c, s in enumerate(seeds)]
    workers = min(chains, args.workers or chains)
    if workers == 1:
        results = [_fit_one(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fit_one, jobs))
    return {"chains": results}


def cmd_summarize(args):
    run = Path(args.run)
    try:
        trace = Trace.load(run / "trace")
    except FileNotFoundError as exc:
        raise CliError("io", str(exc)) from None
    except ValueError as exc:
        raise CliError("data", str(exc)) from None
    data = load_csv(run / "data.csv")
    if data.content_hash() != trace.meta.get("dataset_hash"):
        raise CliError("data", "data.csv does not match the trace's dataset hash")
    level, band = args.level, args.band
    if not 0 < level < 1:
        raise CliError("config", "level must lie in (0, 1)", field="level")
    config = trace.model_config()
    out = _mkdir(args.out or run / "summary")
    report, map_est, dahl_est = po.diagnostics(trace, data, config)
    ids = data.ids
    write_text(out / "partition_map.csv", po.partition_csv(ids, map_est.labels))
    write_text(out / "partition_dahl.csv", po.partition_csv(ids, dahl_est.labels))
    P = po.pairwise_prob_matrix(trace)
    lines = ["curve_id," + ",".join(ids)]
    lines += [cid + "," + ",".join(repr(float(v)) for v in row) for cid, row in zip(ids, P)]
    write_text(out / "pairwise.csv", "\n".join(lines) + "\n")

    lo, hi = config.window
    grid = np.linspace(lo, hi, args.grid_points)
    reference = dahl_est.labels if args.partition == "dahl" else map_est.labels
    shapes = {}
    for k in range(int(reference.max()) + 1):
        try:
            shapes[f"cluster_{k}"] = po.cluster_shape(trace, reference, k, grid, level, band, config)
        except ValueError:
            continue
    write_text(out / "shapes.csv", po.summary_csv(shapes))
    fits = {cid: po.curve_fit(trace, cid, grid, level, band, config) for cid in ids}
    write_text(out / "fits.csv", po.summary_csv(fits))
    warps = {cid: po.warp_mean(trace, cid, grid, level, band, config) for cid in ids}
    write_text(out / "warps.csv", po.summary_csv(warps))

    report["band"] = {"type": band, "level": level}
    report["reference_partition"] = args.partition
    report["shape_draws"] = {name: s.n_draws for name, s in shapes.items()}
    if args.truth:
        try:
            truth = Truth.from_json(Path(args.truth).read_text())
        except OSError as exc:
            raise CliError("io", f"cannot read {args.truth}: {exc.strerror}") from None
        except (KeyError, ValueError) as exc:
            raise CliError("data", f"invalid truth file: {exc}") from None
        if list(truth.ids) != ids:
            raise CliError("data", "truth curve ids do not match the dataset")
        report["ari_map"] = po.adjusted_rand(truth.labels, map_est.labels)
        report["ari_dahl"] = po.adjusted_rand(truth.labels, dahl_est.labels)
        mse = po.mse_vs_truth(trace, truth.curves(grid), grid, config)
        report["mse"] = dict(zip(ids, mse.tolist()))
        report["mse_median"] = float(np.median(mse))
    report["k_histogram"] = {str(k): v for k, v in report["k_histogram"].items()}
    write_text(out / "report.json", json.dumps(report, indent=2, sort_keys=True, default=float))
    return {"out": str(out), "map_K": map_est.K, "dahl_K": dahl_est.K}


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="clusterreg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw engineered datasets with known truth")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--replicates", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="run the sampler on a long-format CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--manifest", help="re-run exactly from a previous fit manifest")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--delta", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--parallel-copies", action="store_true")
    p.add_argument("--chains", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--derivative", action="store_true",
                   help="fit first derivatives of penalized-spline smooths instead of raw values")
    p.add_argument("--smoothing", type=float, help="fixed smoothing parameter (default: GCV)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("summarize", help="posterior summaries of a fit directory")
    p.add_argument("--run", required=True, help="output directory of `fit`")
    p.add_argument("--out")
    p.add_argument("--truth")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--band", choices=po.BAND_TYPES, default="simultaneous")
    p.add_argument("--partition", choices=("map", "dahl"), default="map")
    p.add_argument("--grid-points", dest="grid_points", type=int, default=101)
    p.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        result = args.func(args)
    except CliError as exc:
        print(exc.to_json(), file=sys.stderr)
        return EXIT_CODES[exc.kind]
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: fit, sample, evaluate, scan, and the toy demo.

Batch commands only; every randomized command requires an explicit seed and
re-running with the same inputs, config, and seed reproduces the primary
artifacts byte for byte. Primary outputs are written via temp-then-rename,
so no partial artifact survives an error. The manifest and the wall_ms
trace column carry wall-clock values and are the only timing-bearing
outputs.

Exit codes: 0 success, 2 usage or parse, 3 shape or domain, 4 optimization
failure, 5 no qualifying alpha.
"""

from __future__ import annotations

import argparse
import configparser
import datetime
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import glm as _glm
from . import gof as _gof
from . import kernels as _kernels
from . import mmd as _mmd
from . import synthetic as _syn
from .errors import (
    ContractError,
    DomainError,
    GradientUndefinedError,
    NoQualifyingAlphaError,
    OptimizationError,
    ParameterError,
    ParseError,
    ShapeError,
    SpikeMmdError,
)
from .optim import FitConfig
from .spiketrain import (
    TrialSet,
    default_max_lag,
    load_trials,
    pooled_isis,
    save_trials,
    smooth_matrix,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DOMAIN = 3
EXIT_OPTIMIZATION = 4
EXIT_NO_ALPHA = 5

DEFAULT_GRID = "0.01,0.1,1,10,100,1000"

# (section, key) -> (python type, default)
CONFIG_SCHEMA = {
    ("data", "dt"): (float, None),
    ("data", "duration"): (float, None),
    ("data", "format"): (str, "spike-times-text"),
    ("data", "header"): (bool, False),
    ("model", "observation"): (str, "bernoulli"),
    ("model", "history_bins"): (int, 10),
    ("model", "stimulus_bins"): (int, 0),
    ("model", "lam_max"): (float, 1e6),
    ("kernel", "tag"): (str, None),
    ("kernel", "sigma"): (float, None),
    ("kernel", "bandwidth"): (float, None),
    ("kernel", "max_lag"): (int, None),
    ("fit", "alpha"): (float, None),
    ("fit", "samples_per_step"): (int, 100),
    ("fit", "learning_rate"): (float, 0.05),
    ("fit", "max_iters"): (int, None),
    ("fit", "seed"): (int, None),
    ("fit", "baseline"): (bool, True),
    ("fit", "lambda_ridge"): (float, 0.0),
    ("fit", "tolerance"): (float, 1e-6),
    ("fit", "grad_clip"): (float, 1e3),
    ("fit", "eval_samples"): (int, 1000),
    ("fit", "tail_average"): (int, 0),
    ("fit", "trace_stride"): (int, 0),
    ("fit", "grid"): (str, DEFAULT_GRID),
}


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ParameterError(f"expected a boolean, got {raw!r}")


def _convert(key: tuple[str, str], raw: str):
    typ, _ = CONFIG_SCHEMA[key]
    try:
        if typ is bool:
            return _parse_bool(raw)
        return typ(raw)
    except ValueError:
        raise ParameterError(
            f"config value {key[0]}.{key[1]} = {raw!r} is not a {typ.__name__}"
        ) from None


def load_config_file(path) -> dict[tuple[str, str], object]:
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="ascii") as fh:
            parser.read_file(fh, source=str(path))
    except configparser.Error as err:
        raise ParseError(f"bad config file: {err}", path) from None
    out = {}
    for section in parser.sections():
        for key, raw in parser[section].items():
            schema_key = (section, key)
            if schema_key not in CONFIG_SCHEMA:
                raise ParseError(f"unknown config key [{section}] {key}", path)
            out[schema_key] = _convert(schema_key, raw)
    return out


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    for (section, key), (typ, _) in CONFIG_SCHEMA.items():
        flag = "--" + key.replace("_", "-")
        try:
            parser.add_argument(
                flag, dest=f"{section}__{key}", default=None,
                type=str, help=f"override [{section}] {key}", metavar="V",
            )
        except argparse.ArgumentError:
            pass
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap; results never depend on it")


def resolve_config(args, config_path=None) -> dict[tuple[str, str], object]:
    resolved = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
    if config_path is not None:
        resolved.update(load_config_file(config_path))
    for (section, key) in CONFIG_SCHEMA:
        raw = getattr(args, f"{section}__{key}", None)
        if raw is not None:
            resolved[(section, key)] = _convert((section, key), raw)
    if getattr(args, "threads", 1) < 1:
        raise ParameterError("--threads must be >= 1")
    return resolved


def _require_cfg(resolved, section, key):
    value = resolved[(section, key)]
    if value is None:
        raise ParameterError(
            f"{section}.{key} is required (set it in the config file or via "
            f"--{key.replace('_', '-')})"
        )
    return value


def build_fit_config(resolved, need_seed: bool, default_iters: int) -> FitConfig:
    seed = resolved[("fit", "seed")]
    if seed is None:
        if need_seed:
            raise ParameterError(
                "an explicit seed is required for randomized commands "
                "(set fit.seed or --seed)"
            )
        seed = 0
    max_iters = resolved[("fit", "max_iters")]
    alpha = resolved[("fit", "alpha")]
    return FitConfig(
        alpha=0.0 if alpha is None else float(alpha),
        samples_per_step=resolved[("fit", "samples_per_step")],
        learning_rate=resolved[("fit", "learning_rate")],
        max_iters=default_iters if max_iters is None else max_iters,
        seed=int(seed),
        baseline=resolved[("fit", "baseline")],
        lambda_ridge=resolved[("fit", "lambda_ridge")],
        tolerance=resolved[("fit", "tolerance")],
        grad_clip=resolved[("fit", "grad_clip")],
        history_bins=resolved[("model", "history_bins")],
        stimulus_bins=resolved[("model", "stimulus_bins")],
        lam_max=resolved[("model", "lam_max")],
        eval_samples=resolved[("fit", "eval_samples")],
        tail_average=resolved[("fit", "tail_average")],
        trace_stride=resolved[("fit", "trace_stride")],
    )


def build_kernel_spec(resolved, kernel_config=None) -> _kernels.KernelSpec:
    if kernel_config is not None:
        return _kernels.load_spec(kernel_config)
    tag = _require_cfg(resolved, "kernel", "tag")
    return _kernels.KernelSpec(
        tag=tag,
        sigma=resolved[("kernel", "sigma")],
        bandwidth=resolved[("kernel", "bandwidth")],
        max_lag=resolved[("kernel", "max_lag")],
    )


def load_data(resolved, path) -> TrialSet:
    return load_trials(
        path,
        format=resolved[("data", "format")],
        dt=_require_cfg(resolved, "data", "dt"),
        duration=_require_cfg(resolved, "data", "duration"),
        header=resolved[("data", "header")],
    )


# ---------------------------------------------------------------------------
# artifacts


def atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="ascii") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


class Manifest:
    """Run record written before and finalized after every command."""

    def __init__(self, out_dir: Path, command: str, resolved, inputs, seed):
        self.path = out_dir / "manifest.json"
        self.doc = {
            "tool": "spikemmd",
            "version": __version__,
            "command": command,
            "seed": seed,
            "config": {
                f"{section}.{key}": value
                for (section, key), value in sorted(resolved.items())
            },
            "inputs": {str(p): _sha256(p) for p in inputs},
            "outputs": [],
            "started": _now(),
            "finished": None,
            "status": "running",
        }
        atomic_write(self.path, json.dumps(self.doc, indent=2) + "\n")

    def finalize(self, outputs, status="ok") -> None:
        self.doc["outputs"] = [str(o) for o in outputs]
        self.doc["finished"] = _now()
        self.doc["status"] = status
        atomic_write(self.path, json.dumps(self.doc, indent=2) + "\n")


def _prepare_out(out) -> Path:
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _fmt(value) -> str:
    if value is None:
        return "absent"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------------------
# commands


def cmd_fit_mle(args) -> int:
    resolved = resolve_config(args, args.config)
    data = load_data(resolved, args.data)
    obs = _glm.check_observation_model(resolved[("model", "observation")])
    config = build_fit_config(resolved, need_seed=False, default_iters=5000)
    out_dir = _prepare_out(args.out)
    inputs = [args.data] + ([args.config] if args.config else [])
    manifest = Manifest(out_dir, "fit-mle", resolved, inputs, config.seed)
    try:
        params, trace = _glm.fit_mle(data, obs, config)
    except SpikeMmdError:
        manifest.finalize([], status="error")
        raise
    params_path = out_dir / "params.txt"
    trace_path = out_dir / "trace.ndjson"
    _glm.save_params(params, data.dt, obs, params_path)
    trace.to_ndjson(trace_path)
    manifest.finalize([params_path, trace_path])
    print(f"fit-mle: {trace.iterations} iterations, final NLL {trace.final_nll()}")
    return EXIT_OK


def _run_one_mmd_fit(data, spec, obs, config, pure: bool):
    if pure:
        return _mmd.fit_mmd(data, spec, obs, config)
    return _mmd.fit_joint(data, spec, obs, config)


def cmd_fit_mmd(args) -> int:
    resolved = resolve_config(args, args.config)
    data = load_data(resolved, args.data)
    obs = _glm.check_observation_model(resolved[("model", "observation")])
    config = build_fit_config(resolved, need_seed=True, default_iters=600)
    spec = build_kernel_spec(resolved, args.kernel_config)
    spec = _kernels.resolve_spec(spec, data)
    pure = resolved[("fit", "alpha")] is None
    if pure and spec.model_based:
        raise ContractError(
            "a model-based kernel requires the joint objective; pass --alpha"
        )
    out_dir = _prepare_out(args.out)
    inputs = [args.data]
    inputs += [p for p in (args.config, args.kernel_config) if p]
    manifest = Manifest(out_dir, "fit-mmd", resolved, inputs, config.seed)
    outputs = []
    try:
        if args.repeats is None:
            params, trace = _run_one_mmd_fit(data, spec, obs, config, pure)
            params_path = out_dir / "params.txt"
            trace_path = out_dir / "trace.ndjson"
            _glm.save_params(params, data.dt, obs, params_path)
            trace.to_ndjson(trace_path)
            outputs += [params_path, trace_path]
            print(
                f"fit-mmd: {trace.iterations} iterations, "
                f"final MMD2 {trace.final_mmd2()}, final NLL {trace.final_nll()}"
            )
        else:
            stats = []
            for rep in range(args.repeats):
                rep_dir = _prepare_out(out_dir / f"rep{rep:02d}")
                rep_config = config.with_(seed=config.seed + rep)
                rep_manifest = Manifest(
                    rep_dir, "fit-mmd", resolved, inputs, rep_config.seed
                )
                params, trace = _run_one_mmd_fit(data, spec, obs, rep_config, pure)
                params_path = rep_dir / "params.txt"
                trace_path = rep_dir / "trace.ndjson"
                _glm.save_params(params, data.dt, obs, params_path)
                trace.to_ndjson(trace_path)
                rep_manifest.finalize([params_path, trace_path])
                stats.append((trace.final_nll(), trace.final_mmd2()))
                outputs += [params_path, trace_path]
            summary_path = out_dir / "summary.csv"
            lines = ["stat,median,min,max"]
            for name, col in (("final_nll", 0), ("final_mmd2", 1)):
                vals = np.array([s[col] for s in stats], dtype=np.float64)
                lines.append(
                    f"{name},{repr(float(np.median(vals)))},"
                    f"{repr(float(vals.min()))},{repr(float(vals.max()))}"
                )
            atomic_write(summary_path, "\n".join(lines) + "\n")
            outputs.append(summary_path)
            print(f"fit-mmd: {args.repeats} repetitions written to {out_dir}")
    except SpikeMmdError:
        manifest.finalize(outputs, status="error")
        raise
    manifest.finalize(outputs)
    return EXIT_OK


def cmd_sample(args) -> int:
    if args.n < 1:
        raise ParameterError(f"--n must be >= 1, got {args.n}")
    if args.t_bins < 1:
        raise ParameterError(f"--t-bins must be >= 1, got {args.t_bins}")
    params, dt, obs = _glm.load_params(args.params)
    out_dir = _prepare_out(args.out)
    resolved = {("fit", "seed"): args.seed}
    manifest = Manifest(out_dir, "sample", resolved, [args.params], args.seed)
    samples, runaway = _glm.sample_free_running(
        params, dt, obs, args.n, args.t_bins, seed=args.seed, stream=0
    )
    samples_path = out_dir / "samples.txt"
    summary_path = out_dir / "summary.txt"
    save_trials(samples, samples_path, "spike-times-text")
    frac = float(np.mean(runaway))
    atomic_write(
        summary_path,
        f"n = {args.n}\nt_bins = {args.t_bins}\ndt = {repr(dt)}\n"
        f"runaway_fraction = {repr(frac)}\n",
    )
    manifest.finalize([samples_path, summary_path])
    print(f"sample: wrote {args.n} trials, runaway fraction {frac}")
    return EXIT_OK


def _csv_lines(header: str, rows) -> str:
    return "\n".join([header] + rows) + "\n"


def cmd_gof(args) -> int:
    resolved = resolve_config(args, args.config)
    params, dt, obs = _glm.load_params(args.params)
    if resolved[("data", "dt")] is None:
        resolved[("data", "dt")] = dt
    train = load_data(resolved, args.train)
    valid = None
    valid_missing = False
    if args.valid is not None:
        if Path(args.valid).exists():
            valid = load_data(resolved, args.valid)
        else:
            valid_missing = True
            print(
                f"warning: validation file {args.valid} not found; "
                "validation fields will be absent",
                file=sys.stderr,
            )
    if args.samples is not None:
        samples = load_data(resolved, args.samples)
        seed = 0 if args.seed is None else args.seed
    else:
        if args.n_samples is None:
            raise ParameterError("give either --samples or --n-samples")
        if args.seed is None:
            raise ParameterError("--seed is required when generating samples")
        seed = args.seed
        samples, _ = _glm.sample_free_running(
            params, dt, obs, args.n_samples, train.t_bins,
            train.stimulus, seed=seed, stream=_mmd.EVAL_STREAM_BASE,
        )
    spec = None
    if resolved[("kernel", "tag")] is not None or args.kernel_config:
        spec = build_kernel_spec(resolved, args.kernel_config)
        spec = _kernels.resolve_spec(spec, train)
    max_lag = resolved[("kernel", "max_lag")]
    if max_lag is None:
        max_lag = default_max_lag(train.t_bins)
    out_dir = _prepare_out(args.out)
    inputs = [args.params, args.train]
    inputs += [p for p in (args.config, args.kernel_config, args.samples) if p]
    if args.valid and not valid_missing:
        inputs.append(args.valid)
    manifest = Manifest(out_dir, "gof", resolved, inputs, seed)

    report = _gof.build_report(
        params, train, valid, samples, spec, obs, max_lag=max_lag
    )
    reference = valid if valid is not None else train

    report_path = out_dir / "report.txt"
    _gof.save_report(report, report_path)
    header, row = _gof.report_csv_row(report)
    row_path = out_dir / "report_row.csv"
    atomic_write(row_path, header + "\n" + row + "\n")

    isi_path = out_dir / "isi_hist.csv"
    atomic_write(isi_path, _isi_hist_csv(reference, samples, args.isi_bins))
    ac_path = out_dir / "autocorr.csv"
    atomic_write(ac_path, _autocorr_csv(reference, samples, max_lag))
    rate_path = out_dir / "smoothed_rate.csv"
    atomic_write(
        rate_path, _smoothed_rate_csv(reference, samples, args.bandwidth)
    )
    ks_path = out_dir / "ks_cdf.csv"
    atomic_write(ks_path, _ks_cdf_csv(params, reference, obs))

    manifest.finalize(
        [report_path, row_path, isi_path, ac_path, rate_path, ks_path]
    )
    print(f"gof: report written to {report_path}")
    return EXIT_OK


def _isi_hist_csv(reference, samples, n_bins: int) -> str:
    ref = pooled_isis(reference)
    mod = pooled_isis(samples)
    hi = max(float(ref.max()) if ref.size else 0.0,
             float(mod.max()) if mod.size else 0.0,
             reference.dt)
    edges = np.linspace(0.0, hi, n_bins + 1)
    ref_d, _ = np.histogram(ref, bins=edges, density=ref.size > 0)
    mod_d, _ = np.histogram(mod, bins=edges, density=mod.size > 0)
    rows = [
        f"{repr(float(edges[i]))},{repr(float(edges[i + 1]))},"
        f"{repr(float(ref_d[i]))},{repr(float(mod_d[i]))}"
        for i in range(n_bins)
    ]
    return _csv_lines("bin_left_s,bin_right_s,data_density,model_density", rows)


def _autocorr_csv(reference, samples, max_lag: int) -> str:
    from .spiketrain import autocorr_matrix

    ref = autocorr_matrix(reference.counts_matrix(), max_lag).mean(axis=0)
    mod = autocorr_matrix(samples.counts_matrix(), max_lag).mean(axis=0)
    rows = [
        f"{lag},{repr(float(ref[lag]))},{repr(float(mod[lag]))}"
        for lag in range(max_lag + 1)
    ]
    return _csv_lines("lag_bins,data_mean,model_mean", rows)


def _smoothed_rate_csv(reference, samples, bandwidth: float) -> str:
    dt = reference.dt
    ref = smooth_matrix(reference.counts_matrix(), bandwidth, dt).mean(axis=0) / dt
    mod = smooth_matrix(samples.counts_matrix(), bandwidth, dt).mean(axis=0) / dt
    rows = [
        f"{repr((t + 0.5) * dt)},{repr(float(ref[t]))},{repr(float(mod[t]))}"
        for t in range(reference.t_bins)
    ]
    return _csv_lines("time_s,data_rate_hz,model_rate_hz", rows)


def _ks_cdf_csv(params, reference, obs) -> str:
    header = "z,empirical_cdf,uniform_cdf"
    try:
        _, z = _gof.time_rescale_ks(params, reference, obs)
    except SpikeMmdError:
        return header + "\n"
    n = z.size
    rows = [
        f"{repr(float(z[i]))},{repr((i + 1) / n)},{repr(float(z[i]))}"
        for i in range(n)
    ]
    return _csv_lines(header, rows)


def cmd_alpha_scan(args) -> int:
    resolved = resolve_config(args, args.config)
    data = load_data(resolved, args.data)
    obs = _glm.check_observation_model(resolved[("model", "observation")])
    config = build_fit_config(resolved, need_seed=True, default_iters=400)
    spec = build_kernel_spec(resolved, args.kernel_config)
    spec = _kernels.resolve_spec(spec, data)
    grid = [float(tok) for tok in resolved[("fit", "grid")].split(",") if tok.strip()]
    out_dir = _prepare_out(args.out)
    inputs = [args.data]
    inputs += [p for p in (args.config, args.kernel_config) if p]
    manifest = Manifest(out_dir, "alpha-scan", resolved, inputs, config.seed)

    def write_table(report):
        rows = [
            f"{repr(r.alpha)},{_fmt(r.final_nll)},{_fmt(r.final_mmd2)},"
            f"{repr(r.sample_rate_hz)},{'pass' if r.rate_ok else 'fail'},"
            f"{repr(r.runaway_frac)}"
            for r in report.rows
        ]
        table_path = out_dir / "alpha_table.csv"
        atomic_write(
            table_path,
            _csv_lines(
                "alpha,final_nll,final_mmd2,sample_rate_hz,rate_band,runaway_frac",
                rows,
            ),
        )
        return table_path

    try:
        alpha, report = _mmd.select_alpha(data, spec, obs, grid, config)
    except NoQualifyingAlphaError as err:
        table_path = write_table(err.report)
        sel_path = out_dir / "selected.txt"
        atomic_write(sel_path, "selected_alpha = none\n")
        manifest.finalize([table_path, sel_path], status="error:no-qualifying-alpha")
        raise
    table_path = write_table(report)
    sel_path = out_dir / "selected.txt"
    atomic_write(
        sel_path,
        f"selected_alpha = {repr(alpha)}\n"
        f"data_rate_hz = {repr(report.data_rate_hz)}\n",
    )
    chosen = next(r for r in report.rows if r.alpha == alpha)
    params_path = out_dir / "params.txt"
    _glm.save_params(chosen.params, data.dt, obs, params_path)
    manifest.finalize([table_path, sel_path, params_path])
    print(f"alpha-scan: selected alpha = {alpha}")
    return EXIT_OK


def cmd_toy(args) -> int:
    """Self-contained demo: draw data from a known model, fit it back by
    maximum likelihood and by pure discrepancy minimization, and compare."""
    seed = args.seed
    obs = "bernoulli"
    dt, t_bins, n_trials = _syn.TOY_DT, _syn.TOY_T_BINS, _syn.TOY_N_TRIALS
    truth = _syn.toy_ground_truth()
    out_dir = _prepare_out(args.out)
    resolved = {("fit", "seed"): seed, ("fit", "max_iters"): args.iters}
    manifest = Manifest(out_dir, "toy", resolved, [], seed)

    train, _ = _glm.sample_free_running(
        truth, dt, obs, n_trials, t_bins, seed=seed, stream=0
    )
    n_h = truth.n_history
    mle_config = FitConfig(history_bins=n_h, max_iters=5000,
                           learning_rate=0.1, seed=seed)
    mle_params, mle_trace = _glm.fit_mle(train, obs, mle_config)

    spec = _kernels.resolve_spec(_kernels.KernelSpec("cumcount-gaussian"), train)
    mmd_config = FitConfig(
        history_bins=n_h, samples_per_step=200, learning_rate=0.06,
        max_iters=args.iters, seed=seed, tail_average=600, lr_decay=0.005,
    )
    mmd_params, mmd_trace = _mmd.fit_mmd(train, spec, obs, mmd_config)

    model_samples, _ = _glm.sample_free_running(
        mmd_params, dt, obs, n_trials, t_bins, seed=seed,
        stream=_mmd.EVAL_STREAM_BASE,
    )

    # terminal discrepancy vs the split-data null
    tail = mmd_trace.mmd2_tail(100)
    null_vals = _split_null_mmd2(train, spec, seed, n_splits=200)
    se = math.sqrt(null_vals.var() / null_vals.size + tail.var() / tail.size)
    gap = abs(float(tail.mean()) - float(null_vals.mean()))

    d_mle = float(np.linalg.norm(mle_params.to_vector() - truth.to_vector()))
    d_mmd = float(np.linalg.norm(mmd_params.to_vector() - truth.to_vector()))

    paths = {}
    for name, p in (("truth", truth), ("mle", mle_params), ("mmd", mmd_params)):
        path = out_dir / f"{name}_params.txt"
        _glm.save_params(p, dt, obs, path)
        paths[name] = path
    filters_path = out_dir / "filters.csv"
    rows = [f"bias,{repr(truth.bias)},{repr(mle_params.bias)},{repr(mmd_params.bias)}"]
    for i in range(n_h):
        rows.append(
            f"h{i + 1},{repr(float(truth.history[i]))},"
            f"{repr(float(mle_params.history[i]))},"
            f"{repr(float(mmd_params.history[i]))}"
        )
    atomic_write(filters_path, _csv_lines("name,true,mle,mmd", rows))
    mle_trace_path = out_dir / "mle_trace.ndjson"
    mmd_trace_path = out_dir / "mmd_trace.ndjson"
    mle_trace.to_ndjson(mle_trace_path)
    mmd_trace.to_ndjson(mmd_trace_path)
    train_path = out_dir / "train_data.txt"
    samples_path = out_dir / "model_samples.txt"
    save_trials(train, train_path)
    save_trials(model_samples, samples_path)
    summary_path = out_dir / "summary.txt"
    atomic_write(
        summary_path,
        "\n".join(
            [
                f"dist_truth_mle = {repr(d_mle)}",
                f"dist_truth_mmd = {repr(d_mmd)}",
                f"dist_ratio = {repr(d_mmd / d_mle)}",
                f"mmd2_terminal_mean = {repr(float(tail.mean()))}",
                f"mmd2_null_mean = {repr(float(null_vals.mean()))}",
                f"mmd2_null_std = {repr(float(null_vals.std()))}",
                f"se_combined = {repr(se)}",
                f"terminal_gap = {repr(gap)}",
                f"terminal_within_3se = {'true' if gap <= 3 * se else 'false'}",
                f"sigma = {repr(spec.sigma)}",
            ]
        )
        + "\n",
    )
    manifest.finalize(
        [
            *paths.values(), filters_path, mle_trace_path, mmd_trace_path,
            train_path, samples_path, summary_path,
        ]
    )
    print(
        f"toy: |mle-truth| = {d_mle:.4f}, |mmd-truth| = {d_mmd:.4f}, "
        f"terminal MMD2 gap {gap:.3g} (3 SE = {3 * se:.3g})"
    )
    return EXIT_OK


def _split_null_mmd2(train: TrialSet, spec, seed: int, n_splits: int) -> np.ndarray:
    """Unbiased estimates between disjoint random halves of the data."""
    g_full = _kernels.gram(spec, train, train)
    n = train.n_trials
    half = n // 2
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=int(seed), spawn_key=(2_000_000_000,))
    )
    vals = np.empty(n_splits)
    for k in range(n_splits):
        perm = rng.permutation(n)
        a, b = perm[:half], perm[half : 2 * half]
        vals[k] = _mmd.mmd2_unbiased(
            g_full[np.ix_(a, a)], g_full[np.ix_(b, b)], g_full[np.ix_(a, b)]
        ).value
    return vals


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spikemmd",
        description="Fit, sample, and evaluate autoregressive spike-train models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-mle", help="maximum-likelihood fit")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_fit_mle)

    p = sub.add_parser("fit-mmd", help="discrepancy or joint fit")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--kernel-config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--repeats", nargs="?", const=20, default=None, type=int,
                   help="replicate the fit across seeds (default 20)")
    add_config_flags(p)
    p.set_defaults(func=cmd_fit_mmd)

    p = sub.add_parser("sample", help="free-running sampling from a params file")
    p.add_argument("--params", required=True)
    p.add_argument("--n", required=True, type=int)
    p.add_argument("--t-bins", required=True, type=int)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1,
                   help="worker cap; results never depend on it")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("gof", help="goodness-of-fit report and plot series")
    p.add_argument("--params", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--valid", default=None)
    p.add_argument("--samples", default=None)
    p.add_argument("--n-samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--kernel-config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--isi-bins", type=int, default=50)
    p.add_argument("--smooth-bandwidth", dest="bandwidth", type=float, default=0.01,
                   help="smoothing std in seconds for the rate series")
    add_config_flags(p)
    p.set_defaults(func=cmd_gof)

    p = sub.add_parser("alpha-scan", help="scan the discrepancy weight grid")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--kernel-config", default=None)
    p.add_argument("--out", required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_alpha_scan)

    p = sub.add_parser("toy", help="self-contained synthetic recovery demo")
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=3000)
    p.add_argument("--threads", type=int, default=1,
                   help="worker cap; results never depend on it")
    p.set_defaults(func=cmd_toy)

    return parser


_EXIT_BY_ERROR = (
    (NoQualifyingAlphaError, EXIT_NO_ALPHA),
    (OptimizationError, EXIT_OPTIMIZATION),
    (GradientUndefinedError, EXIT_DOMAIN),
    (ContractError, EXIT_DOMAIN),
    (ShapeError, EXIT_DOMAIN),
    (DomainError, EXIT_DOMAIN),
    (ParseError, EXIT_USAGE),
    (ParameterError, EXIT_USAGE),
)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SpikeMmdError as err:
        for cls, code in _EXIT_BY_ERROR:
            if isinstance(err, cls):
                print(f"error: {err}", file=sys.stderr)
                return code
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DOMAIN
    except FileNotFoundError as err:
        print(f"error: file not found: {err.filename}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

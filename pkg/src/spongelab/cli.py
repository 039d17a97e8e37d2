"""Command line front end: ``spongelab <command> [options]``.

Every command resolves its configuration as built-in defaults, then the
JSON ``--config`` file, then explicit flags, and writes ``manifest.json``
next to its outputs. Exit codes: 0 success, 1 usage, 2 data/format,
3 numeric failure.
"""

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, analysis, attack, model as model_lib, probe, reports
from .errors import ConfigError, DataError, FormatError, SpongeError
from .tensorio import load_image, save_tensor

log = logging.getLogger("spongelab")

DEFAULTS = {
    "build": {
        "arch": "desknet", "seed": 0, "data": "synth:n=1000,seed=100", "calib_size": 200,
        "passes": 2, "momentum": 0.1, "pretrain_steps": 0, "pretrain_lr": 0.03, "calibrate": True,
    },
    "attack": {
        "strategy": "uniform", "n": 100, "seed": 0, "data": None, "mu": None,
        "mu_grid": [round(v, 2) for v in np.linspace(0.0, 1.0, 11)], "sigma": 2.0 / 255.0,
        "samples_per_mu": 10, "pool_size": 32, "iterations": 100, "mutation_std": 4.0 / 255.0,
        "elite_fraction": 0.25, "steps": 50, "history_size": 10, "step_length": 0.05,
        "timing_in_trace": False,
    },
    "analyze": {"what": "thresholds", "inputs": None, "first_n": None},
    "transfer": {"baseline_data": "synth:n=300,seed=777"},
    "study": {"data": "synth:n=300,seed=777", "window": 8, "stride": 4},
    "finetune": {
        "data": "synth:n=3000,seed=11", "max_uniformity": 0.1, "train_size": 300, "val_size": 100,
        "lr": 0.03, "steps": 600, "freeze_bn_stats": False, "window": 8, "stride": 4, "seed": 0,
        "repeats": 5,
    },
}


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- datasets -------------------------------------------------------------------


def parse_synth(spec):
    """``synth:n=300,seed=1`` -> keyword dict for :func:`analysis.synth_dataset`."""
    body = spec.split(":", 1)[1]
    kw = {}
    for part in filter(None, body.split(",")):
        key, _, value = part.partition("=")
        if key not in ("n", "seed"):
            raise UsageError(f"unknown synth option {key!r} (valid: n, seed)")
        try:
            kw[key] = int(value)
        except ValueError:
            raise UsageError(f"synth option {key} must be an integer, got {value!r}") from None
    return kw


def load_dataset(spec):
    """Load ``synth:...``, a directory of .ppm/.sptn files, or one image file.

    Returns a list of ``(name, image, label)``; label is None unless the
    directory carries a ``labels.csv`` (``filename,label``).
    """
    if spec is None:
        raise UsageError("a dataset is required (synth:n=...,seed=... or a path)")
    if spec.startswith("synth:"):
        data = analysis.synth_dataset(**parse_synth(spec))
        return [(f"synth{i:05d}", img, y) for i, (img, y) in enumerate(data)]
    path = Path(spec)
    if not path.exists():
        raise DataError(f"dataset path not found: {path}")
    files = [path] if path.is_file() else sorted(
        p for p in path.iterdir() if p.suffix in (".ppm", ".sptn")
    )
    if not files:
        raise DataError(f"no .ppm or .sptn images under {path}")
    labels = {}
    if path.is_dir() and (path / "labels.csv").exists():
        for line in (path / "labels.csv").read_text().splitlines():
            if line.strip() and not line.startswith("filename"):
                name, _, lab = line.partition(",")
                labels[name.strip()] = int(lab)
    return [(f.name, load_image(f), labels.get(f.name)) for f in files]


def load_sponge_bundle(path):
    """Images from a sponge bundle directory (its ``sponges.json`` index)."""
    path = Path(path)
    index = path / "sponges.json" if path.is_dir() else path
    if not index.exists():
        raise DataError(f"no sponges.json in {path}")
    meta = json.loads(index.read_text())
    return [(e["name"], load_image(index.parent / e["image"])) for e in meta["samples"]]


def _file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out, command, config, models=(), extra=None):
    files = sorted(
        p for p in out.rglob("*") if p.is_file() and p.name not in ("manifest.json", "timing.json")
    )
    manifest = {
        "command": command,
        "config": config,
        "versions": {
            "spongelab": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "models": {str(p): _file_digest(p) for p in models},
        "outputs": {str(p.relative_to(out)): _file_digest(p) for p in files},
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _map(cfg, fn, items):
    workers = int(cfg.get("threads") or 1)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _load_model(path):
    if path is None:
        raise UsageError("--model is required")
    if not Path(path).exists():
        raise DataError(f"model file not found: {path}")
    return model_lib.load(path)


# -- commands -------------------------------------------------------------------


def cmd_build(cfg, out):
    arch_name = cfg["arch"]
    if arch_name in model_lib.PRESETS:
        arch = model_lib.PRESETS[arch_name](int(cfg["seed"]))
    else:
        arch_path = Path(arch_name)
        if not arch_path.exists():
            raise UsageError(f"unknown arch {arch_name!r} (presets: {sorted(model_lib.PRESETS)})")
        try:
            raw = json.loads(arch_path.read_text())
        except ValueError as exc:
            raise FormatError(f"invalid JSON ({exc.msg})", str(arch_path), exc.pos) from None
        raw.setdefault("seed", int(cfg["seed"]))
        arch = model_lib.ArchSpec.from_dict(raw)
    data = load_dataset(cfg["data"])
    m = model_lib.build(arch)
    if not cfg["calibrate"]:
        if int(cfg["pretrain_steps"]) > 0:
            raise UsageError("--no-calibrate cannot be combined with --pretrain-steps")
        model_lib.save(m, out / "model.spmd")
        return [], {}
    m = model_lib.calibrate(m, [img for _, img, _ in data[: int(cfg["calib_size"])]],
                            float(cfg["momentum"]), int(cfg["passes"]))
    if int(cfg["pretrain_steps"]) > 0:
        labelled = [(img, y) for _, img, y in data if y is not None]
        if not labelled:
            raise DataError("pretraining needs labelled data")
        m = model_lib.fine_tune(m, labelled, float(cfg["pretrain_lr"]), int(cfg["pretrain_steps"]),
                                seed=int(cfg["seed"]))
    model_lib.save(m, out / "model.spmd")
    return [], {}


def _bundle(out, results, cfg):
    samples, timing = [], {}
    for i, r in enumerate(results):
        name = f"sponge{i:04d}"
        save_tensor(out / "images" / f"{name}.sptn", r.image)
        entry = {"name": name, "image": f"images/{name}.sptn", "density": r.density,
                 "strategy": r.strategy, "seed": r.seed, "meta": r.meta}
        if r.trace:
            cols = reports_trace_columns(cfg)
            rows = [row if cfg["timing_in_trace"] else row[:3] for row in r.trace]
            reports.write_csv(out / f"{name}_trace.csv", cols, rows)
            entry["trace"] = f"{name}_trace.csv"
        samples.append(entry)
        timing[name] = r.wall_time
    index = {"strategy": cfg["strategy"], "n": len(results), "samples": samples,
             "mean_density": float(np.mean([r.density for r in results]))}
    (out / "sponges.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return timing


def reports_trace_columns(cfg):
    return attack.TRACE_COLUMNS if cfg["timing_in_trace"] else attack.TRACE_COLUMNS[:3]


def cmd_attack(cfg, out):
    m = _load_model(cfg["model"])
    strategy, n, seed = cfg["strategy"], int(cfg["n"]), int(cfg["seed"])
    (out / "images").mkdir(parents=True, exist_ok=True)
    extra = {}
    t0 = time.perf_counter()
    if strategy == "uniform":
        mu = cfg["mu"]
        if mu is None:
            mu, table = attack.grid_search_mu(m, cfg["mu_grid"], float(cfg["sigma"]),
                                              int(cfg["samples_per_mu"]), seed)
            reports.write_csv(out / "grid_search.csv", ("mu", "mean_density"), table,
                              {"sigma": cfg["sigma"], "seed": seed})
            extra["best_mu"] = mu
        t_gen = time.perf_counter()
        images = attack.uniform_sampling(float(mu), float(cfg["sigma"]), m.arch.input_shape, n, seed)
        per_sample = (time.perf_counter() - t_gen) / n
        dens = _map(cfg, lambda x: attack.query_density(m, x), images)
        results = [attack.SpongeResult(x, d, per_sample, "uniform", seed, meta={"mu": float(mu)})
                   for x, d in zip(images, dens)]
    elif strategy == "top-natural":
        data = load_dataset(cfg["data"])
        results = attack.top_natural(m, [img for _, img, _ in data], n)
        for r in results:
            r.meta["source"] = data[r.meta["dataset_index"]][0]
    elif strategy == "ga":
        def run_ga(i):
            ga = attack.GaConfig(int(cfg["pool_size"]), int(cfg["iterations"]),
                                 float(cfg["mutation_std"]), float(cfg["elite_fraction"]), seed + i)
            return attack.sponge_ga(m, ga)
        results = _map(cfg, run_ga, range(n))
    elif strategy == "lbfgs":
        def run_lbfgs(i):
            lb = attack.LbfgsConfig(int(cfg["steps"]), int(cfg["history_size"]),
                                    float(cfg["step_length"]), seed + i)
            return attack.sponge_lbfgs(m, lb)
        results = _map(cfg, run_lbfgs, range(n))
    else:
        raise UsageError(f"unknown strategy {strategy!r} (valid: uniform, top-natural, ga, lbfgs)")
    timing = _bundle(out, results, cfg)
    timing = {"total_s": time.perf_counter() - t0, "per_sample_mean_s": float(np.mean(list(timing.values()))),
              "samples": timing}
    return [cfg["model"]], {"timing": timing, **extra}


def _records(m, images, cfg):
    return _map(cfg, lambda x: model_lib.forward(m, x, probe=True)[1], images)


def _analysis_inputs(cfg):
    spec = cfg["inputs"]
    if spec is None:
        raise UsageError("--inputs is required for this analysis")
    if not spec.startswith("synth:") and Path(spec).is_dir() and (Path(spec) / "sponges.json").exists():
        return load_sponge_bundle(spec)
    return [(name, img) for name, img, _ in load_dataset(spec)]


def cmd_analyze(cfg, out):
    m = _load_model(cfg["model"])
    what = cfg["what"]
    if what == "thresholds":
        table = probe.threshold_table(m, cfg["first_n"])
        reports.write_csv(out / "thresholds.csv", reports.THRESHOLD_COLUMNS, table.rows(),
                          {"model": m.digest()})
        return [cfg["model"]], {}
    if not m.calibrated:
        raise DataError(f"{what} analysis needs a calibrated model")
    inputs = _analysis_inputs(cfg)
    names = [name for name, _ in inputs]
    records = _records(m, [img for _, img in inputs], cfg)
    header = {"model": m.digest(), "inputs": cfg["inputs"]}
    if what == "gains":
        reports.write_csv(out / "gains.csv", reports.GAIN_COLUMNS, reports.gain_rows(records), header)
    elif what == "channel-stats":
        reports.write_csv(out / "channel_stats.csv", reports.CHANNEL_STAT_COLUMNS,
                          reports.channel_stat_rows(names, records), header)
    elif what == "density":
        reports.write_csv(out / "density.csv", reports.DENSITY_COLUMNS,
                          reports.density_rows(names, records, m), header)
    else:
        raise UsageError(f"unknown analysis {what!r} (valid: thresholds, gains, channel-stats, density)")
    return [cfg["model"]], {}


def cmd_transfer(cfg, out):
    models = [_load_model(p) for p in cfg["models"]]
    bundles = [[img for _, img in load_sponge_bundle(b)] for b in cfg["bundles"]]
    baseline_imgs = [img for _, img, _ in load_dataset(cfg["baseline_data"])]
    baselines = [float(np.mean(_map(cfg, lambda x, m=m: attack.query_density(m, x), baseline_imgs)))
                 for m in models]
    # paths as given: every build writes model.spmd, so basenames would collide
    names = [str(p) for p in cfg["models"]]
    tm = analysis.transfer_matrix(models, bundles, baselines, names)
    rows = [(str(b), names[t], float(tm.values[s, t]))
            for s, b in enumerate(cfg["bundles"]) for t in range(len(models))]
    reports.write_csv(out / "transfer.csv", ("source_bundle", "target_model", "percent_increase"),
                      rows, {"baselines": dict(zip(names, baselines)),
                             "models": {n: m.digest() for n, m in zip(names, models)}})
    return cfg["models"], {}


def cmd_study(cfg, out):
    m = _load_model(cfg["model"])
    data = load_dataset(cfg["data"])
    ucfg = analysis.UniformityConfig(int(cfg["window"]), int(cfg["stride"]))
    res = analysis.density_uniformity_study(m, [img for _, img, _ in data], ucfg)
    rows = [(name, u, d) for (name, _, _), (u, d) in zip(data, res.pairs())]
    reports.write_csv(out / "study.csv", ("image", "uniformity", "density"), rows,
                      {"window": ucfg.window, "stride": ucfg.stride, "kendall_tau": res.tau,
                       "data": cfg["data"], "model": m.digest()})
    return [cfg["model"]], {"kendall_tau": res.tau}


def _sparsity(m, images):
    return 1.0 - float(np.mean([attack.query_density(m, x) for x in images]))


def cmd_finetune(cfg, out):
    """Fine-tune on the low-uniformity split; report held-out uniform-split sparsity.

    Each of ``repeats`` rounds draws a fresh uniform train/validation split
    and a same-size random unfiltered training split (seeded ``seed + r``),
    then fine-tunes on both with the configured ``freeze_bn_stats`` and with
    the other setting. Reported changes are means over rounds; the per-round
    values are kept alongside. The saved model is round 0's uniform-split
    fine-tune at the configured setting.
    """
    m = _load_model(cfg["model"])
    data = [(img, y) for _, img, y in load_dataset(cfg["data"])]
    if any(y is None for _, y in data):
        raise DataError("fine-tuning needs labelled data")
    ucfg = analysis.UniformityConfig(int(cfg["window"]), int(cfg["stride"]))
    u = np.array([analysis.uniformity(img, ucfg) for img, _ in data])
    uniform_idx = np.flatnonzero(u < float(cfg["max_uniformity"]))
    n_train, n_val = int(cfg["train_size"]), int(cfg["val_size"])
    if len(uniform_idx) < n_train + n_val:
        raise DataError(f"only {len(uniform_idx)} images pass uniformity<{cfg['max_uniformity']}, "
                        f"need {n_train + n_val}")
    lr, steps, seed = float(cfg["lr"]), int(cfg["steps"]), int(cfg["seed"])
    freeze_cfg = bool(cfg["freeze_bn_stats"])
    runs = {f"{split}_freeze{int(f)}": {"split": split, "freeze_bn_stats": f, "changes": [],
                                        "after_sparsity": []}
            for f in (freeze_cfg, not freeze_cfg) for split in ("uniform", "random")}
    befores, tuned = [], None
    for r in range(int(cfg["repeats"])):
        rng = np.random.default_rng(seed + r)
        order = rng.permutation(uniform_idx)
        val_idx = order[n_train : n_train + n_val]
        train_u = [data[i] for i in order[:n_train]]
        rest = np.setdiff1d(np.arange(len(data)), val_idx)
        train_r = [data[i] for i in rng.choice(rest, n_train, replace=False)]
        val = [data[i][0] for i in val_idx]
        before = _sparsity(m, val)
        befores.append(before)
        for run in runs.values():
            train = train_u if run["split"] == "uniform" else train_r
            ft = model_lib.fine_tune(m, train, lr, steps, freeze_bn_stats=run["freeze_bn_stats"],
                                     seed=seed + r)
            after = _sparsity(ft, val)
            run["after_sparsity"].append(after)
            run["changes"].append(after - before)
            if tuned is None:
                tuned = ft
    for run in runs.values():
        run["change"] = float(np.mean(run["changes"]))
    primary = runs[f"uniform_freeze{int(freeze_cfg)}"]
    sanity = runs[f"random_freeze{int(freeze_cfg)}"]
    report = {
        "max_uniformity": float(cfg["max_uniformity"]), "train_size": n_train, "val_size": n_val,
        "repeats": int(cfg["repeats"]), "before_sparsity": float(np.mean(befores)),
        "before_sparsity_per_repeat": befores, "runs": runs,
        "sparsity_change": primary["change"], "random_split_change": sanity["change"],
    }
    model_lib.save(tuned, out / "model.spmd")
    (out / "finetune_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return [cfg["model"]], {}


COMMANDS = {
    "build": cmd_build, "attack": cmd_attack, "analyze": cmd_analyze,
    "transfer": cmd_transfer, "study": cmd_study, "finetune": cmd_finetune,
}


def make_parser():
    p = _Parser(prog="spongelab", description="Sponge-example attacks and analyses on small CNNs.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, model=True):
        sp.add_argument("--config", help="JSON file of option values (flags override it)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--threads", type=int, help="per-image worker count (results do not depend on it)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if model:
            sp.add_argument("--model", help="model file (.spmd)")

    b = sub.add_parser("build", help="build and calibrate a model")
    common(b, model=False)
    b.add_argument("--arch", help="preset name or architecture JSON file")
    b.add_argument("--seed", type=int)
    b.add_argument("--data", help="calibration data: synth:n=N,seed=S or a path")
    b.add_argument("--calib-size", type=int)
    b.add_argument("--passes", type=int)
    b.add_argument("--momentum", type=float)
    b.add_argument("--pretrain-steps", type=int, help="SGD steps on labelled data after calibration")
    b.add_argument("--pretrain-lr", type=float)
    b.add_argument("--no-calibrate", dest="calibrate", action="store_const", const=False,
                   help="save the freshly initialised model with default BN statistics")

    a = sub.add_parser("attack", help="generate sponge examples")
    common(a)
    a.add_argument("--strategy", choices=["uniform", "top-natural", "ga", "lbfgs"])
    a.add_argument("--n", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--data", help="natural image pool for top-natural")
    a.add_argument("--mu", type=float, help="skip the grid search and use this mean")
    a.add_argument("--mu-grid", type=float, nargs="+")
    a.add_argument("--sigma", type=float)
    a.add_argument("--samples-per-mu", type=int)
    a.add_argument("--pool-size", type=int)
    a.add_argument("--iterations", type=int)
    a.add_argument("--mutation-std", type=float)
    a.add_argument("--elite-fraction", type=float)
    a.add_argument("--steps", type=int)
    a.add_argument("--history-size", type=int)
    a.add_argument("--step-length", type=float)
    a.add_argument("--timing-in-trace", action="store_const", const=True,
                   help="include elapsed_s in trace CSVs (makes them run-dependent)")

    z = sub.add_parser("analyze", help="thresholds, gains, channel statistics or densities")
    common(z)
    z.add_argument("--what", choices=["thresholds", "gains", "channel-stats", "density"])
    z.add_argument("--inputs", help="synth spec, image directory/file, or sponge bundle")
    z.add_argument("--first-n", type=int, help="only the first N BN sites (thresholds)")

    t = sub.add_parser("transfer", help="cross-model transfer matrix")
    common(t, model=False)
    t.add_argument("--models", nargs="+", required=True)
    t.add_argument("--bundles", nargs="+", required=True)
    t.add_argument("--baseline-data")

    s = sub.add_parser("study", help="density vs uniformity study")
    common(s)
    s.add_argument("--data")
    s.add_argument("--window", type=int)
    s.add_argument("--stride", type=int)

    f = sub.add_parser("finetune", help="fine-tune on uniform images and report sparsity")
    common(f)
    f.add_argument("--data")
    f.add_argument("--max-uniformity", type=float)
    f.add_argument("--train-size", type=int)
    f.add_argument("--val-size", type=int)
    f.add_argument("--lr", type=float)
    f.add_argument("--steps", type=int)
    f.add_argument("--freeze-bn-stats", action="store_const", const=True)
    f.add_argument("--seed", type=int)
    f.add_argument("--repeats", type=int, help="independent split/fine-tune rounds to average")
    return p


_RANGES = {
    "n": (1, None), "threads": (1, None), "passes": (1, None), "calib_size": (1, None),
    "samples_per_mu": (1, None), "pool_size": (2, None), "iterations": (0, None), "steps": (0, None),
    "history_size": (1, None), "window": (1, None), "stride": (1, None), "train_size": (1, None),
    "val_size": (1, None), "pretrain_steps": (0, None), "repeats": (1, None),
}


def resolve_config(args):
    cfg = dict(DEFAULTS[args.command])
    cfg["threads"] = 1
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except ValueError as exc:
            raise FormatError(f"invalid JSON ({exc.msg})", str(path), getattr(exc, "pos", None)) from None
        unknown = set(loaded) - set(cfg) - {"model", "models", "bundles"}
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}; valid: {sorted(cfg)}")
        cfg.update(loaded)
    for key, value in vars(args).items():
        if key in ("command", "config", "out", "verbose"):
            continue
        if value is not None:
            cfg[key] = value
    for key, (lo, hi) in _RANGES.items():
        if key in cfg and cfg[key] is not None:
            v = cfg[key]
            if not isinstance(v, int) or v < lo or (hi is not None and v > hi):
                raise UsageError(f"{key.replace('_', '-')} must be an integer >= {lo}, got {v!r}")
    return cfg


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = make_parser().parse_args(argv)
        if args.verbose:
            log.setLevel(logging.INFO)
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=1):
            models, extra = COMMANDS[args.command](cfg, out)
        timing = extra.pop("timing", None)
        if timing is not None:
            (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
        cfg_out = {k: v for k, v in cfg.items() if k != "threads"}
        write_manifest(out, args.command, cfg_out, [m for m in models if m], extra or None)
        log.info("wrote %s", out)
        return 0
    except UsageError as exc:
        print(f"spongelab: usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except SpongeError as exc:
        print(f"spongelab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"spongelab: {exc}", file=sys.stderr)
        return 2


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()

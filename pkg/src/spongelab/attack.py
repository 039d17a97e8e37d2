"""Sponge-example generation: uniform sampling, top natural images, GA and projected L-BFGS."""

import csv
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine
from .errors import ConfigError, DataError, NumericError
from .model import Model, _check_input
from .tensorio import load_tensor, save_tensor
from .validation import check_positive, check_random_state

DEFAULT_SIGMA = 2.0 / 255.0


def query_density(m, image):
    """Post-ReLU density of one forward pass of ``m`` on ``image``."""
    values = engine.run(m.program, _check_input(m, image))
    nz = tot = 0
    for site in m.sites_of("relu"):
        y = values[site.output_register]
        nz += int(np.count_nonzero(y))
        tot += y.size
    return nz / tot


class DensityOracle:
    """Query-only handle on a model: image in, density out.

    This is the only view of the target that the zero-knowledge strategies
    receive; it exposes no weights, gradients or thresholds.
    """

    def __init__(self, model):
        self._model = model
        self.input_shape = tuple(model.arch.input_shape)
        self.queries = 0

    def __call__(self, image):
        self.queries += 1
        return query_density(self._model, image)


def _as_oracle(target):
    if isinstance(target, Model):
        return DensityOracle(target)
    if callable(target) and hasattr(target, "input_shape"):
        return target
    raise ConfigError("target must be a Model or a callable oracle with an input_shape")


def _evaluate(oracle, images, workers=1):
    if workers > 1 and len(images) > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(oracle, images))
    return [oracle(img) for img in images]


@dataclass
class SpongeResult:
    image: np.ndarray
    density: float
    wall_time: float
    strategy: str
    seed: object = None
    trace: list = field(default_factory=list)  # rows of (iteration, objective, density, elapsed_s)
    meta: dict = field(default_factory=dict)


TRACE_COLUMNS = ("iteration", "objective", "density", "elapsed_s")


def save_result(result, directory, name):
    """Write ``name.json`` (metadata), ``images/name.sptn`` and ``name_trace.csv``."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    save_tensor(directory / "images" / f"{name}.sptn", result.image)
    meta = {
        "strategy": result.strategy,
        "seed": result.seed,
        "density": result.density,
        "wall_time": result.wall_time,
        "image": f"images/{name}.sptn",
        "trace": f"{name}_trace.csv",
        "meta": result.meta,
    }
    (directory / f"{name}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for row in result.trace:
        w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    (directory / f"{name}_trace.csv").write_text(buf.getvalue())


def load_result(path):
    path = Path(path)
    meta = json.loads(path.read_text())
    image = load_tensor(path.parent / meta["image"])
    trace = []
    trace_path = path.parent / meta["trace"]
    if trace_path.exists():
        with open(trace_path, newline="") as fh:
            for row in csv.DictReader(fh):
                trace.append((int(row["iteration"]), float(row["objective"]),
                              float(row["density"]), float(row["elapsed_s"])))
    return SpongeResult(image, meta["density"], meta["wall_time"], meta["strategy"],
                        meta.get("seed"), trace, meta.get("meta", {}))


# -- uniform sampling -----------------------------------------------------------


def uniform_sampling(mu, sigma=DEFAULT_SIGMA, shape=(3, 32, 32), n=1, seed=0):
    """``n`` images with i.i.d. N(mu, sigma^2) pixels clipped to [0, 1]."""
    if not np.isfinite(sigma) or sigma <= 0:
        raise ConfigError(f"sigma must be > 0 (sigma = 0 yields one repeated image), got {sigma}")
    if not np.isfinite(mu):
        raise ConfigError(f"mu must be finite, got {mu}")
    check_positive(n, "n", integer=True)
    rng = check_random_state(seed)
    return [np.clip(mu + sigma * rng.standard_normal(shape), 0.0, 1.0) for _ in range(n)]


def grid_search_mu(target, mu_grid, sigma=DEFAULT_SIGMA, samples_per_mu=10, seed=0, workers=1):
    """Pick the mean that maximises average density of uniform samples.

    Returns ``(best_mu, table)`` with ``table`` a list of ``(mu, mean_density)``.
    Only density queries reach the target.
    """
    grid = [float(v) for v in mu_grid]
    if not grid:
        raise ConfigError("mu_grid must not be empty")
    check_positive(samples_per_mu, "samples_per_mu", integer=True)
    oracle = _as_oracle(target)
    rng = check_random_state(seed)
    table = []
    for mu in grid:
        imgs = uniform_sampling(mu, sigma, oracle.input_shape, samples_per_mu, rng)
        table.append((mu, float(np.mean(_evaluate(oracle, imgs, workers)))))
    best = max(range(len(table)), key=lambda i: (table[i][1], -i))
    return table[best][0], table


# -- top natural images -------------------------------------------------------------


def top_natural(target, dataset, n):
    """The ``n`` densest dataset images, densest first (ties keep dataset order)."""
    images = [item[0] if isinstance(item, tuple) else item for item in dataset]
    check_positive(n, "n", integer=True)
    if n > len(images):
        raise DataError(f"asked for {n} images from a dataset of {len(images)}")
    oracle = _as_oracle(target)
    t0 = time.perf_counter()
    scores = [oracle(img) for img in images]
    elapsed = time.perf_counter() - t0
    order = sorted(range(len(images)), key=lambda i: -scores[i])[:n]
    return [
        SpongeResult(np.array(images[i]), scores[i], elapsed / n, "top-natural",
                     meta={"dataset_index": i, "rank": rank})
        for rank, i in enumerate(order)
    ]


# -- genetic algorithm ------------------------------------------------------------


@dataclass(frozen=True)
class GaConfig:
    pool_size: int = 32
    iterations: int = 100
    mutation_std: float = 4.0 / 255.0
    elite_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if int(self.pool_size) < 2:
            raise ConfigError(f"pool_size must be >= 2, got {self.pool_size}")
        if int(self.iterations) < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if not 0 < self.elite_fraction < 1:
            raise ConfigError(f"elite_fraction must lie in (0, 1), got {self.elite_fraction}")
        if not self.mutation_std > 0:
            raise ConfigError(f"mutation_std must be > 0, got {self.mutation_std}")


def sponge_ga(target, cfg=GaConfig(), workers=1):
    """Evolve a U(0,1) pool towards high post-ReLU density.

    Each generation keeps the elite, then refills the pool with children made
    by uniform-mask crossover of two random elite parents plus Gaussian
    noise, clipped to [0, 1]. Fitness is queried density only.
    """
    oracle = _as_oracle(target)
    rng = np.random.default_rng(cfg.seed)
    shape = oracle.input_shape
    t0 = time.perf_counter()
    pool = [rng.random(shape) for _ in range(cfg.pool_size)]
    fitness = _evaluate(oracle, pool, workers)
    n_elite = min(cfg.pool_size - 1, max(1, int(round(cfg.elite_fraction * cfg.pool_size))))
    best_i = int(np.argmax(fitness))
    best_img, best_fit = pool[best_i], fitness[best_i]
    trace = [(0, -best_fit, best_fit, time.perf_counter() - t0)]
    for gen in range(1, cfg.iterations + 1):
        order = sorted(range(len(pool)), key=lambda i: -fitness[i])[:n_elite]
        elite = [pool[i] for i in order]
        elite_fit = [fitness[i] for i in order]
        children = []
        for _ in range(cfg.pool_size - n_elite):
            a, b = rng.integers(n_elite, size=2)
            mask = rng.random(shape) < 0.5
            child = np.where(mask, elite[a], elite[b]) + cfg.mutation_std * rng.standard_normal(shape)
            children.append(np.clip(child, 0.0, 1.0))
        child_fit = _evaluate(oracle, children, workers)
        pool, fitness = elite + children, elite_fit + child_fit
        i = int(np.argmax(fitness))
        if fitness[i] > best_fit:
            best_img, best_fit = pool[i], fitness[i]
        trace.append((gen, -best_fit, best_fit, time.perf_counter() - t0))
    return SpongeResult(best_img, best_fit, time.perf_counter() - t0, "ga", cfg.seed, trace,
                        {"queries": getattr(oracle, "queries", None)})


# -- projected L-BFGS on the activation-norm objective -------------------------------


def sponge_objective(m, image):
    """Negative sum of L2 norms of every post-ReLU map, and its image gradient."""
    out, tape = engine.forward_taped(m.program, _check_input(m, image))
    seeds = {}
    total = 0.0
    for site in m.sites_of("relu"):
        a = tape.values[site.output_register]
        norm = float(np.sqrt(np.sum(a * a)))
        total += norm
        seeds[site.output_register] = -a / norm if norm > 0 else np.zeros(a.shape)
    return -total, engine.backward(tape, seeds)


@dataclass(frozen=True)
class LbfgsConfig:
    steps: int = 50
    history_size: int = 10
    step_length: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if int(self.steps) < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if int(self.history_size) < 1:
            raise ConfigError(f"history_size must be >= 1, got {self.history_size}")
        if not self.step_length > 0:
            raise ConfigError(f"step_length must be > 0, got {self.step_length}")


def _two_loop(g, s_hist, y_hist):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / np.dot(y, s)
        a = rho * np.dot(s, q)
        alphas.append((rho, a))
        q -= a * y
    if s_hist:
        q *= np.dot(s_hist[-1], y_hist[-1]) / np.dot(y_hist[-1], y_hist[-1])
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return -q


def sponge_lbfgs(m, cfg=LbfgsConfig(), armijo=1e-4, max_backtracks=20):
    """Box-projected L-BFGS descent on :func:`sponge_objective` from a U(0,1) start.

    Coordinates pinned at a bound with the gradient pointing outward are
    frozen for the step; whenever the projection clips an iterate the
    curvature history is discarded. The returned image is the visited
    iterate with the highest density.
    """
    rng = np.random.default_rng(cfg.seed)
    shape = tuple(m.arch.input_shape)
    t0 = time.perf_counter()
    x = rng.random(shape).ravel()

    def evaluate(v):
        f, g = sponge_objective(m, v.reshape(shape))
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            raise NumericError("non-finite objective or gradient", iterate=v.reshape(shape).copy())
        return f, g.ravel()

    f, g = evaluate(x)
    dens = query_density(m, x.reshape(shape))
    best_img, best_dens = x.copy(), dens
    trace = [(0, f, dens, time.perf_counter() - t0)]
    s_hist, y_hist = [], []
    for it in range(1, cfg.steps + 1):
        free = ~(((x <= 0.0) & (g > 0)) | ((x >= 1.0) & (g < 0)))
        gf = np.where(free, g, 0.0)
        if not np.any(gf):
            break  # stationary on the feasible set, e.g. every unit dead
        d = np.where(free, _two_loop(gf, s_hist, y_hist), 0.0)
        if np.dot(d, gf) >= 0:
            s_hist, y_hist = [], []
            d = -gf
        if not s_hist:
            d = d * (cfg.step_length / np.max(np.abs(d)))
        t = 1.0
        for _ in range(max_backtracks):
            raw = x + t * d
            x_new = np.clip(raw, 0.0, 1.0)
            f_new, g_new = evaluate(x_new)
            if f_new <= f + armijo * np.dot(g, x_new - x):
                break
            t *= 0.5
        else:
            break  # no sufficient decrease along this direction
        clipped = bool(np.any(raw != x_new))
        s, y = x_new - x, g_new - g
        if clipped:
            s_hist, y_hist = [], []
        elif np.dot(s, y) > 1e-12 * np.dot(y, y):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > cfg.history_size:
                s_hist.pop(0)
                y_hist.pop(0)
        x, f, g = x_new, f_new, g_new
        dens = query_density(m, x.reshape(shape))
        if dens > best_dens:
            best_img, best_dens = x.copy(), dens
        trace.append((it, f, dens, time.perf_counter() - t0))
    return SpongeResult(best_img.reshape(shape), best_dens, time.perf_counter() - t0, "lbfgs",
                        cfg.seed, trace)

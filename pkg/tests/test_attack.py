import numpy as np
import pytest

from spongelab import analysis, attack, model as M, probe
from spongelab.attack import GaConfig, LbfgsConfig
from spongelab.errors import ConfigError, DataError, ShapeError

from .conftest import with_bn
from .oracles import central_diff, rel_err


class FakeOracle:
    """Density stand-in with no model behind it: rewards pixels near 0.3."""

    input_shape = (3, 8, 8)

    def __init__(self):
        self.queries = 0

    def __call__(self, image):
        self.queries += 1
        return float(1 - np.mean(np.abs(image - 0.3)))


# -- uniform sampling ------------------------------------------------------------------


def test_uniform_sampling_examples():
    imgs = attack.uniform_sampling(0.1, 2 / 255, (3, 32, 32), 5, seed=0)
    assert len(imgs) == 5 and all(i.shape == (3, 32, 32) for i in imgs)
    imgs = np.stack(attack.uniform_sampling(0.5, 2 / 255, (3, 32, 32), 100, seed=1))
    assert abs(imgs.mean() - 0.5) < 0.01
    assert 0 < imgs.min() and imgs.max() < 1
    zero = np.stack(attack.uniform_sampling(0.0, 2 / 255, (3, 32, 32), 20, seed=2))
    assert abs(np.mean(zero == 0.0) - 0.5) < 0.02
    a = attack.uniform_sampling(0.3, n=3, seed=9)
    b = attack.uniform_sampling(0.3, n=3, seed=9)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


@pytest.mark.parametrize("sigma", [0.0, -0.1, float("nan")])
def test_uniform_sampling_rejects_sigma(sigma):
    with pytest.raises(ConfigError):
        attack.uniform_sampling(0.5, sigma)


def test_grid_search(tiny_model):
    best, table = attack.grid_search_mu(tiny_model, [0.4], samples_per_mu=2)
    assert best == 0.4 and len(table) == 1
    grid = [0.0, 0.25, 0.5, 0.75, 1.0]
    best, table = attack.grid_search_mu(tiny_model, grid, samples_per_mu=3, seed=5)
    assert [mu for mu, _ in table] == grid
    assert best == max(table, key=lambda r: r[1])[0]
    assert attack.grid_search_mu(tiny_model, grid, samples_per_mu=3, seed=5) == (best, table)
    assert attack.grid_search_mu(tiny_model, grid, samples_per_mu=3, seed=5, workers=3) == (best, table)
    with pytest.raises(ConfigError):
        attack.grid_search_mu(tiny_model, [])


def test_zero_knowledge_strategies_run_on_bare_oracle():
    o = FakeOracle()
    best, _ = attack.grid_search_mu(o, [0.1, 0.3, 0.9], samples_per_mu=2)
    assert best == 0.3
    res = attack.sponge_ga(o, GaConfig(pool_size=8, iterations=5))
    assert o.queries == 6 + 8 + 5 * 6
    assert res.image.shape == (3, 8, 8)


# -- top natural ------------------------------------------------------------------------


def test_top_natural(tiny_model):
    data = analysis.synth_dataset(12, shape=(3, 8, 8), seed=4)
    scores = [attack.query_density(tiny_model, x) for x, _ in data]
    full = attack.top_natural(tiny_model, data, 12)
    oracle_order = sorted(range(12), key=lambda i: -scores[i])
    assert [r.meta["dataset_index"] for r in full] == oracle_order
    assert [r.density for r in full] == sorted(scores, reverse=True)
    one = attack.top_natural(tiny_model, data, 1)
    assert one[0].density == max(scores)
    assert np.array_equal(one[0].image, data[int(np.argmax(scores))][0])
    with pytest.raises(DataError):
        attack.top_natural(tiny_model, data, 13)


# -- GA --------------------------------------------------------------------------------


def test_ga_zero_iterations_is_best_of_pool(tiny_model):
    cfg = GaConfig(pool_size=6, iterations=0, seed=3)
    res = attack.sponge_ga(tiny_model, cfg)
    rng = np.random.default_rng(3)
    pool = [rng.random((3, 8, 8)) for _ in range(6)]
    dens = [attack.query_density(tiny_model, x) for x in pool]
    assert res.density == max(dens)
    assert np.array_equal(res.image, pool[int(np.argmax(dens))])
    assert len(res.trace) == 1


def test_ga_trace_non_decreasing_and_valid(tiny_model):
    res = attack.sponge_ga(tiny_model, GaConfig(pool_size=10, iterations=15, seed=1))
    fit = [row[2] for row in res.trace]
    assert all(b >= a for a, b in zip(fit, fit[1:]))
    assert fit[-1] == res.density == attack.query_density(tiny_model, res.image)
    assert 0 <= res.image.min() and res.image.max() <= 1
    again = attack.sponge_ga(tiny_model, GaConfig(pool_size=10, iterations=15, seed=1), workers=2)
    assert np.array_equal(again.image, res.image)


@pytest.mark.parametrize("kw", [dict(pool_size=1), dict(iterations=-1), dict(elite_fraction=1.0),
                                dict(mutation_std=0.0)])
def test_ga_config_validation(kw):
    with pytest.raises(ConfigError):
        GaConfig(**kw)


def test_ga_improves_on_desknet(reference):
    res = attack.sponge_ga(reference, GaConfig(seed=0))
    assert res.trace[-1][2] - res.trace[0][2] > 0


# -- L-BFGS ------------------------------------------------------------------------------


def test_objective_gradient_matches_fd(tiny_model, rng):
    x = rng.uniform(0.2, 0.8, size=(3, 8, 8))
    f, g = attack.sponge_objective(tiny_model, x)
    fd = central_diff(lambda v: attack.sponge_objective(tiny_model, v)[0], x.copy())
    err = rel_err(g, fd)
    assert np.mean(err < 1e-6) >= 0.95
    assert f < 0


def test_lbfgs_zero_steps_returns_scored_init(tiny_model):
    res = attack.sponge_lbfgs(tiny_model, LbfgsConfig(steps=0, seed=2))
    init = np.random.default_rng(2).random((3, 8, 8))
    assert np.array_equal(res.image, init)
    assert res.density == attack.query_density(tiny_model, init)
    assert len(res.trace) == 1


def test_lbfgs_stays_in_box_and_traces(tiny_model):
    res = attack.sponge_lbfgs(tiny_model, LbfgsConfig(steps=10, seed=0))
    assert 0 <= res.image.min() and res.image.max() <= 1
    obj = [row[1] for row in res.trace]
    assert all(b <= a for a, b in zip(obj, obj[1:]))  # Armijo: objective never rises
    assert res.density == max(row[2] for row in res.trace)


def test_lbfgs_dead_network_terminates_cleanly(tiny_model):
    dead = tiny_model
    for key, p in tiny_model.bn_params().items():  # site names double as parameter keys
        dead = with_bn(dead, key, beta=np.full(p.channels, -1e6))
    res = attack.sponge_lbfgs(dead, LbfgsConfig(steps=5))
    assert res.density == 0.0 and np.all(np.isfinite(res.image))


def test_lbfgs_beats_random_baseline(reference):
    base = np.mean([attack.query_density(reference, x)
                    for x in np.random.default_rng(123).random((100, 3, 32, 32))])
    res = attack.sponge_lbfgs(reference, LbfgsConfig(steps=50, seed=0))
    assert res.density > base


# -- density query ---------------------------------------------------------------------


def test_query_density(tiny_model, rng):
    x = rng.random((3, 8, 8))
    d = attack.query_density(tiny_model, x)
    assert d == attack.query_density(tiny_model, x)
    _, rec = M.forward(tiny_model, x, probe=True)
    assert d == probe.post_relu_density(rec)
    with pytest.raises(ShapeError):
        attack.query_density(tiny_model, np.zeros((3, 4, 4)))


def test_query_density_hand_traced():
    # one CNR block, 2 output channels, uncalibrated identity statistics.
    # zero image -> conv output 0 -> bn gives beta -> relu keeps channel 0 only
    m = M.build(M.ArchSpec((1, 3, 3), (M.CNR(2, 3, 1, 1),)))
    m = with_bn(m, "b0.bn", beta=np.array([0.5, -0.5]))
    assert attack.query_density(m, np.zeros((1, 3, 3))) == 0.5
    assert attack.query_density(M.build(M.ArchSpec((1, 3, 3), (M.CNR(2, 3, 1, 1),))),
                                np.zeros((1, 3, 3))) == 0.0


def test_result_round_trip(tiny_model, tmp_path):
    res = attack.sponge_ga(tiny_model, GaConfig(pool_size=4, iterations=2))
    attack.save_result(res, tmp_path, "s")
    back = attack.load_result(tmp_path / "s.json")
    assert np.array_equal(back.image, res.image) and back.density == res.density
    assert [r[:3] for r in back.trace] == [r[:3] for r in res.trace]

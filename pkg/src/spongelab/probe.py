"""Activation instrumentation: density, BN channel statistics, zero thresholds, MAC skipping."""

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .errors import DataError

POS_ABOVE = "pos_above"
POS_BELOW = "pos_below"
DEGENERATE = "degenerate"


@dataclass
class ReluCount:
    nonzero_count: int
    total_count: int


@dataclass
class BnSiteStats:
    """Per-channel statistics of one BN site's input (pre) and output (post)."""

    pre_mean: np.ndarray
    pre_std: np.ndarray
    pre_pos_fraction: np.ndarray
    post_pos_fraction: np.ndarray
    pre: np.ndarray = None
    post: np.ndarray = None


@dataclass
class MacCount:
    total_macs: int
    skipped_macs: int


@dataclass
class ActivationRecord:
    relu: dict = field(default_factory=dict)
    bn: dict = field(default_factory=dict)
    macs: dict = field(default_factory=dict)
    relu_snapshots: dict = field(default_factory=dict)


def _positive_fraction(z):
    return (z.reshape(z.shape[0], -1) > 0).mean(axis=1)


def _population_stats(z):
    flat = z.reshape(z.shape[0], -1)
    mean = flat.mean(axis=1)
    std = np.sqrt(((flat - mean[:, None]) ** 2).mean(axis=1))
    return mean, std


def conv_mac_counts(x, weight_shape, stride, padding):
    """MACs of a conv layer, counting only in-bounds taps; a MAC is skipped iff its activation is 0."""
    o, c, kh, kw = weight_shape
    window = np.ones((1, 1, kh, kw))
    taps = engine.conv2d(np.ones((1,) + x.shape[1:]), window, stride=stride, padding=padding)
    zeros = (x == 0).sum(axis=0, dtype=np.float64)[None]
    zero_taps = engine.conv2d(zeros, window, stride=stride, padding=padding)
    return MacCount(int(round(taps.sum())) * c * o, int(round(zero_taps.sum())) * o)


def build_record(m, values, retain=False):
    """Summarise one forward pass of model ``m`` given its register ``values``."""
    rec = ActivationRecord()
    program = m.program
    for site in m.sites:
        x = values[site.input_register]
        y = values[site.output_register]
        step = program.steps[site.step_index]
        if site.kind == "relu":
            rec.relu[site.name] = ReluCount(int(np.count_nonzero(y)), int(y.size))
            if retain:
                rec.relu_snapshots[site.name] = y
        elif site.kind == "bn":
            mean, std = _population_stats(x)
            rec.bn[site.name] = BnSiteStats(
                mean, std, _positive_fraction(x), _positive_fraction(y),
                x if retain else None, y if retain else None,
            )
        elif site.kind == "conv":
            w = program.params[step.params["weight"]]
            rec.macs[site.name] = conv_mac_counts(
                x, w.shape, step.attrs.get("stride", 1), step.attrs.get("padding", 0)
            )
        elif site.kind == "linear":
            w = program.params[step.params["weight"]]
            rec.macs[site.name] = MacCount(int(w.size), int(np.count_nonzero(x == 0)) * w.shape[0])
    return rec


def post_relu_density(r):
    """Fraction of nonzero post-ReLU activations, pooled over every element of every site."""
    if not r.relu:
        raise DataError("activation record has no ReLU sites")
    nz = sum(c.nonzero_count for c in r.relu.values())
    tot = sum(c.total_count for c in r.relu.values())
    if tot == 0:
        raise DataError("activation record has no activations")
    return nz / tot


def zero_threshold(p, c):
    """Return ``(theta, direction)`` for channel ``c``.

    For ``gamma > 0`` the BN output is positive exactly when its input
    exceeds ``theta``; for ``gamma < 0`` when it is below; ``gamma == 0``
    gives a constant output and ``theta`` is NaN.
    """
    gamma = p.gamma[c]
    if gamma == 0:
        return float("nan"), DEGENERATE
    theta = p.mu_hat[c] - p.beta[c] * np.sqrt(p.sigma_hat[c] + p.eps) / gamma
    return float(theta), POS_ABOVE if gamma > 0 else POS_BELOW


@dataclass
class ThresholdTable:
    sites: list
    channels: np.ndarray
    theta: np.ndarray
    direction: list

    def __len__(self):
        return len(self.sites)

    def rows(self):
        return list(zip(self.sites, self.channels.tolist(), self.theta.tolist(), self.direction))

    def histogram(self, bins=50, range=None):
        """Histogram of finite thresholds (degenerate channels excluded)."""
        finite = self.theta[np.isfinite(self.theta)]
        return np.histogram(finite, bins=bins, range=range)


def threshold_table(m, first_n_bn_sites=None):
    bn = list(m.bn_params().items())
    if first_n_bn_sites is not None:
        bn = bn[:first_n_bn_sites]
    sites, chans, thetas, dirs = [], [], [], []
    for name, p in bn:
        for c in range(p.channels):
            theta, d = zero_threshold(p, c)
            sites.append(name)
            chans.append(c)
            thetas.append(theta)
            dirs.append(d)
    return ThresholdTable(sites, np.array(chans, dtype=np.int64), np.array(thetas), dirs)


def _bn_site(r, site):
    try:
        return r.bn[site]
    except KeyError:
        raise DataError(f"record has no BN statistics for site {site!r}") from None


def channel_stats(r, site):
    """Per-channel population ``(mean, std)`` of the BN input at ``site``."""
    s = _bn_site(r, site)
    if s.pre is not None:
        return _population_stats(s.pre)
    if s.pre_mean is None or s.pre_std is None:
        raise DataError(f"no pre-BN snapshot or statistics at site {site!r}")
    return s.pre_mean, s.pre_std


def density_gain(r, site):
    """Positive fraction after BN minus positive fraction before, per channel."""
    s = _bn_site(r, site)
    if s.pre_pos_fraction is None or s.post_pos_fraction is None:
        raise DataError(f"positive fractions missing at site {site!r}")
    return s.post_pos_fraction - s.pre_pos_fraction


@dataclass
class CostReport:
    total_macs: int
    skipped_macs: int
    skipped_fraction: float
    layers: dict

    def __iter__(self):
        return iter((self.total_macs, self.skipped_macs, self.skipped_fraction))


def cost_model(r, m):
    """Zero-skipping cost proxy over every conv and linear layer of ``m``.

    Unpacks as ``(total_macs, skipped_macs, skipped_fraction)``; ``layers``
    maps site name to its own ``(total, skipped, fraction)``.
    """
    layers = {}
    total = skipped = 0
    for site in m.sites:
        if site.kind not in ("conv", "linear"):
            continue
        if site.name not in r.macs:
            raise DataError(f"record lacks MAC counts for {site.name!r}")
        c = r.macs[site.name]
        layers[site.name] = (c.total_macs, c.skipped_macs, c.skipped_macs / c.total_macs)
        total += c.total_macs
        skipped += c.skipped_macs
    return CostReport(total, skipped, skipped / total if total else 0.0, layers)

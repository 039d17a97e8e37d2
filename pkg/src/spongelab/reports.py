"""CSV writers shared by the CLI. Every file starts with ``# key: value`` comment lines."""

import csv
import io
import json
from pathlib import Path

import numpy as np

from . import probe


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, columns, rows, header=None):
    buf = io.StringIO()
    for key, value in (header or {}).items():
        if not isinstance(value, str):
            value = json.dumps(value, sort_keys=True)
        buf.write(f"# {key}: {value}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def read_csv(path):
    """Return (header dict, list of row dicts), skipping comment lines."""
    header, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            key, _, value = line[2:].partition(": ")
            header[key] = value
        else:
            body.append(line)
    return header, list(csv.DictReader(body))


THRESHOLD_COLUMNS = ("site", "channel", "theta", "direction")
GAIN_COLUMNS = ("site", "channel", "mean_gain", "n_images")
CHANNEL_STAT_COLUMNS = ("image", "site", "channel", "mean", "std")
DENSITY_COLUMNS = ("image", "density", "skipped_fraction")


def threshold_rows(table):
    return table.rows()


def gain_rows(records):
    """Mean density gain per (site, channel) over ``records``."""
    first = records[0]
    rows = []
    for site in first.bn:
        gains = np.mean([probe.density_gain(r, site) for r in records], axis=0)
        rows += [(site, c, float(g), len(records)) for c, g in enumerate(gains)]
    return rows


def channel_stat_rows(names, records):
    rows = []
    for name, r in zip(names, records):
        for site in r.bn:
            mean, std = probe.channel_stats(r, site)
            rows += [(name, site, c, float(mu), float(sd)) for c, (mu, sd) in enumerate(zip(mean, std))]
    return rows


def density_rows(names, records, m):
    return [(name, probe.post_relu_density(r), probe.cost_model(r, m).skipped_fraction)
            for name, r in zip(names, records)]

"""Edit-quality metrics over sets of trajectories.

* manipulation accuracy: fraction of edits where the target label flipped and
  every other attribute's label stayed put;
* attribute dependency (AD): mean normalised drift of non-target logits,
  grouped by normalised change of the target logit;
* start/end logit pairs for two-attribute scatter plots.

Logits come from a *scorer* evaluated at the first and last latent of each
trajectory: either an external oracle or the recorded classifier logits.
"""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateNormalizerError, MissingDataError
from .numeric import mean_std

DEFAULT_BINS = 8


@dataclass
class ScoredRun:
    target: str
    target_class: int
    start: dict  # attr -> logits (ndarray)
    end: dict
    stop_reason: str = ""


@dataclass
class EvalRun:
    runs: list  # of ScoredRun
    bank_stats: dict = field(default_factory=dict)  # attr -> (mean ndarray, std ndarray)
    scorer: str = "oracle"

    def for_target(self, attr):
        return [r for r in self.runs if r.target == attr]


@dataclass
class AdCurve:
    bins: list  # [(x_center, mean_ad, count)]
    edges: list = field(default_factory=list)

    @property
    def x(self):
        return [b[0] for b in self.bins]

    @property
    def mean_ad(self):
        return [b[1] for b in self.bins]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x_center", "mean_ad", "count"])
        for x, ad, n in self.bins:
            w.writerow([repr(float(x)), repr(float(ad)), n])
        return buf.getvalue()


def score_trajectories(trajectories, scorer="oracle", score_fn=None, bank_stats=None):
    """Build an :class:`EvalRun` from trajectories.

    ``score_fn(z) -> {attr: logits}`` rescoring the endpoints; when omitted the
    trajectory's recorded logits are used.
    """
    runs = []
    for t in trajectories:
        if score_fn is None:
            start, end = t.logits[0], t.logits[-1]
        else:
            start, end = score_fn(t.zs[0]), score_fn(t.zs[-1])
        runs.append(ScoredRun(t.target, t.target_class,
                              {k: np.atleast_1d(np.asarray(v, dtype=np.float64)) for k, v in start.items()},
                              {k: np.atleast_1d(np.asarray(v, dtype=np.float64)) for k, v in end.items()},
                              getattr(t.stop_reason, "value", t.stop_reason) or ""))
    return EvalRun(runs, dict(bank_stats or {}), scorer)


def bank_statistics(logits_by_attr):
    """attr -> (n, k) logits over a bank  ==>  attr -> (mean[k], std[k])."""
    stats = {}
    for attr, L in logits_by_attr.items():
        L = np.asarray(L, dtype=np.float64)
        if L.ndim == 1:
            L = L[:, None]
        cols = [mean_std(L[:, j]) for j in range(L.shape[1])]
        stats[attr] = (np.array([c[0] for c in cols]), np.array([c[1] for c in cols]))
    return stats


def label_of(logits):
    logits = np.atleast_1d(logits)
    if logits.size == 1:
        return int(logits[0] > 0)
    return int(np.argmax(logits))


def _success(run, attrs):
    tgt0, tgt1 = label_of(run.start[run.target]), label_of(run.end[run.target])
    if run.start[run.target].size == 1:
        flipped = tgt0 != tgt1
    else:
        flipped = tgt1 == run.target_class and tgt0 != tgt1
    if not flipped:
        return False
    return all(label_of(run.start[a]) == label_of(run.end[a]) for a in attrs if a != run.target)


def manipulation_accuracy(run_set, attrs, targets=None):
    """Per target attribute: share of its edits that changed only that attribute.

    ``attrs`` is the attribute set whose labels must stay fixed; ``targets``
    (default: all of ``attrs``) selects which targets to report.
    """
    out = {}
    for attr in attrs if targets is None else targets:
        runs = run_set.for_target(attr)
        if not runs:
            raise MissingDataError(f"no trajectories target {attr!r}")
        for r in runs:
            missing = [a for a in attrs if a not in r.start or a not in r.end]
            if missing:
                raise MissingDataError(f"trajectory for {attr!r} not scored on {missing}")
        out[attr] = sum(_success(r, attrs) for r in runs) / len(runs)
    return out


def _std(run_set, attr):
    if attr not in run_set.bank_stats:
        raise MissingDataError(f"no bank statistics for {attr!r}")
    std = np.asarray(run_set.bank_stats[attr][1], dtype=np.float64)
    if np.any(std <= 0):
        raise DegenerateNormalizerError(f"bank std of {attr!r} is zero")
    return std


def _target_delta(run, std):
    """Normalised target change; for multi-class, the requested class's logit."""
    j = 0 if run.start[run.target].size == 1 else run.target_class
    return (run.end[run.target][j] - run.start[run.target][j]) / std[j]


def ad_points(run_set, target, attrs=None, absolute=True):
    """(x, ad) per trajectory targeting ``target``."""
    runs = run_set.for_target(target)
    if not runs:
        raise MissingDataError(f"no trajectories target {target!r}")
    if attrs is None:
        attrs = sorted(runs[0].start)
    others = [a for a in attrs if a != target]
    if not others:
        raise MissingDataError("attribute dependency needs at least one non-target attribute")
    tstd = _std(run_set, target)
    stds = {a: _std(run_set, a) for a in others}
    xs, ads = [], []
    for r in runs:
        xs.append(_target_delta(r, tstd))
        terms = []
        for a in others:
            d = (r.end[a] - r.start[a]) / stds[a]
            # multi-class attributes contribute the mean over their class logits
            terms.append(float(np.mean(np.abs(d) if absolute else d)))
        ads.append(sum(terms) / len(others))
    return np.array(xs), np.array(ads)


def uniform_edges(xs, n_bins=DEFAULT_BINS):
    xs = np.asarray(xs, dtype=np.float64)
    lo, hi = float(xs.min()), float(xs.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, n_bins + 1)


def bin_curve(xs, ads, edges):
    edges = np.asarray(edges, dtype=np.float64)
    idx = np.clip(np.searchsorted(edges, xs, side="right") - 1, 0, len(edges) - 2)
    inside = (xs >= edges[0]) & (xs <= edges[-1])
    bins = []
    for b in range(len(edges) - 1):
        sel = inside & (idx == b)
        if sel.any():
            bins.append((0.5 * (edges[b] + edges[b + 1]), float(np.mean(ads[sel])),
                         int(sel.sum())))
    return AdCurve(bins, edges.tolist())


def attribute_dependency(run_set, target, bin_edges=None, attrs=None, absolute=True,
                         n_bins=DEFAULT_BINS):
    """Mean AD per bin of normalised target change. Empty bins are dropped."""
    xs, ads = ad_points(run_set, target, attrs, absolute)
    edges = uniform_edges(xs, n_bins) if bin_edges is None else bin_edges
    return bin_curve(xs, ads, edges)


def shared_edges(run_sets, target, n_bins=DEFAULT_BINS, attrs=None):
    """Uniform edges over the union of x ranges, for comparing curves bin by bin."""
    xs = np.concatenate([ad_points(r, target, attrs)[0] for r in run_sets])
    return uniform_edges(xs, n_bins)


def compare_curves(a, b):
    """Pairs (x_center, ad_a, ad_b) for bins populated in both curves."""
    bmap = {round(x, 12): ad for x, ad, _ in b.bins}
    return [(x, ad, bmap[round(x, 12)]) for x, ad, _ in a.bins if round(x, 12) in bmap]


def _scalar(logits, j=0):
    return float(np.atleast_1d(logits)[j])


def logit_scatter(run_set, attr_x, attr_y, target=None):
    """((x0, y0), (x1, y1)) start/end logit pairs, optionally for one target."""
    runs = run_set.runs if target is None else run_set.for_target(target)
    return [((_scalar(r.start[attr_x]), _scalar(r.start[attr_y])),
             (_scalar(r.end[attr_x]), _scalar(r.end[attr_y]))) for r in runs]


def scatter_slopes(pairs):
    """|dy/dx| per pair; pairs with no x movement are skipped."""
    out = []
    for (x0, y0), (x1, y1) in pairs:
        if x1 != x0:
            out.append(abs((y1 - y0) / (x1 - x0)))
    return out


def metrics_report(run_set, attrs, n_bins=DEFAULT_BINS, scatter_pair=None):
    targets = sorted({r.target for r in run_set.runs})
    acc = manipulation_accuracy(run_set, attrs, [t for t in targets if t in attrs])
    ad, ad_signed = {}, {}
    for t in targets:
        if t not in attrs:
            continue
        curve = attribute_dependency(run_set, t, attrs=attrs, n_bins=n_bins)
        ad[t] = {"bins": [list(b) for b in curve.bins], "edges": curve.edges}
        signed = attribute_dependency(run_set, t, bin_edges=curve.edges, attrs=attrs,
                                      absolute=False)
        ad_signed[t] = {"bins": [list(b) for b in signed.bins], "edges": signed.edges}
    scatter = []
    if scatter_pair:
        scatter = [[list(p0), list(p1)] for p0, p1 in logit_scatter(run_set, *scatter_pair)]
    return {"accuracy": acc, "ad_curves": ad, "ad_curves_signed": ad_signed,
            "scatter": scatter, "scorer": run_set.scorer}


def dumps_report(report):
    return json.dumps(report, indent=1, sort_keys=False) + "\n"

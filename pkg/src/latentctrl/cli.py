"""Command-line entry point: ``latentctrl synth|train|edit|eval|sweep``.

Every subcommand reads ``--config`` (TOML; top-level keys plus an optional
table named after the subcommand) and lets flags override it. All randomness
derives from ``--seed`` via named child streams, so reruns are byte-identical.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import classifier as C
from . import control as K
from . import experiments as X
from . import metrics as M
from . import synthworld as sw
from .errors import (CoverageError, DegenerateNormalizerError, DimensionError,
                     LatentCtrlError, MissingDataError, UsageError)
from .numeric import Rng

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("latentctrl")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_MAX_STEPS = 5

STOP_EXIT = {
    K.StopReason.BOUNDARY_CROSSED: EXIT_OK,
    K.StopReason.MAX_STEPS: EXIT_MAX_STEPS,
    K.StopReason.VANISHING_GRADIENT: EXIT_NUMERIC,
}

DEFAULTS = {
    "seed": 0,
    "out_dir": "run",
    # synth
    "n": 100_000,
    "dim": sw.DEFAULT_DIM,
    "correlation": sw.DEFAULT_CORRELATION,
    "confound_weight": sw.DEFAULT_CONFOUND_WEIGHT,
    "noise": 0.2,
    # train
    "per_class": 30,
    "epochs": 500,
    "lr": 0.05,
    "batch_size": 1024,
    "hidden_width": 32,
    "hidden_layers": 2,
    "weight_decay": 0.1,
    "optimizer": "gd",
    "heldout": 1000,
    # edit / sweep
    "alpha": K.DEFAULT_STEP,
    "max_steps": 100,
    "direction": "flip",
    "stop_on": "oracle",
    "margin": 0.5,
    "workers": 1,
    "counts": "50,100,150,200,250",
    # eval
    "bins": M.DEFAULT_BINS,
    # unset unless given
    "world": None, "bank": None, "classifiers": None, "target": None, "target_class": None,
    "confound": None, "exclude": None, "index": None, "z_file": None, "boundary": None,
    "dims": None, "name": None, "trajectories": None, "attrs": None, "scatter": None,
    "raw_gradient": False, "frozen_mask": False,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _paths(out_dir):
    d = Path(out_dir)
    return {
        "world": d / "world.json",
        "bank": d / "bank.gclb",
        "labels": d / "bank.labels.jsonl",
        "classifiers": d / "classifiers",
        "trajectories": d / "trajectories",
    }


def _load_config(path, command):
    if not path:
        return {}
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"bad config {path}: {exc}") from exc
    cfg = {k.replace("-", "_"): v for k, v in doc.items() if not isinstance(v, dict)}
    cfg.update({k.replace("-", "_"): v for k, v in doc.get(command, {}).items()})
    return cfg


def _settings(args):
    """defaults <- config file <- explicit flags."""
    merged = dict(DEFAULTS)
    merged.update(_load_config(args.config, args.command))
    merged.update({k: v for k, v in vars(args).items() if v is not None})
    return argparse.Namespace(**merged)


def _resolve_attr(world, name):
    ids = world.attribute_ids
    if name in ids:
        return name
    hits = [a for a in ids if name in a]
    if len(hits) == 1:
        return hits[0]
    raise UsageError(f"unknown attribute {name!r}; choose from {ids}")


def _parse_exclude(world, text):
    if not text:
        return ()
    pairs = []
    for item in text.split(","):
        name, _, count = item.partition(":")
        try:
            c = int(count) if count else K.DEFAULT_EXCLUDE
        except ValueError:
            raise UsageError(f"bad exclusion {item!r}; expected attr:count") from None
        pairs.append((_resolve_attr(world, name.strip()), c))
    return tuple(pairs)


def _parse_ints(text, what):
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad {what} list {text!r}") from None


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _load_world(s):
    p = Path(s.world) if getattr(s, "world", None) else _paths(s.out_dir)["world"]
    if not p.exists():
        raise MissingDataError(f"world file {p} not found; run `synth` first")
    return sw.WorldSpec.load(p)


def _load_bank(s):
    p = Path(s.bank) if getattr(s, "bank", None) else _paths(s.out_dir)["bank"]
    if not p.exists():
        raise MissingDataError(f"bank file {p} not found; run `synth` first")
    return sw.read_bank(p)


def _load_classifiers(s, world):
    d = Path(s.classifiers) if getattr(s, "classifiers", None) else _paths(s.out_dir)["classifiers"]
    clfs = {}
    for a in world.attributes:
        p = d / f"{a.id}.gclf"
        if not p.exists():
            raise MissingDataError(f"classifier {p} not found; run `train` first")
        clfs[a.id] = C.load(p.read_bytes(), a.class_names)
        if clfs[a.id].input_dim != world.dim:
            raise DimensionError(f"{p}: classifier input dim {clfs[a.id].input_dim} "
                                 f"!= world dim {world.dim}")
    return clfs


# synth ---------------------------------------------------------------------

def cmd_synth(s):
    if s.n < 1:
        raise UsageError(f"--n must be >= 1, got {s.n}")
    paths = _paths(s.out_dir)
    world = sw.default_world(seed=s.seed, dim=s.dim, correlation=s.correlation,
                             noise=s.noise, confound_weight=s.confound_weight)
    bank = sw.sample_bank(world, s.n, Rng(s.seed).spawn("synth"))
    paths["world"].parent.mkdir(parents=True, exist_ok=True)
    world.save(paths["world"])
    sw.write_bank(bank, paths["bank"], paths["labels"])
    print(f"# seed={s.seed} n={s.n} d={world.dim}")
    print(f"{'attribute':<12} class balance")
    for a in world.attributes:
        counts = np.bincount(bank.labels[a.id], minlength=a.spec.n_labels) / len(bank)
        parts = " ".join(f"{name}={c:.3f}" for name, c in zip(a.class_names, counts))
        print(f"{a.id:<12} {parts}")
    return EXIT_OK


# train ---------------------------------------------------------------------

def _pick_training_rows(labels, n_labels, per_class, order):
    picked = {c: [] for c in range(n_labels)}
    for i in order:
        y = int(labels[i])
        if len(picked[y]) < per_class:
            picked[y].append(int(i))
        if all(len(v) >= per_class for v in picked.values()):
            break
    return picked


def cmd_train(s):
    world = _load_world(s)
    bank = _load_bank(s)
    if bank.z.shape[1] != world.dim:
        raise DimensionError(f"bank dim {bank.z.shape[1]} != world dim {world.dim}")
    rng = Rng(s.seed).spawn("train")
    out = _paths(s.out_dir)["classifiers"]
    out.mkdir(parents=True, exist_ok=True)
    report = {"seed": s.seed, "per_class": s.per_class, "attributes": {}}
    print(f"# seed={s.seed} per_class={s.per_class}")
    print(f"{'attribute':<12} {'train_acc':>9} {'heldout_acc':>11}")
    for a in world.attributes:
        if a.id not in bank.labels:
            raise CoverageError(f"attribute {a.id!r} missing from bank labels")
        labels = bank.labels[a.id]
        order = rng.spawn(f"order:{a.id}").permutation(len(bank))
        picked = _pick_training_rows(labels, a.spec.n_labels, s.per_class, order)
        empty = [c for c, v in picked.items() if not v]
        if empty:
            raise CoverageError(f"{a.id}: bank has no examples of classes {empty}")
        used = sorted(i for v in picked.values() for i in v)
        data = [C.LabeledLatent(bank.z[i], int(labels[i])) for c in sorted(picked)
                for i in picked[c]]
        cfg = C.TrainConfig(examples_per_class=s.per_class, epochs=s.epochs,
                            learning_rate=s.lr, batch_size=s.batch_size,
                            seed=int(rng.spawn(f"init:{a.id}").seed),
                            hidden_width=s.hidden_width, hidden_layers=s.hidden_layers,
                            optimizer=s.optimizer, weight_decay=s.weight_decay)
        clf = C.train(data, a.spec, cfg)
        rest = np.setdiff1d(order, used, assume_unique=True)[:s.heldout]
        held = float(np.mean(C.predict(clf, bank.z[rest]) == labels[rest])) if rest.size else float("nan")
        (out / f"{a.id}.gclf").write_bytes(C.save(clf))
        report["attributes"][a.id] = {"train_accuracy": clf.train_accuracy,
                                      "heldout_accuracy": held, "n_train": len(data)}
        print(f"{a.id:<12} {clf.train_accuracy:>9.3f} {held:>11.3f}")
    _write(Path(s.out_dir) / "train_report.json", json.dumps(report, indent=1) + "\n")
    return EXIT_OK


# edit ----------------------------------------------------------------------

def _policy(s, dims):
    return K.StepPolicy(alpha=abs(s.alpha), max_steps=s.max_steps, normalize=not s.raw_gradient,
                        stop_on_boundary=True, dim_mask=dims, refresh_mask=not s.frozen_mask)


def _parse_dims(text, d):
    if not text:
        return None
    dims = set()
    for part in text.split(","):
        lo, sep, hi = part.partition(":")
        try:
            dims.update(range(int(lo), int(hi)) if sep else [int(lo)])
        except ValueError:
            raise UsageError(f"bad --dims entry {part!r}; use start:stop or index") from None
    if any(i < 0 or i >= d for i in dims):
        raise UsageError(f"--dims outside [0, {d})")
    return frozenset(dims)


def _signed_alpha(s, world, target, z, clf):
    a = abs(s.alpha)
    if not clf.attr.binary or s.direction == "increase":
        return a
    if s.direction == "decrease":
        return -a
    if s.stop_on == "oracle":
        current = sw.oracle_score(world, target, z)[0]
    else:
        current = C.forward(clf, z)[0]
    return a if current <= 0 else -a


def _edit_latents(s, world, bank):
    if s.z_file:
        z = np.asarray(json.loads(Path(s.z_file).read_text()), dtype=np.float64)
        z = np.atleast_2d(z)
        if z.shape[1] != world.dim:
            raise DimensionError(f"{s.z_file}: latent length {z.shape[1]} != {world.dim}")
        return [f"z{i:06d}" for i in range(len(z))], z
    if s.boundary:
        sub = sw.boundary_sample(world, bank, s.target_id, s.margin, s.boundary)
        if sub.shortfall:
            log.warning("only %d latents within margin %.3g of the %s boundary",
                        len(sub.indices), s.margin, s.target_id)
        idx = sub.indices
    else:
        idx = np.array(s.index if s.index is not None else [0])
    if np.any(idx < 0) or np.any(idx >= len(bank)):
        raise UsageError(f"bank index out of range [0, {len(bank)})")
    return [f"traj_{int(i):06d}" for i in idx], bank.z[idx]


def cmd_edit(s):
    world = _load_world(s)
    if not s.target:
        raise UsageError("--target is required")
    s.target_id = _resolve_attr(world, s.target)
    attr = world.attribute(s.target_id)
    if s.target_class is None:
        target_class = 0
    elif str(s.target_class).isdigit():
        target_class = int(s.target_class)
    elif s.target_class in attr.class_names:
        target_class = attr.class_names.index(s.target_class)
    else:
        raise UsageError(f"unknown class {s.target_class!r} for {s.target_id}")
    if not 0 <= target_class < attr.num_classes:
        raise UsageError(f"class {target_class} out of range for {s.target_id}")
    exclude = _parse_exclude(world, s.exclude)
    if any(m == s.target_id for m, _ in exclude):
        raise UsageError("the target cannot also be excluded")
    clfs = _load_classifiers(s, world)
    bank = _load_bank(s) if not s.z_file else None
    names, Z = _edit_latents(s, world, bank)
    policy = _policy(s, _parse_dims(s.dims, world.dim))
    clf = clfs[s.target_id]
    spec = K.DisentangleSpec(s.target_id, target_class, exclude)

    def scorer_for(target):
        if s.stop_on == "oracle":
            return lambda z: sw.oracle_score(world, target, z)
        return None

    def job(z):
        from dataclasses import replace
        p = replace(policy, alpha=_signed_alpha(s, world, s.target_id, z, clf))
        return K.manipulate(z, clf, target_class, clfs, spec, p, clfs, scorer_for(s.target_id))

    if s.workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(s.workers) as pool:
            trajs = list(pool.map(job, Z))
    else:
        trajs = [job(z) for z in Z]
    out = _paths(s.out_dir)["trajectories"] / (s.name or "edits")
    out.mkdir(parents=True, exist_ok=True)
    reasons = {}
    for name, t in zip(names, trajs):
        (out / f"{name}.jsonl").write_text(t.to_jsonl())
        reasons[t.stop_reason.value] = reasons.get(t.stop_reason.value, 0) + 1
    manifest = {"seed": s.seed, "target": s.target_id, "target_class": target_class,
                "exclude": [list(p) for p in exclude], "alpha": abs(s.alpha),
                "direction": s.direction, "normalize": policy.normalize,
                "refresh_mask": policy.refresh_mask, "stop_on": s.stop_on,
                "max_steps": policy.max_steps, "stop_reasons": reasons, "files": names}
    _write(out / "manifest.json", json.dumps(manifest, indent=1) + "\n")
    print(f"# target={s.target_id} class={target_class} exclude={exclude or 'none'}")
    for k in sorted(reasons):
        print(f"{k:<20} {reasons[k]}")
    if len(trajs) == 1:
        return STOP_EXIT[trajs[0].stop_reason]
    return EXIT_OK


# eval ----------------------------------------------------------------------

def _read_trajectories(directory, world):
    files = sorted(Path(directory).glob("*.jsonl"))
    if not files:
        raise MissingDataError(f"no trajectory files in {directory}")
    trajs = []
    for f in files:
        try:
            t = K.Trajectory.from_jsonl(f.read_text())
        except (ValueError, KeyError) as exc:
            raise MissingDataError(f"{f}: {exc}") from exc
        if len(t.zs[0]) != world.dim:
            raise DimensionError(f"{f}: latent length {len(t.zs[0])} != world dim {world.dim}")
        trajs.append(t)
    return trajs


def _trajectory_groups(s):
    groups = []
    specs = s.trajectories or []
    if not specs:
        root = _paths(s.out_dir)["trajectories"]
        if root.exists():
            subdirs = sorted(p for p in root.iterdir() if p.is_dir())
            specs = [f"{p.name}={p}" for p in subdirs]
    if not specs:
        raise MissingDataError("no trajectory directories to evaluate")
    for spec in specs:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).name, spec
        groups.append((name, path))
    return groups


def cmd_eval(s):
    world = _load_world(s)
    bank = _load_bank(s)
    if bank.z.shape[1] != world.dim:
        raise DegenerateNormalizerError(
            f"bank dim {bank.z.shape[1]} does not match world dim {world.dim}; "
            "cannot compute logit normalizers")
    attrs = [_resolve_attr(world, a) for a in s.attrs.split(",")] if s.attrs else \
        [a.id for a in world.attributes if a.binary]
    stats = X.oracle_bank_stats(world, bank, world.attribute_ids)
    scorer = X.oracle_scorer(world)
    groups = [(name, _read_trajectories(path, world)) for name, path in _trajectory_groups(s)]
    runs = {name: M.score_trajectories(t, "oracle", scorer, stats) for name, t in groups}
    scatter = tuple(_resolve_attr(world, a) for a in s.scatter.split(",")) if s.scatter else None

    out_dir = Path(s.out_dir)
    report = {"seed": s.seed, "attrs": attrs, "groups": {}}
    targets = sorted({r.target for run in runs.values() for r in run.runs})
    shared = {}
    for t in targets:
        with_t = [run for run in runs.values() if run.for_target(t)]
        if t in world.attribute_ids:
            shared[t] = M.shared_edges(with_t, t, s.bins, attrs + ([t] if t not in attrs else []))
    print(f"{'group':<16} {'target':<12} {'n':>5} {'accuracy':>9} {'mean_ad':>8}")
    for name, run in runs.items():
        group = {"accuracy": {}, "ad_curves": {}, "ad_curves_signed": {}, "scatter": [],
                 "stop_reasons": {}}
        for r in run.runs:
            group["stop_reasons"][r.stop_reason] = group["stop_reasons"].get(r.stop_reason, 0) + 1
        for t in sorted({r.target for r in run.runs}):
            a_set = attrs if t in attrs else attrs + [t]
            acc = M.manipulation_accuracy(run, a_set, [t])[t]
            curve = M.attribute_dependency(run, t, shared[t], a_set)
            signed = M.attribute_dependency(run, t, shared[t], a_set, absolute=False)
            group["accuracy"][t] = acc
            group["ad_curves"][t] = {"edges": curve.edges, "bins": [list(b) for b in curve.bins]}
            group["ad_curves_signed"][t] = {"edges": signed.edges,
                                            "bins": [list(b) for b in signed.bins]}
            _write(out_dir / "metrics" / f"ad_{name}_{t}.csv", curve.to_csv())
            overall = float(np.mean(M.ad_points(run, t, a_set)[1]))
            print(f"{name:<16} {t:<12} {len(run.for_target(t)):>5} {acc:>9.4f} {overall:>8.4f}")
        if scatter:
            group["scatter"] = [[list(p0), list(p1)] for p0, p1 in M.logit_scatter(run, *scatter)]
        report["groups"][name] = group
    _write(out_dir / "metrics" / "metrics.json", json.dumps(report, indent=1) + "\n")
    return EXIT_OK


# sweep ---------------------------------------------------------------------

def cmd_sweep(s):
    world = _load_world(s)
    if not s.target or not s.confound:
        raise UsageError("--target and --confound are required")
    target = _resolve_attr(world, s.target)
    confound = _resolve_attr(world, s.confound)
    counts = _parse_ints(s.counts, "counts")
    if not counts:
        raise UsageError("--counts must list at least one exclusion count")
    if any(c < 0 or c > world.dim for c in counts):
        raise UsageError(f"exclusion counts must lie in [0, {world.dim}]")
    clfs = _load_classifiers(s, world)
    bank = _load_bank(s)
    sub = sw.boundary_sample(world, bank, target, s.margin, s.boundary or 100)
    Z = bank.z[sub.indices]
    policy = K.StepPolicy(alpha=abs(s.alpha), max_steps=s.max_steps,
                          refresh_mask=not s.frozen_mask)
    result = X.exclusion_sweep(world, clfs, Z, target, confound, counts, policy)
    out = Path(s.out_dir) / "sweep" / target
    summary = {"seed": s.seed, "target": target, "confound": confound,
               "n_latents": int(len(Z)), "drift": {}}
    print(f"# target={target} confound={confound} n={len(Z)}")
    print(f"{'count':>6} {'confound_drift':>15} {'crossed':>8}")
    for c in counts:
        drift, trajs = result[c]
        for i, t in zip(sub.indices, trajs):
            _write(out / f"c{c}" / f"traj_{int(i):06d}.jsonl", t.to_jsonl())
        crossed = sum(t.stop_reason == K.StopReason.BOUNDARY_CROSSED for t in trajs)
        summary["drift"][str(c)] = {"mean_drift": drift, "crossed": crossed}
        print(f"{c:>6} {drift:>15.6f} {crossed:>8}")
    _write(Path(s.out_dir) / "sweep" / f"{target}.json", json.dumps(summary, indent=1) + "\n")
    return EXIT_OK


# parser --------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="latentctrl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--config")
        sp.add_argument("--out-dir", dest="out_dir")
        sp.add_argument("--world")
        sp.add_argument("--bank")
        return sp

    sp = common(sub.add_parser("synth", help="write world JSON and a latent bank"))
    sp.add_argument("--n", type=int)
    sp.add_argument("--dim", type=int)
    sp.add_argument("--correlation", type=float)
    sp.add_argument("--confound-weight", dest="confound_weight", type=float)
    sp.add_argument("--noise", type=float)

    sp = common(sub.add_parser("train", help="train one classifier per attribute"))
    sp.add_argument("--per-class", dest="per_class", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--hidden-width", dest="hidden_width", type=int)
    sp.add_argument("--hidden-layers", dest="hidden_layers", type=int, choices=(1, 2))
    sp.add_argument("--weight-decay", dest="weight_decay", type=float)
    sp.add_argument("--optimizer", choices=("gd", "adam"))
    sp.add_argument("--heldout", type=int)

    def editing(sp):
        sp.add_argument("--classifiers")
        sp.add_argument("--target")
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--max-steps", dest="max_steps", type=int)
        sp.add_argument("--margin", type=float)
        sp.add_argument("--boundary", type=int, help="edit N boundary-sampled bank latents")
        sp.add_argument("--frozen-mask", dest="frozen_mask", action="store_true", default=None)
        return sp

    sp = editing(common(sub.add_parser("edit", help="edit latents, write JSONL trajectories")))
    sp.add_argument("--target-class", dest="target_class")
    sp.add_argument("--exclude", help="attr:count[,attr:count...]")
    sp.add_argument("--index", type=int, action="append", help="bank row (repeatable)")
    sp.add_argument("--z-file", dest="z_file", help="JSON list (or list of lists) of latents")
    sp.add_argument("--direction", choices=("flip", "increase", "decrease"))
    sp.add_argument("--stop-on", dest="stop_on", choices=("oracle", "classifier"))
    sp.add_argument("--raw-gradient", dest="raw_gradient", action="store_true", default=None)
    sp.add_argument("--dims", help="editable channels, e.g. 0:96,200")
    sp.add_argument("--name", help="output subdirectory under trajectories/")
    sp.add_argument("--workers", type=int)

    sp = common(sub.add_parser("eval", help="accuracy / AD metrics over trajectories"))
    sp.add_argument("--trajectories", action="append", help="[name=]DIR (repeatable)")
    sp.add_argument("--attrs", help="comma-separated attribute set (default: binary ones)")
    sp.add_argument("--bins", type=int)
    sp.add_argument("--scatter", help="attr_x,attr_y")

    sp = editing(common(sub.add_parser("sweep", help="exclusion-count sweep")))
    sp.add_argument("--confound")
    sp.add_argument("--counts")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "edit": cmd_edit, "eval": cmd_eval,
            "sweep": cmd_sweep}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if not args.command:
            raise UsageError("a subcommand is required: " + "|".join(COMMANDS))
        s = _settings(args)
        return COMMANDS[args.command](s)
    except LatentCtrlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

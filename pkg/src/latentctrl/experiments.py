"""End-to-end experiment routines on a synthetic world.

These glue the world, classifiers, editing and metrics together. The CLI and
the acceptance tests both call into here so they measure the same thing.
Editing runs stop on the world's oracle logits (the evaluation scorer) and are
scored by the oracle, never by the classifiers that produced the directions.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import classifier as C
from . import control as K
from . import metrics as M
from . import synthworld as sw


def train_classifiers(world, cfg, rng, attrs=None):
    """One classifier per attribute, each on ``cfg.examples_per_class`` per class."""
    out = {}
    for attr_id in attrs or world.attribute_ids:
        a = world.attribute(attr_id)
        data = sw.make_training_set(world, attr_id, cfg.examples_per_class,
                                    rng.spawn(f"train:{attr_id}"))
        seed = int(rng.spawn(f"init:{attr_id}").seed)
        out[attr_id] = C.train(data, a.spec, _replace_seed(cfg, seed))
    return out


def _replace_seed(cfg, seed):
    from dataclasses import replace
    return replace(cfg, seed=seed)


def heldout_accuracy(world, clf, rng, n=1000):
    Z = sw.sample_latents(world, n, rng)
    return float(np.mean(C.predict(clf, Z) == sw.oracle_labels(world, clf.attr.id, Z)))


def oracle_scorer(world, attrs=None):
    attrs = list(attrs or world.attribute_ids)

    def score(z):
        return {a: sw.oracle_score(world, a, z) for a in attrs}
    return score


def oracle_bank_stats(world, bank, attrs=None):
    attrs = list(attrs or world.attribute_ids)
    return M.bank_statistics({a: sw.oracle_scores(world, a, bank.z) for a in attrs})


def toward_flip_alpha(world, attr_id, z, step=K.DEFAULT_STEP):
    """Signed step that pushes a binary attribute across its oracle boundary."""
    return step if sw.oracle_score(world, attr_id, z)[0] <= 0 else -step


def edit_one(world, clfs, z0, target, target_class=0, exclude=(), policy=None,
             alpha=None, stop_on="oracle"):
    """Edit one latent. ``exclude`` is ((attr, count), ...)."""
    clf = clfs[target]
    if policy is None:
        policy = K.StepPolicy()
    if alpha is None and clf.attr.binary:
        alpha = toward_flip_alpha(world, target, z0, abs(policy.alpha))
    if alpha is not None:
        from dataclasses import replace
        policy = replace(policy, alpha=alpha)
    spec = K.DisentangleSpec(target, target_class, tuple(exclude))
    scorer = (lambda z: sw.oracle_score(world, target, z)) if stop_on == "oracle" else None
    return K.manipulate(z0, clf, target_class, clfs, spec, policy, clfs, scorer)


def edit_many(world, clfs, Z, target, target_class=0, exclude=(), policy=None,
              stop_on="oracle", workers=1):
    """Edit each row of ``Z``; results are returned in input order."""
    def job(z):
        return edit_one(world, clfs, z, target, target_class, exclude, policy, stop_on=stop_on)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(job, Z))
    return [job(z) for z in Z]


def oracle_drift(world, trajectories, attr):
    """|oracle score change| of ``attr`` from first to last step, per trajectory."""
    return np.array([float(np.max(np.abs(sw.oracle_score(world, attr, t.zs[-1])
                                         - sw.oracle_score(world, attr, t.zs[0]))))
                     for t in trajectories])


@dataclass
class PairedResult:
    target: str
    raw: M.EvalRun
    masked: M.EvalRun
    raw_traj: list
    masked_traj: list
    accuracy_raw: float
    accuracy_masked: float
    ad_raw: M.AdCurve
    ad_masked: M.AdCurve


def paired_disentanglement(world, clfs, bank, target, exclude, attrs, count=300,
                           margin=0.5, policy=None, n_bins=M.DEFAULT_BINS, stats=None):
    """Edit boundary-sampled latents with and without channel exclusion."""
    sub = sw.boundary_sample(world, bank, target, margin, count)
    Z = bank.z[sub.indices]
    score = oracle_scorer(world, attrs)
    stats = stats or oracle_bank_stats(world, bank, attrs)
    raw_t = edit_many(world, clfs, Z, target, policy=policy)
    masked_t = edit_many(world, clfs, Z, target, exclude=exclude, policy=policy)
    raw = M.score_trajectories(raw_t, "oracle", score, stats)
    masked = M.score_trajectories(masked_t, "oracle", score, stats)
    edges = M.shared_edges([raw, masked], target, n_bins, attrs)
    return PairedResult(
        target, raw, masked, raw_t, masked_t,
        M.manipulation_accuracy(raw, attrs, [target])[target],
        M.manipulation_accuracy(masked, attrs, [target])[target],
        M.attribute_dependency(raw, target, edges, attrs),
        M.attribute_dependency(masked, target, edges, attrs))


def exclusion_sweep(world, clfs, Z, target, confound, counts, policy=None):
    """Mean oracle drift of ``confound`` per exclusion count (same latents each time)."""
    out = {}
    for c in counts:
        trajs = edit_many(world, clfs, Z, target, exclude=((confound, c),), policy=policy)
        out[c] = (float(np.mean(oracle_drift(world, trajs, confound))), trajs)
    return out


def multiclass_trials(world, clfs, attr_id, n_trials, rng, max_steps=200, step=K.DEFAULT_STEP):
    """For each (source, target) class pair, edit ``n_trials`` source latents
    along the target's Jacobian row. Returns {(src, tgt): (oracle hit rate,
    classifier hit rate)}."""
    a = world.attribute(attr_id)
    clf = clfs[attr_id]
    k = a.num_classes
    pool = {c: [] for c in range(k)}
    r = 0
    while any(len(v) < n_trials for v in pool.values()):
        Z = sw.sample_latents(world, 2048, rng.spawn(f"pool{r}"))
        r += 1
        for z, y in zip(Z, sw.oracle_labels(world, attr_id, Z)):
            if len(pool[int(y)]) < n_trials:
                pool[int(y)].append(z)
    policy = K.StepPolicy(alpha=step, max_steps=max_steps)
    out = {}
    for src in range(k):
        for tgt in range(k):
            if src == tgt:
                continue
            oracle_hits = clf_hits = 0
            for z in pool[src]:
                t = K.manipulate(z, clf, tgt, {}, None, policy, {attr_id: clf},
                                 lambda zz: sw.oracle_score(world, attr_id, zz))
                oracle_hits += int(np.argmax(sw.oracle_score(world, attr_id, t.zs[-1])) == tgt)
                clf_hits += int(np.argmax(C.forward(clf, t.zs[-1])) == tgt)
            out[(src, tgt)] = (oracle_hits / n_trials, clf_hits / n_trials)
    return out


def direction_cosines(clf, Z, class_j=0):
    """Cosine similarity between gradient directions at consecutive pairs of ``Z``."""
    cos = []
    for z1, z2 in zip(Z[0::2], Z[1::2]):
        g1, g2 = C.gradient_row(clf, z1, class_j), C.gradient_row(clf, z2, class_j)
        cos.append(float(g1 @ g2 / (np.linalg.norm(g1) * np.linalg.norm(g2))))
    return np.array(cos)

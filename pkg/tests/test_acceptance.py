"""Exit-gate checks, one per criterion. Each prints a single PASS/FAIL line.

Run with pytest (the lines are repeated in the terminal summary) or directly:
``python tests/test_acceptance.py``. Criteria 4 to 7 share one trained
network per trainer seed on the default synthetic pair.
"""
from __future__ import annotations

import dataclasses
import functools
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from gradcases import CASES, POINTS, TOLERANCE, worst_error  # noqa: E402
from test_evaluation import check_oracle_equivalence  # noqa: E402

from mlwc import tensor as T  # noqa: E402
from mlwc.checkpoint import from_bytes, pack_model, to_bytes  # noqa: E402
from mlwc.cli import train_attgen, train_model  # noqa: E402
from mlwc.config import RunConfig, parse_config  # noqa: E402
from mlwc.data import SynthSpec, synth_generate  # noqa: E402
from mlwc.evaluation import EvalConfig, ablate, branches_of, combine, evaluate  # noqa: E402
from mlwc.heads import LEVELS, cosine_logits  # noqa: E402
from mlwc.losses import cosine_softmax_loss  # noqa: E402
from mlwc.netpbm import emit_netpbm, parse_netpbm  # noqa: E402
from mlwc.trainer import TrainConfig, freeze_weights, train_stage1, train_stage2  # noqa: E402
from mlwc.model import MultiLevelNet  # noqa: E402
from mlwc.weightgen import avg_gen, episode_accuracy  # noqa: E402

RESULTS: list[str] = []

# Criterion 5 uses three trainer seeds on the default pair (data seed 7).
SEEDS = (0, 1, 2)
TRAIN = TrainConfig(stage1_epochs=40, lr_step=15, stage2_lr=0.01, stage2_epochs=20, plateau_stop=False)
EVAL = EvalConfig(shots=(1,), trials=100)
SAC_REPEATS = 200


def report(n: int, ok: bool, detail: str) -> bool:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line, flush=True)
    return ok


@functools.lru_cache(maxsize=None)
def default_pair(novel_family: str = "A"):
    return synth_generate(SynthSpec(novel_family=novel_family))


@functools.lru_cache(maxsize=None)
def trained(seed: int):
    """(stage-1 net, stage-2 net, frozen weights, seconds) on the default pair."""
    pair = default_pair()
    cfg = dataclasses.replace(TRAIN, seed=seed)
    start = time.process_time()
    rng = np.random.default_rng(seed)
    net = MultiLevelNet.init(RunConfig().backbone, RunConfig().heads, pair.base_train.n_classes, rng, pair.base_train.label_space)
    net, _ = train_stage1(net, pair.base_train, cfg)
    stage1 = net.copy()
    frozen = freeze_weights(net)
    net, _ = train_stage2(net, frozen, pair.base_train, cfg)
    return stage1, net, frozen, time.process_time() - start


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------


def test_criterion_1_gradients():
    start = time.process_time()
    worst = {name: worst_error(name) for name in CASES}
    elapsed = time.process_time() - start
    name = max(worst, key=worst.get)
    ok = worst[name] <= TOLERANCE and elapsed < 60
    assert report(1, ok, f"{len(CASES)} ops x {POINTS} points, worst rel error {worst[name]:.1e} ({name}) <= {TOLERANCE:g}; {elapsed:.1f} CPU-s < 60")


def test_criterion_2_normalization_and_additivity():
    rng = np.random.default_rng(2)
    failures = []
    worst_norm = 0.0
    for _ in range(200):
        v = rng.standard_normal((5, int(rng.integers(1, 9)))) * 10.0 ** rng.uniform(-3, 3)
        worst_norm = max(worst_norm, float(np.max(np.abs(np.linalg.norm(T.l2_normalize(v, axis=1).value, axis=1) - 1))))
    if worst_norm > 1e-12:
        failures.append(f"unit norm off by {worst_norm:.1e}")

    for _ in range(50):
        f, w, s = rng.standard_normal((6, 4)), rng.standard_normal((4, 5)), float(rng.uniform(1, 20))
        y = rng.integers(0, 5, size=6)
        a, b = rng.uniform(0.1, 10, size=2)
        base = cosine_softmax_loss(f, w, np.array(s), y, weight_decay=0.0).value
        scaled = cosine_softmax_loss(a * f, b * w, np.array(s), y, weight_decay=0.0).value
        if abs(base - scaled) > 1e-12 * max(1.0, abs(base)):
            failures.append("cosine loss not rescaling invariant")
            break
        lo = cosine_logits(f, w, np.array(s)).value.argmax(1)
        hi = cosine_logits(f, w, np.array(s * 7.3)).value.argmax(1)
        if not np.array_equal(lo, hi):
            failures.append("argmax depends on s")
            break

    pair = synth_generate(SynthSpec(image_size=16, jitter=2, samples_per_class=4, test_per_class=3, n_base_classes=4, n_novel_classes=3))
    from conftest import TINY_BACKBONE, TINY_HEADS

    net = MultiLevelNet.init(TINY_BACKBONE, TINY_HEADS, 4, np.random.default_rng(0), pair.base_train.label_space)
    model = combine(branches_of(net))
    emb = net.embed(pair.base_test.images)
    manual = sum(_unit(emb[lv]) @ _unit(net.classifier(lv).T).T for lv in LEVELS)
    gap = float(np.max(np.abs(model.scores(model.transform(pair.base_test.images)) - manual)))
    if gap > 1e-12:
        failures.append(f"additivity off by {gap:.1e}")

    for _ in range(50):
        k, d = int(rng.integers(1, 6)), int(rng.integers(2, 7))
        support = rng.standard_normal((k, d))
        g = avg_gen(support)
        oracle = _unit(np.mean(_unit(support), axis=0))
        if k == 1 and np.max(np.abs(g - _unit(support[0]))) > 1e-12:
            failures.append("AvgGen k=1 is not the normalized feature")
        if np.max(np.abs(g - avg_gen(support[rng.permutation(k)]))) > 1e-12:
            failures.append("AvgGen depends on support order")
        if np.max(np.abs(g - oracle)) > 1e-12:
            failures.append("AvgGen differs from its oracle")
    assert report(2, not failures, "; ".join(failures) or f"unit norm within {worst_norm:.0e}, rescaling, s-argmax, additivity within {gap:.0e}, AvgGen k=1/permutation/oracle")


def test_criterion_3_metric_oracle():
    pair = synth_generate(SynthSpec(image_size=16, jitter=2, samples_per_class=6, test_per_class=5, n_base_classes=5, n_novel_classes=4))
    from conftest import TINY_BACKBONE, TINY_HEADS

    net = MultiLevelNet.init(TINY_BACKBONE, TINY_HEADS, 5, np.random.default_rng(3), pair.base_train.label_space)
    try:
        n = check_oracle_equivalence(net, pair, n_episodes=50, seed=3)
        ok, detail = n == 50, f"{n} random episodes match the brute-force oracle exactly; novel/novel >= novel/all on each"
    except AssertionError as exc:
        ok, detail = False, f"mismatch {exc}"
    assert report(3, ok, detail)


def _sac(net, pair, repeats=SAC_REPEATS):
    """Sample-as-classifier accuracy on base-test, combined and per branch.

    One random base-train sample per class serves as that class's weight;
    rows of ``transform`` are already unit per branch block.
    """
    model = combine(branches_of(net))
    train = model.transform(pair.base_train.images)
    test = model.transform(pair.base_test.images)
    bounds = np.cumsum([0] + model.block_dims)
    rng = np.random.default_rng(4)
    accs = {name: [] for name in ("combined",) + model.levels}
    for _ in range(repeats):
        idx = [rng.choice(pair.base_train.indices_of(c)) for c in range(pair.base_train.n_classes)]
        accs["combined"].append(np.mean((test @ train[idx].T).argmax(1) == pair.base_test.labels))
        for lv, lo, hi in zip(model.levels, bounds[:-1], bounds[1:]):
            accs[lv].append(np.mean((test[:, lo:hi] @ train[idx, lo:hi].T).argmax(1) == pair.base_test.labels))
    return {name: 100.0 * float(np.mean(a)) for name, a in accs.items()}


def _centric(net, frozen, pair):
    emb = net.embed(pair.base_train.images)
    y = pair.base_train.labels
    return {lv: float(np.mean(np.sum((_unit(emb[lv]) - _unit(frozen[lv].T)[y]) ** 2, axis=1))) for lv in LEVELS}


def test_criterion_4_weight_centric_geometry():
    pair = default_pair()
    stage1, stage2, frozen, seconds = trained(0)
    before, after = _centric(stage1, frozen, pair), _centric(stage2, frozen, pair)
    sac1, sac2 = _sac(stage1, pair), _sac(stage2, pair)
    closer = all(after[lv] < before[lv] for lv in LEVELS)
    ok = closer and sac2["combined"] - sac1["combined"] >= 2.0 and seconds <= 20 * 60
    dist = ", ".join(f"{lv} {before[lv]:.3f}->{after[lv]:.3f}" for lv in LEVELS)
    per = ", ".join(f"{lv} {sac1[lv]:.1f}->{sac2[lv]:.1f}" for lv in LEVELS)
    assert report(
        4,
        ok,
        f"centric distance {dist}; sample-as-classifier {sac1['combined']:.1f} -> {sac2['combined']:.1f} (need +2.0; per branch {per}); train {seconds:.0f} CPU-s",
    )


def test_criterion_5_ablation_ordering():
    pair = default_pair()
    failures, parts = [], []
    for seed in SEEDS:
        stage1, stage2, _, _ = trained(seed)
        reps = ablate(stage1, stage2, pair, EVAL, rows=("H(baseline)", "H+WC", "(H+WC)+M", "(H+WC+M)+R"))
        nn = {row: (rep.mean("novel/novel", 1), rep.ci("novel/novel", 1)) for row, rep in reps.items()}
        for lo, hi in (("H(baseline)", "H+WC"), ("H+WC", "(H+WC)+M")):
            (m0, c0), (m1, c1) = nn[lo], nn[hi]
            if not (m1 - m0 >= 1.0 and m1 - c1 > m0 + c0):
                failures.append(f"seed {seed}: {hi} {m1:.1f}+-{c1:.1f} vs {lo} {m0:.1f}+-{c0:.1f}")
        na_m = reps["(H+WC)+M"].mean("novel/all", 1)
        na_r = reps["(H+WC+M)+R"].mean("novel/all", 1)
        if na_r < na_m:
            failures.append(f"seed {seed}: novel/all +R {na_r:.1f} < {na_m:.1f}")
        parts.append(f"seed {seed} N/N " + " -> ".join(f"{nn[r][0]:.1f}" for r in ("H(baseline)", "H+WC", "(H+WC)+M")) + f", N/A +M {na_m:.1f} +R {na_r:.1f}")
    assert report(5, not failures, "; ".join(parts) + ("; failed: " + "; ".join(failures) if failures else ""))


def test_criterion_6_transferability():
    pair = default_pair("B")
    stage1, stage2, _, _ = trained(0)
    reps = ablate(stage1, stage2, pair, EVAL, rows=("Mid-level", "Relation-level"))
    mid, rel = reps["Mid-level"].mean("novel/novel", 1), reps["Relation-level"].mean("novel/novel", 1)
    assert report(6, mid >= rel + 5.0, f"family B novel, k=1: mid {mid:.1f} vs relation {rel:.1f} (need +5.0)")


def test_criterion_7_attgen():
    pair = default_pair()
    _, net, _, _ = trained(0)
    config = RunConfig()
    params, scores = train_attgen(net, pair, config)
    cfg = config.weightgen
    test_feats = net.embed(pair.base_test.images)
    feats = net.embed(pair.base_train.images)
    bad_rows, n_rows = 0, 0
    for lv in LEVELS:
        sink: list = []
        episode_accuracy(feats[lv], pair.base_train.labels, net.classifier(lv), params[lv], cfg, cfg.seed, test_feats[lv], pair.base_test.labels, attention_sink=sink)
        for att in sink:
            rows = att.reshape(-1, att.shape[-1])
            n_rows += len(rows)
            bad_rows += int(np.sum((rows < 0).any(1) | (np.abs(rows.sum(1) - 1) > 1e-12)))
    worst = min(scores[s][1] - scores[s][0] for s in scores)
    ok = worst >= -0.5 and bad_rows == 0
    detail = ", ".join(f"{s} att {a:.1f} vs avg {v:.1f}" for s, (v, a) in scores.items())
    assert report(7, ok, f"{detail}; {n_rows - bad_rows}/{n_rows} attention rows are distributions")


def test_criterion_8_determinism_and_formats():
    text = "\n".join(
        [
            "data.image_size = 16",
            "data.jitter = 2",
            "data.samples_per_class = 6",
            "data.test_per_class = 4",
            "data.n_base_classes = 4",
            "data.n_novel_classes = 3",
            "backbone.stage_channels = 4,8,8",
            "heads.embed_dim = 8",
            "heads.mid_channels = 4",
            "heads.relation_hidden = 8",
            "trainer.stage1_epochs = 3",
            "trainer.stage2_epochs = 2",
            "trainer.batch_size = 8",
            "eval.shots = 1,2",
            "eval.trials = 5",
        ]
    )
    failures = []
    blobs, tsvs = [], []
    for _ in range(2):
        config = parse_config(text)
        pair = synth_generate(config.data)
        net, _, config = train_model(config, pair)
        blobs.append(to_bytes(pack_model(net, config)))
        tsvs.append(evaluate(combine(branches_of(net)), pair, config.eval).to_tsv())
    if blobs[0] != blobs[1]:
        failures.append("checkpoints differ between identical runs")
    if tsvs[0] != tsvs[1]:
        failures.append("TSV reports differ between identical runs")
    if to_bytes(from_bytes(blobs[0])) != blobs[0]:
        failures.append("checkpoint does not round-trip bit-exactly")
    rng = np.random.default_rng(8)
    for c in (1, 3):
        img = rng.integers(0, 256, size=(c, 5, 7)) / 255.0
        data = emit_netpbm(img)
        if not np.array_equal(parse_netpbm(data), img) or emit_netpbm(parse_netpbm(data)) != data:
            failures.append(f"netpbm {c}-channel round trip")
    assert report(8, not failures, "; ".join(failures) or f"identical checkpoints ({len(blobs[0])} B) and TSV across runs; checkpoint and PGM/PPM round trips bit-exact")


if __name__ == "__main__":
    outcomes = []
    for fn in [v for k, v in sorted(globals().items()) if k.startswith("test_criterion_")]:
        try:
            fn()
            outcomes.append(True)
        except AssertionError:
            outcomes.append(False)
    sys.exit(0 if all(outcomes) else 1)

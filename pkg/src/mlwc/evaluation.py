"""Multi-level model combination and the Novel/Novel, Novel/All, All evaluation harness."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import DataError, DatasetPair, random_crops, sample_episode
from .heads import LEVELS
from .model import MultiLevelNet
from .weightgen import att_gen_matrix, avg_gen_matrix

METRICS = ("novel/novel", "novel/all", "all")


def _unit(x: np.ndarray, axis: int) -> np.ndarray:
    return T.l2_normalize(x, axis=axis).value


@dataclass(frozen=True)
class BranchModel:
    """One level's feature extractor (a level of a trained network) and its classifier."""

    net: MultiLevelNet
    level: str

    @property
    def weight(self) -> np.ndarray:
        return self.net.classifier(self.level)

    @property
    def scale(self) -> float:
        return self.net.scale(self.level)


class FeatureCache:
    """Memoizes per-network embeddings of image arrays."""

    def __init__(self):
        self._store: dict = {}

    def embed(self, net: MultiLevelNet, images: np.ndarray) -> dict[str, np.ndarray]:
        key = (id(net), id(images), images.shape)
        if key not in self._store:
            self._store[key] = (net, images, net.embed(images))
        return self._store[key][2]


@dataclass
class CombinedModel:
    """Concatenated per-level normalized features scored against stacked per-level unit weights.

    ``base_weights`` has shape (len(branches) * d, n_base); every column is a
    stack of unit blocks, one per branch.
    """

    branches: tuple[BranchModel, ...]
    base_weights: np.ndarray
    novel_weights: np.ndarray | None = None
    label_space: tuple[str, ...] = ()
    novel_label_space: tuple[str, ...] = ()
    cache: FeatureCache = field(default_factory=FeatureCache, repr=False, compare=False)

    @property
    def levels(self) -> tuple[str, ...]:
        return tuple(b.level for b in self.branches)

    @property
    def block_dims(self) -> list[int]:
        return [b.weight.shape[0] for b in self.branches]

    @property
    def dim(self) -> int:
        return sum(self.block_dims)

    def branch_features(self, images: np.ndarray) -> list[np.ndarray]:
        return [self.cache.embed(b.net, images)[b.level] for b in self.branches]

    def combine_features(self, per_branch: list[np.ndarray]) -> np.ndarray:
        return np.concatenate([_unit(f, axis=-1) for f in per_branch], axis=-1)

    def transform(self, images: np.ndarray) -> np.ndarray:
        """f_C: per-branch normalized features, concatenated."""
        return self.combine_features(self.branch_features(images))

    @property
    def weights(self) -> np.ndarray:
        if self.novel_weights is None:
            return self.base_weights
        return np.concatenate([self.base_weights, self.novel_weights], axis=1)

    def scores(self, combined_features: np.ndarray) -> np.ndarray:
        # base and novel blocks scored separately so extension cannot perturb base scores
        base = combined_features @ self.base_weights
        if self.novel_weights is None:
            return base
        return np.concatenate([base, combined_features @ self.novel_weights], axis=1)

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.scores(self.transform(images)).argmax(axis=1)


def combine(branches) -> CombinedModel:
    """Stack the given branch models into one model (any nonempty subset of levels)."""
    branches = tuple(branches)
    if not branches:
        raise ValueError("combine needs at least one branch")
    spaces = {b.net.label_space for b in branches}
    counts = {b.weight.shape[1] for b in branches}
    if len(spaces) != 1 or len(counts) != 1:
        raise ValueError("branches were trained on different base label spaces")
    base = np.concatenate([_unit(b.weight, axis=0) for b in branches], axis=0)
    return CombinedModel(branches, base, label_space=branches[0].net.label_space)


def branches_of(net: MultiLevelNet, levels=LEVELS) -> tuple[BranchModel, ...]:
    return tuple(BranchModel(net, lv) for lv in levels)


# ---------------------------------------------------------------------------
# novel weights


@dataclass
class ExtendOptions:
    generator: str = "avg"  # avg | att
    crops: int = 1
    crop_fraction: float = 0.8
    novel_norm: str = "per-branch"  # per-branch | whole
    attgen: dict | None = None  # level (or "combined") -> AttGenParams
    attgen_scope: str = "per-branch"

    def __post_init__(self):
        if self.generator not in ("avg", "att"):
            raise ValueError("generator must be 'avg' or 'att'")
        if self.crops not in (1, 5):
            raise ValueError("crops must be 1 or 5")
        if self.novel_norm not in ("per-branch", "whole"):
            raise ValueError("novel_norm must be 'per-branch' or 'whole'")
        if self.attgen_scope not in ("per-branch", "combined"):
            raise ValueError("attgen_scope must be 'per-branch' or 'combined'")
        if self.generator == "att" and not self.attgen:
            raise ValueError("generator 'att' needs trained AttGen parameters")


def novel_weights_from_features(model: CombinedModel, support_feats: list[np.ndarray], options: ExtendOptions, names=None) -> np.ndarray:
    """Novel columns from per-branch support features, each of shape (n_novel, k, d)."""
    if options.generator == "att" and options.attgen_scope == "combined":
        z = np.stack([model.combine_features([f[:, i] for f in support_feats]) for i in range(support_feats[0].shape[1])], axis=1)
        w, _ = att_gen_matrix(z, model.base_weights, options.attgen["combined"])
        return w
    if options.novel_norm == "whole" and options.generator == "avg":
        z = np.stack([model.combine_features([f[:, i] for f in support_feats]) for i in range(support_feats[0].shape[1])], axis=1)
        proto = z.mean(axis=1)
        return _unit(proto, axis=1).T
    blocks = []
    for branch, feats in zip(model.branches, support_feats):
        if options.generator == "avg":
            blocks.append(avg_gen_matrix(feats, names))
        else:
            w, _ = att_gen_matrix(feats, branch.weight, options.attgen[branch.level])
            blocks.append(w)
    w = np.concatenate(blocks, axis=0)
    if options.novel_norm == "whole":
        w = _unit(w, axis=0)
    return w


def extend(model: CombinedModel, support_images: np.ndarray, options: ExtendOptions = ExtendOptions(), rng=None, names=()) -> CombinedModel:
    """Attach novel-class columns built from ``support_images`` of shape (n_novel, k, C, H, W).

    With ``crops=5`` each support image contributes the mean feature of five
    random crops.
    """
    n, k = support_images.shape[:2]
    flat = support_images.reshape((n * k,) + support_images.shape[2:])
    if options.crops == 5:
        rng = np.random.default_rng(0) if rng is None else rng
        crops = np.concatenate([random_crops(im, 5, rng, options.crop_fraction) for im in flat])
        per_branch = [f.reshape(n * k, 5, -1).mean(axis=1) for f in model.branch_features(crops)]
    else:
        per_branch = model.branch_features(flat)
    per_branch = [f.reshape(n, k, -1) for f in per_branch]
    w = novel_weights_from_features(model, per_branch, options, names or None)
    return CombinedModel(model.branches, model.base_weights, w, model.label_space, tuple(names), model.cache)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricReport:
    """Per (metric, shots) accuracies over trials, in percent."""

    trials: dict = field(default_factory=dict)  # (metric, k) -> list of per-trial accuracies
    top_k: int = 1

    def add(self, metric: str, k: int, accuracy: float) -> None:
        self.trials.setdefault((metric, k), []).append(float(accuracy))

    def shots(self) -> list[int]:
        return sorted({k for _, k in self.trials})

    def summary(self, metric: str, k: int) -> tuple[float, float, int, bool]:
        """(mean, 95% CI half-width, trial count, degenerate flag)."""
        acc = np.asarray(self.trials[(metric, k)])
        n = len(acc)
        mean = float(acc.mean())
        if n < 2:
            return mean, 0.0, n, True
        return mean, 1.96 * float(acc.std(ddof=1)) / math.sqrt(n), n, False

    def mean(self, metric: str, k: int) -> float:
        return self.summary(metric, k)[0]

    def ci(self, metric: str, k: int) -> float:
        return self.summary(metric, k)[1]

    def rows(self):
        for k in self.shots():
            for metric in METRICS:
                if (metric, k) in self.trials:
                    yield (metric, k) + self.summary(metric, k)

    def to_tsv(self) -> str:
        lines = ["metric\tk\tmean\tci\ttrials"]
        for metric, k, mean, ci, n, degenerate in self.rows():
            lines.append(f"{metric}\t{k}\t{mean:.4f}\t{ci:.4f}\t{n}" + ("\tsingle-trial" if degenerate else ""))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "top_k": self.top_k,
            "results": [
                {"metric": m, "k": k, "mean": round(mean, 6), "ci95": round(ci, 6), "trials": n, "single_trial": d}
                for m, k, mean, ci, n, d in self.rows()
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def topk_correct(scores: np.ndarray, labels: np.ndarray, k: int = 1) -> np.ndarray:
    """Whether each row's label is among its ``k`` best scores (ties broken by lower index)."""
    if k == 1:
        return scores.argmax(axis=1) == labels
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return np.any(order == labels[:, None], axis=1)


def episode_metrics(model: CombinedModel, novel_q: np.ndarray, novel_y: np.ndarray, base_q: np.ndarray, base_y: np.ndarray, top_k: int = 1) -> dict[str, float]:
    """Accuracies (percent) of one extended model on combined query features."""
    n_base = model.base_weights.shape[1]
    novel_scores = model.scores(novel_q)
    nn = topk_correct(novel_scores[:, n_base:], novel_y, top_k)
    na = topk_correct(novel_scores, novel_y + n_base, top_k)
    ba = topk_correct(model.scores(base_q), base_y, top_k) if len(base_q) else np.zeros(0, bool)
    return {
        "novel/novel": 100.0 * nn.mean(),
        "novel/all": 100.0 * na.mean(),
        "all": 100.0 * np.concatenate([na, ba]).mean(),
    }


@dataclass(frozen=True)
class EvalConfig:
    shots: tuple[int, ...] = (1, 2, 5, 10, 20)
    trials: int = 100
    seed: int = 0
    top_k: int = 1
    generator: str = "avg"
    crops: int = 1
    crop_fraction: float = 0.8
    novel_norm: str = "per-branch"

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.shots or min(self.shots) < 1:
            raise ValueError("shots must be positive integers")


def evaluate(model: CombinedModel, pair: DatasetPair, config: EvalConfig = EvalConfig(), attgen=None, attgen_scope="per-branch", episodes=None) -> MetricReport:
    """Repeat episodes per shot count and aggregate the three accuracies.

    Trial ``t`` at ``k`` shots uses the RNG stream ``(seed, k, t)``, so
    reports are reproducible and independent of evaluation order.
    """
    options = ExtendOptions(config.generator, config.crops, config.crop_fraction, config.novel_norm, attgen, attgen_scope)
    pool = pair.novel_train_pool
    max_pool = min(len(pool.indices_of(c)) for c in range(pool.n_classes))
    for k in config.shots:
        if k > max_pool:
            raise DataError(f"k={k} exceeds the smallest novel pool ({max_pool} samples)")
    novel_q = model.transform(pair.novel_test.images)
    base_q = model.transform(pair.base_test.images)
    pool_feats = model.branch_features(pool.images) if config.crops == 1 else None
    report = MetricReport(top_k=config.top_k)
    for k in config.shots:
        for t in range(config.trials):
            rng = np.random.default_rng([config.seed, k, t])
            ep = sample_episode(pair, k, rng, seed=t) if episodes is None else episodes[(k, t)]
            if pool_feats is not None:
                support = [f[ep.support] for f in pool_feats]
                w = novel_weights_from_features(model, support, options, pool.label_space)
                extended = CombinedModel(model.branches, model.base_weights, w, model.label_space, pool.label_space, model.cache)
            else:
                extended = extend(model, pool.images[ep.support], options, rng, pool.label_space)
            accs = episode_metrics(
                extended,
                novel_q[ep.novel_queries],
                pair.novel_test.labels[ep.novel_queries],
                base_q[ep.base_queries],
                pair.base_test.labels[ep.base_queries],
                config.top_k,
            )
            for metric, acc in accs.items():
                report.add(metric, k, acc)
    return report


# ---------------------------------------------------------------------------
# ablation table

ABLATION_ROWS = (
    "H(baseline)",
    "H+WC",
    "(H+WC)+M",
    "(H+WC+M)+R",
    "Mid-level",
    "High-level",
    "Relation-level",
    "Multi-level",
)


def ablation_models(baseline: MultiLevelNet | None, mlwc: MultiLevelNet | None, rows=ABLATION_ROWS) -> dict[str, CombinedModel]:
    """Model per ablation row. Per-level rows use one branch; cumulative rows stack branches."""
    cache = FeatureCache()
    out = {}
    for row in rows:
        if row == "H(baseline)":
            if baseline is None:
                raise ValueError("row 'H(baseline)' needs the baseline (no weight-centric) checkpoint")
            levels, net = ("high",), baseline
        else:
            if mlwc is None:
                raise ValueError(f"row {row!r} needs the weight-centric checkpoint")
            net = mlwc
            levels = {
                "H+WC": ("high",),
                "(H+WC)+M": ("mid", "high"),
                "(H+WC+M)+R": LEVELS,
                "Mid-level": ("mid",),
                "High-level": ("high",),
                "Relation-level": ("relation",),
                "Multi-level": LEVELS,
            }.get(row)
            if levels is None:
                raise ValueError(f"unknown ablation row {row!r}")
        model = combine(branches_of(net, levels))
        model.cache = cache
        out[row] = model
    return out


def ablate(baseline: MultiLevelNet | None, mlwc: MultiLevelNet | None, pair: DatasetPair, config: EvalConfig = EvalConfig(), rows=ABLATION_ROWS) -> dict[str, MetricReport]:
    return {row: evaluate(model, pair, config) for row, model in ablation_models(baseline, mlwc, rows).items()}


def ablation_tsv(reports: dict[str, MetricReport]) -> str:
    lines = ["row\tmetric\tk\tmean\tci\ttrials"]
    for row, rep in reports.items():
        for metric, k, mean, ci, n, _ in rep.rows():
            lines.append(f"{row}\t{metric}\t{k}\t{mean:.4f}\t{ci:.4f}\t{n}")
    return "\n".join(lines) + "\n"

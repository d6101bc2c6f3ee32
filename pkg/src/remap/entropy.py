"""Entropy weighting: score each (layer, region) by how well its pooled
vector separates matching from non-matching image pairs.

The score is KL(P_match || P_nonmatch) between histograms of pairwise
region-vector distances.  Regions whose distance distributions coincide
score 0 and contribute nothing; strongly discriminative regions get
proportionally larger aggregation weights.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aggregate import normalized_region_rows
from .errors import ContractError, DataError
from .grid import build_grid
from .tensorio import DatasetManifest, TensorCache

DIRECTION = "kl(match||nonmatch)"
DEFAULT_BINS = 64
DEFAULT_EPSILON = 1e-6
DEFAULT_MIN_SAMPLES = 50


def sample_pairs(manifest: DatasetManifest, pair_budget: int, seed: int):
    """Up to pair_budget matching pairs and equally many non-matching ones.

    Pairs are drawn without replacement from all same-class and
    cross-class unordered pairs, deterministically from the seed.
    Entries without a class_id are skipped.
    """
    if pair_budget < 1:
        raise ContractError(f"pair_budget must be >= 1, got {pair_budget}")
    labelled = [e for e in manifest if e.class_id is not None]
    matching = []
    nonmatching = []
    for i, a in enumerate(labelled):
        for b in labelled[i + 1:]:
            (matching if a.class_id == b.class_id else nonmatching).append(
                (a.image_id, b.image_id))
    if not matching or not nonmatching:
        raise DataError(
            f"need both matching and non-matching pairs, have "
            f"{len(matching)} matching / {len(nonmatching)} non-matching"
        )
    rng = np.random.default_rng(seed)
    rng.shuffle(matching)
    rng.shuffle(nonmatching)
    n = min(pair_budget, len(matching))
    return matching[:n], nonmatching[:min(n, len(nonmatching))]


def collect_pair_distances(manifest: DatasetManifest, layer_ids, grid_scales: int,
                           pair_budget: int, seed: int,
                           cache: TensorCache | None = None):
    """Per (layer_id, region_index): distance arrays for matching and
    non-matching pairs, computed on L2-normalized pooled region vectors.

    Returns dict[(layer, region)] -> (match_dists, nonmatch_dists).
    """
    cache = cache or TensorCache()
    match_pairs, non_pairs = sample_pairs(manifest, pair_budget, seed)

    rows: dict[tuple[str, int], np.ndarray] = {}

    def region_rows(image_id: str, layer: int) -> np.ndarray:
        key = (image_id, layer)
        if key not in rows:
            fm = cache.load_layers(manifest.by_id[image_id], [layer])[layer]
            g = build_grid(fm.width, fm.height, grid_scales)
            rows[key] = normalized_region_rows(fm, g)
        return rows[key]

    out: dict[tuple[int, int], tuple[list, list]] = {}
    for pairs, slot in ((match_pairs, 0), (non_pairs, 1)):
        for a_id, b_id in pairs:
            for layer in layer_ids:
                ra = region_rows(a_id, layer)
                rb = region_rows(b_id, layer)
                if ra.shape != rb.shape:
                    raise DataError(
                        f"images {a_id} and {b_id} disagree on layer {layer} "
                        f"region layout: {ra.shape} vs {rb.shape}"
                    )
                dists = np.linalg.norm(ra - rb, axis=1)
                for idx, d in enumerate(dists):
                    out.setdefault((layer, idx), ([], []))[slot].append(float(d))
    return {k: (np.asarray(m), np.asarray(nm)) for k, (m, nm) in out.items()}


def kl_divergence(matching, nonmatching, bins: int = DEFAULT_BINS,
                  epsilon: float = DEFAULT_EPSILON) -> float:
    """Histogram KL divergence KL(matching || nonmatching).

    Both samples are binned over one shared equal-width range covering
    zero and every observation; counts are smoothed by epsilon and
    normalized.  Identical samples (or zero spread) give exactly 0.
    """
    a = np.asarray(matching, dtype=np.float64)
    b = np.asarray(nonmatching, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ContractError("kl_divergence needs non-empty samples")
    if bins < 1:
        raise ContractError(f"bins must be >= 1, got {bins}")
    vmin = min(float(a.min()), float(b.min()))
    vmax = max(float(a.max()), float(b.max()))
    if vmin == vmax:
        return 0.0  # every observation identical: one degenerate shared bin
    lo = min(0.0, vmin)
    edges = np.linspace(lo, vmax, bins + 1)
    ca, _ = np.histogram(a, bins=edges)
    cb, _ = np.histogram(b, bins=edges)
    p = (ca + epsilon) / (ca + epsilon).sum()
    q = (cb + epsilon) / (cb + epsilon).sum()
    return float(np.sum(p * np.log(p / q)))


@dataclass
class EntropyWeights:
    """KL weight per (layer_id, region_index), with sample bookkeeping."""

    weights: dict[tuple[int, int], float]
    n_match: dict[tuple[int, int], int] = field(default_factory=dict)
    n_nonmatch: dict[tuple[int, int], int] = field(default_factory=dict)
    bins: int = DEFAULT_BINS
    epsilon: float = DEFAULT_EPSILON

    def alpha_for_layer(self, layer: int, region_count: int) -> np.ndarray:
        a = np.empty(region_count, dtype=np.float64)
        for i in range(region_count):
            if (layer, i) not in self.weights:
                raise DataError(f"no entropy weight for layer {layer} region {i}")
            a[i] = self.weights[(layer, i)]
        return a


def init_weights(samples, bins: int = DEFAULT_BINS, epsilon: float = DEFAULT_EPSILON,
                 min_samples: int = DEFAULT_MIN_SAMPLES) -> EntropyWeights:
    """KL weight for every sampled (layer, region).

    Errors list every region whose pair count falls under min_samples,
    so one run reports the whole shortfall.
    """
    weights = {}
    n_match = {}
    n_nonmatch = {}
    short = []
    for key in sorted(samples):
        m, nm = samples[key]
        if len(m) < min_samples or len(nm) < min_samples:
            short.append(f"layer {key[0]} region {key[1]}: "
                         f"{len(m)} match / {len(nm)} nonmatch")
            continue
        weights[key] = kl_divergence(m, nm, bins=bins, epsilon=epsilon)
        n_match[key] = len(m)
        n_nonmatch[key] = len(nm)
    if short:
        raise DataError(
            f"fewer than {min_samples} pairs for some regions:\n  "
            + "\n  ".join(short)
        )
    return EntropyWeights(weights=weights, n_match=n_match, n_nonmatch=n_nonmatch,
                          bins=bins, epsilon=epsilon)


def save_weights(w: EntropyWeights, path: str | Path) -> None:
    records = [
        {
            "layer_id": layer,
            "region_index": region,
            "weight": w.weights[(layer, region)],
            "n_match": w.n_match.get((layer, region), 0),
            "n_nonmatch": w.n_nonmatch.get((layer, region), 0),
        }
        for layer, region in sorted(w.weights)
    ]
    doc = {"direction": DIRECTION, "bins": w.bins, "epsilon": w.epsilon,
           "weights": records}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_weights(path: str | Path) -> EntropyWeights:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read entropy weights {path}: {exc}") from exc
    if doc.get("direction") != DIRECTION:
        raise DataError(f"{path}: unexpected weight direction {doc.get('direction')!r}")
    weights = {}
    n_match = {}
    n_nonmatch = {}
    for rec in doc.get("weights", []):
        key = (int(rec["layer_id"]), int(rec["region_index"]))
        weights[key] = float(rec["weight"])
        n_match[key] = int(rec.get("n_match", 0))
        n_nonmatch[key] = int(rec.get("n_nonmatch", 0))
    if not weights:
        raise DataError(f"{path}: no weights")
    return EntropyWeights(weights=weights, n_match=n_match, n_nonmatch=n_nonmatch,
                          bins=int(doc.get("bins", DEFAULT_BINS)),
                          epsilon=float(doc.get("epsilon", DEFAULT_EPSILON)))

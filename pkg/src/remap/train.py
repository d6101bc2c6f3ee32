"""Triplet training of the aggregation weights and projection.

The backbone is frozen, so each image reduces to its per-layer matrix
of L2-normalized pooled region vectors, computed once and reused.  The
trainable parameters are alpha (per layer, per region), the projection
matrix, and the bias.  Gradients are derived by hand through

    s_l = sum_i alpha_li * rhat_li      (region rows are constants)
    p   = concat_l( s_l / ||s_l|| )
    z   = W p + b
    u   = z / ||z||
    L   = 0.5 * max(0, margin + ||u_q - u_m||^2 - ||u_q - u_n||^2)

using the L2 Jacobian (I - u u^T)/||z||.  Zero-norm intermediates get
zero gradient, matching the forward convention that zeros stay zeros.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .aggregate import AggregationModel, normalized_region_rows
from .errors import ContractError, DataError, NumericError
from .grid import build_grid
from .tensorio import DatasetManifest, TensorCache


@dataclass
class TrainConfig:
    margin: float = 0.1
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-5
    accumulate: int = 64
    remine_every: int = 3000
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.margin < 0:
            problems.append(f"margin must be >= 0, got {self.margin}")
        if self.learning_rate <= 0:
            problems.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            problems.append(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.accumulate < 1:
            problems.append(f"accumulate must be >= 1, got {self.accumulate}")
        if self.remine_every < 1:
            problems.append(f"remine_every must be >= 1, got {self.remine_every}")
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if problems:
            raise ContractError("; ".join(problems))


def triplet_loss(d2_query_match: float, d2_query_nonmatch: float,
                 margin: float) -> float:
    return 0.5 * max(0.0, margin + d2_query_match - d2_query_nonmatch)


@dataclass
class ForwardCache:
    """Intermediates of one image's forward pass, kept for backward."""

    rhat: dict[int, np.ndarray]
    stream_raw: dict[int, np.ndarray]
    stream_norm: dict[int, float]
    stream_unit: dict[int, np.ndarray]
    p: np.ndarray
    z: np.ndarray
    z_norm: float
    u: np.ndarray


def forward_cached(rhat: dict[int, np.ndarray], model: AggregationModel) -> ForwardCache:
    stream_raw = {}
    stream_norm = {}
    stream_unit = {}
    parts = []
    for layer in model.layer_ids:
        R = rhat[layer]
        a = model.alpha[layer]
        if R.shape[0] != a.shape[0]:
            raise ContractError(
                f"layer {layer}: {R.shape[0]} region rows vs {a.shape[0]} alphas"
            )
        s = a @ R
        n = float(np.linalg.norm(s))
        unit = s / n if n > 0 else s.copy()
        stream_raw[layer] = s
        stream_norm[layer] = n
        stream_unit[layer] = unit
        parts.append(unit)
    p = np.concatenate(parts)
    z = model.projection @ p + model.bias
    zn = float(np.linalg.norm(z))
    u = z / zn if zn > 0 else z.copy()
    return ForwardCache(rhat=rhat, stream_raw=stream_raw, stream_norm=stream_norm,
                        stream_unit=stream_unit, p=p, z=z, z_norm=zn, u=u)


@dataclass
class Gradients:
    alpha: dict[int, np.ndarray]
    projection: np.ndarray
    bias: np.ndarray

    @classmethod
    def zeros_like(cls, model: AggregationModel) -> "Gradients":
        return cls(
            alpha={l: np.zeros_like(model.alpha[l]) for l in model.layer_ids},
            projection=np.zeros_like(model.projection),
            bias=np.zeros_like(model.bias),
        )

    def add_(self, other: "Gradients") -> None:
        for l in self.alpha:
            self.alpha[l] += other.alpha[l]
        self.projection += other.projection
        self.bias += other.bias

    def scale_(self, factor: float) -> None:
        for l in self.alpha:
            self.alpha[l] *= factor
        self.projection *= factor
        self.bias *= factor

    def is_finite(self) -> bool:
        return (all(np.isfinite(a).all() for a in self.alpha.values())
                and np.isfinite(self.projection).all()
                and np.isfinite(self.bias).all())


def _l2_backward(grad_out: np.ndarray, unit: np.ndarray, norm: float) -> np.ndarray:
    # d(v/||v||)/dv applied to grad_out; zero vector keeps zero gradient
    if norm == 0.0:
        return np.zeros_like(grad_out)
    return (grad_out - float(grad_out @ unit) * unit) / norm


def _image_backward(g_u: np.ndarray, cache: ForwardCache, model: AggregationModel,
                    grads: Gradients) -> None:
    g_z = _l2_backward(g_u, cache.u, cache.z_norm)
    grads.projection += np.outer(g_z, cache.p)
    grads.bias += g_z
    g_p = model.projection.T @ g_z
    off = 0
    for layer in model.layer_ids:
        dim = cache.stream_unit[layer].shape[0]
        g_unit = g_p[off:off + dim]
        off += dim
        g_s = _l2_backward(g_unit, cache.stream_unit[layer],
                           cache.stream_norm[layer])
        grads.alpha[layer] += cache.rhat[layer] @ g_s


def triplet_backward(cache_q: ForwardCache, cache_m: ForwardCache,
                     cache_n: ForwardCache, model: AggregationModel,
                     margin: float) -> tuple[float, Gradients]:
    """Loss and parameter gradients for one (query, match, nonmatch) triplet.

    Inactive triplets (hinge at zero) return exactly zero gradients.
    """
    uq, um, un = cache_q.u, cache_m.u, cache_n.u
    d2_qm = float(np.sum((uq - um) ** 2))
    d2_qn = float(np.sum((uq - un) ** 2))
    loss = triplet_loss(d2_qm, d2_qn, margin)
    grads = Gradients.zeros_like(model)
    if loss <= 0.0:
        return loss, grads
    # dL/du for the active hinge; the 0.5 cancels the 2 from d||.||^2
    _image_backward(un - um, cache_q, model, grads)
    _image_backward(um - uq, cache_m, model, grads)
    _image_backward(uq - un, cache_n, model, grads)
    return loss, grads


def build_region_cache(manifest: DatasetManifest, layer_ids, grid_scales: int,
                       cache: TensorCache | None = None,
                       scale: int = 0) -> dict[str, dict[int, np.ndarray]]:
    """Normalized pooled region rows for every image, one pass over disk."""
    cache = cache or TensorCache()
    out = {}
    for entry in manifest:
        maps = cache.load_layers(entry, layer_ids, scale=scale)
        per_layer = {}
        for layer in layer_ids:
            fm = maps[layer]
            g = build_grid(fm.width, fm.height, grid_scales)
            per_layer[layer] = normalized_region_rows(fm, g)
        out[entry.image_id] = per_layer
    return out


def descriptors_from_cache(region_cache, model: AggregationModel,
                           image_ids=None) -> dict[str, np.ndarray]:
    ids = list(region_cache) if image_ids is None else list(image_ids)
    out = {}
    for i in ids:
        u = forward_cached(region_cache[i], model).u
        if not np.isfinite(u).all():
            # catch it here, before NaN distances silently poison mining
            raise NumericError(f"non-finite descriptor for image {i!r}")
        out[i] = u
    return out


def mine_hard_negatives(descriptors: dict[str, np.ndarray],
                        classes: dict[str, int],
                        pairs: list[tuple[str, str]]) -> list[tuple[str, str, str]]:
    """Closest different-class image to each query, ties broken by id.

    descriptors must cover every candidate; they are typically a stale
    snapshot from the last mining pass, which is the point: mining is
    batched, the forward passes between minings are not.
    """
    ids = sorted(descriptors)
    triplets = []
    for q_id, m_id in pairs:
        q_class = classes[q_id]
        uq = descriptors[q_id]
        best_id = None
        best_d = np.inf
        for c_id in ids:
            if classes.get(c_id) == q_class or c_id == q_id:
                continue
            d = float(np.sum((uq - descriptors[c_id]) ** 2))
            if d < best_d:
                best_d, best_id = d, c_id
        if best_id is None:
            raise DataError(f"no different-class negative exists for {q_id}")
        triplets.append((q_id, m_id, best_id))
    return triplets


@dataclass
class TraceRow:
    window_index: int
    mean_loss: float
    active_fraction: float


@dataclass
class _Momentum:
    alpha: dict[int, np.ndarray]
    projection: np.ndarray
    bias: np.ndarray


def _apply_window(model: AggregationModel, grads: Gradients, count: int,
                  vel: _Momentum, cfg: TrainConfig) -> None:
    grads.scale_(1.0 / count)
    # decoupled from bias on purpose: decay pulls weights, not the offset
    for layer in model.layer_ids:
        g = grads.alpha[layer] + cfg.weight_decay * model.alpha[layer]
        vel.alpha[layer] = cfg.momentum * vel.alpha[layer] - cfg.learning_rate * g
        model.alpha[layer] = model.alpha[layer] + vel.alpha[layer]
        np.maximum(model.alpha[layer], 0.0, out=model.alpha[layer])
    g = grads.projection + cfg.weight_decay * model.projection
    vel.projection = cfg.momentum * vel.projection - cfg.learning_rate * g
    model.projection = model.projection + vel.projection
    vel.bias = cfg.momentum * vel.bias - cfg.learning_rate * grads.bias
    model.bias = model.bias + vel.bias


def matching_pairs(manifest: DatasetManifest) -> list[tuple[str, str]]:
    labelled = [e for e in manifest if e.class_id is not None]
    pairs = []
    for i, a in enumerate(labelled):
        for b in labelled[i + 1:]:
            if a.class_id == b.class_id:
                pairs.append((a.image_id, b.image_id))
    return pairs


def train(model: AggregationModel, manifest: DatasetManifest, cfg: TrainConfig,
          tensor_cache: TensorCache | None = None,
          region_cache=None, checkpoint_every: int = 0,
          checkpoint_fn=None) -> tuple[AggregationModel, list[TraceRow]]:
    """Optimize alpha, projection, and bias in place; returns a loss trace.

    Deterministic in (model, manifest, cfg): pair order, mining, and the
    reduction order inside each accumulation window are all fixed.
    checkpoint_fn(window_index, model) fires after every
    checkpoint_every-th applied window when both are set.
    """
    if region_cache is None:
        region_cache = build_region_cache(manifest, model.layer_ids,
                                          model.grid_scales, tensor_cache)
    classes = {e.image_id: e.class_id for e in manifest if e.class_id is not None}
    pairs = matching_pairs(manifest)
    if not pairs:
        raise DataError("no matching pairs to train on")

    rng = np.random.default_rng(cfg.seed)
    vel = _Momentum(
        alpha={l: np.zeros_like(model.alpha[l]) for l in model.layer_ids},
        projection=np.zeros_like(model.projection),
        bias=np.zeros_like(model.bias),
    )
    trace: list[TraceRow] = []
    window = Gradients.zeros_like(model)
    window_losses: list[float] = []
    window_active = 0
    window_index = 0
    since_mine = cfg.remine_every  # force mining before the first triplet
    mined: dict[str, np.ndarray] = {}

    def flush_window():
        nonlocal window, window_losses, window_active, window_index
        count = len(window_losses)
        if count == 0:
            return
        _apply_window(model, window, count, vel, cfg)
        trace.append(TraceRow(window_index=window_index,
                              mean_loss=float(np.mean(window_losses)),
                              active_fraction=window_active / count))
        window_index += 1
        if checkpoint_every and checkpoint_fn and window_index % checkpoint_every == 0:
            checkpoint_fn(window_index, model)
        window = Gradients.zeros_like(model)
        window_losses = []
        window_active = 0

    for _ in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        for pair_idx in order:
            q_id, m_id = pairs[pair_idx]
            if since_mine >= cfg.remine_every:
                mined = descriptors_from_cache(region_cache, model)
                since_mine = 0
            (_, _, n_id), = mine_hard_negatives(mined, classes, [(q_id, m_id)])
            cq = forward_cached(region_cache[q_id], model)
            cm = forward_cached(region_cache[m_id], model)
            cn = forward_cached(region_cache[n_id], model)
            # check the embeddings, not just the loss: the hinge maps a NaN
            # distance to 0, which would quietly disable the triplet instead
            clean = all(np.isfinite(c.u).all() for c in (cq, cm, cn))
            loss, grads = triplet_backward(cq, cm, cn, model, cfg.margin)
            if not clean or not np.isfinite(loss) or not grads.is_finite():
                raise NumericError(
                    f"non-finite loss or gradient on triplet "
                    f"({q_id}, {m_id}, {n_id}) in window {window_index}"
                )
            window.add_(grads)
            window_losses.append(loss)
            window_active += int(loss > 0.0)
            since_mine += 1
            if len(window_losses) >= cfg.accumulate:
                flush_window()
    flush_window()
    return model, trace


def write_trace_csv(trace: list[TraceRow], path) -> None:
    lines = ["window_index,mean_loss,active_fraction"]
    lines += [f"{r.window_index},{r.mean_loss:.10g},{r.active_fraction:.10g}"
              for r in trace]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")

"""Two-tower base learner, sampled-softmax loss with logQ correction, the
affine meta-mapper over final-layer parameters, the joint objective and the
score-level mixture used for prediction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .data import CONTINUOUS, FieldLayout, Interactions, PopularityTable
from .numeric import (
    MLP,
    ParamBlock,
    ShapeError,
    embed_backward,
    embed_forward,
    glorot_uniform,
    halving_widths,
)

log = logging.getLogger(__name__)

MAPPER_SCOPES = ("flat", "per_unit")
# a flat map holds dim**2 weights plus grad and two Adam moments per tower;
# 4096 caps that at roughly 1 GB for both towers
MAX_FLAT_MAPPER_DIM = 4096


class MapperTooLarge(ValueError):
    pass
LOSS_MODES = ("in_batch", "full_catalog")


@dataclass
class ModelConfig:
    embedding_dim: int = 64
    hidden_layers: int = 3
    field_dim: int = 32
    mapper_scope: str = "flat"

    def __post_init__(self):
        if self.embedding_dim < 1 or self.field_dim < 1 or self.hidden_layers < 0:
            raise ValueError("embedding_dim, field_dim must be >= 1 and hidden_layers >= 0")
        if self.mapper_scope not in MAPPER_SCOPES:
            raise ValueError(f"mapper_scope must be one of {MAPPER_SCOPES}")


@dataclass
class LossConfig:
    lambda_reg: float = 0.001
    lambda_logq: float = 1.0
    lambda_pred: float = 0.5
    use_logq: bool = True

    def __post_init__(self):
        for name in ("lambda_reg", "lambda_logq", "lambda_pred"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.lambda_pred > 1:
            raise ValueError("lambda_pred must lie in [0, 1]")


# ---------------------------------------------------------------- towers


class Tower:
    """Per-field embedding tables, concatenated, then a halving ReLU MLP."""

    def __init__(self, side: str, layout: list[FieldLayout], embeddings: dict, mlp: MLP):
        self.side = side
        self.layout = list(layout)
        self.embeddings = embeddings
        self.mlp = mlp
        concat = 0
        for f in self.layout:
            if f.kind == CONTINUOUS:
                concat += f.width
                continue
            table = embeddings.get(f.name)
            if table is None or table.shape[0] != f.width:
                raise ShapeError(f"{side}: embedding table for field {f.name!r} missing or wrong height")
            concat += table.shape[1]
        if concat != mlp.in_dim:
            raise ShapeError(f"{side}: concatenated width {concat} != MLP input {mlp.in_dim}")
        self.input_width = sum(f.width for f in self.layout)

    @classmethod
    def init(cls, side: str, layout, cfg: ModelConfig, rng: np.random.Generator) -> Tower:
        embeddings, concat = {}, 0
        for f in layout:
            if f.kind == CONTINUOUS:
                concat += f.width
            else:
                embeddings[f.name] = ParamBlock(f"{side}/embed/{f.name}", glorot_uniform(rng, f.width, cfg.field_dim))
                concat += cfg.field_dim
        widths = [concat, *halving_widths(cfg.embedding_dim, cfg.hidden_layers), cfg.embedding_dim]
        return cls(side, layout, embeddings, MLP.init(f"{side}/mlp", widths, rng))

    @property
    def out_dim(self) -> int:
        return self.mlp.out_dim

    @property
    def final(self) -> tuple[ParamBlock, ParamBlock]:
        return self.mlp.layers[-1]

    def blocks(self) -> list[ParamBlock]:
        return [self.embeddings[f.name] for f in self.layout if f.name in self.embeddings] + self.mlp.blocks()

    def with_final(self, weight: np.ndarray, bias: np.ndarray) -> Tower:
        """Same blocks (shared, not copied) except a fresh final layer."""
        w_old, b_old = self.final
        layers = self.mlp.layers[:-1] + [(ParamBlock(w_old.name, weight), ParamBlock(b_old.name, bias))]
        return Tower(self.side, self.layout, self.embeddings, MLP(layers))

    def copy(self) -> Tower:
        emb = {k: v.copy() for k, v in self.embeddings.items()}
        layers = [(w.copy(), b.copy()) for w, b in self.mlp.layers]
        return Tower(self.side, self.layout, emb, MLP(layers))

    def forward(self, x):
        # CSR input for real catalogs; dense rows (tests, single pairs) stay dense
        x = x.tocsr() if sp.issparse(x) else np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.input_width:
            raise ShapeError(f"{self.side}: feature width {x.shape[1]} != layout width {self.input_width}")
        parts, pieces = [], []
        for f in self.layout:
            xf = x[:, f.offset : f.offset + f.width]
            if f.kind == CONTINUOUS:
                parts.append(xf.toarray() if sp.issparse(xf) else xf)
            else:
                parts.append(embed_forward(xf, self.embeddings[f.name]))
            pieces.append(xf)
        h0 = np.concatenate(parts, axis=1) if len(parts) > 1 else parts[0]
        out, mcache = self.mlp.forward(h0)
        return out, (pieces, mcache)

    def backward(self, cache, dout: np.ndarray):
        if cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        pieces, mcache = cache
        dh0 = self.mlp.backward(mcache, dout)
        col = 0
        for f, xf in zip(self.layout, pieces):
            if f.kind == CONTINUOUS:
                col += f.width
                continue
            table = self.embeddings[f.name]
            width = table.shape[1]
            embed_backward(xf, table, dh0[:, col : col + width])
            col += width

    def embed(self, x, chunk: int = 4096) -> np.ndarray:
        n = x.shape[0]
        if n <= chunk:
            return self.forward(x)[0]
        return np.concatenate([self.forward(x[s : s + chunk])[0] for s in range(0, n, chunk)])


@dataclass
class TwoTowerParams:
    user: Tower
    item: Tower

    def __post_init__(self):
        if self.user.out_dim != self.item.out_dim:
            raise ShapeError(f"tower output dims differ: {self.user.out_dim} vs {self.item.out_dim}")

    @property
    def embedding_dim(self) -> int:
        return self.user.out_dim

    def tower(self, side: str) -> Tower:
        return self.user if side == "user" else self.item

    def blocks(self) -> list[ParamBlock]:
        return self.user.blocks() + self.item.blocks()

    def copy(self) -> TwoTowerParams:
        return TwoTowerParams(self.user.copy(), self.item.copy())

    def architecture(self, cfg: ModelConfig) -> dict:
        def lay(t):
            return [[f.name, f.kind, f.offset, f.width] for f in t.layout]

        return {
            "embedding_dim": cfg.embedding_dim,
            "hidden_layers": cfg.hidden_layers,
            "field_dim": cfg.field_dim,
            "user_layout": lay(self.user),
            "item_layout": lay(self.item),
        }

    def load_arrays(self, arrays: dict):
        for blk in self.blocks():
            if blk.name not in arrays or arrays[blk.name].shape != blk.shape:
                raise ShapeError(f"checkpoint block {blk.name} missing or mis-shaped")
            blk.values[...] = arrays[blk.name]


def init_two_tower(user_layout, item_layout, cfg: ModelConfig, seed: int) -> TwoTowerParams:
    rng = np.random.default_rng(seed)
    return TwoTowerParams(Tower.init("user", user_layout, cfg, rng), Tower.init("item", item_layout, cfg, rng))


def two_tower_from_arrays(arrays: dict, arch: dict) -> TwoTowerParams:
    cfg = ModelConfig(arch["embedding_dim"], arch["hidden_layers"], arch["field_dim"])
    ul = [FieldLayout(*f) for f in arch["user_layout"]]
    il = [FieldLayout(*f) for f in arch["item_layout"]]
    theta = init_two_tower(ul, il, cfg, seed=0)
    theta.load_arrays(arrays)
    return theta


# ---------------------------------------------------------------- scoring


def score(theta: TwoTowerParams, x_u, y_i) -> float:
    """Inner product of the two tower embeddings for one (user, item) pair."""
    u = theta.user.forward(x_u)[0]
    v = theta.item.forward(y_i)[0]
    return float(u[0] @ v[0])


def corrected_score(s, p_i, lambda_logq: float):
    """Logit plus lambda_logq * ln(p_i); works elementwise on arrays."""
    p = np.asarray(p_i, dtype=np.float64)
    if np.any(p <= 0) or np.any(p > 1):
        raise ValueError("item probability must lie in (0, 1]; item absent from training popularity?")
    out = np.asarray(s, dtype=np.float64) + lambda_logq * np.log(p)
    return float(out) if np.ndim(out) == 0 else out


def _prob_array(pop, n_items: int) -> np.ndarray:
    if isinstance(pop, PopularityTable):
        return pop.as_array(n_items)
    return np.asarray(pop, dtype=np.float64)


class SoftmaxLoss:
    """Forward result of the softmax loss; ``backward`` accumulates gradients once."""

    def __init__(self, theta, loss, row_losses, probs, logits_shape, ucache, icache, U, V, cols, row_weights):
        self.theta = theta
        self.loss = loss
        self.row_losses = row_losses
        self._probs = probs
        self._ucache, self._icache = ucache, icache
        self._U, self._V = U, V
        self._cols = cols
        self._w = row_weights
        self._done = False

    def backward(self, scale: float = 1.0):
        if self._done:
            raise RuntimeError("backward already run for this forward pass")
        self._done = True
        n = len(self._cols)
        d = self._probs.copy()
        d[np.arange(n), self._cols] -= 1.0
        d *= (self._w * (scale / n))[:, None]
        self.theta.user.backward(self._ucache, d @ self._V)
        self.theta.item.backward(self._icache, d.T @ self._U)


def softmax_batch_loss(
    theta: TwoTowerParams,
    batch: Interactions,
    features,
    pop,
    cfg: LossConfig,
    mode: str = "in_batch",
    weights: np.ndarray | None = None,
) -> SoftmaxLoss:
    """-(1/|B|) sum r(u,i) w_i log p(i|u) over the batch.

    The softmax runs over the batch's distinct items (``in_batch``) or the
    whole catalog (``full_catalog``); logits get the logQ correction when
    ``cfg.use_logq`` is set. ``weights`` are optional per-row multipliers.
    """
    if mode not in LOSS_MODES:
        raise ValueError(f"mode must be one of {LOSS_MODES}")
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    n_items = features.item_matrix.shape[0]
    if mode == "in_batch":
        cand, cols = np.unique(batch.item_ids, return_inverse=True)
        if len(cand) == 1:
            log.warning("degenerate in-batch softmax: a single distinct item, loss is 0")
    else:
        cand, cols = np.arange(n_items), batch.item_ids
    U, ucache = theta.user.forward(features.user_matrix[batch.user_ids])
    V, icache = theta.item.forward(features.item_matrix[cand])
    logits = U @ V.T
    if cfg.use_logq:
        p = _prob_array(pop, n_items)[cand]
        logits = logits + np.asarray(corrected_score(np.zeros(len(cand)), p, cfg.lambda_logq))
    m = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - m)
    z = ex.sum(axis=1, keepdims=True)
    probs = ex / z
    logp = logits[np.arange(n), cols] - (m[:, 0] + np.log(z[:, 0]))
    w = batch.rewards.astype(np.float64)
    if weights is not None:
        w = w * np.asarray(weights, dtype=np.float64)
    row_losses = -logp
    loss = float(np.sum(w * row_losses) / n)
    return SoftmaxLoss(theta, loss, row_losses, probs, logits.shape, ucache, icache, U, V, cols, w)


def full_catalog_probabilities(theta, users, features, pop, cfg: LossConfig) -> np.ndarray:
    n_items = features.item_matrix.shape[0]
    U = theta.user.forward(features.user_matrix[np.asarray(users)])[0]
    V = theta.item.embed(features.item_matrix)
    logits = U @ V.T
    if cfg.use_logq:
        logits = logits + cfg.lambda_logq * np.log(_prob_array(pop, n_items))
    logits -= logits.max(axis=1, keepdims=True)
    ex = np.exp(logits)
    return ex / ex.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- meta-mapper


def flatten_final(tower: Tower) -> np.ndarray:
    w, b = tower.final
    return np.concatenate([w.values.ravel(), b.values])


def _unit_rows(tower: Tower) -> np.ndarray:
    # one row per output unit: its incoming weights followed by its bias
    w, b = tower.final
    return np.vstack([w.values, b.values[None, :]]).T


class MetaMapper:
    """Affine maps from few-shot to many-shot final-layer parameters.

    ``flat`` maps each tower's whole flattened final layer (weight row-major,
    then bias) with one dense matrix. ``per_unit`` applies one shared affine
    map to every output unit's [incoming weights; bias] vector, which keeps
    the mapper size independent of the embedding width.
    """

    def __init__(self, scope: str, user_weight, user_bias, item_weight, item_bias):
        if scope not in MAPPER_SCOPES:
            raise ValueError(f"scope must be one of {MAPPER_SCOPES}")
        self.scope = scope
        self.weights = {"user": user_weight, "item": item_weight}
        self.biases = {"user": user_bias, "item": item_bias}
        for side in ("user", "item"):
            w, b = self.weights[side], self.biases[side]
            if w.values.ndim != 2 or w.shape[0] != w.shape[1] or b.shape != (w.shape[0],):
                raise ShapeError(f"{side} map must be square with matching bias")

    @staticmethod
    def dims(theta: TwoTowerParams, scope: str) -> dict:
        """Mapper input width per tower; raises MapperTooLarge for oversized flat maps."""
        out = {}
        for side in ("user", "item"):
            t = theta.tower(side)
            out[side] = flatten_final(t).size if scope == "flat" else t.final[0].shape[0] + 1
        if scope == "flat" and max(out.values()) > MAX_FLAT_MAPPER_DIM:
            raise MapperTooLarge(
                f"flat mapper would be {max(out.values())}^2 per tower (limit {MAX_FLAT_MAPPER_DIM}); "
                "use mapper_scope = per_unit or a smaller final layer"
            )
        return out

    @classmethod
    def identity(cls, theta: TwoTowerParams, scope: str = "flat") -> MetaMapper:
        blocks = []
        dims = cls.dims(theta, scope)
        for side in ("user", "item"):
            dim = dims[side]
            blocks += [ParamBlock(f"mapper/{side}/weight", np.eye(dim)), ParamBlock(f"mapper/{side}/bias", np.zeros(dim))]
        return cls(scope, *blocks)

    def blocks(self) -> list[ParamBlock]:
        return [self.weights["user"], self.biases["user"], self.weights["item"], self.biases["item"]]

    def input_dim(self, side: str) -> int:
        return self.weights[side].shape[0]

    def check(self, theta: TwoTowerParams):
        for side in ("user", "item"):
            t = theta.tower(side)
            want = flatten_final(t).size if self.scope == "flat" else t.final[0].shape[0] + 1
            if self.input_dim(side) != want:
                raise ShapeError(f"{side} mapper dim {self.input_dim(side)} != final-layer dim {want}")

    def map_side(self, side: str, tower: Tower) -> tuple[np.ndarray, np.ndarray]:
        """Mapped (weight, bias) for one tower's final layer."""
        M, c = self.weights[side].values, self.biases[side].values
        w, _ = tower.final
        n_in, n_out = w.shape
        if self.scope == "flat":
            u = M @ flatten_final(tower) + c
            return u[: n_in * n_out].reshape(n_in, n_out), u[n_in * n_out :].copy()
        U = _unit_rows(tower) @ M.T + c
        return np.ascontiguousarray(U[:, :n_in].T), U[:, n_in].copy()

    def copy(self) -> MetaMapper:
        return MetaMapper(self.scope, *(b.copy() for b in self.blocks()))

    def load_arrays(self, arrays: dict):
        for blk in self.blocks():
            if blk.name not in arrays or arrays[blk.name].shape != blk.shape:
                raise ShapeError(f"checkpoint block {blk.name} missing or mis-shaped")
            blk.values[...] = arrays[blk.name]


def meta_map(theta_few: TwoTowerParams, w: MetaMapper) -> TwoTowerParams:
    """Few-shot parameters with both final layers replaced by their mapped values."""
    w.check(theta_few)
    towers = []
    for side in ("user", "item"):
        t = theta_few.tower(side)
        towers.append(t.with_final(*w.map_side(side, t)))
    return TwoTowerParams(*towers)


JOINT_BASES = ("few", "mapped")


class JointLoss:
    """Parameter distance ||F(theta) - theta*||^2 on final layers + lambda * L_g.

    ``mapped`` is None when L_g is taken at theta itself. Otherwise it is
    F(theta; w) (lower blocks shared with theta, fresh final blocks) and L_g
    was taken there; its final-layer gradient is chained back through F.
    """

    def __init__(self, mapper, theta_few, theta_star, base: SoftmaxLoss, lam: float, mapped=None):
        self.mapper, self.theta_few, self.theta_star = mapper, theta_few, theta_star
        self.base = base
        self.lam = lam
        self.mapped = mapped
        self.residuals = {}
        dist = 0.0
        for side in ("user", "item"):
            few, star = theta_few.tower(side), theta_star.tower(side)
            if mapper.scope == "flat":
                r = mapper.map_side(side, few)
                r = np.concatenate([r[0].ravel(), r[1]]) - flatten_final(star)
            else:
                r = _unit_rows(few) @ mapper.weights[side].values.T + mapper.biases[side].values - _unit_rows(star)
            self.residuals[side] = r
            dist += float(np.sum(r * r))
        self.distance = dist
        self.base_loss = base.loss
        self.loss = dist + lam * base.loss
        self._done = False

    def backward(self):
        if self._done:
            raise RuntimeError("backward already run for this forward pass")
        self._done = True
        if self.lam != 0.0:
            # into theta's own blocks, or into the shared lower blocks + fresh mapped final blocks
            self.base.backward(scale=self.lam)
        for side in ("user", "item"):
            # g: gradient w.r.t. the mapped final layer, in the mapper's own layout
            g = 2.0 * self.residuals[side]
            if self.mapped is not None and self.lam != 0.0:
                mw, mb = self.mapped.tower(side).final
                if self.mapper.scope == "flat":
                    g = g + np.concatenate([mw.grad.ravel(), mb.grad])
                else:
                    g = g + np.vstack([mw.grad, mb.grad[None, :]]).T
            M = self.mapper.weights[side]
            c = self.mapper.biases[side]
            few = self.theta_few.tower(side)
            w, b = few.final
            n_in, n_out = w.shape
            if self.mapper.scope == "flat":
                v = flatten_final(few)
                M.grad += np.outer(g, v)
                c.grad += g
                dv = M.values.T @ g
                w.grad += dv[: n_in * n_out].reshape(n_in, n_out)
                b.grad += dv[n_in * n_out :]
            else:
                V = _unit_rows(few)
                M.grad += g.T @ V
                c.grad += g.sum(axis=0)
                dV = g @ M.values
                w.grad += dV[:, :n_in].T
                b.grad += dV[:, n_in]


def joint_loss(
    w: MetaMapper,
    theta_few: TwoTowerParams,
    theta_star: TwoTowerParams,
    batch: Interactions,
    features,
    pop,
    cfg: LossConfig,
    base_on: str = "few",
) -> JointLoss:
    """Joint meta-learning objective; theta_star only supplies targets.

    ``base_on="few"`` takes L_g at theta; ``"mapped"`` takes it at F(theta; w),
    so the lower layers are trained against the final layer that is actually
    used for prediction.
    """
    if base_on not in JOINT_BASES:
        raise ValueError(f"base_on must be one of {JOINT_BASES}")
    w.check(theta_few)
    mapped = meta_map(theta_few, w) if base_on == "mapped" else None
    base = softmax_batch_loss(theta_few if mapped is None else mapped, batch, features, pop, cfg, "in_batch")
    return JointLoss(w, theta_few, theta_star, base, cfg.lambda_reg, mapped)


# ---------------------------------------------------------------- prediction


class Scorer:
    """Score-level mixture sum_k weight_k * <g_u(x; theta_k), g_i(y; theta_k)>."""

    def __init__(self, components: list[tuple[float, TwoTowerParams]]):
        if not components:
            raise ValueError("scorer needs at least one component")
        self.components = [(float(wt), th) for wt, th in components]
        self.active = [(wt, th) for wt, th in self.components if wt != 0.0]
        if not self.active:
            raise ValueError("scorer needs a component with non-zero weight")

    @classmethod
    def single(cls, theta: TwoTowerParams) -> Scorer:
        return cls([(1.0, theta)])

    def precompute(self, features):
        """Cache user/item embeddings for the whole catalog."""
        self._U = [th.user.embed(features.user_matrix) for _, th in self.active]
        self._V = [th.item.embed(features.item_matrix) for _, th in self.active]
        return self

    def score_rows(self, users: np.ndarray, items: np.ndarray | None = None) -> np.ndarray:
        out = None
        for (wt, _), U, V in zip(self.active, self._U, self._V):
            Vi = V if items is None else V[items]
            s = U[users] @ Vi.T
            if wt != 1.0:
                s = wt * s
            out = s if out is None else out + s
        return out

    def item_embeddings(self, features, items=None) -> np.ndarray:
        """Item vectors whose inner products with matching sqrt(weight)-scaled user vectors reproduce the mixture."""
        mats = []
        for wt, th in self.active:
            x = features.item_matrix if items is None else features.item_matrix[items]
            v = th.item.embed(x)
            mats.append(v if wt == 1.0 else math.sqrt(wt) * v)
        return np.concatenate(mats, axis=1)


def mirec_scorer(theta_star, theta_few, w: MetaMapper, lambda_pred: float) -> Scorer:
    return Scorer([(lambda_pred, theta_star), (1.0 - lambda_pred, meta_map(theta_few, w))])


def predict_mirec(x_u, y_i, theta_star, theta_few, w: MetaMapper, lambda_pred: float) -> float:
    many = score(theta_star, x_u, y_i)
    mapped = score(meta_map(theta_few, w), x_u, y_i)
    if lambda_pred == 1.0:
        return many
    if lambda_pred == 0.0:
        return mapped
    return lambda_pred * many + (1.0 - lambda_pred) * mapped

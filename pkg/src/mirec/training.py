"""Training loops: many-shot pretraining, joint few-shot + meta-mapper
training, and the baseline / ablation regimes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Interactions, PreparedDataset, build_curriculum_sets
from .model import (
    JOINT_BASES,
    LossConfig,
    MetaMapper,
    ModelConfig,
    Scorer,
    TwoTowerParams,
    init_two_tower,
    joint_loss,
    meta_map,
    mirec_scorer,
    softmax_batch_loss,
    two_tower_from_arrays,
)
from .numeric import AdamState, adam_step, clip_grad_norm, load_checkpoint, save_checkpoint, zero_grads

log = logging.getLogger(__name__)

REGIMES = (
    "two_tower",
    "oversample",
    "undersample",
    "class_balance",
    "logq",
    "head2tail",
    "tail2head",
    "two_tower_2",
    "mirec",
    "mirec_m",
    "mirec_c",
    "mirec_nologq",
)
CURRICULUM_REGIMES = ("head2tail", "tail2head", "mirec", "mirec_m", "mirec_c", "mirec_nologq")
FEW_SHOT_INITS = ("many_shot", "random")


class TrainingDivergence(RuntimeError):
    pass


class UnknownRegime(ValueError):
    def __init__(self, name):
        super().__init__(f"unknown regime {name!r}; valid regimes: {', '.join(REGIMES)}")


@dataclass
class TrainingConfig:
    alpha: float = 1e-3  # many-shot / single-model step size
    beta: float = 1e-3  # local update step size
    gamma: float = 1e-3  # global update step size
    batch_size: int = 1024
    epochs_per_stage: int = 100
    local_update_steps: int = 1
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    decay_between_stages: float = 0.1
    clip_norm: float | None = 10.0
    early_stopping_patience: int | None = None
    class_balance_beta: float = 0.999
    overwrite_with_mapped: bool = False
    few_shot_init: str = "many_shot"
    joint_base: str = "few"  # where the joint loss takes L_g: theta itself or F(theta; w)

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "decay_between_stages"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0")
        if self.batch_size < 1 or self.local_update_steps < 1 or self.epochs_per_stage < 0:
            raise ValueError("batch_size, local_update_steps must be >= 1 and epochs_per_stage >= 0")
        if not 0.0 <= self.class_balance_beta < 1.0:
            raise ValueError("class_balance_beta must lie in [0, 1)")
        if self.few_shot_init not in FEW_SHOT_INITS:
            raise ValueError(f"few_shot_init must be one of {FEW_SHOT_INITS}")
        if self.joint_base not in JOINT_BASES:
            raise ValueError(f"joint_base must be one of {JOINT_BASES}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or None")


def config_hash(*configs) -> str:
    blob = json.dumps([asdict(c) for c in configs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TrainingData:
    features: object
    probs: np.ndarray
    counts: np.ndarray
    is_head: np.ndarray
    validation: Interactions | None = None

    @classmethod
    def from_prepared(cls, ds: PreparedDataset) -> TrainingData:
        users, items = ds.split.pairs("validation")
        val = Interactions(users, items, np.ones(len(users), dtype=np.int64)) if len(users) else None
        return cls(
            ds.features,
            ds.popularity.as_array(ds.n_items),
            ds.popularity.count_array(ds.n_items),
            ds.head_tail.head_mask(ds.n_items),
            val,
        )


@dataclass
class TrainedModel:
    """Trained parameter sets of one regime plus its loss curve.

    ``kind`` is "single" (params["theta"]), "mix" (params["theta_a"],
    params["theta_b"]) or "mirec" (theta_star, theta_few, mapper).
    """

    regime: str
    kind: str
    params: dict
    lambda_pred: float = 1.0
    curve: list = field(default_factory=list)
    stage_params: dict = field(default_factory=dict)

    @property
    def theta_star(self):
        return self.params["theta_star"]

    @property
    def theta_few(self):
        return self.params["theta_few"]

    @property
    def mapper(self):
        return self.params["mapper"]

    def scorer(self, lambda_pred: float | None = None) -> Scorer:
        lp = self.lambda_pred if lambda_pred is None else lambda_pred
        if self.kind == "single":
            return Scorer.single(self.params["theta"])
        if self.kind == "mix":
            return Scorer([(lp, self.params["theta_a"]), (1.0 - lp, self.params["theta_b"])])
        return mirec_scorer(self.theta_star, self.theta_few, self.mapper, lp)


TrainedBundle = TrainedModel


# ---------------------------------------------------------------- helpers


def _slice_means(losses: np.ndarray, head: np.ndarray) -> dict:
    def mean(x):
        return float(x.mean()) if x.size else None

    return {"overall": mean(losses), "head": mean(losses[head]), "tail": mean(losses[~head])}


def validation_losses(theta: TwoTowerParams, data: TrainingData, batch_size: int) -> dict | None:
    """Uncorrected in-batch softmax loss on the validation pairs, by slice."""
    val = data.validation
    if val is None or len(val) == 0:
        return None
    plain = LossConfig(use_logq=False)
    rows = []
    for s in range(0, len(val), batch_size):
        batch = val.take(np.arange(s, min(s + batch_size, len(val))))
        rows.append(softmax_batch_loss(theta, batch, data.features, data.probs, plain).row_losses)
    return _slice_means(np.concatenate(rows), data.is_head[val.item_ids])


def _batches(stream: Interactions, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(stream))
    for s in range(0, len(order), batch_size):
        yield stream.take(order[s : s + batch_size])


def _check_finite(value: float, where: str):
    if not math.isfinite(value):
        raise TrainingDivergence(f"non-finite loss {value} at {where}")


class _EarlyStopper:
    def __init__(self, patience, blocks):
        self.patience = patience
        self.blocks = blocks
        self.best = math.inf
        self.best_values = None
        self.bad = 0

    def update(self, val: dict | None) -> bool:
        """Record a validation result; True when training should stop."""
        if self.patience is None or val is None or val["overall"] is None:
            return False
        if val["overall"] < self.best:
            self.best = val["overall"]
            self.best_values = [b.values.copy() for b in self.blocks]
            self.bad = 0
            return False
        self.bad += 1
        return self.bad >= self.patience

    def restore(self):
        if self.best_values is not None:
            for b, v in zip(self.blocks, self.best_values):
                b.values[...] = v


def fit_two_tower(
    theta: TwoTowerParams,
    stream_fn,
    data: TrainingData,
    loss_cfg: LossConfig,
    opt: AdamState,
    epochs: int,
    cfg: TrainingConfig,
    rng: np.random.Generator,
    curve: list,
    stage: int,
    row_weights: np.ndarray | None = None,
) -> TwoTowerParams:
    """Adam on L_g over ``epochs`` passes; ``stream_fn(rng)`` yields each epoch's rows."""
    blocks = theta.blocks()
    stopper = _EarlyStopper(cfg.early_stopping_patience, blocks)
    for epoch in range(epochs):
        stream = stream_fn(rng)
        losses, items = [], []
        for b, batch in enumerate(_batches(stream, cfg.batch_size, rng)):
            w = None if row_weights is None else row_weights[batch.item_ids]
            tape = softmax_batch_loss(theta, batch, data.features, data.probs, loss_cfg, "in_batch", w)
            _check_finite(tape.loss, f"stage {stage} epoch {epoch} batch {b}")
            zero_grads(blocks)
            tape.backward()
            if cfg.clip_norm is not None:
                clip_grad_norm(blocks, cfg.clip_norm)
            adam_step(opt, blocks)
            losses.append(tape.row_losses)
            items.append(batch.item_ids)
        train = (
            _slice_means(np.concatenate(losses), data.is_head[np.concatenate(items)]) if losses else None
        )
        val = validation_losses(theta, data, cfg.batch_size)
        curve.append({"stage": stage, "epoch": len(curve), "train": train, "validation": val})
        if stopper.update(val):
            log.info("early stop at stage %d epoch %d", stage, epoch)
            break
    stopper.restore()
    return theta


def _fixed(stream: Interactions):
    return lambda rng: stream


def train_many_shot(
    omega_star: Interactions,
    data: TrainingData,
    model_cfg: ModelConfig,
    cfg: TrainingConfig,
    curve: list | None = None,
    loss_cfg: LossConfig | None = None,
    init_seed: int | None = None,
) -> TwoTowerParams:
    """theta* = argmin L_g(theta | omega_star), Adam at step size alpha."""
    f = data.features
    theta = init_two_tower(f.user_layout, f.item_layout, model_cfg, cfg.seed if init_seed is None else init_seed)
    rng = np.random.default_rng([cfg.seed, 1])
    fit_two_tower(
        theta, _fixed(omega_star), data, loss_cfg or cfg.loss, AdamState(cfg.alpha), cfg.epochs_per_stage,
        cfg, rng, [] if curve is None else curve, stage=1,
    )
    return theta


# ---------------------------------------------------------------- meta-learning


def _fingerprint(theta: TwoTowerParams) -> str:
    h = hashlib.sha256()
    for b in theta.blocks():
        h.update(b.name.encode())
        h.update(np.ascontiguousarray(b.values).tobytes())
    return h.hexdigest()


def freeze(theta: TwoTowerParams) -> TwoTowerParams:
    """Mark parameters read-only and remember their fingerprint."""
    for b in theta.blocks():
        b.values.flags.writeable = False
    theta._frozen_fingerprint = _fingerprint(theta)
    return theta


def assert_unchanged(theta: TwoTowerParams):
    want = getattr(theta, "_frozen_fingerprint", None)
    assert want is not None, "parameters were never frozen"
    assert _fingerprint(theta) == want, "frozen many-shot parameters were modified"


def train_mirec(
    omega_star: Interactions,
    omega_k: Interactions,
    theta_star: TwoTowerParams,
    data: TrainingData,
    model_cfg: ModelConfig,
    cfg: TrainingConfig,
    curve: list | None = None,
    theta_init: TwoTowerParams | None = None,
    mapper_init: MetaMapper | None = None,
    epoch_hook=None,
) -> TrainedModel:
    """Joint few-shot + meta-mapper training over batches of omega_k.

    Per batch: ``local_update_steps`` Adam steps on theta at rate beta, then
    one global Adam step on (w, theta) at rate gamma, all against the joint
    objective. theta_star stays frozen. ``omega_star`` enters only through
    theta_star. ``epoch_hook(epoch, theta_few, mapper)`` runs after each epoch.
    """
    del omega_star  # many-shot data is summarised by theta_star
    if getattr(theta_star, "_frozen_fingerprint", None) is None:
        freeze(theta_star)
    assert_unchanged(theta_star)
    curve = [] if curve is None else curve
    if theta_init is not None:
        theta = theta_init
    elif cfg.few_shot_init == "many_shot":
        theta = theta_star.copy()
        for b in theta.blocks():
            b.values.flags.writeable = True
    else:
        f = data.features
        theta = init_two_tower(f.user_layout, f.item_layout, model_cfg, cfg.seed + 2)
    mapper = mapper_init if mapper_init is not None else MetaMapper.identity(theta, model_cfg.mapper_scope)
    mapper.check(theta)
    theta_blocks = theta.blocks()
    all_blocks = theta_blocks + mapper.blocks()
    base_on = cfg.joint_base
    inner = AdamState(cfg.beta)
    outer = AdamState(cfg.gamma)
    rng = np.random.default_rng([cfg.seed, 2])
    stage = 2
    start = len(curve)
    for epoch in range(cfg.epochs_per_stage):
        losses, items, dists = [], [], []
        for b, batch in enumerate(_batches(omega_k, cfg.batch_size, rng)):
            where = f"stage {stage} epoch {epoch} batch {b}"
            for _ in range(cfg.local_update_steps):
                if cfg.overwrite_with_mapped:
                    for side in ("user", "item"):
                        mw, mb = mapper.map_side(side, theta.tower(side))
                        fw, fb = theta.tower(side).final
                        fw.values[...] = mw
                        fb.values[...] = mb
                tape = joint_loss(mapper, theta, theta_star, batch, data.features, data.probs, cfg.loss, base_on)
                _check_finite(tape.loss, where)
                zero_grads(all_blocks)
                tape.backward()
                zero_grads(mapper.blocks())
                if cfg.clip_norm is not None:
                    clip_grad_norm(theta_blocks, cfg.clip_norm)
                adam_step(inner, theta_blocks)
            tape = joint_loss(mapper, theta, theta_star, batch, data.features, data.probs, cfg.loss, base_on)
            _check_finite(tape.loss, where)
            zero_grads(all_blocks)
            tape.backward()
            if cfg.clip_norm is not None:
                clip_grad_norm(all_blocks, cfg.clip_norm)
            adam_step(outer, all_blocks)
            losses.append(tape.base.row_losses)
            items.append(batch.item_ids)
            dists.append(tape.distance)
        assert_unchanged(theta_star)
        train = _slice_means(np.concatenate(losses), data.is_head[np.concatenate(items)]) if losses else None
        val = validation_losses(meta_map(theta, mapper), data, cfg.batch_size)
        curve.append({
            "stage": stage,
            "epoch": start + epoch,
            "train": train,
            "validation": val,
            "param_distance": float(np.mean(dists)) if dists else None,
        })
        if epoch_hook is not None:
            epoch_hook(epoch, theta, mapper)
            assert_unchanged(theta_star)
    assert_unchanged(theta_star)
    return TrainedModel(
        "mirec", "mirec", {"theta_star": theta_star, "theta_few": theta, "mapper": mapper},
        cfg.loss.lambda_pred, curve,
    )


# ---------------------------------------------------------------- baseline streams


def oversample_stream(train: Interactions, is_head: np.ndarray, rng) -> Interactions:
    """Tail rows repeated (whole copies plus a random remainder) up to the head row count."""
    head_mask = is_head[train.item_ids]
    h, t = np.flatnonzero(head_mask), np.flatnonzero(~head_mask)
    if len(h) == 0 or len(t) == 0 or len(t) >= len(h):
        return train
    reps, rest = divmod(len(h), len(t))
    extra = np.sort(rng.choice(t, size=rest, replace=False)) if rest else np.array([], dtype=np.int64)
    return train.take(np.concatenate([h, np.tile(t, reps), extra]))


def undersample_stream(train: Interactions, is_head: np.ndarray, rng) -> Interactions:
    """Head rows subsampled without replacement down to the tail row count."""
    head_mask = is_head[train.item_ids]
    h, t = np.flatnonzero(head_mask), np.flatnonzero(~head_mask)
    if len(h) == 0 or len(t) == 0 or len(h) <= len(t):
        return train
    return train.take(np.concatenate([np.sort(rng.choice(h, size=len(t), replace=False)), t]))


def class_balance_weights(counts: np.ndarray, beta: float) -> np.ndarray:
    """Inverse effective-number weights (1-beta)/(1-beta^n), normalised to mean 1 over seen items."""
    w = np.zeros(len(counts), dtype=np.float64)
    seen = counts > 0
    effective = (1.0 - np.power(beta, counts[seen])) / (1.0 - beta)
    w[seen] = 1.0 / effective
    w[seen] *= seen.sum() / w[seen].sum()
    return w


def _slice(train: Interactions, is_head: np.ndarray, head: bool) -> Interactions:
    mask = is_head[train.item_ids]
    return train.take(np.flatnonzero(mask if head else ~mask))


# ---------------------------------------------------------------- regimes


def _two_stage(first, second, data, model_cfg, cfg, loss_cfg, regime, init_seed):
    f = data.features
    theta = init_two_tower(f.user_layout, f.item_layout, model_cfg, init_seed)
    rng = np.random.default_rng([cfg.seed, 3])
    curve = []
    opt = AdamState(cfg.alpha)
    fit_two_tower(theta, _fixed(first), data, loss_cfg, opt, cfg.epochs_per_stage, cfg, rng, curve, 1)
    stage1 = theta.copy()
    opt.learning_rate = cfg.alpha * cfg.decay_between_stages
    fit_two_tower(theta, _fixed(second), data, loss_cfg, opt, cfg.epochs_per_stage, cfg, rng, curve, 2)
    return TrainedModel(regime, "single", {"theta": theta}, 1.0, curve, {"stage1_theta": stage1})


def _single(stream_fn, data, model_cfg, cfg, loss_cfg, regime, init_seed, weights=None):
    f = data.features
    theta = init_two_tower(f.user_layout, f.item_layout, model_cfg, init_seed)
    rng = np.random.default_rng([cfg.seed, 4, init_seed])
    curve = []
    fit_two_tower(
        theta, stream_fn, data, loss_cfg, AdamState(cfg.alpha), 2 * cfg.epochs_per_stage, cfg, rng, curve, 1,
        weights,
    )
    return TrainedModel(regime, "single", {"theta": theta}, 1.0, curve)


def train_regime(name: str, ds: PreparedDataset, model_cfg: ModelConfig, cfg: TrainingConfig) -> TrainedModel:
    """Train one named regime on a prepared dataset.

    Non-curriculum regimes run 2 x epochs_per_stage epochs; curriculum
    regimes run epochs_per_stage per stage.
    """
    if name not in REGIMES:
        raise UnknownRegime(name)
    data = TrainingData.from_prepared(ds)
    train = ds.split.train
    plain = LossConfig(cfg.loss.lambda_reg, cfg.loss.lambda_logq, cfg.loss.lambda_pred, use_logq=False)
    corrected = LossConfig(cfg.loss.lambda_reg, cfg.loss.lambda_logq, cfg.loss.lambda_pred, use_logq=True)
    seed = cfg.seed

    if name == "two_tower":
        return _single(_fixed(train), data, model_cfg, cfg, plain, name, seed)
    if name == "logq":
        return _single(_fixed(train), data, model_cfg, cfg, corrected, name, seed)
    if name == "oversample":
        return _single(lambda rng: oversample_stream(train, data.is_head, rng), data, model_cfg, cfg, plain, name, seed)
    if name == "undersample":
        return _single(lambda rng: undersample_stream(train, data.is_head, rng), data, model_cfg, cfg, plain, name, seed)
    if name == "class_balance":
        w = class_balance_weights(data.counts, cfg.class_balance_beta)
        return _single(_fixed(train), data, model_cfg, cfg, plain, name, seed, w)
    if name == "head2tail":
        return _two_stage(_slice(train, data.is_head, True), _slice(train, data.is_head, False),
                          data, model_cfg, cfg, plain, name, seed)
    if name == "tail2head":
        return _two_stage(_slice(train, data.is_head, False), _slice(train, data.is_head, True),
                          data, model_cfg, cfg, plain, name, seed)
    if name == "two_tower_2":
        a = _single(_fixed(train), data, model_cfg, cfg, plain, name, seed)
        b = _single(_fixed(train), data, model_cfg, cfg, plain, name, seed + 1)
        curve = [dict(r, model="a") for r in a.curve] + [dict(r, model="b") for r in b.curve]
        return TrainedModel(
            name, "mix", {"theta_a": a.params["theta"], "theta_b": b.params["theta"]}, cfg.loss.lambda_pred, curve
        )
    if name == "mirec_c":
        return _two_stage(ds.curriculum.omega_star, ds.curriculum.omega_k, data, model_cfg, cfg, cfg.loss, name, seed)

    # meta-learning family; size check first so an impossible mapper fails before pretraining
    MetaMapper.dims(init_two_tower(data.features.user_layout, data.features.item_layout, model_cfg, seed),
                    model_cfg.mapper_scope)
    if name == "mirec_m":
        cur = build_curriculum_sets(train, ds.head_tail, ds.curriculum.sampling_seed, head_only=True)
    else:
        cur = ds.curriculum
    run_cfg = cfg
    if name == "mirec_nologq":
        run_cfg = TrainingConfig(**{**cfg.__dict__, "loss": plain})
    curve = []
    theta_star = train_many_shot(cur.omega_star, data, model_cfg, run_cfg, curve)
    out = train_mirec(cur.omega_star, cur.omega_k, freeze(theta_star), data, model_cfg, run_cfg, curve)
    out.regime = name
    return out


# ---------------------------------------------------------------- persistence


def save_run(model: TrainedModel, out_dir, model_cfg: ModelConfig, cfg: TrainingConfig, dataset_hash: str) -> list:
    """Write checkpoints, manifest.json and curves.jsonl; returns checkpoint names."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(model_cfg, cfg)
    base_meta = {
        "regime": model.regime,
        "kind": model.kind,
        "seed": cfg.seed,
        "config_hash": chash,
        "dataset_hash": dataset_hash,
        "lambda_pred": model.lambda_pred,
    }
    written = []
    some_theta = next(v for v in model.params.values() if isinstance(v, TwoTowerParams))
    arch = some_theta.architecture(model_cfg)
    for role, obj in list(model.params.items()) + list(model.stage_params.items()):
        meta = dict(base_meta, role=role, architecture=arch)
        if isinstance(obj, MetaMapper):
            meta["mapper_scope"] = obj.scope
        save_checkpoint(out / f"{role}.ckpt", obj.blocks(), meta)
        written.append(f"{role}.ckpt")
    manifest = dict(
        base_meta,
        checkpoints=written,
        model_config=asdict(model_cfg),
        training_config=asdict(cfg),
        epochs=len(model.curve),
    )
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2), encoding="utf-8")
    with open(out / "curves.jsonl", "w", encoding="utf-8") as fh:
        for rec in model.curve:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return written


def load_run(run_dir) -> tuple[TrainedModel, dict]:
    run = Path(run_dir)
    manifest = json.loads((run / "manifest.json").read_text(encoding="utf-8"))
    params = {}
    for name in manifest["checkpoints"]:
        arrays, meta = load_checkpoint(run / name)
        role = meta["role"]
        if role.startswith("stage1"):
            continue
        if role == "mapper":
            continue
        params[role] = two_tower_from_arrays(arrays, meta["architecture"])
    if "mapper.ckpt" in manifest["checkpoints"]:
        arrays, meta = load_checkpoint(run / "mapper.ckpt")
        mapper = MetaMapper.identity(params["theta_few"], meta["mapper_scope"])
        mapper.load_arrays(arrays)
        params["mapper"] = mapper
    curve = []
    if (run / "curves.jsonl").exists():
        curve = [json.loads(line) for line in (run / "curves.jsonl").read_text(encoding="utf-8").splitlines()]
    model = TrainedModel(manifest["regime"], manifest["kind"], params, manifest["lambda_pred"], curve)
    return model, manifest

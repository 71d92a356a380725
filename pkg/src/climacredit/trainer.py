"""Unimodal and fused default classifiers: splitting, training, search, freezing."""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ParamStore, Rng, Tensor, glorot_uniform
from .encoders import EncoderConfig, TokenVocab, build_encoder

logger = logging.getLogger(__name__)

LEARNING_RATES = (2e-5, 1e-5, 1e-4, 1e-3)
BATCH_SIZES = (16, 32)
RECURRENT_LAYERS = (2, 3)
MODEL_VERSION = "climacredit-model/1"


class TrainerError(ValueError):
    pass


class SingleClass(TrainerError):
    pass


class MissingModality(TrainerError):
    pass


class MissingCheckpoint(TrainerError):
    pass


class Divergence(RuntimeError):
    def __init__(self, epoch: int, step: int):
        self.epoch, self.step = epoch, step
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")


@dataclass(frozen=True)
class ModalityMask:
    structured: bool
    climate: bool
    text: bool

    def __post_init__(self):
        if not (self.structured or self.climate or self.text):
            raise TrainerError("at least one modality must be active")

    @property
    def code(self) -> str:
        return "+".join(k for k, on in zip("SCT", (self.structured, self.climate, self.text)) if on)

    @classmethod
    def parse(cls, text: str) -> "ModalityMask":
        """Accepts codes like ``S+C`` or names like ``structured,climate``."""
        raw = text.replace("+", ",").replace(" ", "").lower().split(",")
        names = {"s": "structured", "c": "climate", "t": "text"}
        parts = {names.get(p, p) for p in raw if p}
        unknown = parts - {"structured", "climate", "text"}
        if unknown:
            raise TrainerError(f"unknown modalities {sorted(unknown)}")
        return cls("structured" in parts, "climate" in parts, "text" in parts)

    @classmethod
    def all_masks(cls) -> list["ModalityMask"]:
        return [cls(*bits) for bits in itertools.product((True, False), repeat=3) if any(bits)]


@dataclass
class ModelConfig:
    mask: ModalityMask = field(default_factory=lambda: ModalityMask(True, True, True))
    encoder: str = "GRU"
    hidden_size: int = 128
    num_layers: int = 2
    heads: int = 8
    ff_dim: int = 256
    text_embed_dim: int = 32
    max_seq_len: int = 326
    mlp_hidden: int = 64
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    pos_weight: float | None = None

    def __post_init__(self):
        self.encoder = self.encoder.upper()

    def encoder_config(self, input_dim: int) -> EncoderConfig:
        return EncoderConfig(
            kind=self.encoder,
            input_dim=input_dim,
            hidden_size=self.hidden_size,
            num_layers=self.num_layers,
            heads=self.heads,
            ff_dim=self.ff_dim,
            max_seq_len=self.max_seq_len,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mask"] = self.mask.code
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        doc = dict(doc)
        doc["mask"] = ModalityMask.parse(doc["mask"])
        return cls(**doc)


@dataclass
class Dataset:
    """Aligned per-loan model inputs. Any modality may be absent (None)."""

    labels: np.ndarray
    structured: np.ndarray | None = None  # (N, p) WoE values
    climate: np.ndarray | None = None  # (N, 12, k) raw panel
    text_ids: np.ndarray | None = None  # (N, T) right padded
    text_mask: np.ndarray | None = None
    loan_ids: list | None = None
    vocab: TokenVocab | None = None

    def __len__(self) -> int:
        return int(len(self.labels))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return Dataset(
            self.labels[idx],
            pick(self.structured),
            pick(self.climate),
            pick(self.text_ids),
            pick(self.text_mask),
            None if self.loan_ids is None else [self.loan_ids[i] for i in idx],
            self.vocab,
        )


# -- splits -------------------------------------------------------------------


@dataclass
class SplitPlan:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int

    def checksum(self) -> str:
        h = hashlib.sha256()
        for part in (self.train, self.val, self.test):
            h.update(np.asarray(sorted(part.tolist()), dtype=np.int64).tobytes())
            h.update(b"|")
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "train": self.train.tolist(),
            "val": self.val.tolist(),
            "test": self.test.tolist(),
            "checksum": self.checksum(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SplitPlan":
        arr = lambda k: np.asarray(doc[k], dtype=np.int64)
        plan = cls(arr("train"), arr("val"), arr("test"), int(doc["seed"]))
        if "checksum" in doc and doc["checksum"] != plan.checksum():
            raise TrainerError(f"split checksum mismatch: recorded {doc['checksum']}, computed {plan.checksum()}")
        return plan

    def labels_of(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=object)
        out[self.train], out[self.val], out[self.test] = "TRAIN", "VAL", "TEST"
        return out


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_split(labels, seed: int, test_fraction: float = 0.3, val_fraction: float = 0.2) -> SplitPlan:
    """Stratified split: per class, a test share, then a validation share of the rest."""
    y = np.asarray(labels).astype(np.int64)
    classes = np.unique(y)
    if classes.size < 2:
        raise SingleClass("both classes are required for a stratified split")
    gen = Rng(seed).stream("split")
    train, val, test = [], [], []
    for c in classes:
        members = np.flatnonzero(y == c)
        members = members[gen.permutation(members.size)]
        n_test = _round_half_up(test_fraction * members.size)
        pool = members.size - n_test
        n_val = _round_half_up(val_fraction * pool)
        test.append(members[:n_test])
        val.append(members[n_test : n_test + n_val])
        train.append(members[n_test + n_val :])
    cat = lambda parts: np.sort(np.concatenate(parts))
    return SplitPlan(cat(train), cat(val), cat(test), seed)


# -- model --------------------------------------------------------------------


@dataclass
class ClimateScaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, climate: np.ndarray) -> "ClimateScaler":
        flat = climate.reshape(-1, climate.shape[-1])
        std = flat.std(axis=0)
        return cls(flat.mean(axis=0), np.where(std > 0, std, 1.0))

    def apply(self, climate: np.ndarray) -> np.ndarray:
        return (climate - self.mean) / self.std


class FusionModel:
    """Modality branches feeding either the benchmark MLP or a single dense unit."""

    def __init__(
        self,
        config: ModelConfig,
        struct_dim: int,
        climate_dim: int,
        vocab_size: int,
        zero_head: bool = False,
        text_table: np.ndarray | None = None,
    ):
        self.config = config
        self.struct_dim, self.climate_dim, self.vocab_size = struct_dim, climate_dim, vocab_size
        self.store = ParamStore()
        self.scaler: ClimateScaler | None = None
        rng = Rng(config.seed)
        m = config.mask
        self.climate_encoder = self.text_encoder = None
        latent = 0
        if m.climate:
            self.climate_encoder = build_encoder(
                config.encoder_config(climate_dim), self.store, "climate.enc", rng.stream("init/climate")
            )
            latent += self.climate_encoder.output_dim
        if m.text:
            gen = rng.stream("init/text")
            if text_table is not None:
                self.store.add("text.emb.table", text_table)
                self.store.freeze(["text.emb.table"])
            else:
                if vocab_size < 3:
                    raise MissingModality("text branch needs a fitted vocabulary")
                self.store.add("text.emb.table", gen.uniform(-0.1, 0.1, size=(vocab_size, config.text_embed_dim)))
            embed_dim = self.store["text.emb.table"].shape[1]
            self.text_encoder = build_encoder(config.encoder_config(embed_dim), self.store, "text.enc", gen)
            latent += self.text_encoder.output_dim
        head_gen = rng.stream("init/head")
        if self.is_benchmark_mlp:
            H = config.mlp_hidden
            self.store.add("head.W1", glorot_uniform(head_gen, struct_dim, H))
            self.store.add("head.b1", np.zeros(H))
            self.store.add("head.W2", glorot_uniform(head_gen, H, 1))
            self.store.add("head.b2", np.zeros(1))
        else:
            fan_in = latent + (struct_dim if m.structured else 0)
            w = np.zeros((fan_in, 1)) if zero_head else glorot_uniform(head_gen, fan_in, 1)
            self.store.add("head.W", w)
            self.store.add("head.b", np.zeros(1))

    @property
    def is_benchmark_mlp(self) -> bool:
        m = self.config.mask
        return m.structured and not m.climate and not m.text

    def head_names(self) -> list[str]:
        return self.store.names("head.")

    def branch_names(self) -> list[str]:
        return [n for n in self.store if not n.startswith("head.")]

    def text_latent(self, text_ids, text_mask) -> Tensor:
        ids, mask = text_ids, text_mask
        if mask is not None and mask.size:
            width = max(1, int(mask.sum(axis=1).max()))
            ids, mask = ids[:, :width], mask[:, :width]
        emb = ad.embedding_lookup(self.store["text.emb.table"], ids)
        return self.text_encoder.encode(emb, mask)

    def logits(self, batch: Dataset, text_latent: Tensor | None = None) -> Tensor:
        """Head logits; ``text_latent`` may be supplied precomputed."""
        m = self.config.mask
        parts = []
        if m.structured:
            if batch.structured is None:
                raise MissingModality("structured inputs required")
            parts.append(Tensor(batch.structured))
        if m.climate:
            if batch.climate is None:
                raise MissingModality("climate inputs required")
            x = self.scaler.apply(batch.climate) if self.scaler is not None else batch.climate
            parts.append(self.climate_encoder.encode(Tensor(x)))
        if m.text:
            if text_latent is None:
                if batch.text_ids is None:
                    raise MissingModality("text inputs required")
                text_latent = self.text_latent(batch.text_ids, batch.text_mask)
            parts.append(text_latent)
        s = self.store
        if self.is_benchmark_mlp:
            hidden = ad.tanh(ad.linear(parts[0], s["head.W1"], s["head.b1"]))
            out = ad.linear(hidden, s["head.W2"], s["head.b2"])
        else:
            joined = parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)
            out = ad.linear(joined, s["head.W"], s["head.b"])
        return ad.reshape(out, (len(batch),))

    def forward(self, batch: Dataset) -> Tensor:
        return ad.sigmoid(self.logits(batch))

    def predict(self, data: Dataset, batch_size: int = 256) -> np.ndarray:
        out = []
        with ad.no_grad():
            for start in range(0, len(data), batch_size):
                out.append(self.forward(data.subset(np.arange(start, min(start + batch_size, len(data))))).data)
        return np.concatenate(out) if out else np.zeros(0)

    # -- persistence --

    def to_json(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "config": self.config.to_dict(),
            "dims": [self.struct_dim, self.climate_dim, self.vocab_size],
            "scaler": None if self.scaler is None else [self.scaler.mean.tolist(), self.scaler.std.tolist()],
            "frozen": sorted(self.store.frozen),
            "params": self.store.to_json(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FusionModel":
        if doc.get("version") != MODEL_VERSION:
            raise MissingCheckpoint(f"unsupported model version {doc.get('version')!r}")
        config = ModelConfig.from_dict(doc["config"])
        saved = ParamStore.from_json(doc["params"])
        external = "text.emb.table" in doc.get("frozen", []) and "text.emb.table" in saved
        model = cls(config, *doc["dims"], text_table=saved["text.emb.table"].data if external else None)
        model.store.restore(saved.snapshot())
        model.store.freeze(doc.get("frozen", []))
        if doc["scaler"] is not None:
            model.scaler = ClimateScaler(np.array(doc["scaler"][0]), np.array(doc["scaler"][1]))
        return model

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "FusionModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass
class TrainedModel:
    model: FusionModel
    train_curve: list[float]
    val_curve: list[float]
    best_epoch: int

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    @property
    def best_val_bce(self) -> float:
        return self.val_curve[self.best_epoch]

    def predict(self, data: Dataset) -> np.ndarray:
        return self.model.predict(data)


def _dims(data: Dataset) -> tuple[int, int, int]:
    struct_dim = 0 if data.structured is None else data.structured.shape[1]
    climate_dim = 0 if data.climate is None else data.climate.shape[-1]
    vocab_size = 0 if data.vocab is None else len(data.vocab)
    if data.text_ids is not None and data.vocab is None:
        vocab_size = int(data.text_ids.max()) + 1
    return struct_dim, climate_dim, vocab_size


def validation_bce(model: FusionModel, data: Dataset) -> float:
    probs = model.predict(data)
    return float(ad.bce_loss(Tensor(probs), data.labels).data)


def fit_model(model: FusionModel, data: Dataset, split: SplitPlan) -> TrainedModel:
    """Mini-batch Adam with early stopping on validation BCE; best state restored."""
    cfg = model.config
    train_set, val_set = data.subset(split.train), data.subset(split.val)
    if model.config.mask.climate and model.scaler is None:
        model.scaler = ClimateScaler.fit(train_set.climate)
    trainable = model.store.trainable()
    gen = Rng(cfg.seed).stream("shuffle")
    best_state, best_epoch, best_val = model.store.snapshot(), -1, math.inf
    train_curve, val_curve = [], []
    step = 0
    for epoch in range(cfg.max_epochs):
        order = gen.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = train_set.subset(order[start : start + cfg.batch_size])
            model.store.zero_grad()
            try:
                loss = ad.bce_loss(model.forward(batch), batch.labels, pos_weight=cfg.pos_weight)
                loss.backward()
                ad.adam_step(model.store, cfg.lr)
            except NonFiniteError as exc:
                raise Divergence(epoch, step) from exc
            losses.append(float(loss.data))
            step += 1
        train_curve.append(float(np.mean(losses)))
        val = validation_bce(model, val_set)
        val_curve.append(val)
        if val < best_val:
            best_val, best_epoch = val, epoch
            best_state = {n: model.store[n].data.copy() for n in trainable}
        logger.debug("epoch %d train %.5f val %.5f", epoch, train_curve[-1], val)
        if epoch - best_epoch >= cfg.patience:
            break
    model.store.restore(best_state)
    model.store.zero_grad()
    return TrainedModel(model, train_curve, val_curve, best_epoch)


def train(config: ModelConfig, data: Dataset, split: SplitPlan) -> TrainedModel:
    return fit_model(FusionModel(config, *_dims(data)), data, split)


# -- search -------------------------------------------------------------------


def search_grid(base: ModelConfig) -> list[ModelConfig]:
    """Learning rate x batch (x layers for recurrent encoders)."""
    layers = (3,) if base.encoder == "TRANSFORMER" else RECURRENT_LAYERS
    return [
        replace(base, lr=lr, batch_size=bs, num_layers=nl)
        for lr, bs, nl in itertools.product(LEARNING_RATES, BATCH_SIZES, layers)
    ]


def grid_search(grid, data: Dataset, split: SplitPlan):
    """Train every cell; best = min validation BCE, then lower lr, batch, layers."""
    grid = list(grid)
    if not grid:
        raise TrainerError("empty grid")
    board = []
    for cfg in grid:
        try:
            tm = train(cfg, data, split)
        except (Divergence, NonFiniteError) as exc:
            logger.warning("grid cell %s failed: %s", cfg.to_dict(), exc)
            continue
        board.append((tm.best_val_bce, cfg.lr, cfg.batch_size, cfg.num_layers, tm))
    if not board:
        raise TrainerError("every grid cell failed")
    board.sort(key=lambda r: r[:4])
    leaderboard = [
        {"val_bce": r[0], "lr": r[1], "batch_size": r[2], "num_layers": r[3], "best_epoch": r[4].best_epoch}
        for r in board
    ]
    return board[0][4], leaderboard


# -- hybrid freeze --------------------------------------------------------------


def hybrid_freeze_train(
    pretrained: dict,
    config: ModelConfig,
    data: Dataset,
    split: SplitPlan,
    zero_head: bool = True,
) -> TrainedModel:
    """Fuse pretrained unimodal branches; only the dense head is updated.

    ``pretrained`` maps ``"climate"``/``"text"`` to trained unimodal models
    whose encoder settings must match ``config``.
    """
    m = config.mask
    needed = [k for k, on in (("climate", m.climate), ("text", m.text)) if on]
    for k in needed:
        if k not in pretrained:
            raise MissingCheckpoint(f"no pretrained {k} model")
    model = FusionModel(config, *_dims(data), zero_head=zero_head)
    for k in needed:
        source = pretrained[k].model if isinstance(pretrained[k], TrainedModel) else pretrained[k]
        names = [n for n in source.branch_names() if n.startswith(f"{k}.")]
        missing = [n for n in names if n not in model.store]
        if missing or not names:
            raise MissingCheckpoint(f"pretrained {k} branch incompatible with config ({missing[:3]})")
        model.store.restore({n: source.store[n].data for n in names})
        if k == "climate":
            model.scaler = copy.deepcopy(source.scaler)
    model.store.freeze(model.branch_names())
    return fit_model(model, data, split)

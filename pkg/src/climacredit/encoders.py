"""Sequence encoders (LSTM, GRU, transformer) and token vocabularies.

Each encoder registers its weights in a shared :class:`ParamStore` under a
name prefix and maps a right-padded batch ``(B, T, d)`` with a boolean
validity mask ``(B, T)`` to one latent vector per row.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor, glorot_uniform

KINDS = ("LSTM", "GRU", "TRANSFORMER")


class EncoderError(ValueError):
    pass


class SequenceTooLong(EncoderError):
    pass


@dataclass
class EncoderConfig:
    kind: str = "GRU"
    input_dim: int = 4
    hidden_size: int = 128
    num_layers: int = 2
    heads: int = 8
    ff_dim: int = 256
    max_seq_len: int = 326
    positional: bool = True

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.kind not in KINDS:
            raise EncoderError(f"unknown encoder kind {self.kind!r}")
        for name in ("input_dim", "hidden_size", "num_layers", "heads", "ff_dim", "max_seq_len"):
            if getattr(self, name) < 1:
                raise EncoderError(f"{name} must be >= 1")
        if self.kind == "TRANSFORMER" and self.hidden_size % self.heads:
            raise EncoderError("hidden_size must be divisible by heads")

    def to_dict(self) -> dict:
        return asdict(self)


def _mask_column(mask, t: int, batch: int) -> np.ndarray:
    if mask is None:
        return np.ones((batch, 1))
    return np.asarray(mask[:, t], dtype=np.float64)[:, None]


class LSTMEncoder:
    """Stacked LSTM; the latent is the top layer's last valid hidden state."""

    def __init__(self, cfg: EncoderConfig, store: ParamStore, prefix: str, gen: np.random.Generator):
        self.cfg, self.store, self.prefix = cfg, store, prefix
        H = cfg.hidden_size
        for layer in range(cfg.num_layers):
            d_in = cfg.input_dim if layer == 0 else H
            store.add(f"{prefix}.l{layer}.W", glorot_uniform(gen, d_in, 4 * H))
            store.add(f"{prefix}.l{layer}.U", glorot_uniform(gen, H, 4 * H))
            store.add(f"{prefix}.l{layer}.b", np.zeros(4 * H))

    @property
    def output_dim(self) -> int:
        return self.cfg.hidden_size

    def encode(self, x: Tensor, mask=None) -> Tensor:
        H = self.cfg.hidden_size
        B, T = x.shape[0], x.shape[1]
        seq = x
        h = None
        for layer in range(self.cfg.num_layers):
            p = f"{self.prefix}.l{layer}"
            projected = ad.add(ad.matmul(seq, self.store[f"{p}.W"]), self.store[f"{p}.b"])
            U = self.store[f"{p}.U"]
            h = Tensor(np.zeros((B, H)))
            c = Tensor(np.zeros((B, H)))
            outputs = []
            for t in range(T):
                gates = ad.add(projected[:, t, :], ad.matmul(h, U))
                sig = ad.sigmoid(gates[:, : 3 * H])
                i, f, o = sig[:, :H], sig[:, H : 2 * H], sig[:, 2 * H :]
                g = ad.tanh(gates[:, 3 * H :])
                c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
                h_new = ad.mul(o, ad.tanh(c_new))
                m = _mask_column(mask, t, B)
                c = ad.blend(c_new, c, m)
                h = ad.blend(h_new, h, m)
                outputs.append(h)
            if layer + 1 < self.cfg.num_layers:
                seq = ad.stack(outputs, axis=1)
        return h


class GRUEncoder:
    """Stacked GRU, h' = (1 - z) * h + z * n with the reset gate inside n."""

    def __init__(self, cfg: EncoderConfig, store: ParamStore, prefix: str, gen: np.random.Generator):
        self.cfg, self.store, self.prefix = cfg, store, prefix
        H = cfg.hidden_size
        for layer in range(cfg.num_layers):
            d_in = cfg.input_dim if layer == 0 else H
            store.add(f"{prefix}.l{layer}.W", glorot_uniform(gen, d_in, 3 * H))
            store.add(f"{prefix}.l{layer}.U", glorot_uniform(gen, H, 3 * H))
            store.add(f"{prefix}.l{layer}.b", np.zeros(3 * H))
            store.add(f"{prefix}.l{layer}.bh", np.zeros(H))

    @property
    def output_dim(self) -> int:
        return self.cfg.hidden_size

    def encode(self, x: Tensor, mask=None, forced_update=None) -> Tensor:
        H = self.cfg.hidden_size
        B, T = x.shape[0], x.shape[1]
        seq = x
        h = None
        for layer in range(self.cfg.num_layers):
            p = f"{self.prefix}.l{layer}"
            projected = ad.add(ad.matmul(seq, self.store[f"{p}.W"]), self.store[f"{p}.b"])
            U = self.store[f"{p}.U"]
            bh = self.store[f"{p}.bh"]
            h = Tensor(np.zeros((B, H)))
            outputs = []
            for t in range(T):
                step = projected[:, t, :]
                recur = ad.matmul(h, U)
                rz = ad.sigmoid(ad.add(step[:, : 2 * H], recur[:, : 2 * H]))
                r, z = rz[:, :H], rz[:, H:]
                if forced_update is not None:
                    z = Tensor(np.full((B, H), float(forced_update)))
                n = ad.tanh(ad.add(step[:, 2 * H :], ad.mul(r, ad.add(recur[:, 2 * H :], bh))))
                h_new = ad.blend(n, h, z)
                h = ad.blend(h_new, h, _mask_column(mask, t, B))
                outputs.append(h)
            if layer + 1 < self.cfg.num_layers:
                seq = ad.stack(outputs, axis=1)
        return h


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def multi_head_attention(x: Tensor, store: ParamStore, prefix: str, heads: int, key_mask=None):
    """Self-attention over ``x`` (B, T, D). Returns (output, attention weights)."""
    B, T, D = x.shape
    dh = D // heads

    def split(name):
        proj = ad.add(ad.matmul(x, store[f"{prefix}.W{name}"]), store[f"{prefix}.b{name}"])
        return ad.transpose(ad.reshape(proj, (B, T, heads, dh)), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[:, None, None, :]
    weights = ad.softmax(scores, axis=-1, mask=mask)
    context = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (B, T, D))
    out = ad.add(ad.matmul(context, store[f"{prefix}.Wo"]), store[f"{prefix}.bo"])
    return out, weights


class TransformerEncoder:
    """Pre-norm encoder stack; the latent is the learned classification token."""

    def __init__(self, cfg: EncoderConfig, store: ParamStore, prefix: str, gen: np.random.Generator):
        self.cfg, self.store, self.prefix = cfg, store, prefix
        D, F = cfg.hidden_size, cfg.ff_dim
        store.add(f"{prefix}.Win", glorot_uniform(gen, cfg.input_dim, D))
        store.add(f"{prefix}.bin", np.zeros(D))
        store.add(f"{prefix}.cls", gen.uniform(-0.1, 0.1, size=(1, 1, D)))
        for layer in range(cfg.num_layers):
            p = f"{prefix}.l{layer}"
            store.add(f"{p}.ln1.g", np.ones(D))
            store.add(f"{p}.ln1.b", np.zeros(D))
            for name in ("q", "k", "v", "o"):
                store.add(f"{p}.att.W{name}", glorot_uniform(gen, D, D))
                store.add(f"{p}.att.b{name}", np.zeros(D))
            store.add(f"{p}.ln2.g", np.ones(D))
            store.add(f"{p}.ln2.b", np.zeros(D))
            store.add(f"{p}.ff.W1", glorot_uniform(gen, D, F))
            store.add(f"{p}.ff.b1", np.zeros(F))
            store.add(f"{p}.ff.W2", glorot_uniform(gen, F, D))
            store.add(f"{p}.ff.b2", np.zeros(D))
        store.add(f"{prefix}.lnf.g", np.ones(D))
        store.add(f"{prefix}.lnf.b", np.zeros(D))
        self._pe = sinusoidal_positions(cfg.max_seq_len + 1, D)
        self.last_attention: list[np.ndarray] = []

    @property
    def output_dim(self) -> int:
        return self.cfg.hidden_size

    def encode(self, x: Tensor, mask=None) -> Tensor:
        s = self.store
        p0 = self.prefix
        B, T = x.shape[0], x.shape[1]
        if T > self.cfg.max_seq_len:
            raise SequenceTooLong(f"sequence length {T} exceeds {self.cfg.max_seq_len}")
        D = self.cfg.hidden_size
        h = ad.add(ad.matmul(x, s[f"{p0}.Win"]), s[f"{p0}.bin"])
        cls = ad.mul(s[f"{p0}.cls"], np.ones((B, 1, 1)))
        h = ad.concat([cls, h], axis=1)
        if self.cfg.positional:
            h = ad.add(h, self._pe[: T + 1][None, :, :])
        valid = np.ones((B, T + 1), dtype=bool)
        if mask is not None:
            valid[:, 1:] = np.asarray(mask, dtype=bool)
        self.last_attention = []
        for layer in range(self.cfg.num_layers):
            p = f"{p0}.l{layer}"
            normed = ad.layer_norm(h, s[f"{p}.ln1.g"], s[f"{p}.ln1.b"])
            att, weights = multi_head_attention(normed, s, f"{p}.att", self.cfg.heads, valid)
            self.last_attention.append(weights.data)
            h = ad.add(h, att)
            normed = ad.layer_norm(h, s[f"{p}.ln2.g"], s[f"{p}.ln2.b"])
            ff = ad.gelu(ad.add(ad.matmul(normed, s[f"{p}.ff.W1"]), s[f"{p}.ff.b1"]))
            h = ad.add(h, ad.add(ad.matmul(ff, s[f"{p}.ff.W2"]), s[f"{p}.ff.b2"]))
        h = ad.layer_norm(h, s[f"{p0}.lnf.g"], s[f"{p0}.lnf.b"])
        return ad.reshape(h[:, 0, :], (B, D))


def build_encoder(cfg: EncoderConfig, store: ParamStore, prefix: str, gen: np.random.Generator):
    cls = {"LSTM": LSTMEncoder, "GRU": GRUEncoder, "TRANSFORMER": TransformerEncoder}[cfg.kind]
    return cls(cfg, store, prefix, gen)


# -- tokens ---------------------------------------------------------------------

PAD, OOV, CLS = "<pad>", "<oov>", "<cls>"


class TokenVocab:
    """Dense token ids with reserved PAD=0, OOV=1, CLS=2."""

    def __init__(self, tokens=()):
        self.token_to_id = {PAD: 0, OOV: 1, CLS: 2}
        for tok in tokens:
            if tok not in self.token_to_id:
                self.token_to_id[tok] = len(self.token_to_id)

    @classmethod
    def fit(cls, texts, min_count: int = 1) -> "TokenVocab":
        counts = Counter(tok for text in texts for tok in text)
        kept = sorted(t for t, n in counts.items() if n >= min_count and t not in (PAD, OOV, CLS))
        return cls(kept)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def oov_id(self) -> int:
        return 1

    @property
    def cls_id(self) -> int:
        return 2

    def __len__(self) -> int:
        return len(self.token_to_id)

    def ids(self, tokens) -> list[int]:
        return [self.token_to_id.get(t, 1) for t in tokens]

    def batch(self, texts, max_seq_len: int) -> tuple[np.ndarray, np.ndarray]:
        """Right-padded id matrix and validity mask; empty texts get one PAD slot."""
        rows = [self.ids(t)[:max_seq_len] for t in texts]
        width = max(1, max((len(r) for r in rows), default=1))
        ids = np.zeros((len(rows), width), dtype=np.int64)
        mask = np.zeros((len(rows), width), dtype=bool)
        for i, r in enumerate(rows):
            ids[i, : len(r)] = r
            mask[i, : len(r)] = True
        return ids, mask

    def to_json(self) -> str:
        return json.dumps([{"token": t, "id": i} for t, i in self.token_to_id.items()], ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "TokenVocab":
        entries = sorted(json.loads(text), key=lambda e: e["id"])
        vocab = cls()
        vocab.token_to_id = {e["token"]: int(e["id"]) for e in entries}
        return vocab


def load_embedding_table(path) -> dict[str, np.ndarray]:
    """Read ``token<TAB>v1 v2 ...`` lines (UTF-8); all vectors must share one width."""
    table = {}
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            token, _, rest = line.partition("\t")
            vec = np.array(rest.replace("\t", " ").split(), dtype=np.float64)
            if width is None:
                width = vec.size
            elif vec.size != width:
                raise EncoderError(f"{path}:{lineno}: expected {width} values, got {vec.size}")
            table[token] = vec
    return table


def embedding_matrix(vocab: TokenVocab, table: dict[str, np.ndarray]) -> np.ndarray:
    """Rows for every vocab id; tokens missing from ``table`` reuse the OOV row."""
    width = len(next(iter(table.values())))
    oov = table.get(OOV, np.zeros(width))
    out = np.zeros((len(vocab), width))
    for tok, i in vocab.token_to_id.items():
        if tok == PAD:
            continue
        out[i] = table.get(tok, oov)
    return out


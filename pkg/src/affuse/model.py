"""Visual/aural TCN branches joined by leader-follower attention.

The visual branch leads: its TCN output is concatenated directly with the
normalized cross-modal attention feature before the regression head. The
mfcc and VGGish branches only reach the head through attention.
"""
import json
import math
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from affuse import tensor as T
from affuse.nn import LayerNorm, LinearLayer, Module, TCNStack, _as_batch, _unbatch
from affuse.tensor import ShapeError

CHECKPOINT_MAGIC = b"AFMD"
CHECKPOINT_VERSION = 1

MODALITIES = ("visual", "mfcc", "vggish")


class CheckpointError(ValueError):
    pass


@dataclass
class FusionConfig:
    kind: str = "multimodal"
    visual_dim: int = 512
    mfcc_dim: int = 39
    vggish_dim: int = 128
    visual_channels: int = 128
    aural_channels: int = 32
    num_levels: int = 4
    kernel_size: int = 5
    dropout: float = 0.1
    d_k: int = 32
    num_branches: int = 3
    leader_index: int = 0

    def __post_init__(self):
        if self.kind not in ("unimodal", "multimodal"):
            raise ValueError(f"kind must be unimodal or multimodal, got {self.kind!r}")
        if self.num_branches != 3 or self.leader_index != 0:
            raise ValueError("only three branches with the visual branch leading are supported")

    @property
    def attention_width(self):
        return self.num_branches * self.d_k

    @property
    def fused_width(self):
        return self.visual_channels + self.attention_width

    @property
    def input_dims(self):
        dims = {"visual": self.visual_dim, "mfcc": self.mfcc_dim, "vggish": self.vggish_dim}
        return {m: dims[m] for m in self.modalities}

    @property
    def modalities(self):
        return MODALITIES if self.kind == "multimodal" else MODALITIES[:1]

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class BranchEncoder(Module):
    """Three independent per-frame linear maps producing query, key and value."""

    _children = ("query", "key", "value")

    def __init__(self, in_features, d_k, rng):
        self.query = LinearLayer(in_features, d_k, rng)
        self.key = LinearLayer(in_features, d_k, rng)
        self.value = LinearLayer(in_features, d_k, rng)

    def __call__(self, x):
        return self.query(x), self.key(x), self.value(x)


def encode_branch(features, encoder):
    return encoder(features)


def attention_scores(q, k, v):
    """Raw leader-follower attention, before normalization.

    q, k, v are lists of three (B, d_k, T) tensors. Returns the (B, T, 3, d_k)
    attention feature and the (B, T, 3, 3) score matrix.
    """
    if not (len(q) == len(k) == len(v) == 3):
        raise ShapeError(f"leader-follower attention needs 3 branches, got {len(q)}")
    d_k = q[0].shape[1]
    # (B, 3, d_k, T) -> (B, T, 3, d_k)
    Q = T.transpose(T.stack(q, axis=1), (0, 3, 1, 2))
    K = T.transpose(T.stack(k, axis=1), (0, 3, 1, 2))
    V = T.transpose(T.stack(v, axis=1), (0, 3, 1, 2))
    logits = T.matmul(Q, T.transpose(K, (0, 1, 3, 2))) * (1.0 / math.sqrt(d_k))
    scores = T.softmax_rows(logits)
    return T.matmul(scores + 1.0, V), scores


def leader_follower_attention(q, k, v, norm=None):
    """Attention feature of shape (B, 3*d_k, T); rows flattened branch-major.

    ``norm`` is applied per time step over the flattened feature when given.
    Unbatched (d_k, T) inputs give a (3*d_k, T) result.
    """
    batched = [_as_batch(t) for t in (*q, *k, *v)]
    squeeze = batched[0][1]
    q, k, v = ([b[0] for b in batched[i:i + 3]] for i in (0, 3, 6))
    att, _ = attention_scores(q, k, v)
    b, t = att.shape[0], att.shape[1]
    flat = T.reshape(att, (b, t, -1))
    if norm is not None:
        flat = norm(flat)
    return _unbatch(T.transpose(flat, (0, 2, 1)), squeeze)


class ModelBundle(Module):
    """All parameters of a unimodal or multimodal model.

    Freezable groups, in release order: ``visual_tcn`` then ``encoders``
    (multimodal only). Everything else is always trainable.
    """

    def __init__(self, config=None, seed=0):
        self.config = config or FusionConfig()
        cfg = self.config
        if cfg.fused_width != cfg.visual_channels + cfg.num_branches * cfg.d_k:
            raise AssertionError("fused width arithmetic broken")
        rng = np.random.default_rng(seed)
        tcn = dict(num_levels=cfg.num_levels, kernel_size=cfg.kernel_size, dropout=cfg.dropout)
        self.visual_tcn = TCNStack(cfg.visual_dim, cfg.visual_channels, rng=rng, **tcn)
        if cfg.kind == "unimodal":
            self.visual_head = LinearLayer(cfg.visual_channels, 1, rng)
            self._children = ("visual_tcn", "visual_head")
            return
        self.mfcc_tcn = TCNStack(cfg.mfcc_dim, cfg.aural_channels, rng=rng, **tcn)
        self.vggish_tcn = TCNStack(cfg.vggish_dim, cfg.aural_channels, rng=rng, **tcn)
        self.encoders = [
            BranchEncoder(cfg.visual_channels, cfg.d_k, rng),
            BranchEncoder(cfg.aural_channels, cfg.d_k, rng),
            BranchEncoder(cfg.aural_channels, cfg.d_k, rng),
        ]
        self.attention_norm = LayerNorm(cfg.attention_width)
        self.fusion_head = LinearLayer(cfg.fused_width, 1, rng)
        self._children = ("visual_tcn", "mfcc_tcn", "vggish_tcn", "attention_norm", "fusion_head")

    def named_parameters(self, prefix=""):
        for name in self._children:
            yield from getattr(self, name).named_parameters(f"{prefix}{name}.")
        if self.config.kind == "multimodal":
            for i, enc in enumerate(self.encoders):
                yield from enc.named_parameters(f"{prefix}encoders.{i}.")

    def parameter_groups(self):
        """[(group name, parameters)] for freezable groups, in release order, then
        the always-trainable remainder under ``"always"``."""
        groups = [("visual_tcn", self.visual_tcn.parameters())]
        if self.config.kind == "multimodal":
            groups.append(("encoders", [p for e in self.encoders for p in e.parameters()]))
        grouped = {id(p) for _, ps in groups for p in ps}
        rest = [p for p in self.parameters() if id(p) not in grouped]
        return groups + [("always", rest)]

    def __call__(self, inputs, train=False, rng=None):
        if self.config.kind == "unimodal":
            return forward_unimodal(self, inputs["visual"], train, rng)
        return forward_multimodal(self, inputs["visual"], inputs["mfcc"], inputs["vggish"], train, rng)

    # -- state ------------------------------------------------------------

    def state(self):
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays):
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError(f"state has {len(arrays)} tensors, model has {len(params)}")
        for p, a in zip(params, arrays):
            if p.shape != a.shape:
                raise ValueError(f"shape mismatch for {p.name}: {p.shape} vs {a.shape}")
            p.data = np.array(a, dtype=np.float64, copy=True)


def parameter_groups(model):
    return model.parameter_groups()


def _check_lengths(*xs):
    lengths = {x.shape[-1] for x in xs}
    if len(lengths) != 1:
        raise ShapeError(f"modalities disagree on sequence length: {sorted(lengths)}")


def forward_unimodal(model, visual, train=False, rng=None):
    """Visual TCN then per-frame head; returns (T,) or (B, T)."""
    visual, squeeze = _as_batch(visual)
    h = model.visual_tcn(visual, train, rng)
    y = model.visual_head(h)
    y = T.reshape(y, (y.shape[0], y.shape[2]))
    return T.reshape(y, (y.shape[1],)) if squeeze else y


def forward_multimodal(model, visual, mfcc, vggish, train=False, rng=None):
    """Three branches, leader-follower fusion, per-frame head; returns (T,) or (B, T)."""
    visual, squeeze = _as_batch(visual)
    mfcc, _ = _as_batch(mfcc)
    vggish, _ = _as_batch(vggish)
    _check_lengths(visual, mfcc, vggish)
    leader = model.visual_tcn(visual, train, rng)
    feats = [leader, model.mfcc_tcn(mfcc, train, rng), model.vggish_tcn(vggish, train, rng)]
    qkv = [enc(f) for enc, f in zip(model.encoders, feats)]
    att = leader_follower_attention([x[0] for x in qkv], [x[1] for x in qkv], [x[2] for x in qkv],
                                    model.attention_norm)
    fused = T.concat([leader, att], axis=1)
    y = model.fusion_head(fused)
    y = T.reshape(y, (y.shape[0], y.shape[2]))
    return T.reshape(y, (y.shape[1],)) if squeeze else y


# ---------------------------------------------------------------------------
# checkpoint file
#
#   "AFMD" | u32 version | u32 config length | config JSON (utf-8, sorted keys)
#   | u32 tensor count | per tensor: u32 ndim, ndim x u32 dims, float64 LE data


def save_checkpoint(path, model, meta=None):
    cfg = json.dumps({"model": asdict(model.config), "meta": meta or {}}, sort_keys=True).encode()
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            fh.write(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return (model, meta)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, cfg_len = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    cfg = json.loads(take(cfg_len).decode())
    model = ModelBundle(FusionConfig.from_dict(cfg["model"]))
    (count,) = struct.unpack("<I", take(4))
    arrays = []
    for _ in range(count):
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arrays.append(np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64))
    if pos != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after tensors")
    model.load_state(arrays)
    return model, cfg.get("meta", {})

"""Decoder-only transformer in numpy with a multiple-choice head and exact
hand-written gradients.

Everything runs in float64. Forward passes cache the intermediates their
backward passes need, so analytic gradients can be checked directly against
central finite differences. The LM output projection is tied to the token
embedding table; highlight vectors are added to document positions at the
embedding layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import erf, expit

from .strategies import BuiltSequence, highlight_signs
from .text import PAD_ID

LN_EPS = 1e-5
HEADS = ("softmax", "sigmoid")

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters, sized to train on a CPU in minutes."""

    vocab_size: int
    layers: int = 4
    heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_len: int = 256
    dropout: float = 0.1
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("vocab_size", "layers", "heads", "d_model", "d_ff", "max_len"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.d_ff < self.d_model:
            raise ValueError("d_ff must be >= d_model")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.init_std <= 0:
            raise ValueError("init_std must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def to_json(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "layers": self.layers,
            "heads": self.heads,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "max_len": self.max_len,
            "dropout": self.dropout,
            "init_std": self.init_std,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ValueError(f"bad model config: {exc}") from None


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical parameter names and shapes, in checkpoint/optimizer order."""
    d, f = cfg.d_model, cfg.d_ff
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (cfg.vocab_size, d)),
        ("pos_emb", (cfg.max_len, d)),
    ]
    for i in range(cfg.layers):
        h = f"h{i}"
        shapes += [
            (f"{h}.ln1.g", (d,)), (f"{h}.ln1.b", (d,)),
            (f"{h}.attn.w_qkv", (d, 3 * d)), (f"{h}.attn.b_qkv", (3 * d,)),
            (f"{h}.attn.w_o", (d, d)), (f"{h}.attn.b_o", (d,)),
            (f"{h}.ln2.g", (d,)), (f"{h}.ln2.b", (d,)),
            (f"{h}.mlp.w1", (d, f)), (f"{h}.mlp.b1", (f,)),
            (f"{h}.mlp.w2", (f, d)), (f"{h}.mlp.b2", (d,)),
        ]
    shapes += [("ln_f.g", (d,)), ("ln_f.b", (d,)),
               ("w_clf", (d,)), ("l_pos", (d,)), ("l_neg", (d,))]
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Random-normal weights (std cfg.init_std), zero biases, unit LN gains.

    The returned dict's insertion order is the canonical parameter order used
    by checkpoints and the optimizer.
    """
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            p[name] = np.ones(shape)
        elif leaf.startswith("b"):
            p[name] = np.zeros(shape)
        else:
            p[name] = rng.normal(0.0, cfg.init_std, size=shape)
    return p


def num_parameters(params: dict[str, np.ndarray]) -> int:
    return sum(v.size for v in params.values())


@dataclass(eq=False)
class Packed:
    """A batch of sequences tail-padded to a common length.

    signs holds +1 at highlighted document positions, -1 at other document
    positions, and 0 everywhere else (including when highlighting is off).
    """

    ids: np.ndarray      # (B, L) int64
    signs: np.ndarray    # (B, L) int8
    lengths: np.ndarray  # (B,) int64

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int]],
                  signs: Sequence[np.ndarray | None] | None = None) -> "Packed":
        if not rows:
            raise ValueError("cannot pack zero sequences")
        lengths = np.array([len(r) for r in rows], dtype=np.int64)
        if lengths.min() < 1:
            raise ValueError("empty sequence in batch")
        width = int(lengths.max())
        ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
        sg = np.zeros((len(rows), width), dtype=np.int8)
        for i, row in enumerate(rows):
            ids[i, : len(row)] = row
            if signs is not None and signs[i] is not None:
                s = np.asarray(signs[i], dtype=np.int8)
                if s.shape != (len(row),):
                    raise ValueError(
                        f"signs length {s.shape} does not match sequence length {len(row)}")
                sg[i, : len(row)] = s
        return cls(ids=ids, signs=sg, lengths=lengths)


@dataclass(frozen=True, eq=False)
class EncodedInstance:
    """One instance ready for the model: per-option token id sequences,
    optional per-option highlight signs, and the gold option set."""

    option_ids: tuple[tuple[int, ...], ...]
    option_signs: tuple[np.ndarray, ...] | None
    gold: frozenset[int]


class LossBreakdown(NamedTuple):
    total: float
    classification: float
    lm: float


# ---------------------------------------------------------------------------
# primitive layers


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _layer_norm_back(dout: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv, g = cache
    lead = tuple(range(dout.ndim - 1))
    dg = (dout * xhat).sum(axis=lead)
    db = dout.sum(axis=lead)
    dxhat = dout * g
    dx = inv * (dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * phi, phi


def _gelu_back(dout: np.ndarray, x: np.ndarray, phi: np.ndarray) -> np.ndarray:
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return dout * (phi + x * pdf)


def _softmax_last(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _causal_bias(width: int) -> np.ndarray:
    bias = np.zeros((width, width))
    bias[np.triu_indices(width, 1)] = -np.inf
    return bias


def _dropout(x: np.ndarray, cfg: ModelConfig,
             drop_rng: np.random.Generator | None) -> tuple[np.ndarray, np.ndarray | None]:
    if drop_rng is None or cfg.dropout == 0.0:
        return x, None
    keep = 1.0 - cfg.dropout
    mask = (drop_rng.random(x.shape) < keep) / keep
    return x * mask, mask


# ---------------------------------------------------------------------------
# transformer forward / backward


def _forward(params: dict[str, np.ndarray], cfg: ModelConfig, packed: Packed,
             drop_rng: np.random.Generator | None = None) -> tuple[np.ndarray, dict]:
    """Run the stack; returns the final layer-normed states and a cache."""
    ids, signs = packed.ids, packed.signs
    batch, width = ids.shape
    if width > cfg.max_len:
        raise ValueError(f"sequence length {width} exceeds max_len {cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id out of vocabulary range")

    pos_mask = (signs == 1)[..., None]
    neg_mask = (signs == -1)[..., None]
    x = params["tok_emb"][ids] + params["pos_emb"][:width]
    x = x + pos_mask * params["l_pos"] + neg_mask * params["l_neg"]
    x, drop_emb = _dropout(x, cfg, drop_rng)

    cache: dict = {
        "packed": packed,
        "pos_mask": pos_mask,
        "neg_mask": neg_mask,
        "drop_emb": drop_emb,
        "layers": [],
    }
    bias = _causal_bias(width)
    hd = cfg.head_dim
    scale = 1.0 / math.sqrt(hd)

    for i in range(cfg.layers):
        h = f"h{i}"
        lc: dict = {}
        a, lc["ln1"] = _layer_norm(x, params[f"{h}.ln1.g"], params[f"{h}.ln1.b"])
        lc["a"] = a
        qkv = a @ params[f"{h}.attn.w_qkv"] + params[f"{h}.attn.b_qkv"]
        q, k, v = (qkv[..., j * cfg.d_model:(j + 1) * cfg.d_model]
                   .reshape(batch, width, cfg.heads, hd)
                   .transpose(0, 2, 1, 3) for j in range(3))
        att = q @ k.swapaxes(-1, -2) * scale + bias
        p = _softmax_last(att)
        o4 = p @ v
        o = o4.transpose(0, 2, 1, 3).reshape(batch, width, cfg.d_model)
        lc.update(q=q, k=k, v=v, p=p, o=o)
        proj = o @ params[f"{h}.attn.w_o"] + params[f"{h}.attn.b_o"]
        proj, lc["drop_attn"] = _dropout(proj, cfg, drop_rng)
        x = x + proj

        a2, lc["ln2"] = _layer_norm(x, params[f"{h}.ln2.g"], params[f"{h}.ln2.b"])
        lc["a2"] = a2
        hpre = a2 @ params[f"{h}.mlp.w1"] + params[f"{h}.mlp.b1"]
        gact, phi = _gelu(hpre)
        lc.update(hpre=hpre, phi=phi, gact=gact)
        mlp = gact @ params[f"{h}.mlp.w2"] + params[f"{h}.mlp.b2"]
        mlp, lc["drop_mlp"] = _dropout(mlp, cfg, drop_rng)
        x = x + mlp
        cache["layers"].append(lc)

    xf, cache["ln_f"] = _layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    return xf, cache


def _backward(dxf: np.ndarray, cache: dict, params: dict[str, np.ndarray],
              cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Backpropagate a gradient at the final states through the whole stack."""
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    batch, width, _ = dxf.shape
    hd = cfg.head_dim
    scale = 1.0 / math.sqrt(hd)

    dx, dg, db = _layer_norm_back(dxf, cache["ln_f"])
    grads["ln_f.g"] += dg
    grads["ln_f.b"] += db

    for i in reversed(range(cfg.layers)):
        h = f"h{i}"
        lc = cache["layers"][i]

        dm = dx if lc["drop_mlp"] is None else dx * lc["drop_mlp"]
        grads[f"{h}.mlp.w2"] += lc["gact"].reshape(-1, cfg.d_ff).T @ dm.reshape(-1, cfg.d_model)
        grads[f"{h}.mlp.b2"] += dm.sum(axis=(0, 1))
        dgact = dm @ params[f"{h}.mlp.w2"].T
        dh = _gelu_back(dgact, lc["hpre"], lc["phi"])
        grads[f"{h}.mlp.w1"] += lc["a2"].reshape(-1, cfg.d_model).T @ dh.reshape(-1, cfg.d_ff)
        grads[f"{h}.mlp.b1"] += dh.sum(axis=(0, 1))
        da2 = dh @ params[f"{h}.mlp.w1"].T
        dres, dg, db = _layer_norm_back(da2, lc["ln2"])
        grads[f"{h}.ln2.g"] += dg
        grads[f"{h}.ln2.b"] += db
        dx = dx + dres

        dproj = dx if lc["drop_attn"] is None else dx * lc["drop_attn"]
        grads[f"{h}.attn.w_o"] += lc["o"].reshape(-1, cfg.d_model).T @ dproj.reshape(-1, cfg.d_model)
        grads[f"{h}.attn.b_o"] += dproj.sum(axis=(0, 1))
        do = dproj @ params[f"{h}.attn.w_o"].T
        do4 = do.reshape(batch, width, cfg.heads, hd).transpose(0, 2, 1, 3)
        p, q, k, v = lc["p"], lc["q"], lc["k"], lc["v"]
        dp = do4 @ v.swapaxes(-1, -2)
        dv = p.swapaxes(-1, -2) @ do4
        datt = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dq = datt @ k * scale
        dk = datt.swapaxes(-1, -2) @ q * scale
        dqkv = np.concatenate(
            [d.transpose(0, 2, 1, 3).reshape(batch, width, cfg.d_model)
             for d in (dq, dk, dv)], axis=-1)
        grads[f"{h}.attn.w_qkv"] += lc["a"].reshape(-1, cfg.d_model).T @ dqkv.reshape(-1, 3 * cfg.d_model)
        grads[f"{h}.attn.b_qkv"] += dqkv.sum(axis=(0, 1))
        da = dqkv @ params[f"{h}.attn.w_qkv"].T
        dres, dg, db = _layer_norm_back(da, lc["ln1"])
        grads[f"{h}.ln1.g"] += dg
        grads[f"{h}.ln1.b"] += db
        dx = dx + dres

    if cache["drop_emb"] is not None:
        dx = dx * cache["drop_emb"]
    grads["pos_emb"][:width] += dx.sum(axis=0)
    np.add.at(grads["tok_emb"], cache["packed"].ids, dx)
    grads["l_pos"] += (dx * cache["pos_mask"]).sum(axis=(0, 1))
    grads["l_neg"] += (dx * cache["neg_mask"]).sum(axis=(0, 1))
    return grads


# ---------------------------------------------------------------------------
# public operations


def embed(sequence: BuiltSequence, mask: np.ndarray | None,
          params: dict[str, np.ndarray]) -> np.ndarray:
    """Embedding-layer activations: token + position + highlight vector.

    With a mask, every document position receives l_pos (bit 1) or l_neg
    (bit 0); all other positions get no highlight term. mask=None turns the
    strategy off entirely.
    """
    ids = np.asarray(sequence.ids, dtype=np.int64)
    width = ids.shape[0]
    if width > params["pos_emb"].shape[0]:
        raise ValueError(f"sequence length {width} exceeds max_len")
    x = params["tok_emb"][ids] + params["pos_emb"][:width]
    if mask is not None:
        sg = highlight_signs(sequence, mask)
        x = x + (sg == 1)[:, None] * params["l_pos"] + (sg == -1)[:, None] * params["l_neg"]
    return x


def forward_lm(ids: Sequence[int], params: dict[str, np.ndarray],
               cfg: ModelConfig) -> np.ndarray:
    """Next-token logits for one sequence, tied to the embedding table."""
    packed = Packed.from_rows([list(ids)])
    xf, _ = _forward(params, cfg, packed)
    return xf[0] @ params["tok_emb"].T


def forward_choice(sequences: Sequence[BuiltSequence],
                   masks: Sequence[np.ndarray | None] | None,
                   params: dict[str, np.ndarray], cfg: ModelConfig) -> np.ndarray:
    """Per-option scores: w · final activation at each sequence's END token."""
    rows = [list(s.ids) for s in sequences]
    signs = None
    if masks is not None:
        signs = [None if m is None else highlight_signs(s, m)
                 for s, m in zip(sequences, masks, strict=True)]
    packed = Packed.from_rows(rows, signs)
    xf, _ = _forward(params, cfg, packed)
    ends = packed.lengths - 1
    return xf[np.arange(len(rows)), ends] @ params["w_clf"]


def encode_choice_instance(sequences: Sequence[BuiltSequence],
                           masks: Sequence[np.ndarray | None] | None,
                           gold: frozenset[int]) -> EncodedInstance:
    signs = None
    if masks is not None and any(m is not None for m in masks):
        signs = tuple(
            highlight_signs(s, m) if m is not None
            else np.zeros(len(s.ids), dtype=np.int8)
            for s, m in zip(sequences, masks, strict=True))
    return EncodedInstance(option_ids=tuple(s.ids for s in sequences),
                           option_signs=signs, gold=gold)


def _flatten(instances: Sequence[EncodedInstance]):
    rows: list[Sequence[int]] = []
    signs: list[np.ndarray | None] = []
    groups: list[slice] = []
    for inst in instances:
        start = len(rows)
        rows.extend(inst.option_ids)
        if inst.option_signs is None:
            signs.extend([None] * len(inst.option_ids))
        else:
            signs.extend(inst.option_signs)
        groups.append(slice(start, len(rows)))
    return rows, signs, groups


def batch_loss_and_grads(params: dict[str, np.ndarray], cfg: ModelConfig,
                         instances: Sequence[EncodedInstance], lam: float,
                         head: str, drop_rng: np.random.Generator | None = None,
                         lm_chunk_elems: int = 4_000_000,
                         ) -> tuple[LossBreakdown, dict[str, np.ndarray], list[np.ndarray]]:
    """Joint loss over a batch of instances, with gradients for every param.

    Per instance: classification term (softmax cross-entropy, or per-option
    binary cross-entropy averaged over options for the sigmoid head) plus
    lam times the mean over its option sequences of the token-level LM
    cross-entropy. The batch loss is the mean over instances. When lam is 0
    the LM pass is skipped entirely and the lm component reports 0.
    """
    if head not in HEADS:
        raise ValueError(f"head must be one of {HEADS}")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if not instances:
        raise ValueError("empty batch")

    rows, signs, groups = _flatten(instances)
    packed = Packed.from_rows(rows, signs)
    xf, cache = _forward(params, cfg, packed, drop_rng)
    batch, width, _ = xf.shape
    ends = packed.lengths - 1
    xe = xf[np.arange(batch), ends]
    scores = xe @ params["w_clf"]

    n_inst = len(instances)
    dscores = np.zeros(batch)
    cls_total = 0.0
    score_list: list[np.ndarray] = []
    for inst, sl in zip(instances, groups):
        s = scores[sl]
        score_list.append(s.copy())
        m = s.shape[0]
        if any(g >= m or g < 0 for g in inst.gold):
            raise ValueError("gold option index out of range")
        if head == "softmax":
            if len(inst.gold) != 1:
                raise ValueError("softmax head requires exactly one gold option")
            g = next(iter(inst.gold))
            lse = s.max() + math.log(np.exp(s - s.max()).sum())
            cls_total += lse - s[g]
            ds = np.exp(s - lse)
            ds[g] -= 1.0
        else:
            y = np.zeros(m)
            y[sorted(inst.gold)] = 1.0
            cls_total += float(np.mean(y * np.logaddexp(0.0, -s)
                                       + (1.0 - y) * np.logaddexp(0.0, s)))
            ds = (expit(s) - y) / m
        dscores[sl] = ds / n_inst

    # LM term: per-row weight 1 / (n_inst * options-in-instance * predicted positions)
    n_pred = np.maximum(packed.lengths - 1, 0)
    row_w = np.zeros(batch)
    for sl in groups:
        m = sl.stop - sl.start
        for r in range(sl.start, sl.stop):
            if n_pred[r] > 0:
                row_w[r] = 1.0 / (n_inst * m * n_pred[r])

    tok_emb = params["tok_emb"]
    dx = np.zeros_like(xf)
    d_tok = np.zeros_like(tok_emb)
    lm_total = 0.0
    chunk = max(1, lm_chunk_elems // max(1, width * cfg.vocab_size))
    # With lam == 0 the LM term has no gradient; skip it and report lm as 0.
    for c0 in range(0, batch, chunk) if lam > 0.0 else ():
        c1 = min(batch, c0 + chunk)
        xs = xf[c0:c1]
        z = xs @ tok_emb.T                                    # (c, width, V)
        zmax = z.max(axis=-1, keepdims=True)
        ez = np.exp(z - zmax)
        sez = ez.sum(axis=-1, keepdims=True)
        lse = zmax[..., 0] + np.log(sez[..., 0])              # (c, width)

        tgt = packed.ids[c0:c1, 1:]                           # (c, width-1)
        logp_tgt = np.take_along_axis(z[:, :-1, :], tgt[..., None], axis=2)[..., 0]
        logp_tgt = logp_tgt - lse[:, :-1]
        valid = np.arange(width - 1)[None, :] < n_pred[c0:c1, None]
        wrow = row_w[c0:c1]
        lm_total += float(((-logp_tgt) * valid * wrow[:, None]).sum())

        wmat = np.zeros((c1 - c0, width))
        wmat[:, :-1] = valid * (lam * wrow[:, None])
        dz = ez / sez
        dz *= wmat[..., None]
        ii, tt = np.meshgrid(np.arange(c1 - c0), np.arange(width - 1), indexing="ij")
        dz[ii, tt, tgt] -= wmat[:, :-1]
        dx[c0:c1] += dz @ tok_emb
        d_tok += dz.reshape(-1, cfg.vocab_size).T @ xs.reshape(-1, cfg.d_model)

    cls_mean = float(cls_total / n_inst)
    total = float(cls_mean + lam * lm_total)

    dx[np.arange(batch), ends] += dscores[:, None] * params["w_clf"]
    grads = _backward(dx, cache, params, cfg)
    grads["tok_emb"] += d_tok
    grads["w_clf"] += dscores @ xe
    return LossBreakdown(total, cls_mean, lm_total), grads, score_list


def loss(sequences: Sequence[BuiltSequence],
         masks: Sequence[np.ndarray | None] | None, gold: frozenset[int] | set[int],
         params: dict[str, np.ndarray], cfg: ModelConfig, lam: float = 2.0,
         head: str = "softmax", drop_rng: np.random.Generator | None = None,
         ) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Joint loss and gradients for one instance (its m option sequences)."""
    inst = encode_choice_instance(sequences, masks, frozenset(gold))
    breakdown, grads, _ = batch_loss_and_grads(params, cfg, [inst], lam, head, drop_rng)
    return breakdown, grads


def score_batch(params: dict[str, np.ndarray], cfg: ModelConfig,
                instances: Sequence[EncodedInstance],
                max_rows: int = 64) -> list[np.ndarray]:
    """Forward-only choice scores for many instances, batched by row count."""
    out: list[np.ndarray] = []
    pending: list[EncodedInstance] = []
    pending_rows = 0

    def flush():
        nonlocal pending, pending_rows
        if not pending:
            return
        rows, signs, groups = _flatten(pending)
        packed = Packed.from_rows(rows, signs)
        xf, _ = _forward(params, cfg, packed)
        ends = packed.lengths - 1
        sc = xf[np.arange(len(rows)), ends] @ params["w_clf"]
        out.extend(sc[sl].copy() for sl in groups)
        pending, pending_rows = [], 0

    for inst in instances:
        if pending and pending_rows + len(inst.option_ids) > max_rows:
            flush()
        pending.append(inst)
        pending_rows += len(inst.option_ids)
    flush()
    return out

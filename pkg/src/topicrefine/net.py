"""A small pre-norm transformer with hand-written backward pass.

One implementation serves both the causal double-heads model (language
modeling head plus topic head pooled at the last token) and the
bidirectional encoder (topic head pooled at the leading CLS token).

Inputs are ``(B, T)`` id arrays padded with PAD (id 0) on either side.
PAD positions are masked out as attention keys and do not advance the
position counter, so padding never changes the result at real tokens.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, ContractError

CAUSAL = "causal"
BIDIRECTIONAL = "bidirectional"
LAST_TOKEN = "last_token"
FIRST_TOKEN = "first_token"

LN_EPS = 1e-8
INIT_STD = 0.02
PAD_ID = 0

_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_topics: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int | None = None
    max_positions: int = 128
    attention_mode: str = CAUSAL
    cls_pool: str = LAST_TOKEN
    tie_lm_head: bool = True
    dtype: str = "float64"
    cls_token_id: int | None = None

    def __post_init__(self):
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        for name in ("vocab_size", "n_topics", "d_model", "n_layers", "n_heads", "d_ff",
                     "max_positions"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.attention_mode not in (CAUSAL, BIDIRECTIONAL):
            raise ConfigError(f"unknown attention_mode {self.attention_mode!r}")
        if self.cls_pool not in (LAST_TOKEN, FIRST_TOKEN):
            raise ConfigError(f"unknown cls_pool {self.cls_pool!r}")
        if self.attention_mode == CAUSAL and self.cls_pool == FIRST_TOKEN:
            # under a causal mask the first token sees nothing else
            raise ConfigError("first_token pooling needs bidirectional attention")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        return cls(**data)


def param_shapes(cfg: ModelConfig, prefix: str = "") -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"wte": (cfg.vocab_size, d), "wpe": (cfg.max_positions, d)}
    for layer in range(cfg.n_layers):
        h = f"h{layer}."
        shapes.update({
            h + "ln_1.g": (d,), h + "ln_1.b": (d,),
            h + "attn.w_q": (d, d), h + "attn.b_q": (d,),
            h + "attn.w_k": (d, d), h + "attn.b_k": (d,),
            h + "attn.w_v": (d, d), h + "attn.b_v": (d,),
            h + "attn.w_o": (d, d), h + "attn.b_o": (d,),
            h + "ln_2.g": (d,), h + "ln_2.b": (d,),
            h + "mlp.w_1": (d, f), h + "mlp.b_1": (f,),
            h + "mlp.w_2": (f, d), h + "mlp.b_2": (d,),
        })
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    if not cfg.tie_lm_head:
        shapes["lm_head.w"] = (d, cfg.vocab_size)
    shapes["cls.w"] = (d, cfg.n_topics)
    shapes["cls.b"] = (cfg.n_topics,)
    return {prefix + k: v for k, v in shapes.items()}


def is_decay_exempt(name: str) -> bool:
    """Layer-norm gains and every bias are excluded from weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf == "g" or leaf.startswith("b")


def init_params(cfg: ModelConfig, seed: int, prefix: str = "") -> dict[str, np.ndarray]:
    """Normal(0, 0.02) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(cfg.dtype)
    params = {}
    for name, shape in param_shapes(cfg, prefix).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[name] = np.ones(shape, dtype=dtype)
        elif leaf.startswith("b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = (rng.standard_normal(shape) * INIT_STD).astype(dtype)
    return params


def zeros_like(params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


# ----------------------------------------------------------------------------
# primitives


def layer_norm(x, g, b):
    inv_n = 1.0 / x.shape[-1]
    xc = x - x.sum(-1, keepdims=True) * inv_n
    var = (xc * xc).sum(-1, keepdims=True) * inv_n
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def layer_norm_backward(dy, g, cache):
    xhat, rstd = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axes)
    db = dy.sum(axes)
    dxhat = dy * g
    dx = rstd * (
        dxhat
        - dxhat.mean(-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(-1, keepdims=True)
    )
    return dx, dg, db


def gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def gelu_backward(dy, x, t):
    dt = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt)


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# ----------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardTrace:
    ids: np.ndarray
    prefix: str
    valid: np.ndarray
    positions: np.ndarray
    mask: np.ndarray
    layers: list = field(default_factory=list)
    ln_f: tuple | None = None
    hidden: np.ndarray | None = None  # final normalized states, (B, T, d)
    pool_index: np.ndarray | None = None
    pooled: np.ndarray | None = None
    logits: np.ndarray | None = None  # (B, T, V)
    cls_logits: np.ndarray | None = None  # (B, K)


def _as_batch(ids) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise ContractError("ids must be a non-empty (T,) or (B, T) integer array")
    return arr


def _pool_index(cfg: ModelConfig, ids: np.ndarray, valid: np.ndarray) -> np.ndarray:
    T = ids.shape[1]
    if cfg.cls_pool == LAST_TOKEN:
        return T - 1 - np.argmax(valid[:, ::-1], axis=1)
    first = np.argmax(valid, axis=1)
    if cfg.cls_token_id is not None:
        heads = ids[np.arange(len(ids)), first]
        if np.any(heads != cfg.cls_token_id):
            raise ConfigError("first_token pooling requires CLS as the first token")
    return first


def forward(params, cfg: ModelConfig, ids, prefix: str = "", lm: bool = True,
            cls: bool = False, last_only: bool = False) -> ForwardTrace:
    """Run the transformer on a padded id batch and cache activations.

    ``last_only`` restricts LM logits to the final column (decoding); such
    a trace cannot be passed to :func:`backward` with LM gradients.
    """
    ids = _as_batch(ids)
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise IndexError("token id outside the model vocabulary")
    valid = ids != PAD_ID
    if not valid.any(axis=1).all():
        raise ContractError("every sequence needs at least one non-PAD token")
    positions = np.maximum(np.cumsum(valid, axis=1) - 1, 0)
    if positions.max() >= cfg.max_positions:
        raise IndexError(
            f"sequence of {positions.max() + 1} tokens exceeds max_positions={cfg.max_positions}"
        )
    B, T = ids.shape
    keys = valid[:, None, None, :]
    if cfg.attention_mode == CAUSAL:
        keys = keys & np.tril(np.ones((T, T), dtype=bool))[None, None]
    mask = keys | np.eye(T, dtype=bool)[None, None]
    att_bias = np.where(mask, 0.0, -np.inf)

    p = lambda k: params[prefix + k]  # noqa: E731
    x = p("wte")[ids] + p("wpe")[positions]
    trace = ForwardTrace(ids=ids, prefix=prefix, valid=valid, positions=positions, mask=mask)
    H, dh = cfg.n_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)

    for layer in range(cfg.n_layers):
        h = f"h{layer}."
        a, ln1 = layer_norm(x, p(h + "ln_1.g"), p(h + "ln_1.b"))
        q = (a @ p(h + "attn.w_q") + p(h + "attn.b_q")).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = (a @ p(h + "attn.w_k") + p(h + "attn.b_k")).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = (a @ p(h + "attn.w_v") + p(h + "attn.b_v")).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        s = (q @ k.transpose(0, 1, 3, 2)) * scale + att_bias
        att = softmax(s)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, H * dh)
        x = x + o @ p(h + "attn.w_o") + p(h + "attn.b_o")

        m, ln2 = layer_norm(x, p(h + "ln_2.g"), p(h + "ln_2.b"))
        pre = m @ p(h + "mlp.w_1") + p(h + "mlp.b_1")
        act, t = gelu(pre)
        x = x + act @ p(h + "mlp.w_2") + p(h + "mlp.b_2")
        trace.layers.append((a, ln1, q, k, v, att, o, m, ln2, pre, act, t))

    hf, trace.ln_f = layer_norm(x, p("ln_f.g"), p("ln_f.b"))
    trace.hidden = hf
    if lm:
        w = p("wte").T if cfg.tie_lm_head else p("lm_head.w")
        trace.logits = (hf[:, -1:] if last_only else hf) @ w
    if cls:
        trace.pool_index = _pool_index(cfg, ids, valid)
        trace.pooled = hf[np.arange(B), trace.pool_index]
        trace.cls_logits = trace.pooled @ p("cls.w") + p("cls.b")
    return trace


def backward(params, cfg: ModelConfig, trace: ForwardTrace, d_logits=None,
             d_cls=None) -> dict[str, np.ndarray]:
    """Exact gradients of a scalar loss given its gradient w.r.t. the logits.

    Returns a map over every parameter of the model (``trace.prefix``),
    untouched tensors receiving zeros.
    """
    prefix = trace.prefix
    p = lambda k: params[prefix + k]  # noqa: E731
    grads = {k: np.zeros_like(params[k]) for k in param_shapes(cfg, prefix)}
    g = lambda k: grads[prefix + k]  # noqa: E731
    ids = trace.ids
    B, T = ids.shape
    d = cfg.d_model
    H, dh = cfg.n_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    hf = trace.hidden
    dhf = np.zeros_like(hf)

    if d_logits is not None:
        if trace.logits is None or np.shape(d_logits) != trace.logits.shape \
                or trace.logits.shape[1] != T:
            raise ContractError("d_logits does not match the traced LM logits")
        flat = d_logits.reshape(-1, cfg.vocab_size)
        hflat = hf.reshape(-1, d)
        if cfg.tie_lm_head:
            g("wte")[...] += flat.T @ hflat
            dhf += d_logits @ p("wte")
        else:
            g("lm_head.w")[...] += hflat.T @ flat
            dhf += d_logits @ p("lm_head.w").T
    if d_cls is not None:
        if trace.cls_logits is None or np.shape(d_cls) != trace.cls_logits.shape:
            raise ContractError("d_cls does not match the traced topic logits")
        g("cls.w")[...] += trace.pooled.T @ d_cls
        g("cls.b")[...] += d_cls.sum(0)
        np.add.at(dhf, (np.arange(B), trace.pool_index), d_cls @ p("cls.w").T)

    dx, dgf, dbf = layer_norm_backward(dhf, p("ln_f.g"), trace.ln_f)
    g("ln_f.g")[...] += dgf
    g("ln_f.b")[...] += dbf

    for layer in reversed(range(cfg.n_layers)):
        h = f"h{layer}."
        a, ln1, q, k, v, att, o, m, ln2, pre, act, t = trace.layers[layer]

        # feed-forward branch
        dz = dx.reshape(-1, d)
        g(h + "mlp.w_2")[...] += act.reshape(-1, cfg.d_ff).T @ dz
        g(h + "mlp.b_2")[...] += dz.sum(0)
        dpre = gelu_backward(dx @ p(h + "mlp.w_2").T, pre, t)
        g(h + "mlp.w_1")[...] += m.reshape(-1, d).T @ dpre.reshape(-1, cfg.d_ff)
        g(h + "mlp.b_1")[...] += dpre.reshape(-1, cfg.d_ff).sum(0)
        dm = dpre @ p(h + "mlp.w_1").T
        dres, dg2, db2 = layer_norm_backward(dm, p(h + "ln_2.g"), ln2)
        g(h + "ln_2.g")[...] += dg2
        g(h + "ln_2.b")[...] += db2
        dx = dx + dres

        # attention branch
        dy = dx.reshape(-1, d)
        g(h + "attn.w_o")[...] += o.reshape(-1, d).T @ dy
        g(h + "attn.b_o")[...] += dy.sum(0)
        do = (dx @ p(h + "attn.w_o").T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        datt = do @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        aflat = a.reshape(-1, d)
        da = np.zeros_like(a)
        for name, dt_ in (("q", dq), ("k", dk), ("v", dv)):
            merged = dt_.transpose(0, 2, 1, 3).reshape(B, T, d)
            g(h + f"attn.w_{name}")[...] += aflat.T @ merged.reshape(-1, d)
            g(h + f"attn.b_{name}")[...] += merged.reshape(-1, d).sum(0)
            da += merged @ p(h + f"attn.w_{name}").T
        dres, dg1, db1 = layer_norm_backward(da, p(h + "ln_1.g"), ln1)
        g(h + "ln_1.g")[...] += dg1
        g(h + "ln_1.b")[...] += db1
        dx = dx + dres

    np.add.at(g("wte"), ids, dx)
    np.add.at(g("wpe"), trace.positions, dx)
    return grads


def forward_lm(params, cfg: ModelConfig, ids, prefix: str = ""):
    """Next-token logits ``(T, V)`` for a single sequence, plus the trace."""
    if cfg.attention_mode != CAUSAL:
        raise ConfigError("language modeling needs causal attention")
    trace = forward(params, cfg, ids, prefix=prefix, lm=True)
    return trace.logits[0], trace


def forward_cls(params, cfg: ModelConfig, ids, prefix: str = ""):
    """Raw topic logits ``(K,)`` for a single sequence."""
    if cfg.attention_mode == BIDIRECTIONAL and cfg.cls_pool != FIRST_TOKEN:
        raise ConfigError("bidirectional encoder must pool the first (CLS) token")
    trace = forward(params, cfg, ids, prefix=prefix, lm=False, cls=True)
    return trace.cls_logits[0]


def pad_batch(seqs, left: bool = False) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        if left:
            out[i, width - len(s):] = s
        else:
            out[i, : len(s)] = s
    return out


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(stem, tensors: Mapping[str, np.ndarray], config: Mapping,
                    meta: Mapping | None = None) -> tuple[Path, Path]:
    """Write ``<stem>.bin`` (raw little-endian tensors) and ``<stem>.manifest.json``."""
    stem = Path(stem)
    blob_path = stem.with_name(stem.name + ".bin")
    manifest_path = stem.with_name(stem.name + ".manifest.json")
    entries = []
    offset = 0
    with open(blob_path, "wb") as fh:
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = np.ascontiguousarray(le).tobytes()
            fh.write(raw)
            entries.append({
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.name,
                "offset": offset,
                "nbytes": len(raw),
            })
            offset += len(raw)
    manifest = {"config": dict(config), "tensors": entries, "meta": dict(meta or {})}
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return blob_path, manifest_path


def load_checkpoint(stem, expected_shapes: Mapping[str, tuple] | None = None,
                    expected_config: Mapping | None = None):
    """Read tensors and manifest; reject shape or config mismatches."""
    stem = Path(stem)
    if stem.name.endswith(".manifest.json"):
        stem = stem.with_name(stem.name[: -len(".manifest.json")])
    elif stem.suffix == ".bin":
        stem = stem.with_suffix("")
    manifest = json.loads(stem.with_name(stem.name + ".manifest.json").read_text())
    if expected_config is not None and dict(expected_config) != manifest["config"]:
        raise ConfigError("checkpoint config does not match the requested config")
    blob = stem.with_name(stem.name + ".bin").read_bytes()
    tensors = {}
    for e in manifest["tensors"]:
        dtype = np.dtype(e["dtype"]).newbyteorder("<")
        chunk = blob[e["offset"]: e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype=dtype).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in tensors:
                raise ConfigError(f"checkpoint is missing tensor {name!r}")
            if tuple(tensors[name].shape) != tuple(shape):
                raise ConfigError(
                    f"tensor {name!r} has shape {tensors[name].shape}, expected {tuple(shape)}"
                )
    return tensors, manifest

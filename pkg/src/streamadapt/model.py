"""Multimodal detector: three encoders, transformer fusion, MLP classifier.

Everything runs in float64 numpy with hand-written reverse-mode gradients,
so analytic gradients can be audited against finite differences to tight
tolerances and adaptation runs stay bit-reproducible.

Layout per modality encoder: affine -> GELU -> affine -> layer norm. The
three encoder outputs form a 3-token sequence consumed by a post-LN
transformer stack; the fused representation is the mean over the three
output tokens, mapped to class logits by a two-layer MLP.

Only the encoders' second affine layer and every layer-norm gain/bias are
adaptable at test time; all other tensors stay frozen after pretraining.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.special import erf

from .data import VideoRecord

MODALITIES = ("v", "t", "a")
LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

CHECKPOINT_MAGIC = b"STREAMADAPT-CKPT/1\n"


class NonFiniteError(FloatingPointError):
    """A forward intermediate went NaN/Inf; names the offending layer."""


@dataclass(frozen=True)
class ModelConfig:
    input_dims: tuple[int, int, int]
    encoder_hidden: int
    encoder_out: int
    fusion_layers: int = 2
    fusion_heads: int = 8
    fusion_ff_dim: int | None = None
    classifier_hidden: int | None = None
    num_classes: int = 2

    def __post_init__(self):
        if self.fusion_ff_dim is None:
            object.__setattr__(self, "fusion_ff_dim", 2 * self.encoder_out)
        if self.classifier_hidden is None:
            object.__setattr__(self, "classifier_hidden", max(self.encoder_out // 2, 2))
        dims = (*self.input_dims, self.encoder_hidden, self.encoder_out,
                self.fusion_layers, self.fusion_heads, self.fusion_ff_dim,
                self.classifier_hidden, self.num_classes)
        if any(int(d) <= 0 for d in dims):
            raise ValueError("all ModelConfig dimensions must be positive")
        if self.encoder_out % self.fusion_heads != 0:
            raise ValueError("encoder_out must be divisible by fusion_heads")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["input_dims"] = tuple(d["input_dims"])
        return cls(**d)


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Canonical (name, shape, kind) listing; kind drives initialization."""
    d_in = dict(zip(MODALITIES, config.input_dims))
    h, d = config.encoder_hidden, config.encoder_out
    f, hc, c = config.fusion_ff_dim, config.classifier_hidden, config.num_classes
    shapes: list[tuple[str, tuple[int, ...], str]] = []
    for m in MODALITIES:
        shapes += [
            (f"enc.{m}.w1", (d_in[m], h), "weight"),
            (f"enc.{m}.b1", (h,), "bias"),
            (f"enc.{m}.w2", (h, d), "weight"),
            (f"enc.{m}.b2", (d,), "bias"),
            (f"enc.{m}.ln.g", (d,), "ln_gain"),
            (f"enc.{m}.ln.b", (d,), "ln_bias"),
        ]
    for l in range(config.fusion_layers):
        for proj in ("wq", "wk", "wv", "wo"):
            shapes.append((f"fus.{l}.attn.{proj}", (d, d), "weight"))
        for proj in ("bq", "bk", "bv", "bo"):
            shapes.append((f"fus.{l}.attn.{proj}", (d,), "bias"))
        shapes += [
            (f"fus.{l}.ln1.g", (d,), "ln_gain"),
            (f"fus.{l}.ln1.b", (d,), "ln_bias"),
            (f"fus.{l}.ff.w1", (d, f), "weight"),
            (f"fus.{l}.ff.b1", (f,), "bias"),
            (f"fus.{l}.ff.w2", (f, d), "weight"),
            (f"fus.{l}.ff.b2", (d,), "bias"),
            (f"fus.{l}.ln2.g", (d,), "ln_gain"),
            (f"fus.{l}.ln2.b", (d,), "ln_bias"),
        ]
    shapes += [
        ("cls.w1", (d, hc), "weight"),
        ("cls.b1", (hc,), "bias"),
        ("cls.w2", (hc, c), "weight"),
        ("cls.b2", (c,), "bias"),
    ]
    return shapes


def init_model(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Deterministic init: fan-in-scaled uniform weights, zero biases,
    unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape, kind in param_shapes(config):
        if kind == "weight":
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif kind == "ln_gain":
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def adaptable_mask(config: ModelConfig) -> dict[str, bool]:
    """True exactly for encoder second-affine tensors and all LN gains/biases."""
    mask = {}
    for name, _, _ in param_shapes(config):
        enc_last = name.startswith("enc.") and (name.endswith(".w2") or name.endswith(".b2"))
        mask[name] = enc_last or ".ln" in name
    return mask


# --- primitive layers -------------------------------------------------------

def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xh = xc * inv
    return g * xh + b, (xh, inv)


def layernorm_backward(dy: np.ndarray, cache, g: np.ndarray):
    xh, inv = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xh).sum(axis=axes)
    db = dy.sum(axis=axes)
    dxh = dy * g
    dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True)
                - xh * (dxh * xh).mean(axis=-1, keepdims=True))
    return dx, dg, db


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p: np.ndarray) -> float:
    """Shannon entropy (natural log) of one probability vector, 0*ln0 := 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -1e-6):
        raise ValueError(f"negative probability component: {p.min()}")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"probabilities sum to {p.sum()}, not 1")
    return float(row_entropy(p[None, :])[0])


def row_entropy(probs: np.ndarray) -> np.ndarray:
    """Entropy of each row of an (N, C) probability matrix."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0.0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=-1)


# --- forward ----------------------------------------------------------------

@dataclass
class _EncoderCache:
    x: np.ndarray
    h1: np.ndarray
    a1: np.ndarray
    ln: tuple


@dataclass
class _FusionCache:
    t_in: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    p: np.ndarray
    ctx: np.ndarray
    ln1: tuple
    n1: np.ndarray
    ffh: np.ndarray
    ffa: np.ndarray
    ln2: tuple


@dataclass
class ForwardTrace:
    """Batched forward activations plus the caches backward needs.

    ``encoder_outputs`` has shape (B, 3, D) ordered (v, t, a); these are
    the tokens entering fusion and the features the alignment loss acts on.
    """

    encoder_outputs: np.ndarray
    fused: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    enc: dict = field(repr=False, default_factory=dict)
    layers: list = field(repr=False, default_factory=list)
    c1h: np.ndarray | None = field(repr=False, default=None)
    c1a: np.ndarray | None = field(repr=False, default=None)

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]

    def entropies(self) -> np.ndarray:
        return row_entropy(self.probs)


def _check_finite(x: np.ndarray, layer: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite activation in {layer}")


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def forward_batch(params: dict[str, np.ndarray], config: ModelConfig,
                  xv: np.ndarray, xt: np.ndarray, xa: np.ndarray) -> ForwardTrace:
    """Run the network on stacked inputs (B, D_m per modality)."""
    inputs = {"v": np.asarray(xv, dtype=np.float64),
              "t": np.asarray(xt, dtype=np.float64),
              "a": np.asarray(xa, dtype=np.float64)}
    enc_caches: dict[str, _EncoderCache] = {}
    feats = []
    for m in MODALITIES:
        x = inputs[m]
        h1 = x @ params[f"enc.{m}.w1"] + params[f"enc.{m}.b1"]
        a1 = gelu(h1)
        h2 = a1 @ params[f"enc.{m}.w2"] + params[f"enc.{m}.b2"]
        f, ln_cache = layernorm(h2, params[f"enc.{m}.ln.g"], params[f"enc.{m}.ln.b"])
        _check_finite(f, f"encoder[{m}]")
        enc_caches[m] = _EncoderCache(x=x, h1=h1, a1=a1, ln=ln_cache)
        feats.append(f)
    tokens = np.stack(feats, axis=1)  # (B, 3, D)

    layer_caches: list[_FusionCache] = []
    heads = config.fusion_heads
    scale = 1.0 / np.sqrt(config.encoder_out // heads)
    for l in range(config.fusion_layers):
        pre = f"fus.{l}"
        t_in = tokens
        q = _split_heads(t_in @ params[f"{pre}.attn.wq"] + params[f"{pre}.attn.bq"], heads)
        k = _split_heads(t_in @ params[f"{pre}.attn.wk"] + params[f"{pre}.attn.bk"], heads)
        v = _split_heads(t_in @ params[f"{pre}.attn.wv"] + params[f"{pre}.attn.bv"], heads)
        scores = np.einsum("bhnd,bhmd->bhnm", q, k) * scale
        p = softmax(scores)
        ctx = _merge_heads(np.einsum("bhnm,bhmd->bhnd", p, v))
        attn = ctx @ params[f"{pre}.attn.wo"] + params[f"{pre}.attn.bo"]
        n1, ln1_cache = layernorm(t_in + attn, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        ffh = n1 @ params[f"{pre}.ff.w1"] + params[f"{pre}.ff.b1"]
        ffa = gelu(ffh)
        ff = ffa @ params[f"{pre}.ff.w2"] + params[f"{pre}.ff.b2"]
        tokens, ln2_cache = layernorm(n1 + ff, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        _check_finite(tokens, f"fusion[{l}]")
        layer_caches.append(_FusionCache(t_in=t_in, q=q, k=k, v=v, p=p, ctx=ctx,
                                         ln1=ln1_cache, n1=n1, ffh=ffh, ffa=ffa,
                                         ln2=ln2_cache))

    fused = tokens.mean(axis=1)
    c1h = fused @ params["cls.w1"] + params["cls.b1"]
    c1a = gelu(c1h)
    logits = c1a @ params["cls.w2"] + params["cls.b2"]
    _check_finite(logits, "classifier")
    probs = softmax(logits)

    trace = ForwardTrace(encoder_outputs=np.stack(feats, axis=1), fused=fused,
                         logits=logits, probs=probs, enc=enc_caches,
                         layers=layer_caches, c1h=c1h, c1a=c1a)
    return trace


def forward(params: dict[str, np.ndarray], config: ModelConfig,
            record: VideoRecord) -> ForwardTrace:
    """Single-record forward; a batch of one."""
    if record.dims() != config.input_dims:
        raise ValueError(f"record dims {record.dims()} do not match "
                         f"config {config.input_dims}")
    return forward_batch(params, config, record.v[None, :], record.t[None, :],
                         record.a[None, :])


# --- backward ---------------------------------------------------------------

def backward_batch(params: dict[str, np.ndarray], config: ModelConfig,
                   trace: ForwardTrace, dlogits: np.ndarray,
                   dtokens0: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients for every parameter tensor.

    ``dlogits`` is dLoss/dlogits; ``dtokens0`` injects extra gradient at
    the encoder outputs (alignment terms attach there, bypassing fusion).
    """
    grads: dict[str, np.ndarray] = {}
    heads = config.fusion_heads
    scale = 1.0 / np.sqrt(config.encoder_out // heads)

    grads["cls.w2"] = trace.c1a.T @ dlogits
    grads["cls.b2"] = dlogits.sum(axis=0)
    dc1a = dlogits @ params["cls.w2"].T
    dc1h = dc1a * gelu_grad(trace.c1h)
    grads["cls.w1"] = trace.fused.T @ dc1h
    grads["cls.b1"] = dc1h.sum(axis=0)
    dfused = dc1h @ params["cls.w1"].T

    n_tokens = trace.encoder_outputs.shape[1]
    dtokens = np.repeat(dfused[:, None, :], n_tokens, axis=1) / n_tokens

    for l in range(config.fusion_layers - 1, -1, -1):
        pre = f"fus.{l}"
        cache: _FusionCache = trace.layers[l]
        dr2, dg2, db2 = layernorm_backward(dtokens, cache.ln2, params[f"{pre}.ln2.g"])
        grads[f"{pre}.ln2.g"] = dg2
        grads[f"{pre}.ln2.b"] = db2
        # r2 = n1 + ff
        dff = dr2
        grads[f"{pre}.ff.w2"] = np.einsum("bnf,bnd->fd", cache.ffa, dff)
        grads[f"{pre}.ff.b2"] = dff.sum(axis=(0, 1))
        dffa = dff @ params[f"{pre}.ff.w2"].T
        dffh = dffa * gelu_grad(cache.ffh)
        grads[f"{pre}.ff.w1"] = np.einsum("bnd,bnf->df", cache.n1, dffh)
        grads[f"{pre}.ff.b1"] = dffh.sum(axis=(0, 1))
        dn1 = dr2 + dffh @ params[f"{pre}.ff.w1"].T
        dr1, dg1, db1 = layernorm_backward(dn1, cache.ln1, params[f"{pre}.ln1.g"])
        grads[f"{pre}.ln1.g"] = dg1
        grads[f"{pre}.ln1.b"] = db1
        # r1 = t_in + attn
        dattn = dr1
        grads[f"{pre}.attn.wo"] = np.einsum("bnd,bne->de", cache.ctx, dattn)
        grads[f"{pre}.attn.bo"] = dattn.sum(axis=(0, 1))
        dctx = _split_heads(dattn @ params[f"{pre}.attn.wo"].T, heads)
        dp = np.einsum("bhnd,bhmd->bhnm", dctx, cache.v)
        dv = np.einsum("bhnm,bhnd->bhmd", cache.p, dctx)
        ds = cache.p * (dp - (dp * cache.p).sum(axis=-1, keepdims=True))
        dq = np.einsum("bhnm,bhmd->bhnd", ds, cache.k) * scale
        dk = np.einsum("bhnm,bhnd->bhmd", ds, cache.q) * scale
        dt_in = dr1
        for name, dhead in (("wq", dq), ("wk", dk), ("wv", dv)):
            dflat = _merge_heads(dhead)
            grads[f"{pre}.attn.{name}"] = np.einsum("bnd,bne->de", cache.t_in, dflat)
            grads[f"{pre}.attn.b{name[1]}"] = dflat.sum(axis=(0, 1))
            dt_in = dt_in + dflat @ params[f"{pre}.attn.{name}"].T
        dtokens = dt_in

    if dtokens0 is not None:
        dtokens = dtokens + dtokens0

    for i, m in enumerate(MODALITIES):
        cache_e: _EncoderCache = trace.enc[m]
        df = dtokens[:, i, :]
        dh2, dg, db = layernorm_backward(df, cache_e.ln, params[f"enc.{m}.ln.g"])
        grads[f"enc.{m}.ln.g"] = dg
        grads[f"enc.{m}.ln.b"] = db
        grads[f"enc.{m}.w2"] = cache_e.a1.T @ dh2
        grads[f"enc.{m}.b2"] = dh2.sum(axis=0)
        da1 = dh2 @ params[f"enc.{m}.w2"].T
        dh1 = da1 * gelu_grad(cache_e.h1)
        grads[f"enc.{m}.w1"] = cache_e.x.T @ dh1
        grads[f"enc.{m}.b1"] = dh1.sum(axis=0)
    return grads


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(path: str | Path, config: ModelConfig,
                    params: dict[str, np.ndarray],
                    extra: dict | None = None) -> None:
    """Write a self-describing binary checkpoint (byte-stable round trip)."""
    names = [name for name, _, _ in param_shapes(config)]
    header = {
        "config": config.to_dict(),
        "adaptable": adaptable_mask(config),
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    with Path(path).open("rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a streamadapt checkpoint")
        size = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(size).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        params: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
            params[entry["name"]] = arr.astype(np.float64)
    expected = {name for name, _, _ in param_shapes(config)}
    if set(params) != expected:
        raise ValueError(f"{path}: tensor names do not match the stored config")
    return config, params, header

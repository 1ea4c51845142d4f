"""Weighting network: per-satellite features -> factor information weights.

A projection layer, ``n_layers`` post-norm single-head self-attention encoder
layers (attention restricted to the valid satellites of the same epoch) and a
two-layer head produce one score ``z`` per satellite. Scores map to weights
``w = sigmoid(z) + w_min``, ``sigma = 1 / w`` and information ``omega = w**2``.

Everything is batched over epochs: features ``(B, N, 4)`` with a validity mask
``(B, N)``. The backward pass is written by hand and mirrors the forward cache.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .observation import PackedEpochs

N_FEATURES = 4
FEATURE_NAMES = ("elevation", "pseudorange", "cn0", "wls_residual")
CHECKPOINT_FORMAT = "credgnss-wgn"
CHECKPOINT_VERSION = 1
_MASK_FILL = -1e30


@dataclass
class WgnConfig:
    d_model: int = 32
    d_ff: int = 64
    n_layers: int = 2
    leaky_slope: float = 0.01
    ln_eps: float = 1e-5
    w_min: float = 0.0
    seed: int = 0


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if self.mean.shape != (N_FEATURES,) or self.std.shape != (N_FEATURES,):
            raise ValueError("feature statistics must have 4 entries")
        if not np.all(self.std > 0):
            raise ValueError("feature std must be strictly positive")

    @classmethod
    def identity(cls) -> "FeatureStats":
        return cls(np.zeros(N_FEATURES), np.ones(N_FEATURES))

    @classmethod
    def fit(cls, raw, mask) -> "FeatureStats":
        rows = np.asarray(raw)[np.asarray(mask, dtype=bool)]
        std = rows.std(axis=0)
        return cls(rows.mean(axis=0), np.where(std > 0, std, 1.0))


@dataclass
class SatelliteFeatures:
    raw: np.ndarray  # (B, N, 4)
    normalized: np.ndarray  # (B, N, 4), zero on masked rows
    mask: np.ndarray  # (B, N)


@dataclass
class FactorWeights:
    z: np.ndarray
    w: np.ndarray
    sigma: np.ndarray
    omega: np.ndarray


@dataclass
class WgnModel:
    params: dict[str, np.ndarray]
    stats: FeatureStats
    config: WgnConfig = field(default_factory=WgnConfig)

    @classmethod
    def init(cls, config: WgnConfig | None = None, stats: FeatureStats | None = None) -> "WgnModel":
        config = config or WgnConfig()
        rng = np.random.default_rng(config.seed)
        d, f = config.d_model, config.d_ff
        params: dict[str, np.ndarray] = {}

        def linear(name, fan_in, fan_out):
            bound = 1.0 / np.sqrt(fan_in)
            params[f"{name}.W"] = rng.uniform(-bound, bound, (fan_in, fan_out))
            params[f"{name}.b"] = rng.uniform(-bound, bound, fan_out)

        linear("proj", N_FEATURES, d)
        for layer in range(config.n_layers):
            p = f"enc{layer}"
            for m in ("q", "k", "v", "o"):
                linear(f"{p}.attn.{m}", d, d)
            # a key bias only shifts each score row by a constant and never gets gradient
            del params[f"{p}.attn.k.b"]
            params[f"{p}.ln1.g"] = np.ones(d)
            params[f"{p}.ln1.b"] = np.zeros(d)
            linear(f"{p}.ff1", d, f)
            linear(f"{p}.ff2", f, d)
            params[f"{p}.ln2.g"] = np.ones(d)
            params[f"{p}.ln2.b"] = np.zeros(d)
        linear("head1", d, d)
        linear("head2", d, 1)
        return cls(params, stats or FeatureStats.identity(), config)

    def copy(self) -> "WgnModel":
        return WgnModel({k: v.copy() for k, v in self.params.items()}, FeatureStats(self.stats.mean.copy(),
                        self.stats.std.copy()), WgnConfig(**asdict(self.config)))

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


# ---------------------------------------------------------------------------
# features


def raw_features(packed: PackedEpochs, elevation, residual) -> np.ndarray:
    """Stack [elevation, pseudorange, cn0, residual] into (B, N, 4), zero on padding."""
    raw = np.stack([elevation, packed.pseudorange, packed.cn0, residual], axis=-1)
    return np.where(packed.mask[..., None], raw, 0.0)


def normalize(raw, mask, stats: FeatureStats) -> SatelliteFeatures:
    raw = np.asarray(raw, dtype=float)
    if not np.all(np.isfinite(raw[mask])):
        raise ValueError("missing or non-finite feature values")
    norm = np.where(mask[..., None], (raw - stats.mean) / stats.std, 0.0)
    return SatelliteFeatures(raw, norm, np.asarray(mask, dtype=bool))


def assemble_features(epoch, wls, stats: FeatureStats, origin) -> SatelliteFeatures:
    """Features of one epoch in canonical satellite order, using its WLS fix."""
    from .observation import pack_epochs

    packed = pack_epochs([epoch], origin)
    m = packed.mask[0]
    if len(wls.residuals) != m.sum():
        raise ValueError("WLS solution does not cover this epoch")
    el = np.zeros(m.shape)
    res = np.zeros(m.shape)
    el[m] = wls.elevation
    res[m] = wls.residuals
    return normalize(raw_features(packed, el[None], res[None]), packed.mask, stats)


# ---------------------------------------------------------------------------
# forward / backward


def _leaky(x, slope):
    return np.where(x > 0, x, slope * x)


def _layer_norm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_backward(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, np.einsum("bnd,bnd->d", dy, xhat), dy.sum(axis=(0, 1))


def _linear_backward(dy, x, w):
    return dy @ w.T, np.einsum("bni,bno->io", x, dy), dy.sum(axis=(0, 1))


def forward(model: WgnModel, features: SatelliteFeatures, return_cache: bool = False):
    cfg, p = model.config, model.params
    x = features.normalized
    mask = features.mask
    if not mask.any(axis=1).all():
        raise ValueError("every epoch needs at least one valid satellite")
    s = cfg.leaky_slope
    cache: dict = {"x": x, "mask": mask}

    a = x @ p["proj.W"] + p["proj.b"]
    u = _leaky(a, s)
    cache["proj"] = a
    scale = 1.0 / np.sqrt(cfg.d_model)
    key_mask = mask[:, None, :]
    for layer in range(cfg.n_layers):
        pre = f"enc{layer}"
        c: dict = {"u": u}
        q = u @ p[f"{pre}.attn.q.W"] + p[f"{pre}.attn.q.b"]
        k = u @ p[f"{pre}.attn.k.W"]
        v = u @ p[f"{pre}.attn.v.W"] + p[f"{pre}.attn.v.b"]
        scores = np.where(key_mask, np.einsum("bqd,bkd->bqk", q, k) * scale, _MASK_FILL)
        scores = scores - scores.max(axis=-1, keepdims=True)
        e = np.where(key_mask, np.exp(scores), 0.0)
        attn = e / e.sum(axis=-1, keepdims=True)
        ctx = attn @ v
        o = ctx @ p[f"{pre}.attn.o.W"] + p[f"{pre}.attn.o.b"]
        y1, c["ln1"] = _layer_norm(u + o, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"], cfg.ln_eps)
        h_pre = y1 @ p[f"{pre}.ff1.W"] + p[f"{pre}.ff1.b"]
        h = _leaky(h_pre, s)
        f_out = h @ p[f"{pre}.ff2.W"] + p[f"{pre}.ff2.b"]
        u, c["ln2"] = _layer_norm(y1 + f_out, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"], cfg.ln_eps)
        c.update(q=q, k=k, v=v, attn=attn, ctx=ctx, y1=y1, h_pre=h_pre, h=h)
        cache[pre] = c
    cache["u_final"] = u
    hp = u @ p["head1.W"] + p["head1.b"]
    hh = _leaky(hp, s)
    z = (hh @ p["head2.W"] + p["head2.b"])[..., 0]
    cache.update(head_pre=hp, head_h=hh)

    sig = 1.0 / (1.0 + np.exp(-z))
    w = sig + cfg.w_min
    out = FactorWeights(
        z=np.where(mask, z, 0.0),
        w=np.where(mask, w, 0.0),
        sigma=np.where(mask, 1.0 / w, 0.0),
        omega=np.where(mask, w * w, 0.0),
    )
    cache["sig"] = sig
    cache["w"] = w
    return (out, cache) if return_cache else out


def backward(model: WgnModel, cache: dict, d_loss_d_information=None, d_loss_d_z=None) -> dict[str, np.ndarray]:
    """Parameter gradients from per-factor adjoints of ``omega`` (or directly of ``z``)."""
    cfg, p = model.config, model.params
    mask = cache["mask"]
    s = cfg.leaky_slope
    if d_loss_d_z is None:
        d_omega = np.where(mask, np.asarray(d_loss_d_information, dtype=float), 0.0)
        sig, w = cache["sig"], cache["w"]
        dz = d_omega * 2.0 * w * sig * (1.0 - sig)
    else:
        dz = np.where(mask, np.asarray(d_loss_d_z, dtype=float), 0.0)
    grads: dict[str, np.ndarray] = {}

    dout = dz[..., None]
    hh = cache["head_h"]
    dhh, grads["head2.W"], grads["head2.b"] = _linear_backward(dout, hh, p["head2.W"])
    dhp = dhh * np.where(cache["head_pre"] > 0, 1.0, s)
    du, grads["head1.W"], grads["head1.b"] = _linear_backward(dhp, cache["u_final"], p["head1.W"])

    scale = 1.0 / np.sqrt(cfg.d_model)
    for layer in reversed(range(cfg.n_layers)):
        pre = f"enc{layer}"
        c = cache[pre]
        dsum2, grads[f"{pre}.ln2.g"], grads[f"{pre}.ln2.b"] = _layer_norm_backward(du, p[f"{pre}.ln2.g"], c["ln2"])
        dh, grads[f"{pre}.ff2.W"], grads[f"{pre}.ff2.b"] = _linear_backward(dsum2, c["h"], p[f"{pre}.ff2.W"])
        dh_pre = dh * np.where(c["h_pre"] > 0, 1.0, s)
        dy1_ff, grads[f"{pre}.ff1.W"], grads[f"{pre}.ff1.b"] = _linear_backward(dh_pre, c["y1"], p[f"{pre}.ff1.W"])
        dy1 = dsum2 + dy1_ff
        dsum1, grads[f"{pre}.ln1.g"], grads[f"{pre}.ln1.b"] = _layer_norm_backward(dy1, p[f"{pre}.ln1.g"], c["ln1"])
        dctx, grads[f"{pre}.attn.o.W"], grads[f"{pre}.attn.o.b"] = _linear_backward(dsum1, c["ctx"],
                                                                                    p[f"{pre}.attn.o.W"])
        attn = c["attn"]
        dattn = dctx @ np.swapaxes(c["v"], 1, 2)
        dv = np.swapaxes(attn, 1, 2) @ dctx
        dscores = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True)) * scale
        dq = dscores @ c["k"]
        dk = np.swapaxes(dscores, 1, 2) @ c["q"]
        u_in = c["u"]
        du = dsum1
        for name, dm in (("q", dq), ("k", dk), ("v", dv)):
            dx, grads[f"{pre}.attn.{name}.W"], db = _linear_backward(dm, u_in, p[f"{pre}.attn.{name}.W"])
            if name != "k":
                grads[f"{pre}.attn.{name}.b"] = db
            du = du + dx

    da = du * np.where(cache["proj"] > 0, 1.0, s)
    _, grads["proj.W"], grads["proj.b"] = _linear_backward(da, cache["x"], p["proj.W"])
    return {k: grads[k] for k in p}


# ---------------------------------------------------------------------------
# checkpoint container


def model_to_dict(model: WgnModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "stats": {"names": list(FEATURE_NAMES), "mean": model.stats.mean.tolist(), "std": model.stats.std.tolist()},
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in model.params.items()},
    }


def model_from_dict(d: dict) -> WgnModel:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a weighting-network checkpoint (format={d.get('format')!r})")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
    params = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["params"].items()}
    model = WgnModel(params, FeatureStats(d["stats"]["mean"], d["stats"]["std"]), WgnConfig(**d["config"]))
    expected = WgnModel.init(model.config)
    if {k: v.shape for k, v in expected.params.items()} != {k: v.shape for k, v in params.items()}:
        raise ValueError("checkpoint parameters do not match its architecture config")
    return model


def save_model(model: WgnModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path) -> WgnModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))

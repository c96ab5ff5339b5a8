"""Quadric ray transformer: a small mapping network with analytic gradients.

Pipeline per batch of B rays with N samples each::

    xyz --PE--> field MLP --> f_sigma                      (B, N, D)
    f_sigma (+ depth encoding) --intra-ray MHA--> f'        residual
    [f', f_s] --fusion MLP--> f''                           f_s = embedding(segment id)
    f'' (+ pixel encoding) --inter-ray MHA--> f'''          residual, over rays
    f''' --> sigma (softplus), rgb (sigmoid MLP with view PE), semantic logits

Inter-ray attention runs over consecutive blocks of at most ``max_rays``
rays. With ``quadric_masking`` a ray only attends to rays carrying the same
segment id.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import ContractViolation
from .layers import (
    fit_width,
    linear_backward,
    mha_backward,
    mha_forward,
    positional_encoding,
    positional_encoding_backward,
    sigmoid,
    softplus,
    xavier,
)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TransformerConfig:
    feat_dim: int = 32
    sem_dim: int = 16
    n_heads: int = 4
    pe_bands: int = 6
    view_bands: int = 4
    color_hidden: int = 32
    n_classes: int = 8
    n_ids: int = 64
    max_rays: int = 256
    max_samples: int = 64
    d_far: float = 10.0
    pos_scale: float = 1.0
    quadric_masking: bool = False
    use_pe: bool = True
    seed: int = 0

    def __post_init__(self):
        dims = [self.feat_dim, self.sem_dim, self.n_heads, self.pe_bands, self.view_bands,
                self.color_hidden, self.n_classes, self.n_ids, self.max_rays, self.max_samples]
        if min(dims) < 1:
            raise ContractViolation("all transformer dimensions must be >= 1")
        if self.feat_dim % self.n_heads:
            raise ContractViolation(f"feat_dim {self.feat_dim} not divisible by n_heads {self.n_heads}")

    @property
    def field_in(self) -> int:
        return 3 + 6 * self.pe_bands

    @property
    def color_in(self) -> int:
        return self.feat_dim + 6 * self.view_bands


def init_params(cfg: TransformerConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    D, S = cfg.feat_dim, cfg.sem_dim
    p = {}
    p["f_w1"], p["f_b1"] = xavier(rng, cfg.field_in, D), np.zeros(D)
    p["f_w2"], p["f_b2"] = xavier(rng, D, D), np.zeros(D)
    p["f_w3"], p["f_b3"] = xavier(rng, D, D), np.zeros(D)
    table = rng.uniform(-0.1, 0.1, size=(cfg.n_ids, S))
    table[0] = 0.0
    p["sem_table"] = table
    for pre in ("a", "r"):
        for w in ("wq", "wk", "wv", "wo"):
            p[f"{pre}_{w}"] = xavier(rng, D, D)
    p["u_w1"], p["u_b1"] = xavier(rng, D + S, D), np.zeros(D)
    p["u_w2"], p["u_b2"] = xavier(rng, D, D), np.zeros(D)
    p["s_w"], p["s_b"] = xavier(rng, D, 1), np.zeros(1)
    p["c_w1"], p["c_b1"] = xavier(rng, cfg.color_in, cfg.color_hidden), np.zeros(cfg.color_hidden)
    p["c_w2"], p["c_b2"] = xavier(rng, cfg.color_hidden, 3), np.zeros(3)
    p["l_w"], p["l_b"] = xavier(rng, D, cfg.n_classes), np.zeros(cfg.n_classes)
    return p


@dataclass
class TransformerInputs:
    points: np.ndarray      # (B, N, 3) world sample positions
    view_dirs: np.ndarray   # (B, 3) unit directions
    t: np.ndarray           # (B, N) sample depths
    pixels: np.ndarray      # (B, 2) pixel coordinates normalized to [0, 1)
    ids: np.ndarray         # (B,) segment ids


class QuadricRayTransformer:
    def __init__(self, cfg: TransformerConfig = TransformerConfig(), params: Optional[dict] = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cache = None

    # -- encodings -----------------------------------------------------------

    def depth_encoding(self, t) -> np.ndarray:
        """delta_p: encoding of t / d_far, padded to the feature width."""
        D = self.cfg.feat_dim
        if not self.cfg.use_pe:
            return np.zeros(np.shape(t) + (D,))
        return fit_width(positional_encoding(np.asarray(t)[..., None] / self.cfg.d_far, self.cfg.pe_bands), D)

    def pixel_encoding(self, pixels) -> np.ndarray:
        """delta'_p: encoding of normalized (u, v), padded to the feature width."""
        D = self.cfg.feat_dim
        pixels = np.asarray(pixels, dtype=np.float64)
        if not self.cfg.use_pe:
            return np.zeros(pixels.shape[:-1] + (D,))
        return fit_width(positional_encoding(pixels, self.cfg.pe_bands), D)

    # -- forward pieces (each usable on its own) ------------------------------

    def query_features(self, points, ids):
        p, c = self.params, self.cfg
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 3 or points.shape[-1] != 3:
            raise ContractViolation(f"points must be (B, N, 3), got {points.shape}")
        ids = np.asarray(ids)
        if ids.shape != points.shape[:1]:
            raise ContractViolation(f"ids must be (B,), got {ids.shape} for {points.shape[0]} rays")
        if ids.size and (ids.min() < 0 or ids.max() >= c.n_ids):
            raise ContractViolation(f"segment ids must lie in [0, {c.n_ids}), got max {ids.max()}")
        xs = points / c.pos_scale
        x_in = np.concatenate([xs, positional_encoding(xs, c.pe_bands)], axis=-1)
        z1 = x_in @ p["f_w1"] + p["f_b1"]
        h1 = softplus(z1)
        z2 = h1 @ p["f_w2"] + p["f_b2"]
        h2 = softplus(z2)
        f_sigma = h2 @ p["f_w3"] + p["f_b3"]
        f_s = p["sem_table"][ids]
        return f_sigma, f_s, (xs, x_in, z1, h1, z2, h2)

    def intra_ray_attention(self, f_sigma, delta_p):
        p = self.params
        out, cache = mha_forward(f_sigma + delta_p, p["a_wq"], p["a_wk"], p["a_wv"], p["a_wo"], self.cfg.n_heads)
        return f_sigma + out, cache

    def fuse_semantic(self, f1, f_s):
        p = self.params
        g = np.concatenate([f1, np.broadcast_to(f_s[:, None, :], f1.shape[:2] + f_s.shape[-1:])], axis=-1)
        z = g @ p["u_w1"] + p["u_b1"]
        h = softplus(z)
        return h @ p["u_w2"] + p["u_b2"], (g, z, h)

    def _blocks(self, B):
        step = self.cfg.max_rays
        return [(i, min(i + step, B)) for i in range(0, B, step)]

    def inter_ray_attention(self, f2, delta_pp, ids):
        """Attention across rays for every sample index, in blocks of ``max_rays``."""
        p = self.params
        out = np.empty_like(f2)
        caches = []
        for i0, i1 in self._blocks(f2.shape[0]):
            X = np.swapaxes(f2[i0:i1] + delta_pp[i0:i1, None, :], 0, 1)  # (N, b, D)
            allowed = None
            if self.cfg.quadric_masking:
                seg = ids[i0:i1]
                allowed = seg[:, None] == seg[None, :]
            o, cache = mha_forward(X, p["r_wq"], p["r_wk"], p["r_wv"], p["r_wo"], self.cfg.n_heads, allowed)
            out[i0:i1] = f2[i0:i1] + np.swapaxes(o, 0, 1)
            caches.append(cache)
        return out, caches

    def heads(self, f3, view_dirs):
        p, c = self.params, self.cfg
        z_s = (f3 @ p["s_w"])[..., 0] + p["s_b"][0]
        sigma = softplus(z_s)
        vpe = positional_encoding(np.asarray(view_dirs, dtype=np.float64), c.view_bands)
        c_in = np.concatenate([f3, np.broadcast_to(vpe[:, None, :], f3.shape[:2] + vpe.shape[-1:])], axis=-1)
        z_c1 = c_in @ p["c_w1"] + p["c_b1"]
        h_c = softplus(z_c1)
        rgb = sigmoid(h_c @ p["c_w2"] + p["c_b2"])
        logits = f3 @ p["l_w"] + p["l_b"]
        return sigma, rgb, logits, (z_s, c_in, z_c1, h_c, rgb)

    # -- full pass -------------------------------------------------------------

    def forward(self, inp: TransformerInputs):
        B, N, _ = np.shape(inp.points)
        if N > self.cfg.max_samples:
            raise ContractViolation(f"{N} samples per ray exceeds max_samples={self.cfg.max_samples}")
        if np.shape(inp.t) != (B, N) or np.shape(inp.view_dirs) != (B, 3) or np.shape(inp.pixels) != (B, 2):
            raise ContractViolation("inconsistent input shapes")
        ids = np.asarray(inp.ids, dtype=np.int64)
        f_sigma, f_s, c_field = self.query_features(inp.points, ids)
        f1, c_intra = self.intra_ray_attention(f_sigma, self.depth_encoding(inp.t))
        f2, c_fuse = self.fuse_semantic(f1, f_s)
        f3, c_inter = self.inter_ray_attention(f2, self.pixel_encoding(inp.pixels), ids)
        sigma, rgb, logits, c_heads = self.heads(f3, inp.view_dirs)
        self._cache = dict(inp=inp, ids=ids, field=c_field, intra=c_intra, f1=f1, fuse=c_fuse,
                           inter=c_inter, f3=f3, heads=c_heads)
        return sigma, rgb, logits

    def attention_maps(self):
        """Attention weights of the last forward pass: (intra, [inter per block])."""
        if self._cache is None:
            raise ContractViolation("no forward pass cached")
        return self._cache["intra"][4], [c[4] for c in self._cache["inter"]]

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def backward(self, d_sigma=None, d_rgb=None, d_logits=None) -> dict:
        """Accumulate parameter gradients; return input gradients.

        Returns ``{"points": (B, N, 3), "view_dirs": (B, 3)}``.
        """
        if self._cache is None:
            raise ContractViolation("backward called before forward")
        c, p, g, cfg = self._cache, self.params, self.grads, self.cfg
        f3 = c["f3"]
        B, N, D = f3.shape
        d_sigma = np.zeros((B, N)) if d_sigma is None else d_sigma
        d_rgb = np.zeros((B, N, 3)) if d_rgb is None else d_rgb
        d_logits = np.zeros((B, N, cfg.n_classes)) if d_logits is None else d_logits

        # heads
        z_s, c_in, z_c1, h_c, rgb = c["heads"]
        dz_s = d_sigma * sigmoid(z_s)
        df3 = dz_s[..., None] * p["s_w"][:, 0]
        g["s_w"] += (f3.reshape(-1, D).T @ dz_s.reshape(-1))[:, None]
        g["s_b"] += dz_s.sum()
        dz_c2 = d_rgb * rgb * (1.0 - rgb)
        dh_c, dW, db = linear_backward(dz_c2, h_c, p["c_w2"])
        g["c_w2"] += dW
        g["c_b2"] += db
        dz_c1 = dh_c * sigmoid(z_c1)
        dc_in, dW, db = linear_backward(dz_c1, c_in, p["c_w1"])
        g["c_w1"] += dW
        g["c_b1"] += db
        df3 += dc_in[..., :D]
        d_vpe = dc_in[..., D:].sum(axis=1)
        d_view = positional_encoding_backward(np.asarray(c["inp"].view_dirs, dtype=np.float64), cfg.view_bands, d_vpe)
        dx, dW, db = linear_backward(d_logits, f3, p["l_w"])
        g["l_w"] += dW
        g["l_b"] += db
        df3 += dx

        # inter-ray attention (residual); pixel encodings are constants
        df2 = df3.copy()
        for (i0, i1), cache in zip(self._blocks(B), c["inter"]):
            dX, dWq, dWk, dWv, dWo = mha_backward(np.swapaxes(df3[i0:i1], 0, 1), cache)
            df2[i0:i1] += np.swapaxes(dX, 0, 1)
            g["r_wq"] += dWq
            g["r_wk"] += dWk
            g["r_wv"] += dWv
            g["r_wo"] += dWo

        # fusion MLP
        g_in, z_u, h_u = c["fuse"]
        dh_u, dW, db = linear_backward(df2, h_u, p["u_w2"])
        g["u_w2"] += dW
        g["u_b2"] += db
        dz_u = dh_u * sigmoid(z_u)
        dg, dW, db = linear_backward(dz_u, g_in, p["u_w1"])
        g["u_w1"] += dW
        g["u_b1"] += db
        df1 = dg[..., :D]
        d_fs = dg[..., D:].sum(axis=1)
        np.add.at(g["sem_table"], c["ids"], d_fs)
        g["sem_table"][0] = 0.0  # id 0 is the fixed "no segment" embedding

        # intra-ray attention (residual); depth encodings are constants
        dX, dWq, dWk, dWv, dWo = mha_backward(df1, c["intra"])
        df_sigma = df1 + dX
        g["a_wq"] += dWq
        g["a_wk"] += dWk
        g["a_wv"] += dWv
        g["a_wo"] += dWo

        # field MLP
        xs, x_in, z1, h1, z2, h2 = c["field"]
        dh2, dW, db = linear_backward(df_sigma, h2, p["f_w3"])
        g["f_w3"] += dW
        g["f_b3"] += db
        dz2 = dh2 * sigmoid(z2)
        dh1, dW, db = linear_backward(dz2, h1, p["f_w2"])
        g["f_w2"] += dW
        g["f_b2"] += db
        dz1 = dh1 * sigmoid(z1)
        dx_in, dW, db = linear_backward(dz1, x_in, p["f_w1"])
        g["f_w1"] += dW
        g["f_b1"] += db
        dxs = dx_in[..., :3] + positional_encoding_backward(xs, cfg.pe_bands, dx_in[..., 3:])
        return {"points": dxs / cfg.pos_scale, "view_dirs": d_view}

    # -- persistence -----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.cfg),
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in sorted(self.params.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuadricRayTransformer":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ContractViolation(f"unsupported checkpoint version {d.get('version')}")
        cfg = TransformerConfig(**d["config"])
        params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d["params"].items()}
        ref = init_params(cfg)
        if set(params) != set(ref) or any(params[k].shape != ref[k].shape for k in ref):
            raise ContractViolation("checkpoint tensors do not match the configured shapes")
        return cls(cfg, params)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "QuadricRayTransformer":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

"""Micro dual-decoder 3D segmentation network with explicit backprop.

Shared encoder (stem + two stride-2 stages) feeding two decoders (LA, scar),
each with nearest-neighbor upsampling, 3x3x3 convs, post-ReLU skip additions
and a sigmoid 1x1x1 head. Everything runs in float64; gradients are exact and
finite-difference-checkable. Per-tensor trainability flags and learning-rate
multipliers implement the stage-wise update rules, optimized with AdamW.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_VERSION = 1

ENCODER_GROUPS = ("stem", "enc1", "enc2")
EARLY_ENCODER_GROUPS = ("stem", "enc1")


@dataclass
class Param:
    value: np.ndarray
    trainable: bool = True
    lr_mult: float = 1.0


# ---------------------------------------------------------------------------
# Conv / resampling primitives
# ---------------------------------------------------------------------------


def conv3d_forward(x, w, b, stride=1):
    """3D convolution ("same" padding k//2); w: (Cout, Cin, k, k, k).

    Materializes the patch matrix once (27 strided block copies) and runs a
    single matmul, which is the fastest layout for these small channel
    counts. Returns (y, cols) with the patch matrix cached for backward.
    """
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x
    out_shape = tuple((n + 2 * pad - k) // stride + 1 for n in x.shape[1:])
    ox, oy, oz = out_shape
    n = ox * oy * oz
    cols = np.empty((k, k, k, cin, n))
    for i in range(k):
        for j in range(k):
            for l in range(k):
                block = cols[i, j, l].reshape(cin, ox, oy, oz)
                block[:] = xp[:, i : i + stride * ox : stride, j : j + stride * oy : stride, l : l + stride * oz : stride]
    wm = w.transpose(2, 3, 4, 1, 0).reshape(k * k * k * cin, cout)
    y = (wm.T @ cols.reshape(-1, n)).reshape((cout,) + out_shape)
    y += b[:, None, None, None]
    return y, (cols, x.shape, out_shape)


def conv3d_backward(dy, fwd_cache, w, stride=1):
    """Gradients of conv3d_forward. Returns (dx, dw, db)."""
    cols, x_shape, out_shape = fwd_cache
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    pad = k // 2
    ox, oy, oz = out_shape
    n = ox * oy * oz
    dy_mat = dy.reshape(cout, n)
    db = dy_mat.sum(axis=1)
    dwm = dy_mat @ cols.reshape(-1, n).T  # (cout, k^3*cin)
    dw = dwm.reshape(cout, k, k, k, cin).transpose(0, 4, 1, 2, 3).copy()
    wm = w.transpose(2, 3, 4, 1, 0).reshape(k * k * k * cin, cout)
    dcols = (wm @ dy_mat).reshape(k, k, k, cin, n)
    dxp = np.zeros((cin,) + tuple(m + 2 * pad for m in x_shape[1:]))
    for i in range(k):
        for j in range(k):
            for l in range(k):
                dxp[:, i : i + stride * ox : stride, j : j + stride * oy : stride, l : l + stride * oz : stride] += dcols[
                    i, j, l
                ].reshape(cin, ox, oy, oz)
    dx = dxp[:, pad:-pad, pad:-pad, pad:-pad] if pad else dxp
    return dx, dw, db


def upsample2(x):
    """Nearest-neighbor x2 along every spatial axis."""
    return x.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(dy):
    c, x, y, z = dy.shape
    return dy.reshape(c, x // 2, 2, y // 2, 2, z // 2, 2).sum(axis=(2, 4, 6))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

_CONV_SHAPES = {
    "stem.w": (8, 1, 3, 3, 3),
    "stem.b": (8,),
    "enc1.w": (16, 8, 3, 3, 3),
    "enc1.b": (16,),
    "enc2.w": (32, 16, 3, 3, 3),
    "enc2.b": (32,),
}
for _dec in ("dec_la", "dec_scar"):
    _CONV_SHAPES.update(
        {
            f"{_dec}.up1.w": (16, 32, 3, 3, 3),
            f"{_dec}.up1.b": (16,),
            f"{_dec}.up2.w": (8, 16, 3, 3, 3),
            f"{_dec}.up2.b": (8,),
            f"{_dec}.head.w": (1, 8, 1, 1, 1),
            f"{_dec}.head.b": (1,),
        }
    )


def _group_of(name: str) -> str:
    return name.split(".")[0]


class MicroNet:
    """Shared-encoder dual-decoder network; parameters live in self.params."""

    def __init__(self, seed: int = 0):
        self.params: dict[str, Param] = {}
        rng = np.random.default_rng(seed)
        for name, shape in _CONV_SHAPES.items():
            self.params[name] = Param(self._init_tensor(name, shape, rng))

    @staticmethod
    def _init_tensor(name, shape, rng):
        if name.endswith(".b"):
            return np.zeros(shape)
        fan_in = int(np.prod(shape[1:]))
        # He init for ReLU convs, smaller scale for the sigmoid heads
        std = np.sqrt(1.0 / fan_in) if ".head." in name else np.sqrt(2.0 / fan_in)
        return rng.normal(0.0, std, shape)

    def reinit_decoder(self, decoder: str, seed: int):
        """Fresh random initialization of one decoder (e.g. scar at stage II)."""
        rng = np.random.default_rng(seed)
        prefix = f"dec_{decoder}."
        for name in self.params:
            if name.startswith(prefix):
                self.params[name] = Param(
                    self._init_tensor(name, _CONV_SHAPES[name], rng),
                    self.params[name].trainable,
                    self.params[name].lr_mult,
                )

    def architecture_hash(self) -> str:
        desc = ";".join(f"{n}:{_CONV_SHAPES[n]}" for n in sorted(_CONV_SHAPES))
        return hashlib.sha256(desc.encode()).hexdigest()[:16]

    def _p(self, name):
        return self.params[name].value

    def forward(self, x: np.ndarray):
        """x: (nx, ny, nz) with dims divisible by 4.

        Returns (y_la, y_scar, cache) with probabilities in (0, 1).
        """
        if any(n % 4 for n in x.shape):
            raise ValueError(f"input dims {x.shape} must be divisible by 4")
        cache = {}
        h = x[None].astype(np.float64)
        pre0, cache["stem.cv"] = conv3d_forward(h, self._p("stem.w"), self._p("stem.b"))
        a0 = np.maximum(pre0, 0.0)
        pre1, cache["enc1.cv"] = conv3d_forward(a0, self._p("enc1.w"), self._p("enc1.b"), stride=2)
        a1 = np.maximum(pre1, 0.0)
        pre2, cache["enc2.cv"] = conv3d_forward(a1, self._p("enc2.w"), self._p("enc2.b"), stride=2)
        z = np.maximum(pre2, 0.0)
        cache.update(pre0=pre0, pre1=pre1, pre2=pre2, z=z)
        outs = {}
        for dec in ("dec_la", "dec_scar"):
            u1 = upsample2(z)
            preu1, cache[f"{dec}.up1.cv"] = conv3d_forward(u1, self._p(f"{dec}.up1.w"), self._p(f"{dec}.up1.b"))
            c1 = np.maximum(preu1, 0.0) + a1
            u2 = upsample2(c1)
            preu2, cache[f"{dec}.up2.cv"] = conv3d_forward(u2, self._p(f"{dec}.up2.w"), self._p(f"{dec}.up2.b"))
            c2 = np.maximum(preu2, 0.0) + a0
            logits, cache[f"{dec}.head.cv"] = conv3d_forward(
                c2, self._p(f"{dec}.head.w"), self._p(f"{dec}.head.b")
            )
            y = _sigmoid(logits[0])
            cache[f"{dec}.preu1"] = preu1
            cache[f"{dec}.preu2"] = preu2
            outs[dec] = y
        cache["y_la"] = outs["dec_la"]
        cache["y_scar"] = outs["dec_scar"]
        return outs["dec_la"], outs["dec_scar"], cache

    def backward(self, cache, d_y_la: np.ndarray, d_y_scar: np.ndarray):
        """Exact parameter gradients given dL/dy for both probability maps."""
        if d_y_la.shape != cache["y_la"].shape or d_y_scar.shape != cache["y_scar"].shape:
            raise ValueError("upstream gradient shape does not match cached forward")
        grads = {}
        dz = np.zeros_like(cache["z"])
        da1 = np.zeros_like(cache["pre1"])
        da0 = np.zeros_like(cache["pre0"])
        for dec, dy in (("dec_la", d_y_la), ("dec_scar", d_y_scar)):
            y = cache["y_la" if dec == "dec_la" else "y_scar"]
            dlogits = (dy * y * (1.0 - y))[None]
            dc2, dw, db = conv3d_backward(dlogits, cache[f"{dec}.head.cv"], self._p(f"{dec}.head.w"))
            grads[f"{dec}.head.w"], grads[f"{dec}.head.b"] = dw, db
            da0 += dc2  # skip-add from stem
            dpre = dc2 * (cache[f"{dec}.preu2"] > 0)
            du2, dw, db = conv3d_backward(dpre, cache[f"{dec}.up2.cv"], self._p(f"{dec}.up2.w"))
            grads[f"{dec}.up2.w"], grads[f"{dec}.up2.b"] = dw, db
            dc1 = upsample2_backward(du2)
            da1 += dc1  # skip-add from enc1
            dpre = dc1 * (cache[f"{dec}.preu1"] > 0)
            du1, dw, db = conv3d_backward(dpre, cache[f"{dec}.up1.cv"], self._p(f"{dec}.up1.w"))
            grads[f"{dec}.up1.w"], grads[f"{dec}.up1.b"] = dw, db
            dz += upsample2_backward(du1)

        dpre = dz * (cache["pre2"] > 0)
        dx, dw, db = conv3d_backward(dpre, cache["enc2.cv"], self._p("enc2.w"), stride=2)
        grads["enc2.w"], grads["enc2.b"] = dw, db
        da1 += dx
        dpre = da1 * (cache["pre1"] > 0)
        dx, dw, db = conv3d_backward(dpre, cache["enc1.cv"], self._p("enc1.w"), stride=2)
        grads["enc1.w"], grads["enc1.b"] = dw, db
        da0 += dx
        dpre = da0 * (cache["pre0"] > 0)
        _, dw, db = conv3d_backward(dpre, cache["stem.cv"], self._p("stem.w"))
        grads["stem.w"], grads["stem.b"] = dw, db
        return grads


def set_stage_trainability(net: MicroNet, stage: str):
    """Apply the per-stage freeze/learning-rate rules.

    I:   encoder + LA decoder at multiplier 1; scar decoder inert.
    II:  encoder + LA decoder at multiplier 0.1; scar decoder at 1.
    III: stem + enc1 and LA decoder frozen; enc2 + scar decoder at 1.
    """
    if stage not in ("I", "II", "III"):
        raise ValueError(f"unknown stage {stage!r}")
    for name, p in net.params.items():
        group = _group_of(name)
        if stage == "I":
            p.trainable = group != "dec_scar"
            p.lr_mult = 1.0
        elif stage == "II":
            p.trainable = True
            p.lr_mult = 1.0 if group == "dec_scar" else 0.1
        else:
            p.trainable = group in ("enc2", "dec_scar")
            p.lr_mult = 1.0


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam; respects trainability and lr multipliers."""

    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step_count: int = 0
    moments: dict = field(default_factory=dict)

    def step(self, params: dict[str, Param], grads: dict[str, np.ndarray]):
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        for name, p in params.items():
            if not p.trainable:
                continue
            g = grads[name]
            if g.shape != p.value.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            m, v = self.moments.get(name, (np.zeros_like(g), np.zeros_like(g)))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.moments[name] = (m, v)
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            lr_eff = self.lr * p.lr_mult
            p.value = p.value - lr_eff * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.value)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, net: MicroNet, opt: AdamW | None = None, meta: dict | None = None):
    """Versioned .npz checkpoint: parameters, flags, optimizer state, metadata.

    Layout: one array per parameter ("param/<name>"), per first/second moment
    ("m/<name>", "v/<name>") and a JSON metadata blob carrying the format
    version, architecture hash, trainability flags, lr multipliers, optimizer
    hyperparameters and caller metadata (e.g. RNG state, lineage).
    """
    arrays = {f"param/{n}": p.value for n, p in net.params.items()}
    meta = dict(meta or {})
    meta.update(
        version=CHECKPOINT_VERSION,
        arch_hash=net.architecture_hash(),
        trainable={n: p.trainable for n, p in net.params.items()},
        lr_mult={n: p.lr_mult for n, p in net.params.items()},
    )
    if opt is not None:
        meta["optimizer"] = {
            "lr": opt.lr,
            "betas": list(opt.betas),
            "eps": opt.eps,
            "weight_decay": opt.weight_decay,
            "step_count": opt.step_count,
        }
        for n, (m, v) in opt.moments.items():
            arrays[f"m/{n}"] = m
            arrays[f"v/{n}"] = v
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Returns (net, optimizer_or_None, meta)."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"].tobytes()).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        net = MicroNet(seed=0)
        if meta["arch_hash"] != net.architecture_hash():
            raise ValueError("checkpoint architecture hash mismatch")
        for name in net.params:
            net.params[name] = Param(
                data[f"param/{name}"],
                bool(meta["trainable"][name]),
                float(meta["lr_mult"][name]),
            )
        opt = None
        if "optimizer" in meta:
            o = meta["optimizer"]
            opt = AdamW(o["lr"], tuple(o["betas"]), o["eps"], o["weight_decay"], o["step_count"])
            for name in net.params:
                if f"m/{name}" in data:
                    opt.moments[name] = (data[f"m/{name}"], data[f"v/{name}"])
    return net, opt, meta


def checkpoint_hash(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()[:16]

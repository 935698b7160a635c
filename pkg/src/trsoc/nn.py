"""Control network, Adam and the portable checkpoint format.

The control is ``u(x, t) = f1(x, t) + f2(t) * x / eta**2`` where ``f1`` is an
MLP on ``(x, fourier(t))`` and ``f2`` an MLP on ``fourier(t)``. Both output
layers start at zero, so a fresh network is the zero control.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PRESETS = {
    "desk": dict(layers=4, width=64, fourier=32),
    "large": dict(layers=6, width=256, fourier=32),
    "tiny": dict(layers=2, width=4, fourier=1, gate_layers=1),
}


def fourier_features(t, n_freq: int, T: float = 1.0) -> np.ndarray:
    """``[t, cos(2 pi k t/T), sin(2 pi k t/T)]`` for ``k = 1..n_freq``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    k = np.arange(1, n_freq + 1)
    ang = 2.0 * np.pi * t[:, None] * k[None, :] / T
    return np.concatenate([t[:, None], np.cos(ang), np.sin(ang)], axis=1)


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


class ControlNet:
    def __init__(self, dim, eta=1.0, layers=4, width=64, fourier=32, gate_layers=2, T=1.0, seed=0):
        if layers < 2 or gate_layers < 1:
            raise ValueError("need layers >= 2 and gate_layers >= 1")
        self.dim = int(dim)
        self.eta = float(eta)
        self.layers = int(layers)
        self.width = int(width)
        self.fourier = int(fourier)
        self.gate_layers = int(gate_layers)
        self.T = float(T)
        self.seed = int(seed)
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        rng = np.random.default_rng(seed)
        nt = 2 * self.fourier + 1
        w = self.width

        def dense(name, fan_in, fan_out, zero=False):
            W = np.zeros((fan_in, fan_out)) if zero else rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            self.params[f"{name}.W"] = Tensor(W, requires_grad=True, name=f"{name}.W")
            self.params[f"{name}.b"] = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b")

        # first trunk layer is split into x- and time-parts so the time part
        # can be evaluated once per distinct time
        self.params["trunk0.Wx"] = Tensor(rng.standard_normal((dim, w)) / np.sqrt(dim + nt), requires_grad=True, name="trunk0.Wx")
        dense("trunk0", nt, w)
        self.params["trunk0.W"].data *= np.sqrt(nt / (dim + nt))
        for i in range(1, layers - 1):
            dense(f"trunk{i}", w, w)
        dense(f"trunk{layers - 1}", w, dim, zero=True)

        if gate_layers == 1:
            dense("gate0", nt, 1, zero=True)
        else:
            dense("gate0", nt, w)
            for i in range(1, gate_layers - 1):
                dense(f"gate{i}", w, w)
            dense(f"gate{gate_layers - 1}", w, 1, zero=True)

    # -- structure -------------------------------------------------------
    def architecture(self) -> dict:
        return dict(
            dim=self.dim, eta=self.eta, layers=self.layers, width=self.width,
            fourier=self.fourier, gate_layers=self.gate_layers, T=self.T, seed=self.seed,
        )

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def copy(self) -> "ControlNet":
        """Detached copy; used to freeze the previous iterate."""
        new = ControlNet.__new__(ControlNet)
        new.__dict__.update({k: v for k, v in self.__dict__.items() if k != "params"})
        new.params = OrderedDict(
            (k, Tensor(p.data.copy(), requires_grad=True, name=k)) for k, p in self.params.items()
        )
        return new

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        off = 0
        for p in self.params.values():
            n = p.data.size
            p.data = flat[off:off + n].reshape(p.data.shape).copy()
            off += n
        if off != flat.size:
            raise ValueError(f"expected {off} parameters, got {flat.size}")

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- evaluation ------------------------------------------------------
    def _parts(self, x, t):
        x = ad.as_tensor(x)
        n = x.shape[0]
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 0:
            tu, inv = t[None], np.zeros(n, dtype=np.intp)
        else:
            if t.shape != (n,):
                raise ValueError(f"time array shape {t.shape} does not match {n} rows")
            tu, inv = np.unique(t, return_inverse=True)
        phi = fourier_features(tu, self.fourier, self.T)
        P = self.params

        ht = ad.affine(phi, P["trunk0.W"], P["trunk0.b"])
        h = ad.gelu(ad.matmul(x, P["trunk0.Wx"]) + ad.take_rows(ht, inv))
        for i in range(1, self.layers - 1):
            h = ad.gelu(ad.affine(h, P[f"trunk{i}.W"], P[f"trunk{i}.b"]))
        last = self.layers - 1
        f1 = ad.affine(h, P[f"trunk{last}.W"], P[f"trunk{last}.b"])

        g = phi
        for i in range(self.gate_layers - 1):
            g = ad.gelu(ad.affine(g, P[f"gate{i}.W"], P[f"gate{i}.b"]))
        last = self.gate_layers - 1
        f2 = ad.take_rows(ad.affine(g, P[f"gate{last}.W"], P[f"gate{last}.b"]), inv)
        return f1, f2, x

    def forward(self, x, t) -> Tensor:
        """Differentiable output ``(N, d)`` for rows ``x`` at times ``t``."""
        f1, f2, x = self._parts(x, t)
        return f1 + f2 * ad.scale(x, 1.0 / self.eta**2)

    def __call__(self, x, t) -> np.ndarray:
        with ad.no_grad():
            return self.forward(x, t).data

    def gate_term(self, x, t) -> np.ndarray:
        with ad.no_grad():
            _, f2, xt = self._parts(x, t)
            return f2.data * xt.data / self.eta**2


class Adam:
    """Bias-corrected Adam with global-norm gradient clipping."""

    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8, clip=1.0):
        self.params = OrderedDict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip = clip
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        grads = {}
        for k, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(k)
            grads[k] = g
        if self.clip is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.clip:
                grads = {k: g * (self.clip / norm) for k, g in grads.items()}
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# -- checkpoints -------------------------------------------------------------
# layout: b"TRSOCNET" | u32 version | u32 header length | JSON header (utf-8)
#         | little-endian float64 parameters in declaration order

_MAGIC = b"TRSOCNET"
_VERSION = 1


def save_checkpoint(path, net: ControlNet, extra: dict | None = None) -> None:
    header = dict(
        architecture=net.architecture(),
        params=[[k, list(p.data.shape)] for k, p in net.params.items()],
        extra=extra or {},
    )
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    flat = net.get_flat().astype("<f8")
    with open(Path(path), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(hb)))
        fh.write(hb)
        fh.write(flat.tobytes())


def load_checkpoint(path) -> tuple[ControlNet, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a control checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    arch = header["architecture"]
    net = ControlNet(**arch)
    names = [k for k, _ in header["params"]]
    if names != list(net.params):
        raise ValueError(f"{path}: parameter layout does not match the architecture")
    flat = np.frombuffer(raw[16 + hlen:], dtype="<f8").astype(np.float64)
    net.set_flat(flat)
    return net, header.get("extra", {})

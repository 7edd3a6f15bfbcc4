"""Scalar energy network E(a, s, t) with a FiLM-conditioned Mish trunk.

The network maps (action, state, time) to a single scalar. Its
action-gradient is the denoising field, so every activation must be C2
and the scalar head keeps a bounded Lipschitz constant via spectral
normalization. The score is always obtained by differentiating the
scalar, never regressed directly, which makes the field conservative by
construction.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from escore import autodiff as ad
from escore.numerics import Rng

_MAGIC = b"ESCR"
_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    state_hidden: int = 64
    trunk_hidden: int = 128
    n_blocks: int = 2
    time_dim: int = 16
    head_hidden: int = 64
    head_init_scale: float = 0.1
    horizon: float = 1.0


def _fan_in_normal(rng: Rng, rows: int, cols: int, scale: float = 1.0) -> np.ndarray:
    w = rng.normal((rows, cols)) * (scale / np.sqrt(cols))
    return w


class EnergyNet:
    """Parameters and forward builder for the scalar energy."""

    def __init__(self, action_dim: int, state_dim: int, cfg: NetConfig, rng: Rng):
        if min(action_dim, state_dim) < 1:
            raise ValueError("dims must be positive")
        if min(cfg.state_hidden, cfg.trunk_hidden, cfg.head_hidden) < 1:
            raise ValueError("hidden widths must be positive")
        if cfg.time_dim % 2 != 0 or cfg.time_dim < 2:
            raise ValueError("time_dim must be an even positive integer")
        self.action_dim = action_dim
        self.state_dim = state_dim
        self.cfg = cfg
        n_freq = cfg.time_dim // 2
        self.time_freqs = 2.0 * np.pi * np.exp(
            np.linspace(0.0, np.log(50.0), n_freq))

        sh, th, hh = cfg.state_hidden, cfg.trunk_hidden, cfg.head_hidden
        cond_dim = sh + cfg.time_dim

        def P(rows, cols, scale=1.0):
            return ad.Param(_fan_in_normal(rng, rows, cols, scale))

        def B(rows):
            return ad.Param(np.zeros(rows))

        self.s_enc = [(P(sh, state_dim), B(sh)), (P(sh, sh), B(sh))]
        self.a_in = (P(th, action_dim), B(th))
        self.blocks = []
        for _ in range(cfg.n_blocks):
            self.blocks.append({
                "lin": (P(th, th), B(th)),
                "gamma": (P(th, cond_dim, 0.1), B(th)),
                "beta": (P(th, cond_dim, 0.1), B(th)),
            })
        self.head = [
            ad.SpectralAffine(_fan_in_normal(rng, hh, th), np.zeros(hh),
                              rng.normal((hh,))),
            ad.SpectralAffine(
                _fan_in_normal(rng, 1, hh, cfg.head_init_scale), np.zeros(1),
                rng.normal((1,))),
        ]

    # -- parameter bookkeeping ------------------------------------------------

    def params(self) -> list[ad.Param]:
        """All trainable parameters in declaration order."""
        out = []
        for w, b in self.s_enc:
            out += [w, b]
        out += list(self.a_in)
        for blk in self.blocks:
            for key in ("lin", "gamma", "beta"):
                out += list(blk[key])
        for sn in self.head:
            out += sn.params()
        return out

    def head_maps(self) -> list[ad.SpectralAffine]:
        return list(self.head)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self.params()])

    def load_flat_params(self, flat: np.ndarray) -> None:
        i = 0
        for p in self.params():
            n = p.value.size
            p.value[...] = flat[i:i + n].reshape(p.value.shape)
            i += n
        if i != flat.size:
            raise ValueError("parameter vector length mismatch")

    # -- forward --------------------------------------------------------------

    def _time_features(self, t: np.ndarray, batch: int) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 0:
            t = np.full(batch, float(t))
        if np.any(t < 0.0) or np.any(t > self.cfg.horizon):
            raise ValueError(f"t outside [0, {self.cfg.horizon}]")
        phase = t[:, None] * self.time_freqs[None, :]
        return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)

    def builder(self, s: np.ndarray, t):
        """Returns build(tape, a_node) -> energy node of shape (B, 1)."""
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        if s.shape[1] != self.state_dim:
            raise ValueError(f"state dim {s.shape[1]} != {self.state_dim}")
        tfeat = self._time_features(t, s.shape[0])

        def build(tape: ad.Tape, a_node: ad.Node) -> ad.Node:
            if a_node.value.shape != (s.shape[0], self.action_dim):
                raise ValueError(
                    f"action shape {a_node.value.shape} incompatible with "
                    f"state batch {s.shape[0]} / action dim {self.action_dim}")
            x = tape.constant(s)
            for w, b in self.s_enc:
                x = ad.mish(tape, ad.affine(tape, x, w, b))
            cond = ad.concat(tape, [x, tape.constant(tfeat)])
            h = ad.affine(tape, a_node, *self.a_in)
            for blk in self.blocks:
                h = ad.affine(tape, h, *blk["lin"])
                gamma = ad.affine(tape, cond, *blk["gamma"])
                beta = ad.affine(tape, cond, *blk["beta"])
                h = ad.mish(tape, ad.film(tape, h, gamma, beta))
            h = ad.mish(tape, ad.sn_affine(tape, h, self.head[0]))
            return ad.sn_affine(tape, h, self.head[1])

        return build

    def _coerce(self, a, s):
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        if a.shape[1] != self.action_dim:
            raise ValueError(f"action dim {a.shape[1]} != {self.action_dim}")
        if s.shape[0] == 1 and a.shape[0] > 1:
            s = np.repeat(s, a.shape[0], axis=0)
        if a.shape[0] == 1 and s.shape[0] > 1:
            a = np.repeat(a, s.shape[0], axis=0)
        return a, s

    def energy(self, a, s, t) -> np.ndarray:
        a, s = self._coerce(a, s)
        build = self.builder(s, t)
        tape = ad.Tape()
        out = build(tape, tape.input(a))
        return out.value[:, 0].copy()

    def score(self, a, s, t) -> np.ndarray:
        """-dE/da, the denoising field."""
        a, s = self._coerce(a, s)
        _, g = ad.input_gradient(self.builder(s, t), a)
        return -g

    def score_jacobian(self, a, s, t) -> np.ndarray:
        """Per-row Jacobian dS_i/da_j = -Hessian of the energy."""
        a, s = self._coerce(a, s)
        return -ad.hessian(self.builder(s, t), a)

    def project_head(self) -> None:
        """Clamp each head map's spectral norm back to at most one."""
        for sn in self.head:
            sn.project()

    # -- checkpoint io --------------------------------------------------------

    def config_hash(self) -> int:
        blob = json.dumps(asdict(self.cfg), sort_keys=True).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")

    def save(self, path) -> None:
        flat = self.flat_params()
        u = np.concatenate([sn.u for sn in self.head])
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<IIIQQQ", _VERSION, self.action_dim,
                                self.state_dim, self.config_hash(),
                                flat.size, u.size))
            f.write(flat.astype("<f8").tobytes())
            f.write(u.astype("<f8").tobytes())

    @classmethod
    def load(cls, path, cfg: NetConfig | None = None) -> "EnergyNet":
        cfg = cfg or NetConfig()
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != _MAGIC:
                raise ValueError("not an energy checkpoint")
            version, action_dim, state_dim, chash, n, nu = struct.unpack(
                "<IIIQQQ", f.read(struct.calcsize("<IIIQQQ")))
            if version != _VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            net = cls(action_dim, state_dim, cfg, Rng(0))
            if chash != net.config_hash():
                raise ValueError("checkpoint config hash mismatch")
            flat = np.frombuffer(f.read(8 * n), dtype="<f8")
            net.load_flat_params(flat.astype(np.float64))
            u = np.frombuffer(f.read(8 * nu), dtype="<f8").astype(np.float64)
            i = 0
            for sn in net.head:
                sn.u = u[i:i + sn.u.size].copy()
                i += sn.u.size
        return net

"""Miniature conditional U-Net: stacked basic blocks (residual + transformer)
with down/up-sampling and skip concatenation, exposing every named activation
position as a tap point.

Wiring is pre-norm residual; *_out taps are recorded pre-residual, so merged
output positions differ only by where an addition is re-associated.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError

TRANSFORMER_TAPS = ("SA_in", "CA_c", "SA_out", "CA_in", "CA_out", "FFN_in", "FFN_out", "Trans_out")
RESIDUAL_TAPS = ("Res_in", "Res_out")


@dataclass(frozen=True)
class UNetConfig:
    image_size: int = 16
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple = (1, 2)
    cond_dim: int = 16
    time_dim: int = 64
    ffn_mult: int = 4
    norm_groups: int = 8
    # levels that carry a transformer block; None means every level
    transformer_levels: tuple | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        if self.transformer_levels is not None:
            d["transformer_levels"] = list(self.transformer_levels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "UNetConfig":
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        if d.get("transformer_levels") is not None:
            d["transformer_levels"] = tuple(d["transformer_levels"])
        return UNetConfig(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class TapSink:
    """Collects (block, position, value) records during one forward pass."""

    def __init__(self):
        self.taps = []

    def record(self, block: str, pos: str, value: T.Tensor) -> None:
        self.taps.append((block, pos, value))

    def by_position(self):
        out = {}
        for block, pos, value in self.taps:
            out.setdefault((block, pos), []).append(value)
        return out


class _NullHooks:
    """Pass-through used when no adapter bank is injected."""

    def begin_forward(self):
        pass

    def tap(self, block, pos, value):
        return value

    def tap_read(self, block, pos, value):
        return value

    def write_point(self, block, pos, value):
        return value


_NULL = _NullHooks()


def attention(q: T.Tensor, k: T.Tensor, v: T.Tensor) -> T.Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over full row sets."""
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise DimensionError(f"attention shapes q={q.shape} k={k.shape} v={v.shape} are inconsistent")
    scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    return T.matmul(T.softmax_rows(scores), v)


def ffn(x: T.Tensor, w1: T.Tensor, b1: T.Tensor, w2: T.Tensor, b2: T.Tensor) -> T.Tensor:
    """Two linear maps with a ReLU between: ReLU(x W1 + b1) W2 + b2."""
    return T.add(T.matmul(T.relu(T.add(T.matmul(x, w1), b1)), w2), b2)


def sinusoidal_embedding(t: int, dim: int) -> np.ndarray:
    """Standard sin/cos embedding of an integer step index."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


class _ParamStore:
    """Flat name -> Tensor registry shared by the whole model."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, T.Tensor] = {}

    def gaussian(self, name, shape, std):
        t = T.Tensor(self.rng.normal(0.0, std, shape), requires_grad=True)
        self.params[name] = t
        return t

    def zeros(self, name, shape):
        t = T.Tensor(np.zeros(shape), requires_grad=True)
        self.params[name] = t
        return t

    def ones(self, name, shape):
        t = T.Tensor(np.ones(shape), requires_grad=True)
        self.params[name] = t
        return t


class ResidualBlock:
    """GN -> SiLU -> conv -> (+ time projection) -> GN -> SiLU -> conv, with
    an identity or 1x1-conv skip; taps at Res_in and Res_out."""

    def __init__(self, store: _ParamStore, name: str, c_in: int, c_out: int, time_dim: int, groups: int):
        self.name = name
        self.c_in, self.c_out = c_in, c_out
        self.groups = groups
        p = store
        n = name
        self.gn1_g = p.ones(f"{n}.gn1.g", (c_in,))
        self.gn1_b = p.zeros(f"{n}.gn1.b", (c_in,))
        self.conv1_w = p.gaussian(f"{n}.conv1.w", (c_out, c_in, 3, 3), 1.0 / math.sqrt(9 * c_in))
        self.conv1_b = p.zeros(f"{n}.conv1.b", (c_out,))
        self.tproj_w = p.gaussian(f"{n}.tproj.w", (time_dim, c_out), 1.0 / math.sqrt(time_dim))
        self.tproj_b = p.zeros(f"{n}.tproj.b", (c_out,))
        self.gn2_g = p.ones(f"{n}.gn2.g", (c_out,))
        self.gn2_b = p.zeros(f"{n}.gn2.b", (c_out,))
        self.conv2_w = p.gaussian(f"{n}.conv2.w", (c_out, c_out, 3, 3), 1.0 / math.sqrt(9 * c_out))
        self.conv2_b = p.zeros(f"{n}.conv2.b", (c_out,))
        if c_in != c_out:
            self.skip_w = p.gaussian(f"{n}.skip.w", (c_in, c_out), 1.0 / math.sqrt(c_in))
        else:
            self.skip_w = None

    def time_shift(self, t_emb: T.Tensor) -> T.Tensor:
        """Per-channel shift contributed by the time embedding (a (C_out,) vector)."""
        proj = T.add(T.matmul(t_emb, self.tproj_w), self.tproj_b)
        return T.reshape(proj, (self.c_out,))

    def first_stage(self, x: T.Tensor, t_emb: T.Tensor) -> T.Tensor:
        """Everything before the second group norm; exposed for the time-shift test."""
        h = T.conv2d(T.silu(T.group_norm(x, self.groups, self.gn1_g, self.gn1_b)), self.conv1_w, self.conv1_b)
        return T.add(h, self.time_shift(t_emb))

    def forward(self, x: T.Tensor, t_emb: T.Tensor, sink=None, hooks=_NULL) -> T.Tensor:
        if sink is not None:
            sink.record(self.name, "Res_in", x)
        x = hooks.tap(self.name, "Res_in", x)
        h = self.first_stage(x, t_emb)
        h = T.conv2d(T.silu(T.group_norm(h, self.groups, self.gn2_g, self.gn2_b)), self.conv2_w, self.conv2_b)
        if self.skip_w is None:
            skip = x
        else:
            _, hh, ww = x.shape
            skip = T.tokens_to_chw(T.matmul(T.chw_to_tokens(x), self.skip_w), hh, ww)
        out = T.add(skip, h)
        if sink is not None:
            sink.record(self.name, "Res_out", out)
        out = hooks.tap(self.name, "Res_out", out)
        return out


class TransformerBlock:
    """Pre-norm self-attention, cross-attention and FFN with residual adds.

    Taps fire in data-path order; SA_out/CA_out/FFN_out are the pre-residual
    branch values. The condition tap (CA_c) is read at block entry but written
    just before cross-attention consumes it.
    """

    def __init__(self, store: _ParamStore, name: str, d_x: int, d_c: int, ffn_mult: int):
        self.name = name
        self.d_x = d_x
        p = store
        n = name
        std = 1.0 / math.sqrt(d_x)
        std_c = 1.0 / math.sqrt(d_c)
        self.ln1_g = p.ones(f"{n}.ln1.g", (d_x,))
        self.ln1_b = p.zeros(f"{n}.ln1.b", (d_x,))
        self.sa_wq = p.gaussian(f"{n}.sa.wq", (d_x, d_x), std)
        self.sa_wk = p.gaussian(f"{n}.sa.wk", (d_x, d_x), std)
        self.sa_wv = p.gaussian(f"{n}.sa.wv", (d_x, d_x), std)
        self.sa_wo = p.gaussian(f"{n}.sa.wo", (d_x, d_x), std)
        self.ln2_g = p.ones(f"{n}.ln2.g", (d_x,))
        self.ln2_b = p.zeros(f"{n}.ln2.b", (d_x,))
        self.ca_wq = p.gaussian(f"{n}.ca.wq", (d_x, d_x), std)
        self.ca_wk = p.gaussian(f"{n}.ca.wk", (d_c, d_x), std_c)
        self.ca_wv = p.gaussian(f"{n}.ca.wv", (d_c, d_x), std_c)
        self.ca_wo = p.gaussian(f"{n}.ca.wo", (d_x, d_x), std)
        self.ln3_g = p.ones(f"{n}.ln3.g", (d_x,))
        self.ln3_b = p.zeros(f"{n}.ln3.b", (d_x,))
        d_m = ffn_mult * d_x
        self.ffn_w1 = p.gaussian(f"{n}.ffn.w1", (d_x, d_m), std)
        self.ffn_b1 = p.zeros(f"{n}.ffn.b1", (d_m,))
        self.ffn_w2 = p.gaussian(f"{n}.ffn.w2", (d_m, d_x), 1.0 / math.sqrt(d_m))
        self.ffn_b2 = p.zeros(f"{n}.ffn.b2", (d_x,))

    def forward(self, x: T.Tensor, cond: T.Tensor, sink=None, hooks=_NULL) -> T.Tensor:
        if cond is None:
            raise DimensionError("transformer block requires a condition tensor")
        name = self.name
        if sink is not None:
            sink.record(name, "SA_in", x)
        x = hooks.tap(name, "SA_in", x)
        if sink is not None:
            sink.record(name, "CA_c", cond)
        cond = hooks.tap_read(name, "CA_c", cond)

        n1 = T.layer_norm(x, self.ln1_g, self.ln1_b)
        sa = T.matmul(
            attention(T.matmul(n1, self.sa_wq), T.matmul(n1, self.sa_wk), T.matmul(n1, self.sa_wv)),
            self.sa_wo,
        )
        if sink is not None:
            sink.record(name, "SA_out", sa)
        sa = hooks.tap(name, "SA_out", sa)
        h1 = T.add(x, sa)
        if sink is not None:
            sink.record(name, "CA_in", h1)
        h1 = hooks.tap(name, "CA_in", h1)

        cond = hooks.write_point(name, "CA_c", cond)
        n2 = T.layer_norm(h1, self.ln2_g, self.ln2_b)
        ca = T.matmul(
            attention(T.matmul(n2, self.ca_wq), T.matmul(cond, self.ca_wk), T.matmul(cond, self.ca_wv)),
            self.ca_wo,
        )
        if sink is not None:
            sink.record(name, "CA_out", ca)
        ca = hooks.tap(name, "CA_out", ca)
        h2 = T.add(h1, ca)
        if sink is not None:
            sink.record(name, "FFN_in", h2)
        h2 = hooks.tap(name, "FFN_in", h2)

        f = ffn(T.layer_norm(h2, self.ln3_g, self.ln3_b), self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2)
        if sink is not None:
            sink.record(name, "FFN_out", f)
        f = hooks.tap(name, "FFN_out", f)
        out = T.add(h2, f)
        if sink is not None:
            sink.record(name, "Trans_out", out)
        out = hooks.tap(name, "Trans_out", out)
        return out


class BasicBlock:
    """Residual block followed by an optional transformer block."""

    def __init__(self, store, name, c_in, c_out, cfg: UNetConfig, with_transformer: bool):
        self.name = name
        self.res = ResidualBlock(store, name, c_in, c_out, cfg.time_dim, cfg.norm_groups)
        self.transformer = (
            TransformerBlock(store, name, c_out, cfg.cond_dim, cfg.ffn_mult) if with_transformer else None
        )

    def forward(self, x, t_emb, cond, sink=None, hooks=_NULL):
        h = self.res.forward(x, t_emb, sink, hooks)
        if self.transformer is not None:
            _, hh, ww = h.shape
            tokens = self.transformer.forward(T.chw_to_tokens(h), cond, sink, hooks)
            h = T.tokens_to_chw(tokens, hh, ww)
        return h


class UNet:
    """Noise-prediction network: encoder, bottleneck, decoder with skip
    concatenations and a sinusoidal time embedding."""

    def __init__(self, config: UNetConfig, seed: int = 0):
        self.config = config
        levels = len(config.channel_mults)
        chans = [config.base_channels * m for m in config.channel_mults]
        t_levels = set(range(levels)) if config.transformer_levels is None else set(config.transformer_levels)

        store = _ParamStore(np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x0E7])))
        self._store = store
        cfg = config

        for c in chans:
            if c % cfg.norm_groups:
                raise ConfigurationError(f"norm_groups {cfg.norm_groups} must divide channels {c}")
        if cfg.time_dim % 2:
            raise ConfigurationError("time_dim must be even")

        self.conv_in_w = store.gaussian(
            "conv_in.w", (chans[0], cfg.in_channels, 3, 3), 1.0 / math.sqrt(9 * cfg.in_channels)
        )
        self.conv_in_b = store.zeros("conv_in.b", (chans[0],))
        self.tmlp_w1 = store.gaussian("time_mlp.w1", (cfg.time_dim, cfg.time_dim), 1.0 / math.sqrt(cfg.time_dim))
        self.tmlp_b1 = store.zeros("time_mlp.b1", (cfg.time_dim,))
        self.tmlp_w2 = store.gaussian("time_mlp.w2", (cfg.time_dim, cfg.time_dim), 1.0 / math.sqrt(cfg.time_dim))
        self.tmlp_b2 = store.zeros("time_mlp.b2", (cfg.time_dim,))

        self.enc = []
        h_ch = chans[0]
        skip_ch = []
        for i in range(levels):
            blk = BasicBlock(store, f"enc{i}", h_ch, chans[i], cfg, i in t_levels)
            self.enc.append(blk)
            h_ch = chans[i]
            skip_ch.append(h_ch)
        self.mid = BasicBlock(store, "mid", h_ch, h_ch, cfg, (levels - 1) in t_levels)
        self.dec = []
        for i in reversed(range(levels)):
            blk = BasicBlock(store, f"dec{i}", h_ch + skip_ch[i], chans[i], cfg, i in t_levels)
            self.dec.append(blk)
            h_ch = chans[i]
        out_ch = chans[0]
        self.gn_out_g = store.ones("gn_out.g", (out_ch,))
        self.gn_out_b = store.zeros("gn_out.b", (out_ch,))
        # scaled down so the initial noise prediction starts near zero
        self.conv_out_w = store.gaussian(
            "conv_out.w", (cfg.in_channels, out_ch, 3, 3), 0.1 / math.sqrt(9 * out_ch)
        )
        self.conv_out_b = store.zeros("conv_out.b", (cfg.in_channels,))

        self.levels = levels
        self._blocks = self.enc + [self.mid] + self.dec

    # --- parameter plumbing ---

    def named_parameters(self):
        return list(self._store.params.items())

    def set_trainable(self, flag: bool) -> None:
        for p in self._store.params.values():
            p.requires_grad = flag

    def zero_grads(self) -> None:
        for p in self._store.params.values():
            p.zero_grad()

    def transformer_block_dims(self):
        return [(b.name, b.transformer.d_x) for b in self._blocks if b.transformer is not None]

    def residual_block_dims(self):
        return [(b.name, b.res.c_in, b.res.c_out) for b in self._blocks]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._store.params):
            h.update(name.encode())
            h.update(self._store.params[name].data.tobytes())
        return h.hexdigest()

    # --- forward ---

    def time_embedding(self, t: int) -> T.Tensor:
        emb = T.Tensor(sinusoidal_embedding(t, self.config.time_dim)[None, :])
        h = T.silu(T.add(T.matmul(emb, self.tmlp_w1), self.tmlp_b1))
        return T.add(T.matmul(h, self.tmlp_w2), self.tmlp_b2)

    def forward(self, x_t, t: int, cond, sink=None, bank=None):
        """Predict the injected noise for x_t at step t under condition cond."""
        if not isinstance(x_t, T.Tensor):
            x_t = T.Tensor(x_t)
        if not isinstance(cond, T.Tensor):
            cond = T.Tensor(cond)
        cfg = self.config
        if x_t.shape != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise DimensionError(
                f"input shape {x_t.shape} != ({cfg.in_channels}, {cfg.image_size}, {cfg.image_size})"
            )
        if cond.data.ndim != 2 or cond.shape[1] != cfg.cond_dim:
            raise DimensionError(f"condition shape {cond.shape} incompatible with cond_dim {cfg.cond_dim}")
        if int(t) != t or t < 0:
            raise ValueError(f"unknown timestep {t!r}")

        hooks = bank if bank is not None else _NULL
        hooks.begin_forward()
        t_emb = self.time_embedding(int(t))
        h = T.conv2d(x_t, self.conv_in_w, self.conv_in_b)
        skips = []
        for i, blk in enumerate(self.enc):
            h = blk.forward(h, t_emb, cond, sink, hooks)
            skips.append(h)
            if i < self.levels - 1:
                h = T.avg_pool2(h)
        h = self.mid.forward(h, t_emb, cond, sink, hooks)
        for j, blk in enumerate(self.dec):
            i = self.levels - 1 - j
            h = T.concat(h, skips[i], axis=0)
            h = blk.forward(h, t_emb, cond, sink, hooks)
            if i > 0:
                h = T.upsample2(h)
        h = T.silu(T.group_norm(h, self.config.norm_groups, self.gn_out_g, self.gn_out_b))
        return T.conv2d(h, self.conv_out_w, self.conv_out_b)

    # --- checkpointing ---

    def save(self, path_prefix: str) -> None:
        """Write <prefix>.bin (ordered tensor records) and <prefix>.json manifest."""
        names = sorted(self._store.params)
        with open(f"{path_prefix}.bin", "wb") as fh:
            for name in names:
                T.write_tensor(fh, self._store.params[name].data)
        manifest = {
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "tensors": [
                {"name": n, "shape": list(self._store.params[n].shape)} for n in names
            ],
        }
        with open(f"{path_prefix}.json", "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path_prefix: str) -> "UNet":
        with open(f"{path_prefix}.json") as fh:
            manifest = json.load(fh)
        model = cls(UNetConfig.from_dict(manifest["config"]))
        with open(f"{path_prefix}.bin", "rb") as fh:
            for rec in manifest["tensors"]:
                arr = T.read_tensor(fh)
                if list(arr.shape) != rec["shape"]:
                    raise ConfigurationError(
                        f"checkpoint tensor {rec['name']} has shape {arr.shape}, expected {rec['shape']}"
                    )
                model._store.params[rec["name"]].data = arr
        return model

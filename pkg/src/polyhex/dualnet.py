"""Dual-latent conditional denoiser: two-stream blocks, condition encoder, training.

Two forward implementations share one parameter store:

* the tape path (``encode_condition`` / ``denoise``) supports gradients and
  batched inputs and is used for training and gradient checks;
* the streaming path (``PolycubeNet.encode`` / ``PolycubeNet.denoise``)
  is inference-only, walks the data stream in fixed-size chunks and keeps
  peak memory linear in the point count. The read attention over all data
  tokens is accumulated with a running log-sum-exp.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .core import layers as L
from .core import tensor as T
from .core.params import ParameterStore, load_params, save_params
from .core.tensor import _GELU_C, Tensor, no_grad
from .diffusion import NoiseSchedule, build_schedule, loss_hybrid, loss_l2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    blocks: int = 6
    layers_per_block: int = 6
    heads: int = 8
    d_model: int = 256
    latent_tokens: int = 64
    input_channels: int = 3
    hidden_mult: int = 4

    def __post_init__(self):
        _validate(self)


@dataclass(frozen=True)
class DenoiserConfig:
    blocks: int = 6
    layers_per_block: int = 4
    heads: int = 8
    d_model: int = 256
    latent_tokens: int = 256
    input_channels: int = 6
    output_channels: int = 6
    hidden_mult: int = 4

    def __post_init__(self):
        _validate(self)


def _validate(cfg) -> None:
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if not isinstance(v, (int, np.integer)) or v < 1:
            raise ConfigError(f"{type(cfg).__name__}.{f.name} must be a positive integer, got {v!r}")
    if cfg.d_model % cfg.heads:
        raise ConfigError(f"d_model {cfg.d_model} not divisible by heads {cfg.heads}")


def tiny_configs(d: int = 16, blocks: int = 2, layers: int = 2, latent: int = 8,
                 heads: int = 2) -> tuple[EncoderConfig, DenoiserConfig]:
    """Small encoder/denoiser pair for tests and desk-scale training."""
    enc = EncoderConfig(blocks=blocks, layers_per_block=layers, heads=heads, d_model=d,
                        latent_tokens=latent)
    den = DenoiserConfig(blocks=blocks, layers_per_block=layers, heads=heads, d_model=d,
                         latent_tokens=latent)
    return enc, den


# ---------------------------------------------------------------- parameters

def _init_block(params: ParameterStore, name: str, d: int, layers: int, hidden_mult: int,
                rng: np.random.Generator) -> None:
    L.init_layer_norm(params, f"{name}.read.ln_z", d)
    L.init_layer_norm(params, f"{name}.read.ln_x", d)
    L.init_attention(params, f"{name}.read.attn", d, rng)
    for j in range(layers):
        L.init_layer_norm(params, f"{name}.layer{j}.ln1", d)
        L.init_attention(params, f"{name}.layer{j}.attn", d, rng)
        L.init_layer_norm(params, f"{name}.layer{j}.ln2", d)
        L.init_feed_forward(params, f"{name}.layer{j}.ff", d, hidden_mult, rng)
    L.init_layer_norm(params, f"{name}.write.ln_x", d)
    L.init_layer_norm(params, f"{name}.write.ln_z", d)
    L.init_attention(params, f"{name}.write.attn", d, rng, zero_out=True)


def _init_embed(params, name, c_in, d, rng):
    L.init_linear(params, f"{name}.fc1", c_in, d, rng)
    L.init_linear(params, f"{name}.fc2", d, d, rng)


def init_encoder(params: ParameterStore, cfg: EncoderConfig, rng: np.random.Generator,
                 prefix: str = "encoder") -> None:
    d = cfg.d_model
    _init_embed(params, f"{prefix}.embed", cfg.input_channels, d, rng)
    params.normal(f"{prefix}.z_init", (cfg.latent_tokens, d), rng)
    for i in range(cfg.blocks):
        _init_block(params, f"{prefix}.block{i}", d, cfg.layers_per_block, cfg.hidden_mult, rng)


def init_denoiser(params: ParameterStore, cfg: DenoiserConfig, rng: np.random.Generator,
                  prefix: str = "denoiser") -> None:
    d = cfg.d_model
    _init_embed(params, f"{prefix}.embed", cfg.input_channels, d, rng)
    params.normal(f"{prefix}.z_init", (cfg.latent_tokens, d), rng)
    L.init_linear(params, f"{prefix}.time", d, d, rng)
    for i in range(cfg.blocks):
        _init_block(params, f"{prefix}.block{i}", d, cfg.layers_per_block, cfg.hidden_mult, rng)
    L.init_layer_norm(params, f"{prefix}.head.ln", d)
    L.init_linear(params, f"{prefix}.head.out", d, cfg.output_channels, rng, zero=True)


def init_params(enc: EncoderConfig, den: DenoiserConfig, seed: int = 0,
                dtype=np.float64) -> ParameterStore:
    if enc.d_model != den.d_model:
        raise ConfigError(f"encoder width {enc.d_model} != denoiser width {den.d_model}")
    rng = np.random.default_rng(seed)
    params = ParameterStore(dtype)
    init_encoder(params, enc, rng)
    init_denoiser(params, den, rng)
    return params


# ---------------------------------------------------------------- instrumentation

class Instrument:
    """Records how many tokens enter each latent self-attention layer."""

    def __init__(self):
        self.self_attention_tokens: list[int] = []

    def clear(self) -> None:
        self.self_attention_tokens.clear()


_instruments: list[Instrument] = []


@contextlib.contextmanager
def instrument():
    inst = Instrument()
    _instruments.append(inst)
    try:
        yield inst
    finally:
        _instruments.remove(inst)


def _record_tokens(n: int) -> None:
    for inst in _instruments:
        inst.self_attention_tokens.append(int(n))


# ---------------------------------------------------------------- tape path

def _transformer_layer(z: Tensor, params: ParameterStore, name: str, heads: int) -> Tensor:
    _record_tokens(z.shape[-2])
    h = L.norm(z, params, f"{name}.ln1")
    z = T.add(z, L.multi_head_attention(h, h, params, f"{name}.attn", heads))
    h = L.norm(z, params, f"{name}.ln2")
    return T.add(z, L.feed_forward(h, params, f"{name}.ff"))


def two_stream_forward(x: Tensor, z: Tensor, params: ParameterStore, name: str,
                       heads: int, layers: int) -> tuple[Tensor, Tensor]:
    """One read / compute / write block; returns the updated (data, latent) streams."""
    if x.shape[-2] == 0:
        raise ValueError("two-stream block needs at least one data token")
    if x.shape[-1] != z.shape[-1]:
        raise ConfigError(f"data width {x.shape[-1]} != latent width {z.shape[-1]}")
    xk = L.norm(x, params, f"{name}.read.ln_x")
    zq = L.norm(z, params, f"{name}.read.ln_z")
    z = T.add(z, L.multi_head_attention(zq, xk, params, f"{name}.read.attn", heads))
    for j in range(layers):
        z = _transformer_layer(z, params, f"{name}.layer{j}", heads)
    xq = L.norm(x, params, f"{name}.write.ln_x")
    zk = L.norm(z, params, f"{name}.write.ln_z")
    x = T.add(x, L.multi_head_attention(xq, zk, params, f"{name}.write.attn", heads))
    return x, z


def _embed_points(pts: Tensor, params: ParameterStore, name: str) -> Tensor:
    return L.linear(T.gelu(L.linear(pts, params, f"{name}.fc1")), params, f"{name}.fc2")


def _broadcast_tokens(p: Tensor, batch: int) -> Tensor:
    zeros = Tensor(np.zeros((batch,) + p.shape, dtype=p.dtype))
    return T.add(zeros, p)


def _as_batched(arr, dtype) -> tuple[Tensor, bool]:
    if isinstance(arr, Tensor):
        t = arr
    else:
        t = Tensor(np.asarray(arr, dtype=dtype))
    if t.ndim == 2:
        return T.reshape(t, (1,) + t.shape), True
    return t, False


def encode_condition(g, cfg: EncoderConfig, params: ParameterStore,
                     prefix: str = "encoder") -> Tensor:
    """Latent stream after the final encoder block: ``[..., latent_tokens, d]``."""
    dtype = params.dtype
    gt, squeeze = _as_batched(g, dtype)
    if gt.shape[-2] == 0:
        raise ValueError("empty condition cloud")
    if gt.shape[-1] != cfg.input_channels:
        raise ConfigError(f"condition has {gt.shape[-1]} channels, encoder expects {cfg.input_channels}")
    x = _embed_points(gt, params, f"{prefix}.embed")
    z = _broadcast_tokens(params[f"{prefix}.z_init"], gt.shape[0])
    for i in range(cfg.blocks):
        x, z = two_stream_forward(x, z, params, f"{prefix}.block{i}", cfg.heads, cfg.layers_per_block)
    if squeeze:
        z = T.reshape(z, z.shape[1:])
    return z


def sinusoid(t, d: int) -> np.ndarray:
    """Interleaved [sin, cos] pairs at standard transformer frequencies."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    out = np.zeros((len(t), d))
    out[:, 0:2 * half:2] = np.sin(ang)
    out[:, 1:2 * half:2] = np.cos(ang)
    return out


def embed_time(t, d: int, params: ParameterStore, name: str = "denoiser.time") -> Tensor:
    """``[len(t), d]`` time tokens: sinusoid followed by a learned affine map."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("time step must be non-negative")
    s = Tensor(sinusoid(t, d).astype(params.dtype))
    return L.linear(s, params, name)


def denoise(x_t, z_c, t, cfg: DenoiserConfig, params: ParameterStore,
            prefix: str = "denoiser") -> Tensor:
    """Predict the noise in ``x_t`` (``[..., M, 6]``) given condition latents ``z_c``.

    ``t`` is a scalar step or one step per batch element.
    """
    dtype = params.dtype
    xt, squeeze = _as_batched(x_t, dtype)
    zc, _ = _as_batched(z_c, dtype)
    B = xt.shape[0]
    if zc.shape[0] != B:
        zc = T.add(Tensor(np.zeros((B,) + zc.shape[1:], dtype=dtype)), zc)
    d = cfg.d_model
    if zc.shape[-1] != d:
        raise ConfigError(f"condition latent width {zc.shape[-1]} != denoiser width {d}")
    if xt.shape[-1] != cfg.input_channels:
        raise ConfigError(f"input has {xt.shape[-1]} channels, denoiser expects {cfg.input_channels}")
    steps = np.broadcast_to(np.asarray(t), (B,))
    temb = T.reshape(embed_time(steps, d, params, f"{prefix}.time"), (B, 1, d))
    z = T.concat([zc, _broadcast_tokens(params[f"{prefix}.z_init"], B), temb], axis=1)
    x = _embed_points(xt, params, f"{prefix}.embed")
    for i in range(cfg.blocks):
        x, z = two_stream_forward(x, z, params, f"{prefix}.block{i}", cfg.heads, cfg.layers_per_block)
    out = L.linear(L.norm(x, params, f"{prefix}.head.ln"), params, f"{prefix}.head.out")
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return out


# ---------------------------------------------------------------- streaming inference path

def _np_ln(x, p, name, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.einsum("ij,ij->i", xc, xc)[:, None]
    var *= 1.0 / x.shape[-1]
    var += eps
    np.sqrt(var, out=var)
    xc /= var
    xc *= p[f"{name}.gain"].data
    xc += p[f"{name}.bias"].data
    return xc


def _np_lin(x, p, name):
    y = x @ p[f"{name}.weight"].data
    y += p[f"{name}.bias"].data
    return y


def _np_gelu(x):
    y = x * x
    y *= x
    y *= 0.044715
    y += x
    y *= _GELU_C
    np.tanh(y, out=y)
    y += 1.0
    y *= x
    y *= 0.5
    return y


def _heads_q(q, heads):
    """[n, d] -> [heads, n, dh], scaled by 1/sqrt(dh)."""
    n, d = q.shape
    dh = d // heads
    return q.reshape(n, heads, dh).transpose(1, 0, 2) * (1.0 / math.sqrt(dh))


def _np_mha(xq, xkv, p, name, heads):
    q = _heads_q(_np_lin(xq, p, f"{name}.q"), heads)
    k = _np_lin(xkv, p, f"{name}.k")
    v = _np_lin(xkv, p, f"{name}.v")
    m, d = k.shape
    dh = d // heads
    s = q @ k.reshape(m, heads, dh).transpose(1, 2, 0)
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    den = s.sum(axis=-1, keepdims=True)
    o = s @ v.reshape(m, heads, dh).transpose(1, 0, 2)
    o /= den
    return _np_lin(o.transpose(1, 0, 2).reshape(len(xq), d), p, f"{name}.o")


def _stream_block(x: np.ndarray, z: np.ndarray, p: ParameterStore, name: str, heads: int,
                  layers: int, chunk: int) -> np.ndarray:
    """In-place update of ``x``; returns the new latent stream."""
    n, d = z.shape
    dh = d // heads
    # read: latent queries attend over every data token, chunk by chunk
    q = _heads_q(_np_lin(_np_ln(z, p, f"{name}.read.ln_z"), p, f"{name}.read.attn.q"), heads)
    run_max = np.full((heads, n, 1), -np.inf, dtype=x.dtype)
    run_sum = np.zeros((heads, n, 1), dtype=x.dtype)
    acc = np.zeros((heads, n, dh), dtype=x.dtype)
    for lo in range(0, len(x), chunk):
        xk = _np_ln(x[lo:lo + chunk], p, f"{name}.read.ln_x")
        m = len(xk)
        k = _np_lin(xk, p, f"{name}.read.attn.k").reshape(m, heads, dh).transpose(1, 2, 0)
        v = _np_lin(xk, p, f"{name}.read.attn.v").reshape(m, heads, dh).transpose(1, 0, 2)
        s = q @ k
        m_new = np.maximum(run_max, s.max(axis=-1, keepdims=True))
        corr = np.exp(run_max - m_new)
        s -= m_new
        np.exp(s, out=s)
        run_sum = run_sum * corr + s.sum(axis=-1, keepdims=True)
        acc = acc * corr + s @ v
        run_max = m_new
    att = (acc / run_sum).transpose(1, 0, 2).reshape(n, d)
    z = z + _np_lin(att, p, f"{name}.read.attn.o")
    for j in range(layers):
        lname = f"{name}.layer{j}"
        _record_tokens(z.shape[0])
        h_ = _np_ln(z, p, f"{lname}.ln1")
        z = z + _np_mha(h_, h_, p, f"{lname}.attn", heads)
        h_ = _np_ln(z, p, f"{lname}.ln2")
        z = z + _np_lin(_np_gelu(_np_lin(h_, p, f"{lname}.ff.fc1")), p, f"{lname}.ff.fc2")
    zk = _np_ln(z, p, f"{name}.write.ln_z")
    for lo in range(0, len(x), chunk):
        xq = _np_ln(x[lo:lo + chunk], p, f"{name}.write.ln_x")
        x[lo:lo + chunk] += _np_mha(xq, zk, p, f"{name}.write.attn", heads)
    return z


def _stream_embed(pts: np.ndarray, p: ParameterStore, name: str, d: int, chunk: int) -> np.ndarray:
    out = np.empty((len(pts), d), dtype=p.dtype)
    for lo in range(0, len(pts), chunk):
        out[lo:lo + chunk] = _np_lin(_np_gelu(_np_lin(pts[lo:lo + chunk], p, f"{name}.fc1")), p, f"{name}.fc2")
    return out


def stream_encode(g: np.ndarray, cfg: EncoderConfig, params: ParameterStore,
                  chunk: int = 8192, prefix: str = "encoder") -> np.ndarray:
    g = np.asarray(g, dtype=params.dtype)
    if len(g) == 0:
        raise ValueError("empty condition cloud")
    x = _stream_embed(g, params, f"{prefix}.embed", cfg.d_model, chunk)
    z = params[f"{prefix}.z_init"].data.copy()
    for i in range(cfg.blocks):
        z = _stream_block(x, z, params, f"{prefix}.block{i}", cfg.heads, cfg.layers_per_block, chunk)
    return z


def stream_denoise(x_t: np.ndarray, z_c: np.ndarray, t: int, cfg: DenoiserConfig,
                   params: ParameterStore, chunk: int = 8192, prefix: str = "denoiser") -> np.ndarray:
    dt = params.dtype
    x_t = np.asarray(x_t, dtype=dt)
    d = cfg.d_model
    if z_c.shape[-1] != d:
        raise ConfigError(f"condition latent width {z_c.shape[-1]} != denoiser width {d}")
    temb = _np_lin(sinusoid([t], d).astype(dt), params, f"{prefix}.time")
    z = np.concatenate([z_c.astype(dt), params[f"{prefix}.z_init"].data, temb], axis=0)
    x = _stream_embed(x_t, params, f"{prefix}.embed", d, chunk)
    for i in range(cfg.blocks):
        z = _stream_block(x, z, params, f"{prefix}.block{i}", cfg.heads, cfg.layers_per_block, chunk)
    out = np.empty((len(x), cfg.output_channels), dtype=dt)
    for lo in range(0, len(x), chunk):
        out[lo:lo + chunk] = _np_lin(_np_ln(x[lo:lo + chunk], params, f"{prefix}.head.ln"), params,
                                     f"{prefix}.head.out")
    return out


# ---------------------------------------------------------------- perturbed-copy evaluation

class _Perturbed:
    """Parameter lookup in which one tensor carries a leading copy axis."""

    def __init__(self, params: ParameterStore, name: str, idx: np.ndarray, delta: float):
        self.params = params
        self.name = name
        base = params[name].data
        arr = np.repeat(base[None].astype(np.float64), len(idx), axis=0)
        arr.reshape(len(idx), -1)[np.arange(len(idx)), idx] += delta
        # vectors become [K, 1, d] so they broadcast over the token axis
        self.value = arr[:, None, :] if base.ndim == 1 else arr

    def __call__(self, name: str) -> np.ndarray:
        return self.value if name == self.name else self.params[name].data


def _b_lin(x, P, name):
    return x @ P(f"{name}.weight") + P(f"{name}.bias")


def _b_ln(x, P, name, eps=1e-5):
    xc = x - x.mean(axis=-1, keepdims=True)
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * P(f"{name}.gain") + P(f"{name}.bias")


def _b_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def _b_split(a, heads):
    *lead, n, d = a.shape
    return np.swapaxes(a.reshape(*lead, n, heads, d // heads), -2, -3)


def _b_mha(xq, xkv, P, name, heads):
    q = _b_split(_b_lin(xq, P, f"{name}.q"), heads)
    k = _b_split(_b_lin(xkv, P, f"{name}.k"), heads)
    v = _b_split(_b_lin(xkv, P, f"{name}.v"), heads)
    s = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    s = np.exp(s - s.max(axis=-1, keepdims=True))
    o = (s / s.sum(axis=-1, keepdims=True)) @ v
    o = np.swapaxes(o, -2, -3)
    return _b_lin(o.reshape(*o.shape[:-2], -1), P, f"{name}.o")


def _b_block(x, z, P, name, heads, layers):
    z = z + _b_mha(_b_ln(z, P, f"{name}.read.ln_z"), _b_ln(x, P, f"{name}.read.ln_x"), P,
                   f"{name}.read.attn", heads)
    for j in range(layers):
        h = _b_ln(z, P, f"{name}.layer{j}.ln1")
        z = z + _b_mha(h, h, P, f"{name}.layer{j}.attn", heads)
        h = _b_ln(z, P, f"{name}.layer{j}.ln2")
        z = z + _b_lin(_b_gelu(_b_lin(h, P, f"{name}.layer{j}.ff.fc1")), P, f"{name}.layer{j}.ff.fc2")
    x = x + _b_mha(_b_ln(x, P, f"{name}.write.ln_x"), _b_ln(z, P, f"{name}.write.ln_z"), P,
                   f"{name}.write.attn", heads)
    return x, z


def _b_concat(parts):
    lead = np.broadcast_shapes(*(a.shape[:-2] for a in parts))
    return np.concatenate([np.broadcast_to(a, lead + a.shape[-2:]) for a in parts], axis=-2)


def perturbed_noise_losses(model: "PolycubeNet", g: np.ndarray, x_t: np.ndarray, t: int,
                           noise: np.ndarray):
    """Evaluator of the L2 noise loss under single-entry parameter shifts.

    Returns ``f(name, flat_indices, delta) -> losses`` where ``losses[k]``
    is the loss with entry ``flat_indices[k]`` of parameter ``name``
    shifted by ``delta``. All copies run in one broadcasted float64
    forward pass, which makes finite-difference checks of full models
    affordable.
    """
    enc, den = model.encoder_cfg, model.denoiser_cfg
    g = np.asarray(g, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    s = sinusoid([t], den.d_model)

    def evaluate(name: str, idx, delta: float) -> np.ndarray:
        idx = np.asarray(idx)
        P = _Perturbed(model.params, name, idx, delta)
        x = _b_lin(_b_gelu(_b_lin(g, P, "encoder.embed.fc1")), P, "encoder.embed.fc2")
        z = P("encoder.z_init")
        for i in range(enc.blocks):
            x, z = _b_block(x, z, P, f"encoder.block{i}", enc.heads, enc.layers_per_block)
        temb = _b_lin(s, P, "denoiser.time")
        z = _b_concat([z, P("denoiser.z_init"), temb])
        x = _b_lin(_b_gelu(_b_lin(x_t, P, "denoiser.embed.fc1")), P, "denoiser.embed.fc2")
        for i in range(den.blocks):
            x, z = _b_block(x, z, P, f"denoiser.block{i}", den.heads, den.layers_per_block)
        out = _b_lin(_b_ln(x, P, "denoiser.head.ln"), P, "denoiser.head.out")
        err = (out - noise) ** 2
        loss = err.reshape(*err.shape[:-2], -1).mean(axis=-1)
        return np.broadcast_to(loss, (len(idx),)).copy()

    return evaluate


# ---------------------------------------------------------------- model wrapper

class PolycubeNet:
    """Encoder + denoiser sharing one parameter store, plus a noise schedule."""

    def __init__(self, encoder: EncoderConfig | None = None, denoiser: DenoiserConfig | None = None,
                 params: ParameterStore | None = None, seed: int = 0,
                 schedule: NoiseSchedule | None = None, chunk: int = 8192):
        self.encoder_cfg = encoder or EncoderConfig()
        self.denoiser_cfg = denoiser or DenoiserConfig()
        if self.encoder_cfg.d_model != self.denoiser_cfg.d_model:
            raise ConfigError("encoder and denoiser widths differ")
        self.params = params if params is not None else init_params(self.encoder_cfg, self.denoiser_cfg, seed)
        self.schedule = schedule or build_schedule()
        self.chunk = chunk
        self.denoise_calls = 0

    def encode(self, g: np.ndarray) -> np.ndarray:
        return stream_encode(g, self.encoder_cfg, self.params, self.chunk)

    def denoise(self, x_t: np.ndarray, z_c: np.ndarray, t: int) -> np.ndarray:
        self.denoise_calls += 1
        return stream_denoise(x_t, z_c, t, self.denoiser_cfg, self.params, self.chunk)

    def astype(self, dtype) -> "PolycubeNet":
        return PolycubeNet(self.encoder_cfg, self.denoiser_cfg, self.params.astype(dtype),
                           schedule=self.schedule, chunk=self.chunk)

    # checkpoints -------------------------------------------------------
    def save(self, path: str | Path) -> None:
        path = Path(path)
        save_params(self.params, path)
        lines = [f"format=polyhex-checkpoint-{CHECKPOINT_VERSION}"]
        lines += [f"encoder.{k}={v}" for k, v in asdict(self.encoder_cfg).items()]
        lines += [f"denoiser.{k}={v}" for k, v in asdict(self.denoiser_cfg).items()]
        s = self.schedule
        lines += [f"schedule.T={s.T}", f"schedule.beta_start={float(s.beta[1])!r}",
                  f"schedule.beta_end={float(s.beta[s.T])!r}"]
        config_path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path, dtype=np.float64) -> "PolycubeNet":
        path = Path(path)
        kv = {}
        for line in config_path(path).read_text().splitlines():
            if line.strip() and "=" in line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        try:
            enc = EncoderConfig(**{f.name: int(kv[f"encoder.{f.name}"]) for f in fields(EncoderConfig)})
            den = DenoiserConfig(**{f.name: int(kv[f"denoiser.{f.name}"]) for f in fields(DenoiserConfig)})
            sched = build_schedule(int(kv["schedule.T"]), float(kv["schedule.beta_start"]),
                                   float(kv["schedule.beta_end"]))
        except KeyError as exc:
            raise ConfigError(f"checkpoint config is missing {exc.args[0]}") from exc
        params = load_params(path, dtype)
        expected = init_params(enc, den, 0, dtype)
        mismatch = [n for n in expected if n not in params or params[n].shape != expected[n].shape]
        extra = [n for n in params if n not in expected]
        if mismatch or extra:
            detail = "; ".join(
                [f"{n}: expected {expected[n].shape}, got {params[n].shape if n in params else 'missing'}"
                 for n in mismatch[:5]] + [f"unexpected {n}" for n in extra[:5]])
            raise ConfigError(f"checkpoint shape mismatch: {detail}")
        ordered = ParameterStore(dtype)
        for n in expected:
            ordered[n] = params[n].data
        return cls(enc, den, ordered, schedule=sched)


CHECKPOINT_VERSION = 1


def config_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".config")


# ---------------------------------------------------------------- training

def cosine_lr(step: int, total: int, lr_init: float) -> float:
    """Cosine decay from ``lr_init`` at step 0 to exactly 0 at ``total``."""
    if total <= 0:
        return lr_init
    s = min(max(step, 0), total)
    if s == total:
        return 0.0
    return 0.5 * lr_init * (1.0 + math.cos(math.pi * s / total))


class AdamW:
    """Adam with decoupled weight decay on matrices (biases/gains not decayed)."""

    def __init__(self, params: ParameterStore, lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01, total_steps: int = 1000):
        self.params = params
        self.lr_init = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.total_steps = total_steps
        self.step_count = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    @property
    def lr(self) -> float:
        return cosine_lr(self.step_count, self.total_steps, self.lr_init)

    def step(self) -> float:
        lr = self.lr
        self.step_count += 1
        k = self.step_count
        c1 = 1.0 - self.b1 ** k
        c2 = 1.0 - self.b2 ** k
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if p.data.ndim >= 2 and self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return lr


def batch_loss(model: PolycubeNet, g: np.ndarray, x0: np.ndarray, t: np.ndarray,
               noise: np.ndarray, loss: str = "hybrid", w: float = 1.0) -> Tensor:
    """Tape-path training loss for a batch at given steps and noise."""
    sched = model.schedule
    ab = sched.alpha_bar[np.asarray(t)][:, None, None]
    xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
    zc = encode_condition(g, model.encoder_cfg, model.params)
    eps_hat = denoise(xt, zc, np.asarray(t), model.denoiser_cfg, model.params)
    if loss == "l2":
        return loss_l2(eps_hat, noise)
    if loss == "hybrid":
        return loss_hybrid(eps_hat, noise, w)
    raise ValueError(f"unknown loss {loss!r}")


def train_step(model: PolycubeNet, g: np.ndarray, x0: np.ndarray, opt: AdamW,
               rng: np.random.Generator, loss: str = "hybrid",
               w_range: tuple[float, float] = (0.4, 0.8)) -> float:
    """One optimizer update on a batch of normalized pairs.

    ``g`` is ``[B, N, 3]``, ``x0`` is ``[B, M, 6]``. Draws one step per
    element, Gaussian noise per element and (for the hybrid loss) one
    weight ``w ~ U[w_range)`` for the whole batch.
    """
    dtype = model.params.dtype
    g = np.asarray(g, dtype=dtype)
    x0 = np.asarray(x0, dtype=dtype)
    if g.ndim == 2:
        g, x0 = g[None], x0[None]
    B = g.shape[0]
    t = rng.integers(1, model.schedule.T + 1, size=B)
    noise = rng.standard_normal(x0.shape).astype(dtype)
    w = float(rng.uniform(*w_range)) if loss == "hybrid" else 1.0
    model.params.zero_grad()
    value = batch_loss(model, g, x0, t, noise, loss, w)
    lv = float(value.data)
    if not math.isfinite(lv):
        raise FloatingPointError(f"non-finite training loss at step {opt.step_count + 1}: {lv}")
    value.backward()
    opt.step()
    return lv


def eval_noise_error(model: PolycubeNet, g: np.ndarray, x0: np.ndarray, seed: int = 0,
                     draws: int = 4) -> float:
    """Held-out L2 noise-prediction error at seeded (t, noise) draws."""
    rng = np.random.default_rng(seed)
    dtype = model.params.dtype
    g = np.asarray(g, dtype=dtype)
    x0 = np.asarray(x0, dtype=dtype)
    total = 0.0
    with no_grad():
        for _ in range(draws):
            t = rng.integers(1, model.schedule.T + 1, size=g.shape[0])
            noise = rng.standard_normal(x0.shape).astype(dtype)
            total += float(batch_loss(model, g, x0, t, noise, "l2").data)
    return total / draws

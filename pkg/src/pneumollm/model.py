"""Full pipeline: frozen toy encoder -> prompt provider -> neck -> emitter stack -> head.

Only the prompt provider (engine or baseline prompts), the neck, the adapters
and the head are trainable; the encoder and every transformer block are
frozen at their seeded initial values.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import init
from .adapters import AdapterParams, NeckParams, neck_forward, neck_hidden_width
from .emitter import (BlockWeights, EmitterMask, StackConfig, StackTrace, attention_scale,
                      build_mask, stack_forward)
from .engine import (SOFTMAX_AXES, CocoopStyleParams, EngineParams, FixedPromptParams,
                     conditional_prompt_forward, engine_forward_batch,
                     fixed_prompt_forward)
from .numeric import DimensionError, Param, Tensor, add, concat_rows, const, matmul, take_rows

PROMPT_SOURCES = ("none", "fixed", "conditional", "engine")
POOLINGS = ("diagnosis", "source", "last")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    feat_dim: int = 32
    patches: int = 4
    enc_layers: int = 12
    tap_every: int = 2
    token_width: int = 24
    m: int = 4
    prompt_source: str = "engine"
    softmax_axis: str = "column"
    emitter: bool = True
    adapters: bool = True
    pooling: str = "diagnosis"
    neck_hidden: int = 128
    head_init: str = "zero"
    seed: int = 0
    stack: StackConfig = field(default_factory=StackConfig)

    def __post_init__(self):
        if isinstance(self.stack, dict):
            self.stack = StackConfig(**self.stack)
        self.validate()

    @property
    def d(self) -> int:
        return self.enc_layers // self.tap_every

    @property
    def tokens(self) -> int:
        return self.d + self.m

    def validate(self) -> None:
        if min(self.feat_dim, self.patches, self.enc_layers, self.tap_every,
               self.token_width, self.neck_hidden) < 1:
            raise ConfigError(f"sizes must be positive: {self}")
        if self.enc_layers % self.tap_every:
            raise ConfigError(f"enc_layers={self.enc_layers} not a multiple of "
                              f"tap_every={self.tap_every}")
        if self.prompt_source not in PROMPT_SOURCES:
            raise ConfigError(f"prompt_source must be one of {PROMPT_SOURCES}, "
                              f"got {self.prompt_source!r}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.softmax_axis not in SOFTMAX_AXES:
            raise ConfigError(f"softmax_axis must be one of {SOFTMAX_AXES}")
        if self.head_init not in ("zero", "uniform"):
            raise ConfigError(f"head_init must be 'zero' or 'uniform'")
        if self.m < 0:
            raise ConfigError(f"m must be >= 0, got {self.m}")
        if self.prompt_source == "none" and self.m != 0:
            raise ConfigError("prompt_source='none' requires m=0")
        if self.prompt_source != "none" and self.m == 0:
            raise ConfigError(f"prompt_source={self.prompt_source!r} needs m >= 1")
        if self.pooling == "diagnosis" and self.m == 0:
            raise ConfigError("diagnosis pooling needs m >= 1; select 'source' or "
                              "'last' pooling explicitly for m=0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return config_digest(self.to_dict())


def config_digest(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _rng(seed: int, stream: int) -> np.random.Generator:
    # independent streams keep the frozen backbone identical across variants
    return np.random.default_rng([seed, stream])


@dataclass
class ToyEncoder:
    """Frozen stand-in for the vision encoder.

    The feature vector is embedded into ``patches`` tokens of width n, passed
    through residual token-mixing layers, and the mean token of every
    ``tap_every``-th layer is emitted as one source token.
    """

    embed: Param  # feat_dim x (patches*n)
    embed_bias: Param
    layers: list[tuple[Param, Param, Param]]  # (w, b, u) per layer
    patches: int
    tap_every: int

    @classmethod
    def create(cls, cfg: ModelConfig) -> ToyEncoder:
        rng = _rng(cfg.seed, 0)
        n, p = cfg.token_width, cfg.patches
        embed = init.uniform(rng, (cfg.feat_dim, p * n), cfg.feat_dim, "encoder.embed",
                             trainable=False)
        bias = init.uniform(rng, (1, p * n), cfg.feat_dim, "encoder.embed_bias",
                            trainable=False)
        layers = []
        for i in range(cfg.enc_layers):
            layers.append((
                init.uniform(rng, (n, n), n, f"encoder.l{i}.w", trainable=False),
                init.uniform(rng, (1, n), n, f"encoder.l{i}.b", trainable=False),
                init.uniform(rng, (n, n), n, f"encoder.l{i}.u", trainable=False, gain=0.5),
            ))
        return cls(embed, bias, layers, p, cfg.tap_every)

    @property
    def feat_dim(self) -> int:
        return self.embed.rows

    @property
    def width(self) -> int:
        return self.embed.cols // self.patches

    @property
    def d(self) -> int:
        return len(self.layers) // self.tap_every

    def params(self) -> list[Param]:
        out = [self.embed, self.embed_bias]
        for trio in self.layers:
            out += list(trio)
        return out

    def encode_batch(self, features: np.ndarray) -> np.ndarray:
        """``(N, feat_dim)`` features -> ``(N, d, n)`` source tokens."""
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != self.feat_dim:
            raise DimensionError(f"encoder expects inputs of length {self.feat_dim}, "
                                 f"got shape {f.shape}")
        n = self.width
        t = (f @ self.embed.value + self.embed_bias.value).reshape(len(f), self.patches, n)
        taps = []
        for i, (w, b, u) in enumerate(self.layers):
            ctx = t.mean(axis=1, keepdims=True) @ u.value
            t = t + np.tanh(t @ w.value + b.value + ctx)
            if (i + 1) % self.tap_every == 0:
                taps.append(t.mean(axis=1))
        return np.stack(taps, axis=1)


def encode(features, enc: ToyEncoder) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 1:
        raise DimensionError(f"encode takes one feature vector, got shape {f.shape}")
    return enc.encode_batch(f[None, :])[0]


@dataclass
class HeadParams:
    w: Param  # n' x 1
    b: Param

    def params(self) -> list[Param]:
        return [self.w, self.b]


Provider = EngineParams | FixedPromptParams | CocoopStyleParams | None


@dataclass
class PneumoModel:
    config: ModelConfig
    encoder: ToyEncoder
    provider: Provider
    neck: NeckParams
    blocks: list[BlockWeights]
    adapters: list[AdapterParams] | None
    head: HeadParams
    _masks: dict = field(default_factory=dict, repr=False)

    @classmethod
    def create(cls, cfg: ModelConfig) -> PneumoModel:
        cfg.validate()
        sc = cfg.stack
        n, width = cfg.token_width, sc.width
        encoder = ToyEncoder.create(cfg)
        prng = _rng(cfg.seed, 3)
        provider: Provider = None
        if cfg.prompt_source == "engine":
            provider = EngineParams.create(n, cfg.m, prng)
        elif cfg.prompt_source == "fixed":
            provider = FixedPromptParams.create(n, cfg.m, prng)
        elif cfg.prompt_source == "conditional":
            provider = CocoopStyleParams.create(n, cfg.m, prng)
        neck = NeckParams.create(n, width, neck_hidden_width(width, cfg.neck_hidden),
                                 _rng(cfg.seed, 2))
        srng = _rng(cfg.seed, 1)
        blocks = [BlockWeights.create(width, sc.heads, srng, f"block{i}")
                  for i in range(sc.layers)]
        adapters = None
        if cfg.adapters:
            arng = _rng(cfg.seed, 4)
            adapters = [AdapterParams.create(width, sc.adapter_dim, arng, f"adapter{i}")
                        for i in range(sc.layers)]
        if cfg.head_init == "zero":
            head = HeadParams(init.zeros((width, 1), "head.w"), init.zeros((1, 1), "head.b"))
        else:
            hrng = _rng(cfg.seed, 5)
            head = HeadParams(init.uniform(hrng, (width, 1), width, "head.w"),
                              init.zeros((1, 1), "head.b"))
        return cls(cfg, encoder, provider, neck, blocks, adapters, head)

    # -- parameter bookkeeping -------------------------------------------
    def params(self) -> list[Param]:
        """All Params in declaration order (the checkpoint order)."""
        out = self.encoder.params()
        if self.provider is not None:
            out += self.provider.params()
        out += self.neck.params()
        for i, block in enumerate(self.blocks):
            out += block.params()
            if self.adapters is not None:
                out += self.adapters[i].params()
        return out + self.head.params()

    def trainable_params(self) -> list[Param]:
        return [p for p in self.params() if p.trainable]

    def frozen_params(self) -> list[Param]:
        return [p for p in self.params() if not p.trainable]

    def zero_grad(self) -> None:
        for p in self.trainable_params():
            p.zero_grad()

    @property
    def stack(self) -> list[tuple[BlockWeights, AdapterParams | None]]:
        ads: list = self.adapters if self.adapters is not None else [None] * len(self.blocks)
        return list(zip(self.blocks, ads))

    # -- forward ------------------------------------------------------------
    @property
    def emitter_mask(self) -> EmitterMask:
        return build_mask(self.config.d, self.config.m, self.config.emitter)

    def _mask(self) -> np.ndarray:
        if "mask" not in self._masks:
            self._masks["mask"] = self.emitter_mask.mask
        return self._masks["mask"]

    def _scale(self) -> float:
        sc = self.config.stack
        return attention_scale(self.blocks[0], sc.scale_mode, self.config.tokens)

    def diagnosis_tokens(self, x: Tensor, batch: int) -> tuple[Tensor | None, Tensor | None]:
        """``(mix, x_hat)``; ``mix`` is only produced by the engine."""
        p = self.provider
        if p is None:
            return None, None
        if isinstance(p, EngineParams):
            return engine_forward_batch(x, p, batch, self.config.softmax_axis)
        if isinstance(p, FixedPromptParams):
            return None, fixed_prompt_forward(p, batch)
        return None, conditional_prompt_forward(x, p, batch)

    def assemble(self, x: Tensor, x_hat: Tensor | None, batch: int) -> Tensor:
        """Interleave source and diagnosis rows as ``[X_b; X_hat_b]`` per sample."""
        d, m = self.config.d, self.config.m
        if x_hat is None or m == 0:
            return x
        order = []
        for b in range(batch):
            order += range(b * d, (b + 1) * d)
            order += range(batch * d + b * m, batch * d + (b + 1) * m)
        return take_rows(concat_rows([x, x_hat]), order)

    def features(self, x_src: np.ndarray, x_hat: Tensor | None = None,
                 trace: StackTrace | None = None) -> tuple[Tensor, Tensor | None]:
        """Run everything up to Z for a batch of source tokens ``(B, d, n)``.

        ``x_hat`` overrides the prompt provider's diagnosis tokens.
        Returns ``(Z, mix)``.
        """
        x_src = np.asarray(x_src, dtype=np.float64)
        if x_src.ndim != 3 or x_src.shape[1:] != (self.config.d, self.config.token_width):
            raise DimensionError(f"expected source tokens (B, {self.config.d}, "
                                 f"{self.config.token_width}), got {x_src.shape}")
        batch = x_src.shape[0]
        x = const(x_src.reshape(batch * self.config.d, -1))
        mix = None
        if x_hat is None:
            mix, x_hat = self.diagnosis_tokens(x, batch)
        y = neck_forward(self.assemble(x, x_hat, batch), self.neck)
        z = stack_forward(y, self.stack, self._mask(), self._scale(),
                          self.config.stack.ln_eps, trace)
        return z, mix

    def pool_matrix(self, batch: int) -> np.ndarray:
        d, m, tok = self.config.d, self.config.m, self.config.tokens
        pool = np.zeros((batch, batch * tok))
        for b in range(batch):
            base = b * tok
            if self.config.pooling == "diagnosis":
                pool[b, base + d:base + tok] = 1.0 / m
            elif self.config.pooling == "source":
                pool[b, base:base + d] = 1.0 / d
            else:
                pool[b, base + tok - 1] = 1.0
        return pool

    def head_logits(self, z: Tensor, batch: int) -> Tensor:
        pooled = matmul(const(self.pool_matrix(batch)), z)
        return add(matmul(pooled, self.head.w), self.head.b)

    def forward_tokens(self, x_src: np.ndarray) -> Tensor:
        """Logits (B x 1) for a batch of encoded samples."""
        z, _ = self.features(x_src)
        return self.head_logits(z, len(x_src))

    def predict_logits(self, features: np.ndarray, chunk: int = 64) -> np.ndarray:
        x = self.encoder.encode_batch(features)
        out = [self.forward_tokens(x[i:i + chunk]).value[:, 0] for i in range(0, len(x), chunk)]
        return np.concatenate(out) if out else np.zeros(0)


def model_forward(features, model: PneumoModel) -> float:
    x = encode(features, model.encoder)
    return model.forward_tokens(x[None]).item()


@dataclass(frozen=True)
class Census:
    trainable: int
    frozen: int

    @property
    def ratio(self) -> float:
        return self.trainable / (self.trainable + self.frozen)


def parameter_census(model: PneumoModel) -> Census:
    trainable = frozen = 0
    for p in model.params():
        if p.trainable:
            trainable += p.value.size
        else:
            frozen += p.value.size
    return Census(trainable, frozen)


# ---------------------------------------------------------------------------
# checkpoint container: b"PNLM", u16 version, u32 config length, config JSON,
# 32-byte sha256 of the config JSON, u32 param count, then per param
# u32 rows, u32 cols, rows*cols little-endian float64.

CHECKPOINT_MAGIC = b"PNLM"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _config_blob(cfg: ModelConfig) -> bytes:
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(model: PneumoModel, path) -> None:
    blob = _config_blob(model.config)
    params = model.params()
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(blob)), blob,
             hashlib.sha256(blob).digest(), struct.pack("<I", len(params))]
    for p in params:
        parts.append(struct.pack("<II", *p.shape))
        parts.append(p.value.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def _reader(buf: bytes) -> Iterator:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"checkpoint truncated at byte {pos} (needed {n} more)")
        out = buf[pos:pos + n]
        pos += n
        return out

    yield take
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after checkpoint")


def load_checkpoint(path, expected: ModelConfig | None = None) -> PneumoModel:
    buf = Path(path).read_bytes()
    gen = _reader(buf)
    take = next(gen)
    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a PNLM checkpoint (bad magic)")
    version, clen = struct.unpack("<HI", take(6))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    blob = take(clen)
    if hashlib.sha256(blob).digest() != take(32):
        raise CheckpointError("config hash mismatch: config block is corrupt")
    cfg = ModelConfig(**json.loads(blob))
    if expected is not None and expected.digest() != cfg.digest():
        raise CheckpointError(f"checkpoint config {cfg.digest()[:12]} does not match "
                              f"expected {expected.digest()[:12]}")
    model = PneumoModel.create(cfg)
    params = model.params()
    (count,) = struct.unpack("<I", take(4))
    if count != len(params):
        raise CheckpointError(f"checkpoint has {count} params, model declares {len(params)}")
    for p in params:
        shape = struct.unpack("<II", take(8))
        if shape != p.shape:
            raise CheckpointError(f"{p.name}: stored shape {shape} != {p.shape}")
        p.value[...] = np.frombuffer(take(8 * p.value.size), dtype="<f8").reshape(shape)
    for _ in gen:
        pass
    return model

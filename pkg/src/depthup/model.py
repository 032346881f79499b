"""Decoder-only language model with standard and E-Branchformer blocks.

Weights are stored as ``(fan_in, fan_out)`` matrices and applied as
``x @ W``.  Nothing carries a bias.  The token embedding is tied to the
output head and kept as two row blocks, text rows and speech rows, so the
two can carry different freeze flags while acting as one matrix.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import Iterator

import numpy as np

from depthup import tensor as tc
from depthup.tensor import Tensor

STANDARD = "standard"
EBRANCHFORMER = "ebranchformer"
BLOCK_KINDS = (STANDARD, EBRANCHFORMER)

# projections LoRA may wrap; the E-Branchformer-only ones are never targeted
PROJECTIONS = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    d_model: int = 64
    n_heads: int = 4
    ffn_hidden: int = 256
    vocab_text: int = 256
    vocab_speech: int = 0
    max_seq_len: int = 256
    conv_kernel_width: int = 3
    cgmlp_hidden: int = 256
    rope_base: float = 10000.0
    norm_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head_dim must be even for rotary encoding")
        if self.vocab_speech < 0 or self.vocab_text < 1:
            raise ValueError("vocabulary sizes must be vocab_text >= 1, vocab_speech >= 0")
        if self.cgmlp_hidden % 2:
            raise ValueError(f"cgmlp_hidden must be even, got {self.cgmlp_hidden}")
        if self.conv_kernel_width < 1:
            raise ValueError("conv_kernel_width must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def vocab_size(self) -> int:
        return self.vocab_text + self.vocab_speech

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _param_shapes(cfg: ModelConfig, kind: str) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.ffn_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "attn_norm": (d,),
        "wq": (d, d),
        "wk": (d, d),
        "wv": (d, d),
        "wo": (d, d),
        "ffn_norm": (d,),
        "w_gate": (d, f),
        "w_up": (d, f),
        "w_down": (f, d),
    }
    if kind == EBRANCHFORMER:
        h, k = cfg.cgmlp_hidden, cfg.conv_kernel_width
        shapes.update(
            {
                "cg_up": (d, h),
                "cg_norm": (h // 2,),
                "cg_conv": (k, h // 2),
                "cg_down": (h // 2, d),
                "merge_conv": (k, 2 * d),
                "merge_conv_proj": (2 * d, 2 * d),
                "w_merge": (2 * d, d),
            }
        )
    elif kind != STANDARD:
        raise ValueError(f"unknown block kind {kind!r}")
    return shapes


def block_param_count(cfg: ModelConfig, kind: str) -> int:
    """Number of scalars in one block of ``kind``."""
    return sum(int(np.prod(s)) for s in _param_shapes(cfg, kind).values())


class Block:
    """One decoder layer; ``kind`` selects the forward rule."""

    def __init__(self, kind: str, params: dict[str, Tensor], lora_scale: float = 0.0, origin: str = "base"):
        self.kind = kind
        self.params = params
        self.origin = origin
        # name -> (A, B); the adapted projection is W + lora_scale * A @ B
        self.lora: dict[str, tuple[Tensor, Tensor]] = {}
        self.lora_scale = lora_scale

    @classmethod
    def init(cls, cfg: ModelConfig, kind: str, rng: np.random.Generator, dtype=np.float32) -> "Block":
        params = {}
        for name, shape in _param_shapes(cfg, kind).items():
            if len(shape) == 1:
                params[name] = Tensor(np.ones(shape, dtype=dtype))
            elif name in ("cg_up", "cg_down", "cg_conv", "merge_conv", "merge_conv_proj", "w_merge"):
                bound = 1.0 / np.sqrt(shape[0])
                params[name] = Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))
            else:
                params[name] = Tensor((rng.standard_normal(shape) * cfg.init_std).astype(dtype))
        return cls(kind, params)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.params.items()
        for name, (a, b) in self.lora.items():
            yield f"{name}.lora_a", a
            yield f"{name}.lora_b", b

    def proj(self, x: Tensor, name: str) -> Tensor:
        out = tc.matmul(x, self.params[name])
        if name in self.lora:
            a, b = self.lora[name]
            out = tc.add(out, tc.scale(tc.matmul(tc.matmul(x, a), b), self.lora_scale))
        return out

    def forward(self, x: Tensor, positions: np.ndarray, cfg: ModelConfig, speech_mask: np.ndarray | None = None) -> Tensor:
        if self.kind == STANDARD:
            return transformer_block_forward(self, x, positions, cfg)
        if speech_mask is None:
            speech_mask = np.zeros(x.shape[:-1], dtype=bool)
        return ebranchformer_block_forward(self, x, positions, cfg, speech_mask)


def _check_length(x: Tensor, cfg: ModelConfig) -> None:
    if x.data.ndim != 3 or x.shape[-1] != cfg.d_model:
        raise ValueError(f"block input must be (B, T, {cfg.d_model}), got {x.shape}")
    if x.shape[1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {x.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")


def mhsa(block: Block, h: Tensor, positions: np.ndarray, cfg: ModelConfig) -> Tensor:
    """Self-attention on an already-normalized input, including ``wo``."""
    q = block.proj(h, "wq")
    k = block.proj(h, "wk")
    v = block.proj(h, "wv")
    ctx = tc.causal_attention(q, k, v, cfg.n_heads, positions, cfg.rope_base)
    return block.proj(ctx, "wo")


def ffn(block: Block, x: Tensor, cfg: ModelConfig) -> Tensor:
    """Pre-norm SwiGLU feed-forward with its residual: ``x + FFN(LN(x))``."""
    h = tc.rms_norm(x, block.params["ffn_norm"], cfg.norm_eps)
    hidden = tc.mul(tc.silu(block.proj(h, "w_gate")), block.proj(h, "w_up"))
    return tc.add(x, block.proj(hidden, "w_down"))


def transformer_block_forward(block: Block, x: Tensor, positions: np.ndarray, cfg: ModelConfig) -> Tensor:
    _check_length(x, cfg)
    h = tc.add(x, mhsa(block, tc.rms_norm(x, block.params["attn_norm"], cfg.norm_eps), positions, cfg))
    return ffn(block, h, cfg)


def cgmlp_forward(block: Block, x_normed: Tensor, cfg: ModelConfig) -> Tensor:
    """Convolutional gated MLP on a normalized input.

    ``Z = GELU(x W_up)`` is split channelwise into ``(A, B)``; the gate is
    ``A * conv(norm(B))`` and the result is projected back to ``d``.
    """
    p = block.params
    z = tc.gelu(tc.matmul(x_normed, p["cg_up"]))
    half = z.shape[-1] // 2
    a = tc.slice_last(z, 0, half)
    b = tc.slice_last(z, half, 2 * half)
    b = tc.causal_depthwise_conv(tc.rms_norm(b, p["cg_norm"], cfg.norm_eps), p["cg_conv"])
    return tc.matmul(tc.mul(a, b), p["cg_down"])


def ebranchformer_block_forward(
    block: Block,
    x: Tensor,
    positions: np.ndarray,
    cfg: ModelConfig,
    speech_mask: np.ndarray,
) -> Tensor:
    """Parallel attention / cgMLP branches joined by the merge module.

    Text positions take only the attention branch; speech positions take the
    merged output.  A single FFN follows for every position.
    """
    _check_length(x, cfg)
    speech_mask = np.asarray(speech_mask, dtype=bool)
    if speech_mask.shape != x.shape[:-1]:
        raise ValueError(f"token-type mask shape {speech_mask.shape} does not match sequence shape {x.shape[:-1]}")
    p = block.params
    normed = tc.rms_norm(x, p["attn_norm"], cfg.norm_eps)
    h_global = mhsa(block, normed, positions, cfg)
    if speech_mask.any():
        h_local = cgmlp_forward(block, normed, cfg)
        h_cat = tc.concat([h_global, h_local], axis=-1)
        refined = tc.matmul(tc.causal_depthwise_conv(h_cat, p["merge_conv"]), p["merge_conv_proj"])
        merged = tc.matmul(tc.add(h_cat, refined), p["w_merge"])
        branch = tc.where(speech_mask[..., None], merged, h_global)
    else:
        branch = h_global
    return ffn(block, tc.add(x, branch), cfg)


class Model:
    """Token embedding, a stack of blocks, final norm and tied output head."""

    def __init__(
        self,
        config: ModelConfig,
        embed_text: Tensor,
        embed_speech: Tensor | None,
        final_norm: Tensor,
        layers: list[Block],
    ):
        if len(layers) != config.n_layers:
            raise ValueError(f"config says {config.n_layers} layers, got {len(layers)}")
        if embed_text.shape != (config.vocab_text, config.d_model):
            raise ValueError(f"text embedding shape {embed_text.shape} does not match config")
        speech_rows = 0 if embed_speech is None else embed_speech.shape[0]
        if speech_rows != config.vocab_speech:
            raise ValueError(f"speech embedding has {speech_rows} rows, config says {config.vocab_speech}")
        self.config = config
        self.embed_text = embed_text
        self.embed_speech = embed_speech
        self.final_norm = final_norm
        self.layers = layers

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, kinds: list[str] | None = None) -> "Model":
        rng = np.random.default_rng(seed)
        kinds = kinds or [STANDARD] * config.n_layers
        embed_text = Tensor((rng.standard_normal((config.vocab_text, config.d_model)) * config.init_std).astype(np.float32))
        embed_speech = None
        if config.vocab_speech:
            embed_speech = Tensor(
                (rng.standard_normal((config.vocab_speech, config.d_model)) * config.init_std).astype(np.float32)
            )
        layers = [Block.init(config, kind, rng) for kind in kinds]
        return cls(config, embed_text, embed_speech, Tensor(np.ones(config.d_model, np.float32)), layers)

    def named_parameters(self) -> dict[str, Tensor]:
        named = {"embed.text": self.embed_text}
        if self.embed_speech is not None:
            named["embed.speech"] = self.embed_speech
        named["final_norm"] = self.final_norm
        for i, layer in enumerate(self.layers):
            for name, t in layer.named_parameters():
                named[f"layers.{i}.{name}"] = t
        return named

    def num_parameters(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def with_layers(self, layers: list[Block]) -> "Model":
        """A new model sharing embeddings and norm with ``self``."""
        cfg = replace(self.config, n_layers=len(layers))
        return Model(cfg, self.embed_text, self.embed_speech, self.final_norm, list(layers))

    def speech_mask_for(self, ids: np.ndarray) -> np.ndarray:
        return np.asarray(ids) >= self.config.vocab_text

    def hidden(self, ids: np.ndarray, speech_mask: np.ndarray | None = None) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError(f"token id out of range [0, {self.config.vocab_size})")
        if speech_mask is None:
            speech_mask = self.speech_mask_for(ids)
        speech_mask = np.asarray(speech_mask, dtype=bool).reshape(ids.shape)
        table = self.embed_text
        if self.embed_speech is not None:
            table = tc.concat([self.embed_text, self.embed_speech], axis=0)
        x = tc.embedding(table, ids)
        positions = np.arange(ids.shape[1])
        for layer in self.layers:
            x = layer.forward(x, positions, self.config, speech_mask)
        return tc.rms_norm(x, self.final_norm, self.config.norm_eps)

    def forward(self, ids: np.ndarray, speech_mask: np.ndarray | None = None) -> Tensor:
        """Logits of shape ``(B, T, V_t + V_s)``.

        The text and speech column blocks are computed by separate products
        so the text columns do not depend on whether speech rows exist.
        """
        h = self.hidden(ids, speech_mask)
        logits = tc.matmul(h, tc.transpose(self.embed_text))
        if self.embed_speech is not None:
            logits = tc.concat([logits, tc.matmul(h, tc.transpose(self.embed_speech))], axis=-1)
        return logits

    __call__ = forward

"""Gated cross-attention fusion model for rationale-augmented VQA.

A small pre-norm transformer encodes the question; a one-layer patch
projection encodes the image. The two meet in a single-head cross-attention
step whose output is blended back into the text features through a learned
elementwise sigmoid gate, and an autoregressive decoder emits the serialized
answer/rationale sequence over the fused features.

Pipeline per sample, with n text positions, m image patches, width d:

    text_feats  = encoder(tokens)                      (n, d)
    image_feats = patches @ proj + patch_positions     (m, d)
    attended    = softmax(Q K^T / sqrt(d)) V           (n, d)  Q from text,
                                                               K,V from image
    gate        = sigmoid(text_feats W_t + attended W_v)
    fused       = text_feats + gate * (attended - text_feats)
    logits      = decoder(prefix | fused)              (k, vocab)

Parameter initialization draws every weight matrix and embedding from a
seeded Gaussian with standard deviation 0.02; biases start at zero and
normalization gains at one. Creation order is fixed, so a config seed pins
every parameter bit.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ContractViolation, ShapeError
from .tensorstore import load_tensors, save_tensors

_INIT_STD = 0.02
_FF_MULT = 2  # feed-forward hidden width, as a multiple of d


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and seed; every derived quantity is a pure function of these."""

    vocab_size: int
    d: int = 32
    n_max: int = 24
    m: int = 4
    enc_layers: int = 1
    dec_layers: int = 1
    heads: int = 4
    image_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 8:
            raise ContractViolation(f"vocab_size must cover the reserved tokens, got {self.vocab_size}")
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ContractViolation(f"heads ({self.heads}) must divide width d ({self.d})")
        if self.n_max < 2:
            raise ContractViolation(f"n_max must be at least 2, got {self.n_max}")
        if self.m < 1:
            raise ContractViolation(f"m must be at least 1, got {self.m}")
        side = math.isqrt(self.m)
        if side * side != self.m:
            raise ContractViolation(f"m must be a perfect square so patches tile the image, got {self.m}")
        if self.image_size < side or self.image_size % side:
            raise ContractViolation(
                f"image_size {self.image_size} does not split into {side}x{side} patches"
            )
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ContractViolation("layer counts must be non-negative")
        if self.seed < 0:
            raise ContractViolation(f"seed must be non-negative, got {self.seed}")

    @property
    def patch_side(self) -> int:
        return self.image_size // math.isqrt(self.m)

    @property
    def patch_pixels(self) -> int:
        return self.patch_side * self.patch_side


@dataclass
class FusionTrace:
    """Every intermediate of one fusion pass, for inspection and invariants."""

    text_features: Tensor      # (n, d)
    image_features: Tensor     # (m, d)
    attention_weights: Tensor  # (n, m), rows sum to one
    attended_visual: Tensor    # (n, d)
    gate: Tensor               # (n, d), entries in (0, 1)
    fused: Tensor              # (n, d)


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count for a config."""
    d, v = config.d, config.vocab_size
    embeddings = v * d + config.n_max * d + config.patch_pixels * d + d + config.m * d
    ffn = d * _FF_MULT * d + _FF_MULT * d + _FF_MULT * d * d + d
    enc_block = 2 * d + 4 * d * d + 2 * d + ffn
    dec_block = 2 * d + 4 * d * d + 2 * d + 4 * d * d + 2 * d + ffn
    fusion = 5 * d * d
    final_norms = 4 * d
    return (
        embeddings
        + config.enc_layers * enc_block
        + config.dec_layers * dec_block
        + fusion
        + final_norms
        + d * v
    )


def _param_spec(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, kind) triples; kind picks the init rule."""
    d = config.d
    spec: list[tuple[str, tuple[int, ...], str]] = [
        ("tok_emb", (config.vocab_size, d), "gauss"),
        ("pos_emb", (config.n_max, d), "gauss"),
        ("patch_proj", (config.patch_pixels, d), "gauss"),
        ("patch_bias", (d,), "zero"),
        ("patch_pos", (config.m, d), "gauss"),
    ]

    def block(prefix: str, cross: bool):
        spec.append((f"{prefix}.ln1.gain", (d,), "one"))
        spec.append((f"{prefix}.ln1.bias", (d,), "zero"))
        for w in ("wq", "wk", "wv", "wo"):
            spec.append((f"{prefix}.attn.{w}", (d, d), "gauss"))
        norm = 2
        if cross:
            spec.append((f"{prefix}.ln2.gain", (d,), "one"))
            spec.append((f"{prefix}.ln2.bias", (d,), "zero"))
            for w in ("wq", "wk", "wv", "wo"):
                spec.append((f"{prefix}.cross.{w}", (d, d), "gauss"))
            norm = 3
        spec.append((f"{prefix}.ln{norm}.gain", (d,), "one"))
        spec.append((f"{prefix}.ln{norm}.bias", (d,), "zero"))
        spec.append((f"{prefix}.ffn.w1", (d, _FF_MULT * d), "gauss"))
        spec.append((f"{prefix}.ffn.b1", (_FF_MULT * d,), "zero"))
        spec.append((f"{prefix}.ffn.w2", (_FF_MULT * d, d), "gauss"))
        spec.append((f"{prefix}.ffn.b2", (d,), "zero"))

    for i in range(config.enc_layers):
        block(f"enc{i}", cross=False)
    spec.append(("enc_ln.gain", (d,), "one"))
    spec.append(("enc_ln.bias", (d,), "zero"))
    for name in ("fuse.wq", "fuse.wk", "fuse.wv", "fuse.gate_text", "fuse.gate_visual"):
        spec.append((name, (d, d), "gauss"))
    for i in range(config.dec_layers):
        block(f"dec{i}", cross=True)
    spec.append(("dec_ln.gain", (d,), "one"))
    spec.append(("dec_ln.bias", (d,), "zero"))
    spec.append(("out_proj", (d, config.vocab_size), "gauss"))
    return spec


def _init_params(config: ModelConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}
    for name, shape, kind in _param_spec(config):
        if kind == "gauss":
            data = rng.normal(0.0, _INIT_STD, size=shape)
        elif kind == "one":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor.from_array(data)
    return params


class GatedFusionModel:
    """Questions and an image in, serialized answer/rationale logits out."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        if params is None:
            params = _init_params(config)
        else:
            expected = {name: shape for name, shape, _ in _param_spec(config)}
            got = {name: p.shape for name, p in params.items()}
            if got != expected:
                missing = sorted(set(expected) - set(got))
                extra = sorted(set(got) - set(expected))
                bad = sorted(n for n in set(got) & set(expected) if got[n] != expected[n])
                raise CheckpointError(
                    f"parameters do not match config: missing={missing} extra={extra} reshaped={bad}"
                )
        self.params = params

    # -- encoding ----------------------------------------------------------

    def _attn_sublayer(self, prefix: str, x: Tensor, kv: Tensor, causal: bool) -> Tensor:
        p = self.params
        q = ad.matmul(x, p[f"{prefix}.wq"])
        k = ad.matmul(kv, p[f"{prefix}.wk"])
        v = ad.matmul(kv, p[f"{prefix}.wv"])
        ctx = ad.multihead_attention(q, k, v, self.config.heads, causal=causal)
        return ad.matmul(ctx, p[f"{prefix}.wo"])

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        h = ad.add_rows(ad.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"])
        h = ad.silu(h)
        return ad.add_rows(ad.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _norm(self, prefix: str, x: Tensor) -> Tensor:
        return ad.layer_norm_rows(x, self.params[f"{prefix}.gain"], self.params[f"{prefix}.bias"])

    def encode_text(self, token_ids: Sequence[int]) -> Tensor:
        """Token ids -> contextual text features (n, d)."""
        ids = list(token_ids)
        if not ids:
            raise ContractViolation("encode_text needs at least one token")
        if len(ids) > self.config.n_max:
            raise ShapeError(f"sequence length {len(ids)} exceeds n_max {self.config.n_max}")
        x = ad.add(
            ad.embed_rows(self.params["tok_emb"], ids),
            ad.embed_rows(self.params["pos_emb"], range(len(ids))),
        )
        for i in range(self.config.enc_layers):
            h = self._norm(f"enc{i}.ln1", x)
            x = ad.add(x, self._attn_sublayer(f"enc{i}.attn", h, h, causal=False))
            x = ad.add(x, self._ffn(f"enc{i}.ffn", self._norm(f"enc{i}.ln2", x)))
        return self._norm("enc_ln", x)

    def _patches(self, image: np.ndarray) -> np.ndarray:
        s = self.config.image_size
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (s, s):
            raise ShapeError(f"image must be ({s}, {s}) for this config, got {image.shape}")
        if not np.isfinite(image).all():
            raise ContractViolation("image contains non-finite pixels")
        grid = math.isqrt(self.config.m)
        side = self.config.patch_side
        return (
            image.reshape(grid, side, grid, side)
            .transpose(0, 2, 1, 3)
            .reshape(self.config.m, self.config.patch_pixels)
        )

    def encode_image(self, image: np.ndarray) -> Tensor:
        """Pixel grid -> per-patch visual features (m, d)."""
        patches = Tensor.from_array(self._patches(image))
        projected = ad.add_rows(ad.matmul(patches, self.params["patch_proj"]), self.params["patch_bias"])
        return ad.add(projected, ad.embed_rows(self.params["patch_pos"], range(self.config.m)))

    # -- fusion ------------------------------------------------------------

    def cross_attention(self, text_feats: Tensor, image_feats: Tensor) -> tuple[Tensor, Tensor]:
        """Single-head attention from text queries over image keys/values.

        Returns (attended (n, d), weights (n, m)).
        """
        p = self.params
        if len(text_feats.shape) != 2 or text_feats.shape[1] != self.config.d:
            raise ShapeError(f"text features must be (n, {self.config.d}), got {text_feats.shape}")
        if len(image_feats.shape) != 2 or image_feats.shape[1] != self.config.d:
            raise ShapeError(f"image features must be (m, {self.config.d}), got {image_feats.shape}")
        q = ad.matmul(text_feats, p["fuse.wq"])
        k = ad.matmul(image_feats, p["fuse.wk"])
        v = ad.matmul(image_feats, p["fuse.wv"])
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(self.config.d))
        weights = ad.softmax_rows(scores)
        return ad.matmul(weights, v), weights

    def gated_fusion(self, text_feats: Tensor, attended: Tensor) -> tuple[Tensor, Tensor]:
        """Blend attended visual context into text features elementwise.

        Returns (fused (n, d), gate (n, d)); the gate is a sigmoid of linear
        maps of both inputs, and equal inputs pass through unchanged.
        """
        if text_feats.shape != attended.shape:
            raise ShapeError(f"fusion inputs disagree: {text_feats.shape} vs {attended.shape}")
        p = self.params
        pre = ad.add(ad.matmul(text_feats, p["fuse.gate_text"]), ad.matmul(attended, p["fuse.gate_visual"]))
        gate = ad.sigmoid(pre)
        return ad.gated_mix(text_feats, attended, gate), gate

    def fuse(self, token_ids: Sequence[int], image: np.ndarray) -> FusionTrace:
        """Run encoding and fusion, keeping every intermediate."""
        text_feats = self.encode_text(token_ids)
        image_feats = self.encode_image(image)
        attended, weights = self.cross_attention(text_feats, image_feats)
        fused, gate = self.gated_fusion(text_feats, attended)
        return FusionTrace(text_feats, image_feats, weights, attended, gate, fused)

    # -- decoding ----------------------------------------------------------

    def decode_logits(self, fused: Tensor, prefix_ids: Sequence[int]) -> Tensor:
        """Causal decoder over the fused features; logits for each prefix position."""
        ids = list(prefix_ids)
        if not ids:
            raise ContractViolation("decode_logits needs a non-empty prefix")
        if len(ids) > self.config.n_max:
            raise ShapeError(f"prefix length {len(ids)} exceeds n_max {self.config.n_max}")
        x = ad.add(
            ad.embed_rows(self.params["tok_emb"], ids),
            ad.embed_rows(self.params["pos_emb"], range(len(ids))),
        )
        for i in range(self.config.dec_layers):
            h = self._norm(f"dec{i}.ln1", x)
            x = ad.add(x, self._attn_sublayer(f"dec{i}.attn", h, h, causal=True))
            x = ad.add(x, self._attn_sublayer(f"dec{i}.cross", self._norm(f"dec{i}.ln2", x), fused, causal=False))
            x = ad.add(x, self._ffn(f"dec{i}.ffn", self._norm(f"dec{i}.ln3", x)))
        return ad.matmul(self._norm("dec_ln", x), self.params["out_proj"])

    # -- bookkeeping -------------------------------------------------------

    def param_count(self) -> int:
        actual = sum(p.data.size for p in self.params.values())
        expected = param_count(self.config)
        if actual != expected:
            raise ContractViolation(f"parameter count drifted: holds {actual}, closed form {expected}")
        return actual

    def param_hash(self) -> str:
        digest = hashlib.sha256()
        for name, p in self.params.items():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return digest.hexdigest()

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        meta = {"kind": "gated-fusion-model", "config": asdict(self.config)}
        if extra_meta:
            overlap = set(meta) & set(extra_meta)
            if overlap:
                raise ContractViolation(f"extra_meta may not override {sorted(overlap)}")
            meta.update(extra_meta)
        save_tensors(path, self.params, meta)

    @classmethod
    def load(cls, path: str | Path) -> tuple["GatedFusionModel", dict]:
        """Returns the model plus the full meta record from the container."""
        tensors, meta = load_tensors(path)
        if meta.get("kind") != "gated-fusion-model":
            raise CheckpointError(f"{path}: not a model checkpoint (kind={meta.get('kind')!r})")
        try:
            config = ModelConfig(**meta["config"])
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"{path}: bad config record: {exc}") from exc
        return cls(config, tensors), meta


def nll_loss(
    logits: Tensor | np.ndarray,
    targets: Sequence[int],
    pad_mask: Sequence[bool] | None = None,
) -> tuple[float, float]:
    """(sum_loss, mean_loss) of target tokens under row-wise log-softmax.

    pad_mask marks positions to keep (true = scored). Both numbers come from
    one pass: the mean over scored positions is computed first and the sum is
    mean times the scored count, so the pair is always exactly consistent.
    """
    X = logits.nd() if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got shape {X.shape}")
    n, v = X.shape
    ids = np.asarray(list(targets), dtype=np.int64)
    if ids.shape != (n,):
        raise ShapeError(f"{n} logit rows but {ids.size} targets")
    if ids.min() < 0 or ids.max() >= v:
        raise ContractViolation(f"target id outside 0..{v - 1}")
    mask = np.ones(n, dtype=bool) if pad_mask is None else np.asarray(list(pad_mask), dtype=bool)
    if mask.shape != (n,):
        raise ShapeError(f"pad_mask must have {n} entries, got {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ContractViolation("degenerate batch: every position is padded")
    m = X.max(axis=1, keepdims=True)
    logp = X - m - np.log(np.exp(X - m).sum(axis=1, keepdims=True))
    losses = -logp[np.arange(n), ids]
    mean_loss = float(losses[mask].sum() / count)
    return mean_loss * count, mean_loss

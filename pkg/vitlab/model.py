"""Pre-norm Vision Transformer for 2D images and 3D volumes."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
import logging
import math
from typing import List, Mapping, Optional

import numpy as np
from scipy.special import softmax as np_softmax
from scipy.stats import truncnorm

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, canonical_shapes, config_metadata
from .common import ShapeError, ViTConfig
from .patches import patchify

logger = logging.getLogger(__name__)

INIT_STD = 0.02
LN_EPS = 1e-6


def trunc_normal(
    shape, rng: np.random.Generator, std: float = INIT_STD, dtype=np.float32
) -> np.ndarray:
    """Normal samples truncated at two standard deviations."""
    values = truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)
    return np.asarray(values, dtype=dtype).reshape(shape)


def init_params(
    config: ViTConfig, seed: int = 0, dtype=np.float32
) -> "OrderedDict[str, np.ndarray]":
    """Fresh weights: zero class token and biases, unit norm gains, and
    truncated-normal (std 0.02) projections and positional embeddings."""
    rng = np.random.default_rng(seed)
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, shape in canonical_shapes(config).items():
        if name == "cls_token" or name.endswith(".bias") or name.endswith(".beta"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = trunc_normal(shape, rng, dtype=dtype)
    return params


def multi_head_attention(
    x: Tensor, params: Mapping[str, Tensor], num_heads: int
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over ``(B, T, d)`` tokens.

    ``params`` holds ``qkv.weight``, ``qkv.bias``, ``proj.weight`` and
    ``proj.bias``. Returns the projected output and the ``(B, h, T, T)``
    attention weights.
    """
    B, T, d = x.shape
    if d % num_heads:
        raise ShapeError(f"d={d} is not divisible by h={num_heads}")
    dh = d // num_heads
    qkv = x @ params["qkv.weight"] + params["qkv.bias"]
    qkv = qkv.reshape(B, T, 3, num_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    weights = ad.softmax(scores, axis=-1)
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
    out = out @ params["proj.weight"] + params["proj.bias"]
    return out, weights


@dataclass
class ForwardResult:
    logits: Tensor
    attention: List[np.ndarray] = field(default_factory=list)


class VisionTransformer:
    """Patch embedding, class token, positional embeddings, ``L`` pre-norm
    encoder blocks, a final norm and a linear head on the class token."""

    def __init__(
        self,
        config: ViTConfig,
        params: Optional[Mapping[str, np.ndarray]] = None,
        seed: int = 0,
        dtype=np.float32,
    ) -> None:
        self.config = config
        self.dtype = np.dtype(dtype)
        if params is None:
            params = init_params(config, seed=seed, dtype=self.dtype)
        self._check_params(params)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict(
            (
                name,
                Tensor(np.array(params[name], dtype=self.dtype), True, name=name),
            )
            for name in canonical_shapes(config)
        )

    def _check_params(self, params: Mapping[str, np.ndarray]) -> None:
        expected = canonical_shapes(self.config)
        problems = [f"missing {n}" for n in expected if n not in params]
        problems += [
            f"{n} has shape {tuple(params[n].shape)}, expected {shape}"
            for n, shape in expected.items()
            if n in params and tuple(params[n].shape) != shape
        ]
        problems += [f"unexpected {n}" for n in params if n not in expected]
        if problems:
            raise ShapeError(
                "Weights do not match the configuration: " + "; ".join(problems)
            )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, dtype=np.float32) -> "VisionTransformer":
        return cls(ckpt.config, params=ckpt.tensors, dtype=dtype)

    def to_checkpoint(self) -> Checkpoint:
        tensors = OrderedDict(
            (name, t.data.astype(np.float32)) for name, t in self.params.items()
        )
        return Checkpoint(tensors=tensors, metadata=config_metadata(self.config))

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, t.data.copy()) for name, t in self.params.items())

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        self._check_params(state)
        for name, tensor in self.params.items():
            tensor.data = np.array(state[name], dtype=self.dtype)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()

    def embed(self, images: np.ndarray) -> Tensor:
        """Patch-projection tokens ``(B, T_p, d)`` before class token and
        positional embeddings."""
        spec = self.config.patch
        patches = Tensor(patchify(np.asarray(images), spec), dtype=self.dtype)
        kernel = self.params["patch_embed.weight"].reshape(spec.patch_dim, self.config.d)
        return patches @ kernel + self.params["patch_embed.bias"]

    def forward(
        self,
        images: np.ndarray,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        return_attention: bool = False,
    ) -> ForwardResult:
        images = np.asarray(images)
        spec = self.config.patch
        if images.ndim == spec.dims + 1:
            images = images[None]
        if images.shape[1:] != spec.input_shape:
            raise ShapeError(
                f"Batch of shape {images.shape} does not match input shape "
                f"{spec.input_shape}"
            )
        p = self.params
        cfg = self.config
        rate = cfg.drop_rate

        tokens = self.embed(images)
        B = tokens.shape[0]
        cls = p["cls_token"] + Tensor(np.zeros((B, 1, cfg.d), dtype=self.dtype))
        x = ad.concat([cls, tokens], axis=1) + p["pos_embed"]
        x = ad.dropout(x, rate, rng, training)

        attention: List[np.ndarray] = []
        for i in range(cfg.L):
            prefix = f"blocks.{i}."
            h = ad.layer_norm(x, p[prefix + "norm1.gamma"], p[prefix + "norm1.beta"], LN_EPS)
            attn_params = {
                key: p[prefix + "attn." + key]
                for key in ("qkv.weight", "qkv.bias", "proj.weight", "proj.bias")
            }
            h, weights = multi_head_attention(h, attn_params, cfg.h)
            if return_attention:
                attention.append(weights.data.copy())
            x = x + ad.dropout(h, rate, rng, training)

            h = ad.layer_norm(x, p[prefix + "norm2.gamma"], p[prefix + "norm2.beta"], LN_EPS)
            h = h @ p[prefix + "mlp.fc1.weight"] + p[prefix + "mlp.fc1.bias"]
            h = ad.dropout(ad.gelu(h), rate, rng, training)
            h = h @ p[prefix + "mlp.fc2.weight"] + p[prefix + "mlp.fc2.bias"]
            x = x + ad.dropout(h, rate, rng, training)

        x = ad.layer_norm(x, p["norm.gamma"], p["norm.beta"], LN_EPS)
        logits = x[:, 0] @ p["head.weight"] + p["head.bias"]
        return ForwardResult(logits=logits, attention=attention)

    __call__ = forward

    def predict_proba(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Class probabilities ``(N, K)`` in eval mode, without a tape."""
        chunks = []
        with ad.no_grad():
            for start in range(0, len(images), batch_size):
                logits = self.forward(images[start : start + batch_size]).logits
                chunks.append(np_softmax(logits.data.astype(np.float64), axis=-1))
        return np.concatenate(chunks, axis=0)


def vit_forward(
    batch: np.ndarray,
    config: ViTConfig,
    weights: Mapping[str, np.ndarray],
    return_attention: bool = False,
) -> ForwardResult:
    """Eval-mode forward pass of ``config`` with the given weights."""
    weights = dict(weights)
    dtype = next(iter(weights.values())).dtype if weights else np.float32
    model = VisionTransformer(config, params=weights, dtype=dtype)
    with ad.no_grad():
        return model.forward(batch, return_attention=return_attention)

"""Closed-form parameter and FLOP counts, plus local latency measurement.

FLOP conventions
----------------
``convention="flop"`` counts every multiply-accumulate as 2 FLOPs.
``convention="mac"`` counts it as 1, which is how the encoder-variant table
reports FLOPs.  ``attention_matmuls`` toggles the two activation-activation
products of attention (scores ``QK^T`` and value mixing ``PV``); weight
matmuls (patch embedding, Q/K/V/O projections, FFN, heads) are always
counted.  Norms, softmax, GELU and embedding lookups are excluded.  The
table is reproduced by ``ENCODER_TABLE_FLOPS`` = MACs of weight matmuls only.
"""

from __future__ import annotations

import json
import platform
import statistics
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from medistill.config import ModelConfig

ENCODER_TABLE_FLOPS = {"convention": "mac", "attention_matmuls": False}
COMPONENTS = ("vision", "text", "decoder", "heads")


@dataclass
class CostReport:
    params: int
    flops: int
    resolution: int
    text_len: int
    convention: str
    breakdown_params: dict[str, int] = field(default_factory=dict)
    breakdown_flops: dict[str, int] = field(default_factory=dict)
    wallclock_ms: Optional[float] = None
    hardware: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2)

    def table(self) -> str:
        rows = [("submodule", "params", "flops")]
        keys = list(dict.fromkeys([*self.breakdown_params, *self.breakdown_flops]))
        for k in keys:
            rows.append((k, f"{self.breakdown_params.get(k, 0):,}", f"{self.breakdown_flops.get(k, 0):,}"))
        rows.append(("total", f"{self.params:,}", f"{self.flops:,}"))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = [f"{r[0]:<{widths[0]}}  {r[1]:>{widths[1]}}  {r[2]:>{widths[2]}}" for r in rows]
        lines.insert(1, "-" * len(lines[0]))
        if self.wallclock_ms is not None:
            lines.append(f"wallclock: {self.wallclock_ms:.2f} ms ({self.hardware})")
        return "\n".join(lines)


# -- parameters -----------------------------------------------------------------

def _attn_params(d: int, kv_dim: int) -> int:
    # q and o read d features, k and v read kv_dim; each has a bias of size d
    return 2 * d * d + 2 * kv_dim * d + 4 * d


def _ffn_params(d: int, ratio: int) -> int:
    return 2 * ratio * d * d + ratio * d + d


def _ln_params(d: int) -> int:
    return 2 * d


def param_breakdown(config: ModelConfig) -> dict[str, int]:
    v, t = config.vision, config.text
    r = config.ffn_ratio
    dv, dt = v.embed_dim, t.embed_dim
    block_v = 2 * _ln_params(dv) + _attn_params(dv, dv) + _ffn_params(dv, r)
    vision = (
        v.in_channels * v.patch_size ** 2 * dv + dv      # patch embedding
        + dv                                              # class token
        + v.seq_len * dv                                  # positions
        + v.n_layers * block_v
        + _ln_params(dv)
    )
    self_layer = 2 * _ln_params(dt) + _attn_params(dt, dt) + _ffn_params(dt, r)
    cross = _ln_params(dt) + _attn_params(dt, dv)
    text = (
        t.vocab_size * dt + t.max_len * dt
        + t.n_layers * self_layer
        + t.n_fusion_layers * cross
        + _ln_params(dt)
    )
    decoder = 0
    if config.has_decoder:
        decoder = config.decoder.n_layers * (self_layer + cross) + _ln_params(dt) + t.vocab_size
    p = config.itc_dim
    heads = (dv * p + p) + (dt * p + p) + 1 + (dt * 2 + 2)
    return {"vision": vision, "text": text, "decoder": decoder, "heads": heads}


def count_params(config: ModelConfig, component: str = "all") -> int:
    """Exact trainable-parameter count; equals the builder's tensor sizes."""
    breakdown = param_breakdown(config)
    if component == "all":
        return sum(breakdown.values())
    return breakdown[component]


# -- FLOPs ------------------------------------------------------------------------

def flop_breakdown(config: ModelConfig, resolution: Optional[int] = None, text_len: int = 30,
                   attention_matmuls: bool = True) -> dict[str, int]:
    """Multiply-accumulate counts per term for one image and one caption."""
    v, t = config.vision, config.text
    r = config.ffn_ratio
    dv, dt = v.embed_dim, t.embed_dim
    res = v.image_size if resolution is None else resolution
    n_patch = (res // v.patch_size) ** 2
    tv = n_patch + 1
    L = text_len
    att = 1 if attention_matmuls else 0
    terms = {
        "vision.patch_embed": n_patch * v.in_channels * v.patch_size ** 2 * dv,
        "vision.qkvo": v.n_layers * 4 * tv * dv * dv,
        "vision.attn_scores": att * v.n_layers * tv * tv * dv,
        "vision.attn_mix": att * v.n_layers * tv * tv * dv,
        "vision.ffn": v.n_layers * 2 * r * tv * dv * dv,
        "text.qkvo": t.n_layers * 4 * L * dt * dt,
        "text.attn_scores": att * t.n_layers * L * L * dt,
        "text.attn_mix": att * t.n_layers * L * L * dt,
        "text.ffn": t.n_layers * 2 * r * L * dt * dt,
        # extra work when the text encoder runs image-grounded
        "fusion.cross_qo": t.n_fusion_layers * 2 * L * dt * dt,
        "fusion.cross_kv": t.n_fusion_layers * 2 * tv * dv * dt,
        "fusion.cross_attn": att * t.n_fusion_layers * 2 * L * tv * dt,
        "heads.itc": dv * config.itc_dim + dt * config.itc_dim,
    }
    if config.has_decoder:
        n = config.decoder.n_layers
        terms.update({
            "decoder.qkvo": n * 4 * L * dt * dt,
            "decoder.attn": att * n * 2 * L * L * dt,
            "decoder.cross_qo": n * 2 * L * dt * dt,
            "decoder.cross_kv": n * 2 * tv * dv * dt,
            "decoder.cross_attn": att * n * 2 * L * tv * dt,
            "decoder.ffn": n * 2 * r * L * dt * dt,
            "decoder.lm_head": L * dt * t.vocab_size,
        })
    return terms


def count_flops(config: ModelConfig, resolution: Optional[int] = None, text_len: int = 30,
                component: str = "all", convention: str = "flop", attention_matmuls: bool = True) -> int:
    """FLOPs of one forward pass through ``component``.

    ``component`` is one of vision, text (unimodal), fusion (the extra
    cross-attention cost of image-grounded text encoding), decoder, heads
    or all.
    """
    if convention not in ("flop", "mac"):
        raise ValueError(f"unknown FLOP convention {convention!r}")
    terms = flop_breakdown(config, resolution, text_len, attention_matmuls)
    if component != "all":
        terms = {k: v for k, v in terms.items() if k.split(".", 1)[0] == component}
        if not terms and component not in ("decoder",):
            raise ValueError(f"unknown component {component!r}")
    scale = 2 if convention == "flop" else 1
    return scale * sum(terms.values())


def cost_report(config: ModelConfig, resolution: Optional[int] = None, text_len: int = 30,
                convention: str = "flop", attention_matmuls: bool = True) -> CostReport:
    scale = 2 if convention == "flop" else 1
    terms = flop_breakdown(config, resolution, text_len, attention_matmuls)
    flops = {k: scale * v for k, v in terms.items()}
    params = param_breakdown(config)
    return CostReport(
        params=sum(params.values()),
        flops=sum(flops.values()),
        resolution=resolution or config.vision.image_size,
        text_len=text_len,
        convention=f"{convention}{'' if attention_matmuls else ' (weight matmuls only)'}",
        breakdown_params=params,
        breakdown_flops=flops,
    )


# -- wall clock ---------------------------------------------------------------------

def hardware_string() -> str:
    return f"{platform.machine()} {platform.processor() or platform.system()} numpy-{np.__version__}"


def measure_inference(model, batch_size: int = 1, text_len: Optional[int] = None, repetitions: int = 5,
                      warmup: int = 1, seed: int = 0) -> tuple[float, str]:
    """Median wall-clock milliseconds of image + unimodal text encoding."""
    from medistill.autodiff import no_grad
    from medistill.data import BOS_ID, EOS_ID
    from medistill.model import encode_image, encode_text

    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    v, t = model.config.vision, model.config.text
    rng = np.random.default_rng(seed)
    images = rng.random((batch_size, v.in_channels, v.image_size, v.image_size))
    length = min(text_len or t.max_len, t.max_len)
    tokens = rng.integers(4, t.vocab_size, size=(batch_size, length))
    tokens[:, 0] = BOS_ID
    tokens[:, -1] = EOS_ID

    def run():
        encode_image(model, images)
        encode_text(model, tokens)

    times = []
    with no_grad():
        for _ in range(warmup):
            run()
        for _ in range(repetitions):
            start = time.perf_counter()
            run()
            times.append((time.perf_counter() - start) * 1e3)
    return statistics.median(times), hardware_string()

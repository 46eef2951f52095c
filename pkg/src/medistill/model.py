"""Multimodal mixture of encoder-decoder.

One weight set serves three roles: a unimodal encoder (ViT for images,
bidirectional transformer for text), an image-grounded text encoder whose
top layers cross-attend to the final vision states, and an image-grounded
causal decoder that shares the token/position embeddings with the text
encoder.  All blocks are pre-norm.  Every forward pass records per-layer
hidden states and attention distributions in a :class:`ForwardTrace`.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from medistill.autodiff import Tensor, functional as F, get_dtype, parameter
from medistill.config import ModelConfig
from medistill.data import BOS_ID, EOS_ID, PAD_ID, Batch
from medistill.errors import ConfigurationError, ContractError, ShapeError

COMPONENT_PREFIXES = {
    "vision": ("vision.",),
    "text": ("embed.", "text."),
    "decoder": ("decoder.", "lm."),
    "heads": ("itc.", "itm."),
}


# -- parameter inventory ------------------------------------------------------------

def _attention_shapes(prefix: str, d: int, kv_dim: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for name, fan_in in (("q", d), ("k", kv_dim), ("v", kv_dim), ("o", d)):
        shapes[f"{prefix}{name}.weight"] = (fan_in, d)
        shapes[f"{prefix}{name}.bias"] = (d,)
    return shapes


def _norm_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.weight": (d,), f"{prefix}.bias": (d,)}


def _mlp_shapes(prefix: str, d: int, ratio: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}fc1.weight": (d, ratio * d),
        f"{prefix}fc1.bias": (ratio * d,),
        f"{prefix}fc2.weight": (ratio * d, d),
        f"{prefix}fc2.bias": (d,),
    }


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape inventory; a pure function of the config."""
    v, t = config.vision, config.text
    r = config.ffn_ratio
    shapes: dict[str, tuple[int, ...]] = {}

    patch_in = v.in_channels * v.patch_size ** 2
    shapes["vision.patch.weight"] = (patch_in, v.embed_dim)
    shapes["vision.patch.bias"] = (v.embed_dim,)
    shapes["vision.cls"] = (1, 1, v.embed_dim)
    shapes["vision.pos"] = (1, v.seq_len, v.embed_dim)
    for i in range(v.n_layers):
        p = f"vision.blocks.{i}."
        shapes.update(_norm_shapes(p + "ln1", v.embed_dim))
        shapes.update(_attention_shapes(p + "attn.", v.embed_dim, v.embed_dim))
        shapes.update(_norm_shapes(p + "ln2", v.embed_dim))
        shapes.update(_mlp_shapes(p + "mlp.", v.embed_dim, r))
    shapes.update(_norm_shapes("vision.ln_f", v.embed_dim))

    shapes["embed.token"] = (t.vocab_size, t.embed_dim)
    shapes["embed.position"] = (t.max_len, t.embed_dim)
    for i in range(t.n_layers):
        p = f"text.layers.{i}."
        shapes.update(_norm_shapes(p + "ln1", t.embed_dim))
        shapes.update(_attention_shapes(p + "self.", t.embed_dim, t.embed_dim))
        if t.is_fusion_layer(i):
            shapes.update(_norm_shapes(p + "ln_cross", t.embed_dim))
            shapes.update(_attention_shapes(p + "cross.", t.embed_dim, v.embed_dim))
        shapes.update(_norm_shapes(p + "ln2", t.embed_dim))
        shapes.update(_mlp_shapes(p + "mlp.", t.embed_dim, r))
    shapes.update(_norm_shapes("text.ln_f", t.embed_dim))

    if config.has_decoder:
        for i in range(config.decoder.n_layers):
            p = f"decoder.layers.{i}."
            shapes.update(_norm_shapes(p + "ln1", t.embed_dim))
            shapes.update(_attention_shapes(p + "self.", t.embed_dim, t.embed_dim))
            shapes.update(_norm_shapes(p + "ln_cross", t.embed_dim))
            shapes.update(_attention_shapes(p + "cross.", t.embed_dim, v.embed_dim))
            shapes.update(_norm_shapes(p + "ln2", t.embed_dim))
            shapes.update(_mlp_shapes(p + "mlp.", t.embed_dim, r))
        shapes.update(_norm_shapes("decoder.ln_f", t.embed_dim))
        shapes["lm.bias"] = (t.vocab_size,)

    p_dim = config.itc_dim
    shapes["itc.vision_proj.weight"] = (v.embed_dim, p_dim)
    shapes["itc.vision_proj.bias"] = (p_dim,)
    shapes["itc.text_proj.weight"] = (t.embed_dim, p_dim)
    shapes["itc.text_proj.bias"] = (p_dim,)
    shapes["itc.temp"] = ()
    shapes["itm.weight"] = (t.embed_dim, 2)
    shapes["itm.bias"] = (2,)
    return shapes


def component_of(name: str) -> str:
    for component, prefixes in COMPONENT_PREFIXES.items():
        if name.startswith(prefixes):
            return component
    raise KeyError(name)


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) resampled until every entry lies within ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def init_value(name: str, shape: tuple[int, ...], config: ModelConfig, rng: np.random.Generator) -> np.ndarray:
    if name == "itc.temp":
        return np.asarray(config.temperature_init)
    leaf = name.rsplit(".", 1)[-1]
    if ".ln" in name or name.startswith(("vision.ln", "text.ln", "decoder.ln")):
        return np.ones(shape) if leaf == "weight" else np.zeros(shape)
    if leaf == "bias":
        return np.zeros(shape)
    return truncated_normal(rng, shape, config.init_std)


# -- model --------------------------------------------------------------------------

class MEDModel:
    """Weights plus config; the forward passes are module-level functions."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        expected = param_shapes(config)
        if list(params) != list(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ShapeError(f"parameter names do not match config (missing={missing[:5]}, extra={extra[:5]})")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int | np.random.Generator = 0) -> "MEDModel":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        dtype = get_dtype()
        params = {name: parameter(init_value(name, shape, config, rng).astype(dtype))
                  for name, shape in param_shapes(config).items()}
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self, component: Optional[str] = None) -> Iterable[tuple[str, Tensor]]:
        for name, p in self.params.items():
            if component is None or component_of(name) == component:
                yield name, p

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self, component: Optional[str] = None) -> int:
        return sum(p.size for _, p in self.named_parameters(component))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, value in state.items():
            if name not in self.params:
                if strict:
                    raise KeyError(f"unexpected parameter {name}")
                continue
            if tuple(value.shape) != self.params[name].shape:
                raise ShapeError(f"{name}: expected shape {self.params[name].shape}, got {tuple(value.shape)}")
            self.params[name].data = np.array(value, dtype=self.params[name].dtype)

    def clone(self) -> "MEDModel":
        params = {name: parameter(p.data.copy()) for name, p in self.params.items()}
        return MEDModel(self.config.model_copy(deep=True), params)

    def astype(self, dtype) -> "MEDModel":
        params = {name: parameter(p.data.astype(dtype)) for name, p in self.params.items()}
        return MEDModel(copy.deepcopy(self.config), params)


# -- trace --------------------------------------------------------------------------

@dataclass
class AttentionRecord:
    component: str          # vision | text | fused | decoder
    layer: int
    kind: str               # self | cross
    probs: Tensor           # [B, heads, L_query, L_key]
    query_mask: Optional[np.ndarray] = None   # [B, L_query] bool

    @property
    def heads(self) -> int:
        return self.probs.shape[1]

    @property
    def seq_len(self) -> int:
        return self.probs.shape[2]


@dataclass
class ForwardTrace:
    vision_states: list[Tensor] = field(default_factory=list)
    text_states: list[Tensor] = field(default_factory=list)
    fused_states: list[Tensor] = field(default_factory=list)
    decoder_states: list[Tensor] = field(default_factory=list)
    attentions: list[AttentionRecord] = field(default_factory=list)
    image_embed: Optional[Tensor] = None
    text_embed: Optional[Tensor] = None
    text_mask: Optional[np.ndarray] = None
    decoder_mask: Optional[np.ndarray] = None
    itm_logits: Optional[Tensor] = None
    itm_labels: Optional[np.ndarray] = None
    lm_logits: Optional[Tensor] = None
    negatives: Optional[tuple[np.ndarray, np.ndarray]] = None

    def states(self, component: str) -> list[Tensor]:
        return {"vision": self.vision_states, "text": self.text_states,
                "fused": self.fused_states, "decoder": self.decoder_states}[component]

    def attention_maps(self, component: str, kind: str) -> list[AttentionRecord]:
        return [a for a in self.attentions if a.component == component and a.kind == kind]

    def merge(self, other: "ForwardTrace") -> "ForwardTrace":
        for name in ("vision_states", "text_states", "fused_states", "decoder_states"):
            if getattr(other, name):
                setattr(self, name, getattr(other, name))
        self.attentions.extend(other.attentions)
        for name in ("image_embed", "text_embed", "text_mask", "decoder_mask", "itm_logits", "itm_labels", "lm_logits"):
            if getattr(other, name) is not None:
                setattr(self, name, getattr(other, name))
        return self


# -- building blocks ------------------------------------------------------------------

def _ln(model: MEDModel, prefix: str, x: Tensor) -> Tensor:
    return F.layer_norm(x, model[prefix + ".weight"], model[prefix + ".bias"], model.config.layer_norm_eps)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, length, d = x.shape
    return F.transpose(F.reshape(x, (b, length, heads, d // heads)), (0, 2, 1, 3))


def _attention(model: MEDModel, prefix: str, x_q: Tensor, x_kv: Tensor, heads: int,
               allowed: Optional[np.ndarray]) -> tuple[Tensor, Tensor]:
    p = model.params
    q = _split_heads(F.linear(x_q, p[prefix + "q.weight"], p[prefix + "q.bias"]), heads)
    k = _split_heads(F.linear(x_kv, p[prefix + "k.weight"], p[prefix + "k.bias"]), heads)
    v = _split_heads(F.linear(x_kv, p[prefix + "v.weight"], p[prefix + "v.bias"]), heads)
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = F.mul(F.matmul(q, F.swapaxes(k, -1, -2)), scale)
    probs = F.softmax(scores, axis=-1, mask=allowed)
    ctx = F.transpose(F.matmul(probs, v), (0, 2, 1, 3))
    b, length = x_q.shape[:2]
    ctx = F.reshape(ctx, (b, length, -1))
    return F.linear(ctx, p[prefix + "o.weight"], p[prefix + "o.bias"]), probs


def _mlp(model: MEDModel, prefix: str, x: Tensor) -> Tensor:
    p = model.params
    h = F.gelu(F.linear(x, p[prefix + "fc1.weight"], p[prefix + "fc1.bias"]), model.config.gelu)
    return F.linear(h, p[prefix + "fc2.weight"], p[prefix + "fc2.bias"])


def _block(model: MEDModel, prefix: str, x: Tensor, heads: int, component: str, layer: int,
           self_allowed: Optional[np.ndarray], records: list[AttentionRecord], query_mask: Optional[np.ndarray],
           self_name: str = "self.", cross_kv: Optional[Tensor] = None) -> Tensor:
    h = _ln(model, prefix + "ln1", x)
    a, probs = _attention(model, prefix + self_name, h, h, heads, self_allowed)
    records.append(AttentionRecord(component, layer, "self", probs, query_mask))
    x = F.add(x, a)
    if cross_kv is not None:
        a, probs = _attention(model, prefix + "cross.", _ln(model, prefix + "ln_cross", x), cross_kv, heads, None)
        records.append(AttentionRecord(component, layer, "cross", probs, query_mask))
        x = F.add(x, a)
    return F.add(x, _mlp(model, prefix + "mlp.", _ln(model, prefix + "ln2", x)))


# -- vision ----------------------------------------------------------------------------

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, C, H, W] -> [B, N, C*p*p], patches in row-major order, features ordered (c, i, j)."""
    b, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch * patch)


def _as_image_batch(model: MEDModel, images) -> np.ndarray:
    images = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=get_dtype())
    if images.ndim == 3:
        images = images[None]
    v = model.config.vision
    if images.ndim != 4 or images.shape[1:] != (v.in_channels, v.image_size, v.image_size):
        raise ShapeError(f"expected images [B, {v.in_channels}, {v.image_size}, {v.image_size}], got {images.shape}")
    return images


def vision_forward(model: MEDModel, images) -> ForwardTrace:
    images = _as_image_batch(model, images)
    v = model.config.vision
    p = model.params
    patches = Tensor(patchify(images, v.patch_size))
    x = F.linear(patches, p["vision.patch.weight"], p["vision.patch.bias"])
    b = x.shape[0]
    cls = F.mul(p["vision.cls"], Tensor(np.ones((b, 1, 1), dtype=x.dtype)))
    x = F.add(F.concat([cls, x], axis=1), p["vision.pos"])
    trace = ForwardTrace()
    for i in range(v.n_layers):
        x = _block(model, f"vision.blocks.{i}.", x, v.n_heads, "vision", i, None, trace.attentions, None,
                   self_name="attn.")
        if i == v.n_layers - 1:
            x = _ln(model, "vision.ln_f", x)
        trace.vision_states.append(x)
    return trace


def project_image(model: MEDModel, image_states: Tensor) -> Tensor:
    cls = F.getitem(image_states, (slice(None), 0))
    proj = F.linear(cls, model["itc.vision_proj.weight"], model["itc.vision_proj.bias"])
    return F.l2_normalize(proj, axis=-1)


def encode_image(model: MEDModel, images) -> tuple[Tensor, ForwardTrace]:
    """Pooled, L2-normalised ITC embedding of the class token plus the vision trace."""
    trace = vision_forward(model, images)
    trace.image_embed = project_image(model, trace.vision_states[-1])
    return trace.image_embed, trace


# -- text --------------------------------------------------------------------------------

def _as_tokens(model: MEDModel, tokens, mask) -> tuple[np.ndarray, np.ndarray]:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if mask is None:
        mask = tokens != PAD_ID
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None]
    t = model.config.text
    if tokens.shape[1] > t.max_len:
        raise ShapeError(f"sequence length {tokens.shape[1]} exceeds text.max_len={t.max_len}")
    if tokens.size and (tokens.max() >= t.vocab_size or tokens.min() < 0):
        raise IndexError(f"token id outside [0, {t.vocab_size})")
    return tokens, mask


def _embed_tokens(model: MEDModel, tokens: np.ndarray) -> Tensor:
    length = tokens.shape[1]
    tok = F.embedding(model["embed.token"], tokens)
    pos = F.getitem(model["embed.position"], slice(0, length))
    return F.add(tok, pos)


def text_forward(model: MEDModel, tokens, mask=None, image_states: Optional[Tensor] = None,
                 component: str = "text", causal: bool = False) -> ForwardTrace:
    """Text encoder pass; cross-attention runs in the fusion layers when ``image_states`` is given.

    ``causal=True`` restricts every query to earlier keys, which the unimodal
    next-token proxy task uses.
    """
    tokens, mask = _as_tokens(model, tokens, mask)
    if (tokens[:, 0] != BOS_ID).any():
        raise ContractError("text sequences must start with the BOS token")
    t = model.config.text
    allowed = mask[:, None, None, :]
    if causal:
        length = tokens.shape[1]
        allowed = allowed & np.tril(np.ones((length, length), dtype=bool))[None, None]
    x = _embed_tokens(model, tokens)
    trace = ForwardTrace(text_mask=mask)
    states = trace.fused_states if component == "fused" else trace.text_states
    for i in range(t.n_layers):
        cross = image_states if (image_states is not None and t.is_fusion_layer(i)) else None
        x = _block(model, f"text.layers.{i}.", x, t.n_heads, component, i, allowed, trace.attentions, mask,
                   cross_kv=cross)
        if i == t.n_layers - 1:
            x = _ln(model, "text.ln_f", x)
        states.append(x)
    return trace


def project_text(model: MEDModel, text_states: Tensor) -> Tensor:
    first = F.getitem(text_states, (slice(None), 0))
    proj = F.linear(first, model["itc.text_proj.weight"], model["itc.text_proj.bias"])
    return F.l2_normalize(proj, axis=-1)


def encode_text(model: MEDModel, tokens, mask=None, mode: str = "unimodal") -> tuple[Tensor, ForwardTrace]:
    """Unimodal text encoding: bidirectional self-attention only, PAD keys masked out."""
    if mode != "unimodal":
        raise ValueError("encode_text only runs in unimodal mode; use fuse() for the image-grounded encoder")
    trace = text_forward(model, tokens, mask)
    trace.text_embed = project_text(model, trace.text_states[-1])
    return trace.text_embed, trace


def fuse(model: MEDModel, tokens, image_states: Tensor, mask=None) -> tuple[Tensor, ForwardTrace]:
    """Image-grounded text encoding; returns the final fused states [B, L, d]."""
    if model.config.text.n_fusion_layers == 0:
        raise ConfigurationError("fusion requested but text.n_fusion_layers == 0")
    trace = text_forward(model, tokens, mask, image_states=image_states, component="fused")
    return trace.fused_states[-1], trace


def itm_logits(model: MEDModel, fused_states: Tensor) -> Tensor:
    first = F.getitem(fused_states, (slice(None), 0))
    return F.linear(first, model["itm.weight"], model["itm.bias"])


# -- decoder ------------------------------------------------------------------------------

def decode(model: MEDModel, tokens, image_states: Tensor, mask=None) -> tuple[Tensor, ForwardTrace]:
    """Causal decoding; logits[:, i] predict the token after position i."""
    if not model.config.has_decoder:
        raise ConfigurationError("decoder requested but decoder.n_layers == 0")
    tokens, mask = _as_tokens(model, tokens, mask)
    t = model.config.text
    length = tokens.shape[1]
    causal = np.tril(np.ones((length, length), dtype=bool))
    allowed = causal[None, None] & mask[:, None, None, :]
    x = _embed_tokens(model, tokens)
    trace = ForwardTrace(decoder_mask=mask)
    for i in range(model.config.decoder.n_layers):
        x = _block(model, f"decoder.layers.{i}.", x, t.n_heads, "decoder", i, allowed, trace.attentions, mask,
                   cross_kv=image_states)
        if i == model.config.decoder.n_layers - 1:
            x = _ln(model, "decoder.ln_f", x)
        trace.decoder_states.append(x)
    logits = F.add(F.matmul(x, F.transpose(model["embed.token"], (1, 0))), model["lm.bias"])
    trace.lm_logits = logits
    return logits, trace


def generate_captions(model: MEDModel, images, prompt: Sequence[int] = (), max_len: int = 12,
                      image_states: Optional[Tensor] = None) -> list[list[int]]:
    """Greedy decoding for a batch of images.

    Each result is the prompt followed by the generated tokens, without BOS
    and EOS; at most ``max_len`` tokens are generated after the prompt.
    """
    from medistill.autodiff import no_grad

    if not model.config.has_decoder:
        raise ConfigurationError("captioning requires a decoder")
    with no_grad():
        if image_states is None:
            image_states = vision_forward(model, images).vision_states[-1]
        b = image_states.shape[0]
        limit = model.config.text.max_len
        seq = np.tile(np.array([BOS_ID, *prompt], dtype=np.int64), (b, 1))
        done = np.zeros(b, dtype=bool)
        generated = [[] for _ in range(b)]
        for _ in range(max_len):
            if seq.shape[1] >= limit:
                break
            logits, _ = decode(model, seq, image_states, np.ones_like(seq, dtype=bool))
            nxt = logits.data[:, -1].argmax(axis=-1)
            for i in range(b):
                if done[i]:
                    continue
                if nxt[i] == EOS_ID:
                    done[i] = True
                else:
                    generated[i].append(int(nxt[i]))
            if done.all():
                break
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return [list(prompt) + g for g in generated]


def generate_caption(model: MEDModel, image, prompt: Sequence[int] = (), max_len: int = 12) -> list[int]:
    return generate_captions(model, image, prompt, max_len)[0]


# -- full pass -----------------------------------------------------------------------------

NegativeSampler = Callable[[Tensor, Tensor], tuple[np.ndarray, np.ndarray]]


def forward_collect(model: MEDModel, batch: Batch, negative_sampler: Optional[NegativeSampler] = None,
                    with_fusion: bool = True, with_decoder: bool = True) -> ForwardTrace:
    """Everything the pre-training and distillation losses consume, in one pass.

    With ``negative_sampler`` the fused encoder also runs on hard-negative
    pairs; the sampler receives the (image, text) ITC embeddings and returns
    one negative text index per image and one negative image index per text.
    Fused states in the trace always cover the positive pairs only.
    """
    trace = vision_forward(model, batch.images)
    image_states = trace.vision_states[-1]
    trace.image_embed = project_image(model, image_states)
    text_trace = text_forward(model, batch.tokens, batch.mask)
    trace.merge(text_trace)
    trace.text_embed = project_text(model, trace.text_states[-1])
    b = len(batch)

    if with_fusion and model.config.text.n_fusion_layers > 0:
        if negative_sampler is not None:
            neg_text, neg_image = negative_sampler(trace.image_embed, trace.text_embed)
            trace.negatives = (neg_text, neg_image)
            tokens = np.concatenate([batch.tokens, batch.tokens[neg_text], batch.tokens], axis=0)
            mask = np.concatenate([batch.mask, batch.mask[neg_text], batch.mask], axis=0)
            states = F.concat([image_states, image_states, F.getitem(image_states, neg_image)], axis=0)
            labels = np.concatenate([np.ones(b), np.zeros(2 * b)]).astype(np.int64)
        else:
            tokens, mask, states = batch.tokens, batch.mask, image_states
            labels = np.ones(b, dtype=np.int64)
        fused = text_forward(model, tokens, mask, image_states=states, component="fused")
        trace.itm_logits = itm_logits(model, fused.fused_states[-1])
        trace.itm_labels = labels
        if negative_sampler is not None:
            rows = slice(0, b)
            trace.fused_states = [F.getitem(s, rows) for s in fused.fused_states]
            for rec in fused.attentions:
                trace.attentions.append(AttentionRecord(rec.component, rec.layer, rec.kind,
                                                        F.getitem(rec.probs, rows), rec.query_mask[rows]))
        else:
            trace.fused_states = fused.fused_states
            trace.attentions.extend(fused.attentions)

    if with_decoder and model.config.has_decoder:
        dec_tokens = batch.tokens[:, :-1]
        dec_mask = batch.mask[:, :-1]
        _, dec_trace = decode(model, dec_tokens, image_states, dec_mask)
        trace.decoder_states = dec_trace.decoder_states
        trace.attentions.extend(dec_trace.attentions)
        trace.lm_logits = dec_trace.lm_logits
        trace.decoder_mask = dec_mask
    return trace

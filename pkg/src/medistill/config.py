"""Architecture configuration shared by the model builder and the cost model."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

# Size of the toy grammar vocabulary (4 specials + 17 words), the default for text.vocab_size.
TOY_VOCAB_SIZE = 21


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=False)


class VisionConfig(_Strict):
    embed_dim: int = Field(gt=0)
    n_heads: int = Field(gt=0)
    n_layers: int = Field(ge=1)
    patch_size: int = Field(default=4, gt=0)
    image_size: int = Field(default=32, gt=0)
    in_channels: int = Field(default=3, gt=0)

    @model_validator(mode="after")
    def _check(self):
        if self.embed_dim % self.n_heads:
            raise ValueError(
                f"vision.embed_dim={self.embed_dim} is not divisible by vision.n_heads={self.n_heads}")
        if self.image_size % self.patch_size:
            raise ValueError(
                f"vision.image_size={self.image_size} is not divisible by vision.patch_size={self.patch_size}")
        return self

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.n_patches + 1


class TextConfig(_Strict):
    embed_dim: int = Field(gt=0)
    n_heads: int = Field(gt=0)
    n_layers: int = Field(ge=1)
    vocab_size: int = Field(default=TOY_VOCAB_SIZE, gt=0)
    max_len: int = Field(default=16, gt=0)
    # Cross-attention sits in the top ``n_fusion_layers`` layers; None means all.
    n_fusion_layers: Optional[int] = None

    @model_validator(mode="after")
    def _check(self):
        if self.embed_dim % self.n_heads:
            raise ValueError(
                f"text.embed_dim={self.embed_dim} is not divisible by text.n_heads={self.n_heads}")
        if self.n_fusion_layers is None:
            self.n_fusion_layers = self.n_layers
        if not 0 <= self.n_fusion_layers <= self.n_layers:
            raise ValueError(
                f"text.n_fusion_layers={self.n_fusion_layers} must lie in [0, text.n_layers={self.n_layers}]")
        return self

    def is_fusion_layer(self, layer: int) -> bool:
        return layer >= self.n_layers - self.n_fusion_layers


class DecoderConfig(_Strict):
    # None mirrors the text encoder depth; 0 builds a model without a decoder.
    n_layers: Optional[int] = Field(default=None, ge=0)


class ModelConfig(_Strict):
    vision: VisionConfig
    text: TextConfig
    decoder: DecoderConfig = Field(default_factory=DecoderConfig)
    ffn_ratio: int = Field(default=4, gt=0)
    itc_dim: Optional[int] = None
    gelu: Literal["tanh", "erf"] = "tanh"
    layer_norm_eps: float = Field(default=1e-6, gt=0)
    init_std: float = Field(default=0.02, gt=0)
    temperature_init: float = Field(default=0.07, gt=0)

    @model_validator(mode="after")
    def _resolve(self):
        if self.decoder.n_layers is None:
            self.decoder.n_layers = self.text.n_layers
        if self.itc_dim is None:
            self.itc_dim = min(256, self.text.embed_dim)
        if self.itc_dim <= 0:
            raise ValueError(f"itc_dim={self.itc_dim} must be positive")
        return self

    @property
    def has_decoder(self) -> bool:
        return self.decoder.n_layers > 0


# Reference encoder variants: (embed_dim, heads, layers).
VIT_VARIANTS = {
    "base": (768, 12, 12),
    "middle": (576, 9, 12),
    "small": (384, 6, 12),
    "tiny": (192, 3, 12),
}
BERT_VARIANTS = {
    "base": (768, 12, 12),
    "middle": (576, 12, 8),
    "small": (384, 12, 6),
    "tiny": (192, 12, 4),
}


def vit_config(variant: str, image_size: int = 224, patch_size: int = 16) -> VisionConfig:
    dim, heads, layers = VIT_VARIANTS[variant]
    return VisionConfig(embed_dim=dim, n_heads=heads, n_layers=layers, patch_size=patch_size, image_size=image_size)


def bert_config(variant: str, vocab_size: int = 30522, max_len: int = 512) -> TextConfig:
    dim, heads, layers = BERT_VARIANTS[variant]
    return TextConfig(embed_dim=dim, n_heads=heads, n_layers=layers, vocab_size=vocab_size, max_len=max_len)


def variant_config(vision: str, text: str, decoder_layers: Optional[int] = None) -> ModelConfig:
    """A full-size MED built from the reference encoder variants; the decoder mirrors the text encoder by default."""
    t = bert_config(text)
    return ModelConfig(
        vision=vit_config(vision),
        text=t,
        decoder=DecoderConfig(n_layers=t.n_layers if decoder_layers is None else decoder_layers),
    )


def toy_config(dim: int = 32, heads: int = 2, layers: int = 2, *, vocab_size: int = TOY_VOCAB_SIZE,
               text_layers: Optional[int] = None, n_fusion_layers: Optional[int] = None,
               decoder_layers: Optional[int] = None, image_size: int = 32, patch_size: int = 4,
               max_len: int = 16) -> ModelConfig:
    text_layers = layers if text_layers is None else text_layers
    return ModelConfig(
        vision=VisionConfig(embed_dim=dim, n_heads=heads, n_layers=layers, patch_size=patch_size,
                            image_size=image_size),
        text=TextConfig(embed_dim=dim, n_heads=heads, n_layers=text_layers, vocab_size=vocab_size,
                        max_len=max_len, n_fusion_layers=n_fusion_layers),
        decoder=DecoderConfig(n_layers=text_layers if decoder_layers is None else decoder_layers),
    )

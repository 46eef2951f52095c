"""Vision-language pre-training losses: contrastive (ITC), matching (ITM), captioning (LM)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from medistill.autodiff import Tensor, functional as F, no_grad
from medistill.data import PAD_ID, VOCAB, Batch
from medistill.errors import ConfigurationError, ContractError
from medistill.model import MEDModel, encode_image, encode_text, forward_collect, ForwardTrace

TEMP_MIN, TEMP_MAX = 0.001, 0.5
IGNORE = -100


def clamp_temperature(model: MEDModel) -> None:
    """Keep the learnable temperature inside its allowed range (in place, no gradient)."""
    temp = model["itc.temp"]
    np.clip(temp.data, TEMP_MIN, TEMP_MAX, out=temp.data)


class MomentumEncoder:
    """EMA copy of the unimodal encoders and ITC projections; never receives gradients."""

    COMPONENTS = ("vision", "text", "heads")

    def __init__(self, model: MEDModel, momentum: float = 0.995, alpha_soft: float = 0.4):
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum={momentum} must lie in (0, 1)")
        if not 0.0 <= alpha_soft <= 1.0:
            raise ValueError(f"alpha_soft={alpha_soft} must lie in [0, 1]")
        self.momentum = momentum
        self.alpha_soft = alpha_soft
        self.model = model.clone()
        for _, p in self.model.named_parameters():
            p.requires_grad = False
        self._names = [n for c in self.COMPONENTS for n, _ in model.named_parameters(c)]

    def update(self, model: MEDModel) -> None:
        mu = self.momentum
        for name in self._names:
            ema = self.model[name].data
            ema *= mu
            ema += (1.0 - mu) * model[name].data

    def embeddings(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        with no_grad():
            img, _ = encode_image(self.model, batch.images)
            txt, _ = encode_text(self.model, batch.tokens, batch.mask)
        return img.data, txt.data

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: self.model[n].data.copy() for n in self._names}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n in self._names:
            self.model[n].data[...] = state[n]


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _temperature_value(temperature) -> float:
    return float(temperature.data if isinstance(temperature, Tensor) else temperature)


def itc_loss(image_emb: Tensor, text_emb: Tensor, temperature, momentum_image: Optional[np.ndarray] = None,
             momentum_text: Optional[np.ndarray] = None, alpha_soft: float = 0.4) -> Tensor:
    """Symmetric in-batch contrastive loss with optional momentum soft targets.

    Targets per direction are ``(1 - alpha_soft) * onehot + alpha_soft *
    softmax(momentum similarity / temperature)``.  Without momentum
    embeddings the targets are one-hot.  ``temperature`` may be a float
    or the model's temperature tensor (then it receives gradient).
    """
    b = image_emb.shape[0]
    if b < 2:
        raise ContractError("itc_loss needs a batch of at least 2 pairs (no negatives otherwise)")
    if text_emb.shape[0] != b:
        raise ContractError(f"itc_loss: {b} images but {text_emb.shape[0]} texts")
    temp = temperature if isinstance(temperature, Tensor) else Tensor(np.asarray(temperature, dtype=image_emb.dtype))
    sim_i2t = F.div(F.matmul(image_emb, F.transpose(text_emb, (1, 0))), temp)
    sim_t2i = F.transpose(sim_i2t, (1, 0))
    eye = np.eye(b, dtype=image_emb.dtype)
    if momentum_image is not None and momentum_text is not None and alpha_soft > 0:
        tau = _temperature_value(temperature)
        sim_m = momentum_image @ momentum_text.T / tau
        target_i2t = (1 - alpha_soft) * eye + alpha_soft * _softmax_rows(sim_m)
        target_t2i = (1 - alpha_soft) * eye + alpha_soft * _softmax_rows(sim_m.T)
    else:
        target_i2t = target_t2i = eye
    loss_i2t = F.soft_cross_entropy(sim_i2t, target_i2t)
    loss_t2i = F.soft_cross_entropy(sim_t2i, target_t2i)
    return F.mul(F.add(loss_i2t, loss_t2i), 0.5)


def negative_weights(similarity: np.ndarray, temperature: float) -> np.ndarray:
    """Row-stochastic sampling weights ∝ exp(sim / τ) with the diagonal excluded."""
    sim = np.asarray(similarity, dtype=np.float64) / temperature
    b = sim.shape[0]
    if b < 2:
        raise ContractError("hard-negative sampling needs a batch of at least 2 pairs")
    sim = np.where(np.eye(b, dtype=bool), -np.inf, sim)
    return _softmax_rows(sim)


def sample_hard_negatives(image_emb: np.ndarray, text_emb: np.ndarray, temperature: float,
                          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One negative text per image and one negative image per text.

    Returns ``(neg_text, neg_image)`` index arrays.  The inverse-CDF draw
    uses one uniform per anchor so the stream consumption is fixed.
    """
    sim = image_emb @ text_emb.T
    w_i2t = negative_weights(sim, temperature)
    w_t2i = negative_weights(sim.T, temperature)
    b = sim.shape[0]
    u = rng.random((2, b))

    def draw(weights: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
        cdf = np.cumsum(weights, axis=1)
        # counting cdf <= u * total skips zero-weight columns, including the diagonal
        return (cdf <= (uniforms * cdf[:, -1])[:, None]).sum(axis=1)

    return draw(w_i2t, u[0]), draw(w_t2i, u[1])


def make_negative_sampler(temperature: float, rng: np.random.Generator):
    def sampler(image_emb: Tensor, text_emb: Tensor) -> tuple[np.ndarray, np.ndarray]:
        return sample_hard_negatives(image_emb.data, text_emb.data, temperature, rng)
    return sampler


def itm_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Matched/unmatched cross-entropy with positives and negatives weighted equally."""
    labels = np.asarray(labels)
    if labels.shape[0] < 2:
        raise ContractError("itm_loss needs a batch of at least 2 pairs")
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        return F.cross_entropy(logits, labels)
    l_pos = F.cross_entropy(F.getitem(logits, pos), labels[pos])
    l_neg = F.cross_entropy(F.getitem(logits, neg), labels[neg])
    return F.mul(F.add(l_pos, l_neg), 0.5)


def prompt_ids(prompt: Sequence[str]) -> list[int]:
    return [VOCAB.stoi[w] for w in prompt]


def lm_targets(tokens: np.ndarray, prompt: Sequence[int] = ()) -> np.ndarray:
    """Next-token targets for teacher forcing on ``tokens[:, :-1]``.

    PAD targets are ignored, and so are the prompt tokens of every caption
    that starts with the prompt: the decoder is conditioned on the prompt
    rather than trained to produce it.
    """
    targets = tokens[:, 1:].copy()
    targets[targets == PAD_ID] = IGNORE
    n = len(prompt)
    if n:
        starts = (tokens[:, 1:1 + n] == np.asarray(prompt)[None]).all(axis=1)
        targets[starts, :n] = IGNORE
    return targets


def lm_loss(logits: Optional[Tensor], tokens: np.ndarray, prompt: Sequence[int] = (),
            label_smoothing: float = 0.1) -> Tensor:
    if logits is None:
        raise ConfigurationError("lm_loss requires decoder logits; the model has no decoder")
    targets = lm_targets(tokens, prompt)
    return F.cross_entropy(logits, targets, ignore_index=IGNORE, label_smoothing=label_smoothing)


@dataclass
class PretrainLossReport:
    l_itc: Tensor
    l_itm: Tensor
    l_lm: Tensor
    similarity: np.ndarray

    @property
    def l_vlp(self) -> Tensor:
        return vlp_loss(self)

    def scalars(self) -> dict[str, float]:
        return {"l_itc": self.l_itc.item(), "l_itm": self.l_itm.item(), "l_lm": self.l_lm.item(),
                "l_vlp": self.l_itc.item() + self.l_itm.item() + self.l_lm.item()}


def vlp_loss(report: PretrainLossReport) -> Tensor:
    """Unweighted sum of the three pre-training losses."""
    for name in ("l_itc", "l_itm", "l_lm"):
        if getattr(report, name) is None:
            raise ConfigurationError(f"vlp_loss: {name} missing; every pre-training term is required")
    return F.add(F.add(report.l_itc, report.l_itm), report.l_lm)


@dataclass
class PretrainSettings:
    alpha_soft: float = 0.4
    label_smoothing: float = 0.1
    prompt: tuple[int, ...] = ()


def pretrain_losses(model: MEDModel, batch: Batch, rng: np.random.Generator,
                    momentum: Optional[MomentumEncoder] = None,
                    settings: PretrainSettings = PretrainSettings()) -> tuple[PretrainLossReport, ForwardTrace]:
    """Full pre-training forward: all three losses plus the trace for distillation."""
    if not model.config.has_decoder:
        raise ConfigurationError("pre-training needs the decoder for the LM loss")
    if model.config.text.n_fusion_layers == 0:
        raise ConfigurationError("pre-training needs at least one fusion layer for the ITM loss")
    if len(batch) < 2:
        raise ContractError("pre-training batches need at least 2 pairs")
    temp = model["itc.temp"]
    tau = float(temp.data)
    trace = forward_collect(model, batch, negative_sampler=make_negative_sampler(tau, rng))
    m_img = m_txt = None
    if momentum is not None:
        m_img, m_txt = momentum.embeddings(batch)
    l_itc = itc_loss(trace.image_embed, trace.text_embed, temp, m_img, m_txt, settings.alpha_soft)
    l_itm = itm_loss(trace.itm_logits, trace.itm_labels)
    l_lm = lm_loss(trace.lm_logits, batch.tokens, settings.prompt, settings.label_smoothing)
    sim = trace.image_embed.data @ trace.text_embed.data.T
    return PretrainLossReport(l_itc, l_itm, l_lm, sim), trace

"""Teacher-to-student transfer losses over hidden states and attention maps.

Only the last layer of each selected component is transferred.  A channel
names an information source:

* ``img``: last vision-encoder layer
* ``text``: last unimodal text-encoder layer
* ``vl_e``: last image-grounded text-encoder layer
* ``vl_d``: last decoder layer

Hidden-state transfer (HR) projects both sides into a common space and
penalises ``1 - cos`` per token.  Attention transfer (AT) applies
``KL(teacher || student)`` to each query row of the selected attention
kinds, head-averaging both sides when head counts differ.
"""

from __future__ import annotations

from typing import Iterable, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from medistill.autodiff import Tensor, functional as F, get_dtype, parameter
from medistill.config import ModelConfig
from medistill.errors import ConfigurationError, ContractError
from medistill.model import AttentionRecord, ForwardTrace, truncated_normal

Channel = Literal["img", "text", "vl_e", "vl_d"]
AttentionKind = Literal["self", "cross"]

CHANNEL_COMPONENT = {"img": "vision", "text": "text", "vl_e": "fused", "vl_d": "decoder"}
PROB_FLOOR = 1e-12


class DistillPlan(BaseModel):
    model_config = ConfigDict(extra="forbid")

    channels: list[Channel] = Field(default_factory=lambda: ["img", "text", "vl_e", "vl_d"])
    attention_kinds: list[AttentionKind] = Field(default_factory=lambda: ["self", "cross"])
    use_hr: bool = True
    use_at: bool = True
    lambda_at: float = Field(default=1.0, ge=0)
    lambda_hr: float = Field(default=1.0, ge=0)
    alpha: float = Field(default=1.0, ge=0)
    layer_mapping: Literal["last"] = "last"
    common_dim: Optional[int] = Field(default=None, gt=0)
    projection_init: Literal["truncated_normal", "identity"] = "truncated_normal"

    @model_validator(mode="after")
    def _check(self):
        if len(set(self.channels)) != len(self.channels):
            raise ValueError(f"plan.channels has duplicates: {self.channels}")
        if self.enabled and not self.channels:
            raise ValueError("plan.channels is empty but distillation is enabled (alpha > 0 with use_hr or use_at)")
        if self.enabled and self.use_at and not self.attention_kinds:
            raise ValueError("plan.attention_kinds is empty but plan.use_at is true")
        return self

    @property
    def enabled(self) -> bool:
        return self.alpha > 0 and (self.use_hr or self.use_at)

    def check_models(self, teacher: ModelConfig, student: ModelConfig) -> None:
        """Geometry contract between teacher and student, checked before training."""
        if "vl_d" in self.channels and not (teacher.has_decoder and student.has_decoder):
            raise ConfigurationError("plan channel vl_d requires a decoder in both teacher and student")
        if "vl_e" in self.channels and (teacher.text.n_fusion_layers == 0 or student.text.n_fusion_layers == 0):
            raise ConfigurationError("plan channel vl_e requires fusion layers in both teacher and student")
        tv, sv = teacher.vision, student.vision
        if (tv.patch_size, tv.image_size, tv.in_channels) != (sv.patch_size, sv.image_size, sv.in_channels):
            raise ContractError(
                f"teacher/student patch geometry differs: teacher (patch {tv.patch_size}, image {tv.image_size}) "
                f"vs student (patch {sv.patch_size}, image {sv.image_size})")
        if teacher.text.vocab_size != student.text.vocab_size:
            raise ContractError(
                f"teacher text.vocab_size={teacher.text.vocab_size} != "
                f"student text.vocab_size={student.text.vocab_size}")


def _channel_dims(config: ModelConfig, channel: str) -> int:
    return config.vision.embed_dim if channel == "img" else config.text.embed_dim


class ProjectionSet:
    """One (teacher, student) linear pair per transferred channel, owned by the distillation run."""

    def __init__(self, params: dict[str, Tensor]):
        self.params = params

    @classmethod
    def build(cls, plan: DistillPlan, teacher: ModelConfig, student: ModelConfig,
              rng: np.random.Generator, std: float = 0.02) -> "ProjectionSet":
        params = {}
        for ch in plan.channels:
            dt, ds = _channel_dims(teacher, ch), _channel_dims(student, ch)
            common = plan.common_dim or dt
            for side, dim in (("teacher", dt), ("student", ds)):
                if plan.projection_init == "identity":
                    if dim != common:
                        raise ConfigurationError(
                            f"identity projection for channel {ch} needs {side} dim {dim} == common_dim {common}")
                    w = np.eye(dim)
                else:
                    w = truncated_normal(rng, (dim, common), std)
                params[f"proj.{ch}.{side}"] = parameter(w.astype(get_dtype()))
        return cls(params)

    def named_parameters(self) -> Iterable[tuple[str, Tensor]]:
        return self.params.items()

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            if k not in state or state[k].shape != v.shape:
                raise ContractError(f"projection state for {k} missing or mis-shaped")
            v.data = state[k].astype(v.data.dtype)

    def pair(self, channel: str) -> tuple[Tensor, Tensor]:
        return self.params[f"proj.{channel}.teacher"], self.params[f"proj.{channel}.student"]


def _token_mask(trace: ForwardTrace, component: str, length: int, batch: int) -> np.ndarray:
    if component in ("text", "fused"):
        return trace.text_mask
    if component == "decoder":
        return trace.decoder_mask
    return np.ones((batch, length), dtype=bool)


def _last_state(trace: ForwardTrace, channel: str) -> Tensor:
    states = trace.states(CHANNEL_COMPONENT[channel])
    if not states:
        raise ConfigurationError(f"distillation channel {channel} requested but absent from the forward trace")
    return states[-1]


def hr_channel_loss(teacher_state: Tensor, student_state: Tensor, w_t: Tensor, w_s: Tensor,
                    mask: np.ndarray) -> Tensor:
    """Mean over valid tokens of ``1 - cos(H_t W_t, H_s W_s)``; the teacher side is stop-gradient."""
    if teacher_state.shape[:2] != student_state.shape[:2]:
        raise ContractError(f"hidden-state token grids differ: teacher {teacher_state.shape[:2]} "
                            f"vs student {student_state.shape[:2]}")
    a = F.linear(F.detach(teacher_state), w_t)
    b = F.linear(student_state, w_s)
    cos = F.cosine_similarity(a, b, axis=-1)
    weights = mask.astype(cos.dtype) / max(int(mask.sum()), 1)
    return F.sum(F.mul(F.sub(1.0, cos), Tensor(weights)))


def hr_loss(teacher_trace: ForwardTrace, student_trace: ForwardTrace, plan: DistillPlan,
            projections: ProjectionSet, channels: Optional[list[str]] = None) -> Tensor:
    """Hidden-representation loss averaged over the plan's channels."""
    channels = list(plan.channels if channels is None else channels)
    if not channels:
        raise ConfigurationError("hr_loss called with no channels")
    terms = []
    for ch in channels:
        t_state = _last_state(teacher_trace, ch)
        s_state = _last_state(student_trace, ch)
        mask = _token_mask(student_trace, CHANNEL_COMPONENT[ch], s_state.shape[1], s_state.shape[0])
        w_t, w_s = projections.pair(ch)
        terms.append(hr_channel_loss(t_state, s_state, w_t, w_s, mask))
    total = terms[0]
    for t in terms[1:]:
        total = F.add(total, t)
    return F.mul(total, 1.0 / len(terms))


def _last_attention(trace: ForwardTrace, component: str, kind: str) -> Optional[AttentionRecord]:
    records = trace.attention_maps(component, kind)
    if not records:
        return None
    return max(records, key=lambda r: r.layer)


def attention_kl(teacher_probs: Tensor, student_probs: Tensor, query_mask: Optional[np.ndarray] = None,
                 component: str = "attention") -> Tensor:
    """Mean over heads and valid query rows of ``KL(teacher || student)``.

    Inputs are ``[B, h, Lq, Lk]`` row-stochastic maps.  With unequal head
    counts both sides are head-averaged first.  Student probabilities are
    floored at 1e-12 before the log.
    """
    if teacher_probs.shape[2:] != student_probs.shape[2:] or teacher_probs.shape[0] != student_probs.shape[0]:
        raise ContractError(f"{component}: attention map shapes differ, teacher {teacher_probs.shape} "
                            f"vs student {student_probs.shape}")
    p = teacher_probs.data
    q = student_probs
    if p.shape[1] != q.shape[1]:
        p = p.mean(axis=1, keepdims=True)
        q = F.mean(q, axis=1, keepdims=True)
    b, h, lq, _ = p.shape
    rows = np.ones((b, lq), dtype=bool) if query_mask is None else np.asarray(query_mask, dtype=bool)
    n_rows = max(int(rows.sum()), 1)
    row_w = (rows[:, None, :, None] / (h * n_rows)).astype(p.dtype)
    weighted = p * row_w
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy_term = float(np.where(p > 0, weighted * np.log(np.where(p > 0, p, 1.0)), 0.0).sum())
    cross = F.sum(F.mul(F.log(F.clamp_min(q, PROB_FLOOR)), Tensor(weighted)))
    return F.sub(entropy_term, cross)


def at_loss(teacher_trace: ForwardTrace, student_trace: ForwardTrace, plan: DistillPlan) -> Tensor:
    """Attention-transfer loss averaged over the selected (component, kind) last-layer maps."""
    terms = []
    for ch in plan.channels:
        component = CHANNEL_COMPONENT[ch]
        for kind in plan.attention_kinds:
            s_rec = _last_attention(student_trace, component, kind)
            t_rec = _last_attention(teacher_trace, component, kind)
            if s_rec is None and t_rec is None:
                continue  # e.g. cross-attention in a unimodal encoder
            if s_rec is None or t_rec is None:
                raise ConfigurationError(f"{component} {kind}-attention present on only one side")
            terms.append(attention_kl(t_rec.probs, s_rec.probs, s_rec.query_mask, f"{component} {kind}-attention"))
    if not terms:
        raise ConfigurationError("at_loss: the plan selects no attention maps present in the traces")
    total = terms[0]
    for t in terms[1:]:
        total = F.add(total, t)
    return F.mul(total, 1.0 / len(terms))


def combined_loss(vlp: Tensor, at: Optional[Tensor], hr: Optional[Tensor], plan: DistillPlan) -> Tensor:
    """``vlp + alpha * (lambda_at * at + lambda_hr * hr)``; a disabled term is left out of the graph."""
    if not plan.enabled:
        return vlp
    distill = None
    if plan.use_at and at is not None:
        distill = F.mul(at, plan.lambda_at)
    if plan.use_hr and hr is not None:
        term = F.mul(hr, plan.lambda_hr)
        distill = term if distill is None else F.add(distill, term)
    if distill is None:
        return vlp
    return F.add(vlp, F.mul(distill, plan.alpha))

"""Training loops: teacher pre-training, student distillation, unimodal proxy tasks, ablation grids.

Every run draws randomness from independent streams derived from the run
seed (model init, batch order, hard-negative sampling, projection init),
so switching distillation off leaves the student's trajectory unchanged.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import statistics
import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Callable, Optional

import numpy as np

from medistill.autodiff import Tensor, functional as F, no_grad, numeric_mode, get_dtype, parameter
from medistill.checkpoint import Checkpoint, atomic_write_text, load_checkpoint, save_checkpoint
from medistill.data import N_CELL_CLASSES, PAD_ID, Split, batch_stream, cell_labels, enumerate_scenes, \
    generate_dataset
from medistill.distill import ProjectionSet, at_loss, combined_loss, hr_loss
from medistill.errors import ConfigurationError, ContractError, DivergenceError, ShapeError
from medistill.manifest import DataConfig, InitStrategy, RunManifest
from medistill.metrics import caption_eval, retrieval_eval
from medistill.model import MEDModel, forward_collect, text_forward, truncated_normal, vision_forward
from medistill.objectives import (IGNORE, MomentumEncoder, PretrainSettings, clamp_temperature, pretrain_losses,
                                  prompt_ids)
from medistill.optim import AdamW, clip_grad_norm, learning_rate

logger = logging.getLogger(__name__)

STREAMS = {"init": 0, "data": 1, "itm": 2, "projections": 3, "proxy": 4}
CSV_COLUMNS = ("cell_id", "seed", "status", "tr@1", "ir@1", "caption_exact", "caption_f1", "tr@1_itm", "ir@1_itm",
               "tr@5", "ir@5", "l_vlp", "l_itc", "l_itm", "l_lm", "l_hr", "l_at")


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, STREAMS[name]])


def stream_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([seed, STREAMS[name]]).generate_state(1)[0])


@lru_cache(maxsize=8)
def _dataset(seed: int, n_train: int, n_eval: int) -> tuple[Split, Split]:
    return generate_dataset(seed, n_train, n_eval)


def load_dataset(cfg: DataConfig) -> tuple[Split, Split]:
    return _dataset(cfg.seed, cfg.n_train, cfg.n_eval)


class MetricLog:
    """In-memory records, mirrored to a JSON-lines file when a path is given."""

    def __init__(self, path: Optional[str] = None):
        self.records: list[dict[str, Any]] = []
        self.path = path
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            open(path, "w").close()

    def write(self, record: dict[str, Any]) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class RunResult:
    model: MEDModel
    manifest: RunManifest
    metrics: dict[str, float]
    log: list[dict[str, Any]]
    history: dict[str, list[float]] = field(default_factory=dict)
    projections: Optional[ProjectionSet] = None
    optimizer: Optional[AdamW] = None
    momentum: Optional[MomentumEncoder] = None

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            model={k: v.copy() for k, v in self.model.state_dict().items()},
            manifest=self.manifest.to_dict(),
            projections=self.projections.state_dict() if self.projections else {},
            optimizer=self.optimizer.state_dict() if self.optimizer else {},
            momentum=self.momentum.state_dict() if self.momentum else {},
            metrics=self.metrics,
        )


def write_run_dir(out_dir: str, result: RunResult) -> None:
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "manifest.json"), result.manifest.to_json())
    atomic_write_text(os.path.join(out_dir, "metrics.json"), json.dumps(result.metrics, indent=2, sort_keys=True))
    save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), result.checkpoint())


# -- initialization ------------------------------------------------------------------

PROXY_PREFIXES = {"vision": ("vision.",), "text": ("embed.", "text.")}


def _proxy_trained(kind: str, name: str) -> bool:
    return name.startswith(PROXY_PREFIXES[kind]) and ".cross." not in name and "ln_cross" not in name


def apply_init_strategy(model: MEDModel, init: InitStrategy) -> None:
    """Copy proxy-pretrained encoder weights into ``model`` where the strategy asks for them."""
    for side in ("vision", "text"):
        if getattr(init, side) != "proxy":
            continue
        path = getattr(init, f"{side}_checkpoint")
        if not path or not os.path.exists(path):
            raise ConfigurationError(f"init.{side}='proxy' but checkpoint {path!r} does not exist")
        ckpt = load_checkpoint(path)
        if ckpt.kind != f"{side}-proxy":
            raise ContractError(f"{path} holds a {ckpt.kind!r} checkpoint, expected '{side}-proxy'")
        state = {k: v for k, v in ckpt.model.items() if _proxy_trained(side, k)}
        try:
            model.load_state_dict(state, strict=True)
        except (KeyError, ShapeError) as exc:
            raise ContractError(f"proxy {side} weights do not fit the model: {exc}") from exc


def build_model(manifest: RunManifest) -> MEDModel:
    model = MEDModel.initialize(manifest.model, stream(manifest.seed, "init"))
    apply_init_strategy(model, manifest.init)
    return model


# -- evaluation ----------------------------------------------------------------------------

def evaluate(model: MEDModel, split: Split, manifest: RunManifest) -> dict[str, float]:
    """Retrieval (ITC, optionally ITM-reranked) and captioning metrics on ``split``."""
    train = manifest.train
    metrics: dict[str, float] = {}
    if len(split) < 2:
        return metrics
    with no_grad():
        metrics.update(retrieval_eval(model, split).as_dict())
        if train.itm_rerank and model.config.text.n_fusion_layers > 0:
            rr = retrieval_eval(model, split, ks=(1,), itm_rerank=train.itm_rerank)
            metrics["tr@1_itm"] = rr.tr[1]
            metrics["ir@1_itm"] = rr.ir[1]
        if model.config.has_decoder:
            cap = caption_eval(model, split, prompt_ids(train.prompt), train.caption_max_len)
            metrics["caption_exact"] = cap["exact_match"]
            metrics["caption_f1"] = cap["token_f1"]
    return metrics


# -- VLP / distillation loop ------------------------------------------------------------------

def _check_finite(step: int, values: dict[str, float], lr: float) -> None:
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise DivergenceError(f"non-finite loss at step {step} (lr={lr:.3g}): {bad}; all terms: {values}")


def _train_med(manifest: RunManifest, teacher: Optional[MEDModel], out_dir: Optional[str],
               data: Optional[tuple[Split, Split]], progress: Optional[Callable[[dict], None]]) -> RunResult:
    train_cfg = manifest.train
    model = build_model(manifest)
    train_split, eval_split = data if data is not None else load_dataset(manifest.data)
    plan = manifest.plan
    distilling = teacher is not None and plan.enabled
    projections = None
    if distilling:
        plan.check_models(teacher.config, model.config)
        projections = ProjectionSet.build(plan, teacher.config, model.config, stream(manifest.seed, "projections"))

    named = list(model.named_parameters())
    if projections is not None:
        named += list(projections.named_parameters())
    optimizer = AdamW(named, manifest.optim)
    momentum = MomentumEncoder(model, train_cfg.momentum, train_cfg.alpha_soft)
    settings = PretrainSettings(train_cfg.alpha_soft, train_cfg.label_smoothing, tuple(prompt_ids(train_cfg.prompt)))
    itm_rng = stream(manifest.seed, "itm")
    batches = batch_stream(train_split, train_cfg.batch_size, stream_seed(manifest.seed, "data"),
                           crop=manifest.data.crop)
    log = MetricLog(os.path.join(out_dir, "log.jsonl") if out_dir else None)
    history: dict[str, list[float]] = {}
    window: dict[str, list[float]] = {}
    params = [p for _, p in named]
    need_fused = "vl_e" in plan.channels
    need_decoder = "vl_d" in plan.channels
    start = time.perf_counter()

    for step in range(train_cfg.steps):
        lr = learning_rate(step, manifest.optim)
        batch = next(batches)
        report, trace = pretrain_losses(model, batch, itm_rng, momentum, settings)
        loss = report.l_vlp
        values = report.scalars()
        if distilling:
            with no_grad():
                t_trace = forward_collect(teacher, batch, None, with_fusion=need_fused, with_decoder=need_decoder)
            hr = hr_loss(t_trace, trace, plan, projections) if plan.use_hr else None
            at = at_loss(t_trace, trace, plan) if plan.use_at else None
            loss = combined_loss(loss, at, hr, plan)
            if hr is not None:
                values["l_hr"] = hr.item()
            if at is not None:
                values["l_at"] = at.item()
            values["l_total"] = loss.item()
        _check_finite(step, values, lr)

        optimizer.zero_grad()
        loss.backward()
        values["grad_norm"] = clip_grad_norm(params, manifest.optim.clip_norm)
        optimizer.step(lr)
        clamp_temperature(model)
        momentum.update(model)

        for k, v in values.items():
            history.setdefault(k, []).append(v)
            window.setdefault(k, []).append(v)
        if (step + 1) % train_cfg.log_every == 0 or step + 1 == train_cfg.steps:
            record = {"step": step + 1, "lr": lr, "elapsed_s": round(time.perf_counter() - start, 3)}
            record.update({k: float(np.mean(v)) for k, v in window.items()})
            record["temperature"] = float(model["itc.temp"].data)
            window = {}
            if train_cfg.eval_every and (step + 1) % train_cfg.eval_every == 0 and step + 1 != train_cfg.steps:
                record.update({f"eval/{k}": v for k, v in evaluate(model, eval_split, manifest).items()})
            log.write(record)
            if progress:
                progress(record)

    metrics = evaluate(model, eval_split, manifest)
    for k in ("l_vlp", "l_itc", "l_itm", "l_lm", "l_hr", "l_at"):
        if history.get(k):
            metrics[k] = float(np.mean(history[k][-min(100, len(history[k])):]))
    log.write({"step": train_cfg.steps, "final": True, **metrics})
    result = RunResult(model, manifest, metrics, log.records, history, projections, optimizer, momentum)
    if out_dir:
        write_run_dir(out_dir, result)
    return result


def pretrain_teacher(manifest: RunManifest, out_dir: Optional[str] = None,
                     data: Optional[tuple[Split, Split]] = None,
                     progress: Optional[Callable[[dict], None]] = None) -> RunResult:
    """Minimise ITC + ITM + LM from the manifest's initialization strategy."""
    if not manifest.model.has_decoder:
        raise ConfigurationError("pre-training requires a decoder (model.decoder.n_layers > 0)")
    with numeric_mode(manifest.mode):
        return _train_med(manifest, None, out_dir, data, progress)


def load_teacher(manifest: RunManifest) -> MEDModel:
    if not manifest.teacher_checkpoint:
        raise ConfigurationError("distillation needs teacher_checkpoint")
    ckpt = load_checkpoint(manifest.teacher_checkpoint)
    if ckpt.kind != "med":
        raise ContractError(f"{manifest.teacher_checkpoint} is a {ckpt.kind!r} checkpoint, not a full model")
    return ckpt.build_model()


def distill_student(manifest: RunManifest, teacher: Optional[MEDModel] = None, out_dir: Optional[str] = None,
                    data: Optional[tuple[Split, Split]] = None,
                    progress: Optional[Callable[[dict], None]] = None) -> RunResult:
    """Train the student on VLP plus the plan's transfer losses against a frozen teacher.

    The teacher is copied and frozen; the caller's teacher object is never
    modified.  With ``plan.alpha == 0`` the run is plain VLP training.
    """
    if teacher is None:
        teacher = load_teacher(manifest)
    t_cfg, s_cfg = teacher.config, manifest.model
    if t_cfg.text.vocab_size != s_cfg.text.vocab_size:
        raise ContractError(f"teacher text.vocab_size={t_cfg.text.vocab_size} does not match "
                            f"student text.vocab_size={s_cfg.text.vocab_size}")
    manifest = manifest.model_copy(update={"teacher": t_cfg.model_copy(deep=True)})
    manifest.plan.check_models(t_cfg, s_cfg)
    with numeric_mode(manifest.mode):
        frozen = teacher.astype(get_dtype())
        for p in frozen.parameters():
            p.requires_grad = False
        return _train_med(manifest, frozen, out_dir, data, progress)


# -- unimodal proxy tasks ---------------------------------------------------------------------

@dataclass
class ProxyResult:
    kind: str
    state: dict[str, np.ndarray]
    metrics: dict[str, float]
    log: list[dict[str, Any]]
    manifest: RunManifest

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(model=self.state, manifest=self.manifest.to_dict(), metrics=self.metrics,
                          kind=f"{self.kind}-proxy")


def _cell_targets(split: Split, idx: np.ndarray) -> np.ndarray:
    scenes = enumerate_scenes()
    return np.stack([cell_labels(scenes[split[int(i)].scene_id]) for i in idx])


def _vision_proxy_logits(model: MEDModel, head: dict[str, Tensor], images) -> Tensor:
    states = vision_forward(model, images).vision_states[-1]
    cls = F.getitem(states, (slice(None), 0))
    logits = F.linear(cls, head["weight"], head["bias"])
    return F.reshape(logits, (-1, N_CELL_CLASSES))


def _text_proxy_logits(model: MEDModel, bias: Tensor, tokens: np.ndarray, mask: np.ndarray) -> Tensor:
    states = text_forward(model, tokens, mask, causal=True).text_states[-1]
    return F.add(F.matmul(states, F.transpose(model["embed.token"], (1, 0))), bias)


def proxy_accuracy(model: MEDModel, head: dict[str, Tensor], split: Split, batch_size: int = 64) -> float:
    correct = total = 0
    with no_grad():
        for s in range(0, len(split), batch_size):
            idx = np.arange(s, min(s + batch_size, len(split)))
            images = np.stack([split[int(i)].image for i in idx])
            pred = _vision_proxy_logits(model, head, images).data.argmax(axis=-1)
            target = _cell_targets(split, idx).reshape(-1)
            correct += int((pred == target).sum())
            total += target.size
    return correct / max(total, 1)


def proxy_perplexity(model: MEDModel, bias: Tensor, split: Split) -> float:
    """exp of the mean next-token cross-entropy over every caption token after BOS (EOS included)."""
    tokens, mask = split.token_matrix()
    with no_grad():
        logits = _text_proxy_logits(model, bias, tokens[:, :-1], mask[:, :-1])
        targets = tokens[:, 1:].copy()
        targets[targets == PAD_ID] = IGNORE
        nll = F.cross_entropy(logits, targets, ignore_index=IGNORE).item()
    return float(math.exp(nll))


def proxy_unimodal_pretrain(manifest: RunManifest, out_dir: Optional[str] = None,
                            data: Optional[tuple[Split, Split]] = None) -> ProxyResult:
    """Unimodal stand-in for ImageNet / BERT initialization.

    vision: classify the content of each of the four grid cells (empty or
    one of 12 shape-colour kinds) from the class token.
    text: next-token prediction on grammar captions with a causal mask.
    """
    cfg = manifest.proxy
    with numeric_mode(manifest.mode):
        model = MEDModel.initialize(manifest.model, stream(manifest.seed, "init"))
        train_split, eval_split = data if data is not None else load_dataset(manifest.data)
        rng = stream(manifest.seed, "proxy")
        dtype = get_dtype()
        if cfg.kind == "vision":
            d = manifest.model.vision.embed_dim
            head = {"weight": parameter(truncated_normal(rng, (d, 4 * N_CELL_CLASSES), 0.02).astype(dtype)),
                    "bias": parameter(np.zeros(4 * N_CELL_CLASSES, dtype=dtype))}
            named = [(n, p) for n, p in model.named_parameters() if _proxy_trained("vision", n)]
            named += [(f"head.{k}", v) for k, v in head.items()]
        else:
            bias = parameter(np.zeros(manifest.model.text.vocab_size, dtype=dtype))
            named = [(n, p) for n, p in model.named_parameters() if _proxy_trained("text", n)]
            named.append(("head.bias", bias))
        optim_cfg = manifest.optim.model_copy(update={"lr": cfg.lr})
        optimizer = AdamW(named, optim_cfg)
        params = [p for _, p in named]
        log = MetricLog(os.path.join(out_dir, "log.jsonl") if out_dir else None)
        seed = stream_seed(manifest.seed, "data")
        step, epoch = 0, 0
        window: list[float] = []
        while step < cfg.steps:
            for idx_batch in _index_batches(len(train_split), cfg.batch_size, seed, epoch):
                if step >= cfg.steps:
                    break
                if cfg.kind == "vision":
                    images = np.stack([train_split[int(i)].image for i in idx_batch])
                    logits = _vision_proxy_logits(model, head, images)
                    loss = F.cross_entropy(logits, _cell_targets(train_split, idx_batch).reshape(-1))
                else:
                    sub = Split([train_split[int(i)] for i in idx_batch])
                    tokens, mask = sub.token_matrix()
                    targets = tokens[:, 1:].copy()
                    targets[targets == PAD_ID] = IGNORE
                    logits = _text_proxy_logits(model, bias, tokens[:, :-1], mask[:, :-1])
                    loss = F.cross_entropy(logits, targets, ignore_index=IGNORE)
                value = loss.item()
                _check_finite(step, {"loss": value}, learning_rate(step, optim_cfg))
                optimizer.zero_grad()
                loss.backward()
                clip_grad_norm(params, optim_cfg.clip_norm)
                optimizer.step(learning_rate(step, optim_cfg))
                window.append(value)
                step += 1
                if step % manifest.train.log_every == 0 or step == cfg.steps:
                    log.write({"step": step, "loss": float(np.mean(window))})
                    window = []
            epoch += 1
        if cfg.kind == "vision":
            metrics = {"accuracy": proxy_accuracy(model, head, eval_split),
                       "train_accuracy": proxy_accuracy(model, head, train_split)}
        else:
            metrics = {"perplexity": proxy_perplexity(model, bias, eval_split),
                       "train_perplexity": proxy_perplexity(model, bias, train_split)}
        log.write({"step": step, "final": True, **metrics})
        state = {n: p.data.copy() for n, p in model.named_parameters() if _proxy_trained(cfg.kind, n)}
        result = ProxyResult(cfg.kind, state, metrics, log.records, manifest)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        atomic_write_text(os.path.join(out_dir, "manifest.json"), manifest.to_json())
        atomic_write_text(os.path.join(out_dir, "metrics.json"), json.dumps(metrics, indent=2, sort_keys=True))
        save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), result.checkpoint())
    return result


def _index_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size) if len(order[i:i + batch_size]) >= 2]


# -- ablation grid -------------------------------------------------------------------------------

OBJECTIVE_LEVELS = {
    "none": {"alpha": 0.0},
    "hr": {"use_hr": True, "use_at": False},
    "at": {"use_hr": False, "use_at": True},
    "hr+at": {"use_hr": True, "use_at": True},
}


def _scaled_dim(dim: int, heads: int, scale: float) -> int:
    head_dim = max(1, round(dim * scale / heads))
    return head_dim * heads


def apply_cell(manifest: RunManifest, cell: dict[str, Any]) -> RunManifest:
    """Manifest for one grid cell; each axis edits a fixed part of the configuration."""
    data = manifest.to_dict()
    for axis, value in cell.items():
        if axis == "fusion_layers":
            data["model"]["text"]["n_fusion_layers"] = int(value)
        elif axis == "encoder_scale":
            for part in ("vision", "text"):
                sec = data["model"][part]
                sec["embed_dim"] = _scaled_dim(sec["embed_dim"], sec["n_heads"], float(value))
            data["model"]["itc_dim"] = None
        elif axis == "channels":
            data["plan"]["channels"] = list(value)
        elif axis == "attention_kinds":
            data["plan"]["attention_kinds"] = list(value)
        elif axis == "objectives":
            if value not in OBJECTIVE_LEVELS:
                raise ConfigurationError(f"grid objectives level {value!r} not in {sorted(OBJECTIVE_LEVELS)}")
            data["plan"].update(OBJECTIVE_LEVELS[value])
        elif axis == "init":
            if value not in ("random", "vision", "text", "both"):
                raise ConfigurationError(f"grid init level {value!r} not in random|vision|text|both")
            data["init"]["vision"] = "proxy" if value in ("vision", "both") else "random"
            data["init"]["text"] = "proxy" if value in ("text", "both") else "random"
        else:
            raise ConfigurationError(f"unknown grid axis {axis!r}")
    from medistill.manifest import manifest_from_dict
    return manifest_from_dict(data)


def cell_id(cell: dict[str, Any]) -> str:
    def fmt(v):
        return "+".join(map(str, v)) if isinstance(v, (list, tuple)) else str(v)
    return ";".join(f"{k}={fmt(v)}" for k, v in cell.items()) or "base"


def grid_cells(axes: dict[str, list[Any]]) -> list[dict[str, Any]]:
    """Cartesian product of the axes in declaration order; an empty grid has no cells."""
    if not axes:
        return []
    cells: list[dict[str, Any]] = [{}]
    for axis, values in axes.items():
        cells = [{**c, axis: v} for c in cells for v in values]
    return cells


@dataclass
class GridResult:
    rows: list[dict[str, Any]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: _csv_value(row.get(k)) for k in CSV_COLUMNS})
        return buf.getvalue()

    def aggregate(self) -> list[dict[str, Any]]:
        """Mean and standard deviation per cell over its successful seeds."""
        out = []
        for cid in dict.fromkeys(r["cell_id"] for r in self.rows):
            rows = [r for r in self.rows if r["cell_id"] == cid and r["status"] == "ok"]
            agg: dict[str, Any] = {"cell_id": cid, "n_ok": len(rows),
                                   "n_failed": sum(1 for r in self.rows if r["cell_id"] == cid) - len(rows)}
            for col in CSV_COLUMNS[3:]:
                vals = [r[col] for r in rows if r.get(col) is not None]
                if vals:
                    agg[f"{col}_mean"] = statistics.fmean(vals)
                    agg[f"{col}_sd"] = statistics.stdev(vals) if len(vals) > 1 else 0.0
            out.append(agg)
        return out

    def values(self, cell: str, metric: str) -> dict[int, float]:
        return {r["seed"]: r[metric] for r in self.rows if r["cell_id"] == cell and r["status"] == "ok"}


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def run_ablation_grid(manifest: RunManifest, out_dir: Optional[str] = None, teacher: Optional[MEDModel] = None,
                      proxy_checkpoints: Optional[dict[int, dict[str, str]]] = None,
                      progress: Optional[Callable[[dict], None]] = None) -> GridResult:
    """Run every (cell, seed); failures are recorded and the grid continues.

    Cells distill from ``teacher`` (or ``manifest.teacher_checkpoint``) when
    one is available and pre-train from scratch otherwise.
    ``proxy_checkpoints`` maps a seed to per-seed proxy checkpoint paths
    (keys ``vision`` / ``text``), overriding ``manifest.init`` paths.
    """
    grid = manifest.grid
    cells = grid_cells(grid.axes)
    if teacher is None and manifest.teacher_checkpoint:
        teacher = load_teacher(manifest)
    rows = []
    for cell in cells:
        cid = cell_id(cell)
        for seed in grid.seeds:
            row: dict[str, Any] = {"cell_id": cid, "seed": seed}
            try:
                cell_manifest = apply_cell(manifest, cell).model_copy(update={"seed": seed, "task": "ablate"})
                if proxy_checkpoints and seed in proxy_checkpoints:
                    paths = proxy_checkpoints[seed]
                    cell_manifest.init.vision_checkpoint = paths.get("vision", cell_manifest.init.vision_checkpoint)
                    cell_manifest.init.text_checkpoint = paths.get("text", cell_manifest.init.text_checkpoint)
                cell_dir = os.path.join(out_dir, "cells", f"{_safe(cid)}__seed{seed}") if out_dir else None
                if teacher is not None:
                    result = distill_student(cell_manifest, teacher, cell_dir)
                else:
                    result = pretrain_teacher(cell_manifest, cell_dir)
                row.update(result.metrics)
                row["status"] = "ok"
            except Exception as exc:  # a failed cell is data, not a crash
                logger.exception("grid cell %s seed %s failed", cid, seed)
                row["status"] = f"failed: {type(exc).__name__}: {exc}"
            rows.append(row)
            if progress:
                progress(row)
    result = GridResult(rows)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        atomic_write_text(os.path.join(out_dir, "results.csv"), result.to_csv())
        atomic_write_text(os.path.join(out_dir, "aggregate.json"), json.dumps(result.aggregate(), indent=2))
    return result


def _safe(text: str) -> str:
    return "".join(c if c.isalnum() or c in "-_=+." else "_" for c in text)

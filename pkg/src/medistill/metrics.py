"""Retrieval recall and caption accuracy on the toy grammar."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from medistill.autodiff import Tensor, functional as F, no_grad
from medistill.data import BOS_ID, EOS_ID, PAD_ID, Split
from medistill.model import (MEDModel, encode_image, encode_text, generate_captions, itm_logits, text_forward,
                             vision_forward)


@dataclass
class RetrievalResult:
    tr: dict[int, float]
    ir: dict[int, float]
    similarity: np.ndarray = field(repr=False)

    def as_dict(self) -> dict[str, float]:
        out = {f"tr@{k}": v for k, v in self.tr.items()}
        out.update({f"ir@{k}": v for k, v in self.ir.items()})
        return out


def ranks_from_scores(scores: np.ndarray) -> np.ndarray:
    """0-based rank of the diagonal entry in each row; ties go to the lower index."""
    order = np.argsort(-scores, axis=1, kind="stable")
    return np.argmax(order == np.arange(scores.shape[0])[:, None], axis=1)


def recall_from_similarity(similarity: np.ndarray, ks: Sequence[int] = (1, 5)) -> RetrievalResult:
    """Pair i is the ground truth for row i (image) and column i (text)."""
    sim = np.asarray(similarity)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"similarity must be square, got {sim.shape}")
    tr_rank = ranks_from_scores(sim)
    ir_rank = ranks_from_scores(sim.T)
    tr = {k: float(np.mean(tr_rank < k)) for k in ks}
    ir = {k: float(np.mean(ir_rank < k)) for k in ks}
    return RetrievalResult(tr, ir, sim)


def embed_split(model: MEDModel, split: Split, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    tokens, mask = split.token_matrix()
    images = split.images()
    img, txt = [], []
    with no_grad():
        for s in range(0, len(split), batch_size):
            img.append(encode_image(model, images[s:s + batch_size])[0].data)
            txt.append(encode_text(model, tokens[s:s + batch_size], mask[s:s + batch_size])[0].data)
    return np.concatenate(img), np.concatenate(txt)


def itm_match_scores(model: MEDModel, image_states: np.ndarray, tokens: np.ndarray, mask: np.ndarray,
                     pairs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """log p(match) for each (image index, text index) pair."""
    out = []
    with no_grad():
        for s in range(0, len(pairs), batch_size):
            chunk = pairs[s:s + batch_size]
            states = Tensor(image_states[chunk[:, 0]])
            fused = text_forward(model, tokens[chunk[:, 1]], mask[chunk[:, 1]], image_states=states,
                                 component="fused").fused_states[-1]
            logp = F.log_softmax(itm_logits(model, fused), axis=-1).data
            out.append(logp[:, 1])
    return np.concatenate(out) if out else np.zeros(0)


def _rerank(base: np.ndarray, k: int, scorer) -> np.ndarray:
    """Replace each row's top-k scores by ITM scores placed above every other entry."""
    n = base.shape[0]
    k = min(k, base.shape[1])
    top = np.argsort(-base, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    cols = top.reshape(-1)
    itm = scorer(rows, cols)
    # shift the ITC scores below every ITM score so the remaining order is kept
    out = base.astype(np.float64) - (np.abs(base).max() + np.abs(itm).max() + 1.0) * 2
    out[rows, cols] = itm
    return out


def retrieval_eval(model: MEDModel, split: Split, ks: Sequence[int] = (1, 5), itm_rerank: Optional[int] = None,
                   batch_size: int = 64) -> RetrievalResult:
    """Recall@k in both directions from the ITC similarity matrix.

    With ``itm_rerank=k`` the top-k candidates of every query are reordered
    by the image-grounded encoder's match probability, which is how the
    fusion layers enter retrieval.
    """
    img, txt = embed_split(model, split, batch_size)
    sim = img @ txt.T
    if not itm_rerank:
        return recall_from_similarity(sim, ks)
    tokens, mask = split.token_matrix()
    images = split.images()
    with no_grad():
        states = np.concatenate([vision_forward(model, images[s:s + batch_size]).vision_states[-1].data
                                 for s in range(0, len(split), batch_size)])
    tr_scores = _rerank(sim, itm_rerank,
                        lambda r, c: itm_match_scores(model, states, tokens, mask, np.stack([r, c], 1)))
    ir_scores = _rerank(sim.T, itm_rerank,
                        lambda r, c: itm_match_scores(model, states, tokens, mask, np.stack([c, r], 1)))
    tr = recall_from_similarity(tr_scores, ks).tr
    ir = recall_from_similarity(ir_scores, ks).tr
    return RetrievalResult(tr, ir, sim)


def strip_specials(ids: Sequence[int]) -> list[int]:
    out = []
    for i in ids:
        i = int(i)
        if i == EOS_ID:
            break
        if i not in (PAD_ID, BOS_ID):
            out.append(i)
    return out


def token_f1(generated: Sequence[int], reference: Sequence[int]) -> float:
    """Bag-of-tokens F1; 0 when either side is empty."""
    if not generated or not reference:
        return 0.0
    overlap = sum((Counter(generated) & Counter(reference)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(generated)
    recall = overlap / len(reference)
    return 2 * precision * recall / (precision + recall)


def score_captions(generated: Sequence[Sequence[int]], references: Sequence[Sequence[int]],
                   prompt: Sequence[int] = ()) -> dict[str, float]:
    """Exact match on whole captions; token F1 on the part after the prompt."""
    n = len(references)
    if n == 0:
        return {"exact_match": 0.0, "token_f1": 0.0}
    p = len(prompt)
    exact, f1 = 0.0, 0.0
    for gen, ref in zip(generated, references):
        gen, ref = strip_specials(gen), strip_specials(ref)
        gen_body = gen[p:] if list(gen[:p]) == list(prompt) else gen
        ref_body = ref[p:] if list(ref[:p]) == list(prompt) else ref
        exact += float(len(gen_body) > 0 and gen == ref)
        f1 += token_f1(gen_body, ref_body)
    return {"exact_match": exact / n, "token_f1": f1 / n}


def caption_eval(model: MEDModel, split: Split, prompt: Sequence[int] = (), max_len: int = 12,
                 batch_size: int = 64) -> dict[str, float]:
    images = split.images()
    generated = []
    for s in range(0, len(split), batch_size):
        generated.extend(generate_captions(model, images[s:s + batch_size], prompt, max_len))
    references = [e.tokens for e in split]
    return score_captions(generated, references, prompt)

"""Beam-search generation, sequence scoring, and closed-set classification.

Hypothesis log-likelihoods are full-sequence scores: the prefix tokens beyond
BOS are scored at initialization, so a finished candidate's log_likelihood
always equals a teacher-forced rescore of its tokens. Scores are raw sums of
chosen log-probabilities with no length normalization, so shorter sequences
are systematically favored.

Works with any model exposing `logits_np(image, tokens)`; the fast batched
paths engage when the model also has `visual_tokens`/`decode_batch`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import vocab

DEFAULT_BEAM_WIDTH = 3
DEFAULT_MAX_LEN = 24


@dataclass
class BeamHypothesis:
    tokens: tuple[int, ...]
    log_likelihood: float
    finished: bool


@dataclass
class ScoredCandidate:
    tokens: list[int]
    log_likelihood: float
    rank: int
    finished: bool


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# Model steppers: map rows of token ids to last-position log-probs


class _ImageStepper:
    """Single image; rows must share a common length at each call."""

    def __init__(self, model, image):
        self.model = model
        self.image = np.asarray(image)
        self._fast = hasattr(model, "visual_tokens") and hasattr(model, "decode_batch")
        if self._fast:
            with T.no_grad():
                self.vis = model.visual_tokens(self.image[None])

    def last_logprobs(self, rows: list[list[int]]) -> np.ndarray:
        if self._fast:
            with T.no_grad():
                logits = self.model.decode_batch(self.vis, np.asarray(rows)).data[:, -1]
        else:
            logits = np.stack([self.model.logits_np(self.image, r)[-1] for r in rows])
        return _log_softmax_rows(logits)

    def full_logprobs(self, tokens: list[int]) -> np.ndarray:
        if self._fast:
            with T.no_grad():
                logits = self.model.decode_batch(self.vis, np.asarray(tokens)[None]).data[0]
        else:
            logits = self.model.logits_np(self.image, tokens)
        return _log_softmax_rows(logits)


class _PromptStepper:
    """Interleaved prompt (B=1 structure shared by all hypothesis rows)."""

    def __init__(self, model, vis_list, seg: list[int], query_image_index: int):
        self.model = model
        self.vis_list = vis_list
        self.seg = list(seg)
        self.query = query_image_index

    def last_logprobs(self, rows: list[list[int]]) -> np.ndarray:
        t = len(rows[0])
        seg = self.seg + [self.query] * (t - len(self.seg))
        with T.no_grad():
            logits = self.model.decode_prompt(self.vis_list, np.asarray(rows),
                                              np.asarray(seg)).data[:, -1]
        return _log_softmax_rows(logits)

    def full_logprobs(self, tokens: list[int]) -> np.ndarray:
        seg = self.seg + [self.query] * (len(tokens) - len(self.seg))
        with T.no_grad():
            logits = self.model.decode_prompt(self.vis_list, np.asarray(tokens)[None],
                                              np.asarray(seg)).data[0]
        return _log_softmax_rows(logits)


def _teacher_forced_score(full_logprobs: np.ndarray, tokens: list[int], start: int = 1) -> float:
    return float(sum(full_logprobs[t - 1, tokens[t]] for t in range(start, len(tokens))))


# ---------------------------------------------------------------------------
# Beam core


def _advance(active, done, lp, beam_width, eos):
    """One length-synchronous step: expand every active hypothesis over the
    whole vocabulary, keep the top `beam_width` candidates by rank; of those,
    EOS candidates retire into the result set and the rest stay active.
    Ordering key everywhere: higher log-likelihood first, then lexicographic
    token order (lower token id wins). With beam_width=1 this is exactly a
    greedy argmax step; with beam_width >= |candidates| nothing is pruned."""
    cands = []
    for (ll, toks), row in zip(active, lp):
        for v in range(len(row)):
            cands.append((ll + float(row[v]), toks + (v,)))
    cands.sort(key=lambda c: (-c[0], c[1]))
    new_active = []
    for ll, toks in cands[:beam_width]:
        if toks[-1] == eos:
            done.append((ll, toks, True))
        else:
            new_active.append((ll, toks))
    done.sort(key=lambda c: (-c[0], c[1]))
    del done[beam_width:]
    return new_active


def _should_stop(active, done, beam_width):
    if not active:
        return True
    if len(done) < beam_width:
        return False
    # extensions strictly dominated by a full result set can be dropped
    return done[-1][0] > active[0][0]


def _finalize(active, done, beam_width):
    # actives surviving to this point hit max_len: force-finished, flagged
    merged = done + [(ll, toks, False) for ll, toks in active]
    merged.sort(key=lambda c: (-c[0], c[1]))
    return [
        ScoredCandidate(tokens=list(toks), log_likelihood=ll, rank=r, finished=fin)
        for r, (ll, toks, fin) in enumerate(merged[:beam_width])
    ]


def _beam_core(stepper, prefix: list[int], beam_width: int, max_len: int,
               eos: int) -> list[ScoredCandidate]:
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if prefix[0] != vocab.BOS:
        raise ValueError("prefix must start with BOS")
    prefix_ll = 0.0
    if len(prefix) > 1:
        prefix_ll = _teacher_forced_score(stepper.full_logprobs(list(prefix)), list(prefix))
    active = [(prefix_ll, tuple(prefix))]
    done: list = []
    for _ in range(max_len):
        lp = stepper.last_logprobs([list(toks) for _, toks in active])
        active = _advance(active, done, lp, beam_width, eos)
        if _should_stop(active, done, beam_width):
            if active and len(done) >= beam_width:
                active = []  # strictly dominated, never part of the result
            break
    return _finalize(active, done, beam_width)


def beam_search(model, image, prefix: list[int], beam_width: int = DEFAULT_BEAM_WIDTH,
                max_len: int = DEFAULT_MAX_LEN, eos: int = vocab.EOS) -> list[ScoredCandidate]:
    """Length-synchronous beam search conditioned on one image.

    Returns at most `beam_width` candidates ranked by log-likelihood;
    hypotheses still unfinished at `max_len` are force-finished and flagged.
    """
    return _beam_core(_ImageStepper(model, image), list(prefix), beam_width, max_len, eos)


def beam_search_prompt(model, vis_list, prefix: list[int], seg: list[int],
                       query_image_index: int, beam_width: int = DEFAULT_BEAM_WIDTH,
                       max_len: int = DEFAULT_MAX_LEN, eos: int = vocab.EOS) -> list[ScoredCandidate]:
    stepper = _PromptStepper(model, vis_list, seg, query_image_index)
    return _beam_core(stepper, list(prefix), beam_width, max_len, eos)


def beam_search_pool(model, images: np.ndarray, prefix: list[int],
                     beam_width: int = DEFAULT_BEAM_WIDTH, max_len: int = DEFAULT_MAX_LEN,
                     eos: int = vocab.EOS) -> list[list[ScoredCandidate]]:
    """Beam search over many images in lockstep, one shared prefix.

    Equivalent to calling beam_search per image, but batches every decoder
    call across all images that still have active hypotheses.
    """
    if prefix[0] != vocab.BOS:
        raise ValueError("prefix must start with BOS")
    n = images.shape[0]
    with T.no_grad():
        vis_all = model.visual_tokens(images).data  # [N, L, d]
        prefix_ids = np.tile(np.asarray(prefix), (n, 1))
        lp0 = _log_softmax_rows(model.decode_batch(T.Tensor(vis_all), prefix_ids).data)
    prefix_ll = [
        float(sum(lp0[i, t - 1, prefix[t]] for t in range(1, len(prefix)))) for i in range(n)
    ]
    active = [[(prefix_ll[i], tuple(prefix))] for i in range(n)]
    done: list[list] = [[] for _ in range(n)]
    for _ in range(max_len):
        rows, owners = [], []
        for i in range(n):
            for _, toks in active[i]:
                rows.append(list(toks))
                owners.append(i)
        if not rows:
            break
        with T.no_grad():
            vis_rows = T.Tensor(vis_all[np.asarray(owners)])
            logits = model.decode_batch(vis_rows, np.asarray(rows)).data[:, -1]
        lp = _log_softmax_rows(logits)
        cursor = 0
        for i in range(n):
            k = len(active[i])
            if k == 0:
                continue
            lp_i = lp[cursor : cursor + k]
            cursor += k
            active[i] = _advance(active[i], done[i], lp_i, beam_width, eos)
            if _should_stop(active[i], done[i], beam_width) and len(done[i]) >= beam_width:
                active[i] = []
    return [_finalize(active[i], done[i], beam_width) for i in range(n)]


# ---------------------------------------------------------------------------
# Scoring


def score_sequence(model, image, tokens: list[int]) -> float:
    """Teacher-forced sum of log P(token_t | tokens_<t, image) for t >= 1."""
    stepper = _ImageStepper(model, image)
    return _teacher_forced_score(stepper.full_logprobs(list(tokens)), list(tokens))


def score_batch(model, images: np.ndarray, rows: list[list[int]],
                predict_from: list[int] | None = None) -> np.ndarray:
    """Batched score_sequence over (image, tokens) pairs; images [N, ...]."""
    if predict_from is None:
        predict_from = [1] * len(rows)
    with T.no_grad():
        per = model.batch_nll(images, rows, predict_from)
        return -per.data


def classify_closed_set(model, image, class_texts: list[list[int]]) -> tuple[int, list[float]]:
    """Argmax of score_sequence over the class name sequences; ties go to the
    lowest class index."""
    if not class_texts:
        raise ValueError("need at least one class")
    scores = [score_sequence(model, image, list(seq)) for seq in class_texts]
    best = int(np.argmax(scores))
    return best, scores


def classify_batch(model, images: np.ndarray, class_texts: list[list[int]],
                   chunk: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Closed-set classification of many images at once -> (indices, scores)."""
    n, c = images.shape[0], len(class_texts)
    scores = np.zeros((n, c))
    with T.no_grad():
        vis_all = model.visual_tokens(images).data
    pairs = [(i, k) for i in range(n) for k in range(c)]
    for lo in range(0, len(pairs), chunk):
        batch = pairs[lo : lo + chunk]
        rows = [list(class_texts[k]) for _, k in batch]
        t_max = max(len(r) for r in rows)
        ids, mask = model.nll_mask(rows, [1] * len(rows), t_max)
        with T.no_grad():
            vis = T.Tensor(vis_all[np.asarray([i for i, _ in batch])])
            lsm = T.log_softmax(model.decode_batch(vis, ids), axis=-1).data
        got = (lsm * mask).sum(axis=(1, 2))
        for (i, k), s in zip(batch, got):
            scores[i, k] = s
    return scores.argmax(axis=1), scores


# ---------------------------------------------------------------------------
# Greedy decoding (fast evaluation path; identical to beam_width=1)


def greedy_decode_batch(model, images: np.ndarray, prefix_rows: list[list[int]],
                        max_len: int = DEFAULT_MAX_LEN, eos: int = vocab.EOS) -> list[list[int]]:
    """Argmax decoding for many (image, prefix) pairs; returns generated
    continuations (without the prefix), each ending at EOS or cut at max_len."""
    n = images.shape[0]
    with T.no_grad():
        vis = model.visual_tokens(images)
    rows = [list(p) for p in prefix_rows]
    out: list[list[int]] = [[] for _ in range(n)]
    alive = list(range(n))
    for _ in range(max_len):
        if not alive:
            break
        t_max = max(len(rows[i]) for i in alive)
        ids = np.full((len(alive), t_max), vocab.PAD, dtype=np.int64)
        for r, i in enumerate(alive):
            ids[r, : len(rows[i])] = rows[i]
        with T.no_grad():
            vis_rows = T.Tensor(vis.data[np.asarray(alive)])
            logits = model.decode_batch(vis_rows, ids).data
        still = []
        for r, i in enumerate(alive):
            nxt = int(np.argmax(logits[r, len(rows[i]) - 1]))
            rows[i].append(nxt)
            out[i].append(nxt)
            if nxt != eos:
                still.append(i)
        alive = still
    return out

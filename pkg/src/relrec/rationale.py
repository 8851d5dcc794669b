"""Assumption construction, attention aggregation, relation prediction,
and ranked rationale reports.

For a query pair (head, tail) the model recalls the top associations of
each side, scores every cross pair of associations with the thresholded
relation posterior, turns surviving posteriors into an assumption vector
(posterior-weighted mix of forward relation embeddings), embeds each
association pair through a tanh projection, aggregates the pairs with a
learned attention, and applies a logistic head.  Each surviving
(association-head, relation, association-tail) candidate is a rationale
scored by attention weight times posterior probability.

`prediction_forward` keeps every intermediate needed by
`prediction_backward`, which implements the full analytic gradient of
the pipeline.  Association membership and survivor sets are discrete
selections; they are treated as constants within a gradient step, and a
frozen `PredictionStructure` can be passed back in to evaluate the loss
as the smooth function the gradient differentiates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .graph import Vocab
from .numerics import sigmoid, stable_softmax
from .params import ModelParams
from .recall import AssociationList, top_associations
from .relational import RelationPosterior, RelationSchema, TripleSet

OWA_MODE = "OWA"
CWA_MODE = "CWA"


@dataclass
class PredictionStructure:
    """Discrete choices of one forward pass: which associations were
    recalled, which cross pairs were formed, and which relations survived
    the NA threshold for each pair."""

    head_assoc: AssociationList
    tail_assoc: AssociationList
    pair_heads: np.ndarray  # (P,) entity ids
    pair_tails: np.ndarray  # (P,)
    survivors: np.ndarray  # (P, n_rel) bool


@dataclass
class PredictionTrace:
    structure: PredictionStructure
    scores: np.ndarray  # (P, n_rel) forward-relation translation scores
    na_scores: np.ndarray  # (P,)
    residual_signs: np.ndarray  # (P, n_rel + 1, d)
    posterior: np.ndarray  # (P, n_rel), exactly zero off-survivors
    na_mass: np.ndarray  # (P,)
    assum_vecs: np.ndarray  # (P, d)
    pair_inputs: np.ndarray  # (P, 3d)
    pair_reprs: np.ndarray  # (P, d_p)
    attn_hidden: np.ndarray  # (P, d_a) tanh of attention hidden layer
    attn_logits: np.ndarray  # (P,)
    attn: np.ndarray  # (P,)
    pooled: np.ndarray  # (d_p,)
    logit: float
    probability: float
    include_na: bool


@dataclass
class AssumptionRecord:
    """One association pair with its surviving-relation posterior, its
    attention weight, and its best-relation rationale score."""

    assoc_head: int
    assoc_tail: int
    top_relation: int | None
    posterior: RelationPosterior
    assum_vec: np.ndarray
    pair_repr: np.ndarray
    attn: float
    score: float


@dataclass
class RationaleEntry:
    head: str
    relation: str
    tail: str
    score: float
    attn: float
    posterior: float
    head_id: int = field(repr=False, default=-1)
    relation_id: int = field(repr=False, default=-1)
    tail_id: int = field(repr=False, default=-1)


@dataclass
class RationaleReport:
    head: str
    tail: str
    relation: str
    mode: str
    probability: float
    rationales: list[RationaleEntry]
    fallback: bool = False

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "head": self.head,
                "tail": self.tail,
                "relation": self.relation,
                "mode": self.mode,
                "probability": self.probability,
                "fallback": self.fallback,
                "rationales": [
                    {
                        "h": r.head,
                        "r": r.relation,
                        "t": r.tail,
                        "score": r.score,
                        "attn": r.attn,
                        "posterior": r.posterior,
                    }
                    for r in self.rationales
                ],
            }
        )

    def format_table(self) -> str:
        lines = [
            f"pair: {self.head} -[{self.relation}]-> {self.tail}",
            f"mode: {self.mode}"
            + ("  (fallback: no kb-matching pair)" if self.fallback else ""),
            f"probability: {self.probability:.6f}",
        ]
        if not self.rationales:
            lines.append("(no rationales)")
            return "\n".join(lines)
        rows = [("rank", "head", "relation", "tail", "score", "attn", "posterior")]
        for rank, r in enumerate(self.rationales, start=1):
            rows.append(
                (
                    str(rank),
                    r.head,
                    r.relation,
                    r.tail,
                    f"{r.score:.6f}",
                    f"{r.attn:.6f}",
                    f"{r.posterior:.6f}",
                )
            )
        widths = [max(len(row[c]) for row in rows) for c in range(len(rows[0]))]
        for row in rows:
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
        return "\n".join(lines)


def assumption_vector(posterior_probs: np.ndarray, params: ModelParams) -> np.ndarray:
    """Posterior-weighted mix of forward relation embeddings.  An empty
    survivor set yields the zero vector."""
    n_rel = params.dims.n_rel
    return np.asarray(posterior_probs) @ params.relation_emb[:n_rel]


def pair_representation(
    params: ModelParams, assoc_head: int, assoc_tail: int, assum_vec: np.ndarray
) -> np.ndarray:
    """tanh of the projected concatenation [head emb; tail emb; assumption]."""
    x = np.concatenate(
        [params.entity_emb[assoc_head], params.entity_emb[assoc_tail], assum_vec]
    )
    return np.tanh(x @ params.pair_weight + params.pair_bias)


def attention_weights(params: ModelParams, pair_reprs: np.ndarray) -> np.ndarray:
    """Softmax over per-pair attention logits v . tanh(W e + b)."""
    hidden = np.tanh(pair_reprs @ params.attn_weight.T + params.attn_bias)
    return stable_softmax(hidden @ params.attn_vector)


def _posterior_grid(
    params: ModelParams,
    pair_heads: np.ndarray,
    pair_tails: np.ndarray,
    frozen_survivors: np.ndarray | None,
    include_na: bool,
):
    """Vectorized thresholded softmax over all pairs at once."""
    dims = params.dims
    rows = np.concatenate([np.arange(dims.n_rel), [dims.na_index]])
    diff = (
        params.entity_emb[pair_heads][:, None, :]
        + params.relation_emb[rows][None, :, :]
        - params.entity_emb[pair_tails][:, None, :]
    )  # (P, n_rel + 1, d)
    signs = np.sign(diff)
    all_scores = -np.abs(diff).sum(axis=2)
    scores = all_scores[:, : dims.n_rel]
    na_scores = all_scores[:, dims.n_rel]
    if frozen_survivors is not None:
        survivors = frozen_survivors
    else:
        survivors = scores > na_scores[:, None]
    masked = np.where(survivors, scores, -np.inf)
    if include_na:
        m = np.maximum(na_scores, masked.max(axis=1, initial=-np.inf))
        exp_fwd = np.exp(masked - m[:, None])
        exp_na = np.exp(na_scores - m)
        z = exp_na + exp_fwd.sum(axis=1)
        posterior = exp_fwd / z[:, None]
        na_mass = exp_na / z
    else:
        m = masked.max(axis=1, initial=-np.inf)
        has_surv = np.isfinite(m)
        m = np.where(has_surv, m, 0.0)
        exp_fwd = np.exp(masked - m[:, None])
        z = exp_fwd.sum(axis=1)
        z_safe = np.where(z > 0, z, 1.0)
        posterior = exp_fwd / z_safe[:, None]
        na_mass = np.zeros_like(z)
    return scores, na_scores, signs, survivors, posterior, na_mass


def prediction_forward(
    params: ModelParams,
    head: int,
    tail: int,
    n_head: int,
    n_tail: int,
    *,
    pairs: tuple[np.ndarray, np.ndarray] | None = None,
    structure: PredictionStructure | None = None,
    include_na: bool = True,
) -> PredictionTrace:
    """Full pipeline forward pass for one query pair.

    By default the pair set is the full cross product of the top n_head
    and top n_tail associations; `pairs` restricts it to an explicit
    (heads, tails) id list.  Passing a `structure` from an earlier trace
    reuses its association lists, pair set, and survivor sets, which
    makes the loss a smooth function of the parameters.
    """
    if structure is not None:
        head_assoc = structure.head_assoc
        tail_assoc = structure.tail_assoc
        pair_heads = structure.pair_heads
        pair_tails = structure.pair_tails
        frozen = structure.survivors
    else:
        head_assoc = top_associations(params, head, n_head)
        tail_assoc = top_associations(params, tail, n_tail)
        if pairs is None:
            pair_heads = np.repeat(head_assoc.entity_ids, len(tail_assoc.entity_ids))
            pair_tails = np.tile(tail_assoc.entity_ids, len(head_assoc.entity_ids))
        else:
            pair_heads = np.asarray(pairs[0], dtype=np.int64)
            pair_tails = np.asarray(pairs[1], dtype=np.int64)
        frozen = None
    if len(pair_heads) == 0:
        raise ValueError("prediction needs at least one association pair")

    scores, na_scores, signs, survivors, posterior, na_mass = _posterior_grid(
        params, pair_heads, pair_tails, frozen, include_na
    )
    if structure is None:
        structure = PredictionStructure(
            head_assoc=head_assoc,
            tail_assoc=tail_assoc,
            pair_heads=pair_heads,
            pair_tails=pair_tails,
            survivors=survivors,
        )
    assum_vecs = posterior @ params.relation_emb[: params.dims.n_rel]
    pair_inputs = np.concatenate(
        [params.entity_emb[pair_heads], params.entity_emb[pair_tails], assum_vecs],
        axis=1,
    )
    pair_reprs = np.tanh(pair_inputs @ params.pair_weight + params.pair_bias)
    attn_hidden = np.tanh(pair_reprs @ params.attn_weight.T + params.attn_bias)
    attn_logits = attn_hidden @ params.attn_vector
    attn = stable_softmax(attn_logits)
    pooled = attn @ pair_reprs
    logit = float(params.out_weight @ pooled + params.out_bias)
    probability = float(sigmoid(logit))
    return PredictionTrace(
        structure=structure,
        scores=scores,
        na_scores=na_scores,
        residual_signs=signs,
        posterior=posterior,
        na_mass=na_mass,
        assum_vecs=assum_vecs,
        pair_inputs=pair_inputs,
        pair_reprs=pair_reprs,
        attn_hidden=attn_hidden,
        attn_logits=attn_logits,
        attn=attn,
        pooled=pooled,
        logit=logit,
        probability=probability,
        include_na=include_na,
    )


def prediction_backward(
    params: ModelParams, trace: PredictionTrace, dlogit: float
) -> dict[str, np.ndarray]:
    """Analytic gradient of the pipeline output logit scaled by `dlogit`,
    holding association membership and survivor sets constant.

    Gradients flow through the logistic head, the attention softmax, the
    tanh pair representations, the assumption vectors, the thresholded
    posterior softmax (whose active set is the NA row plus the frozen
    survivors), and the L1 translation scores, into the entity and
    relation embeddings of the participating association pairs.
    """
    dims = params.dims
    d, n_rel = dims.d, dims.n_rel
    pair_heads = trace.structure.pair_heads
    pair_tails = trace.structure.pair_tails
    attn = trace.attn
    e_repr = trace.pair_reprs

    grads: dict[str, np.ndarray] = {
        "entity_emb": np.zeros_like(params.entity_emb),
        "relation_emb": np.zeros_like(params.relation_emb),
    }
    grads["out_weight"] = dlogit * trace.pooled
    grads["out_bias"] = np.asarray(dlogit, dtype=params.dtype)

    d_pooled = dlogit * params.out_weight  # (d_p,)
    d_repr = attn[:, None] * d_pooled[None, :]  # (P, d_p)
    d_attn = e_repr @ d_pooled  # (P,)
    d_attn_logits = attn * (d_attn - attn @ d_attn)
    grads["attn_vector"] = trace.attn_hidden.T @ d_attn_logits
    d_hidden = (
        d_attn_logits[:, None]
        * params.attn_vector[None, :]
        * (1.0 - trace.attn_hidden**2)
    )
    grads["attn_weight"] = d_hidden.T @ e_repr
    grads["attn_bias"] = d_hidden.sum(axis=0)
    d_repr += d_hidden @ params.attn_weight

    d_pre = d_repr * (1.0 - e_repr**2)  # (P, d_p)
    grads["pair_weight"] = trace.pair_inputs.T @ d_pre
    grads["pair_bias"] = d_pre.sum(axis=0)
    d_inputs = d_pre @ params.pair_weight.T  # (P, 3d)
    d_head_emb = d_inputs[:, :d].copy()
    d_tail_emb = d_inputs[:, d : 2 * d].copy()
    d_assum = d_inputs[:, 2 * d :]

    rel_fwd = params.relation_emb[:n_rel]
    d_post = d_assum @ rel_fwd.T  # (P, n_rel)
    grads["relation_emb"][:n_rel] += trace.posterior.T @ d_assum

    # Softmax over the active set {NA} + survivors; NA receives no direct
    # gradient from the assumption vector but shifts the normalizer.
    inner = (d_post * trace.posterior).sum(axis=1)  # (P,)
    d_scores = trace.posterior * (d_post - inner[:, None])  # zero off-survivors
    d_na = -trace.na_mass * inner
    d_all_scores = np.concatenate([d_scores, d_na[:, None]], axis=1)

    # L1 translation scores: residual u = head + rel - tail, score = -|u|.
    weighted_signs = d_all_scores[:, :, None] * trace.residual_signs
    pair_sign_sum = weighted_signs.sum(axis=1)  # (P, d)
    d_head_emb -= pair_sign_sum
    d_tail_emb += pair_sign_sum
    rel_rows_grad = -weighted_signs.sum(axis=0)  # (n_rel + 1, d)
    grads["relation_emb"][:n_rel] += rel_rows_grad[:n_rel]
    grads["relation_emb"][dims.na_index] += rel_rows_grad[n_rel]

    np.add.at(grads["entity_emb"], pair_heads, d_head_emb)
    np.add.at(grads["entity_emb"], pair_tails, d_tail_emb)
    return grads


def _records_from_trace(trace: PredictionTrace) -> list[AssumptionRecord]:
    records = []
    for p in range(len(trace.structure.pair_heads)):
        survivors = np.flatnonzero(trace.structure.survivors[p])
        posterior = RelationPosterior(
            probs=trace.posterior[p].copy(),
            na_score=float(trace.na_scores[p]),
            na_mass=float(trace.na_mass[p]),
            survivors=survivors,
        )
        top = posterior.top()
        attn = float(trace.attn[p])
        records.append(
            AssumptionRecord(
                assoc_head=int(trace.structure.pair_heads[p]),
                assoc_tail=int(trace.structure.pair_tails[p]),
                top_relation=None if top is None else top[0],
                posterior=posterior,
                assum_vec=trace.assum_vecs[p],
                pair_repr=trace.pair_reprs[p],
                attn=attn,
                score=0.0 if top is None else attn * top[1],
            )
        )
    return records


def predict_relation(
    params: ModelParams,
    head: int,
    tail: int,
    n_head: int,
    n_tail: int,
    *,
    include_na: bool = True,
) -> tuple[float, list[AssumptionRecord]]:
    """Probability that the trained target relation holds between head
    and tail, plus the scored assumption records behind it."""
    trace = prediction_forward(
        params, head, tail, n_head, n_tail, include_na=include_na
    )
    return trace.probability, _records_from_trace(trace)


def extract_rationales(
    records: list[AssumptionRecord],
    target: tuple[int, int, int],
    top_k: int,
    *,
    vocab: Vocab,
    schema: RelationSchema,
    probability: float,
    mode: str = OWA_MODE,
    fallback: bool = False,
) -> RationaleReport:
    """Rank every surviving (association head, relation, association
    tail) candidate by attention weight times posterior probability and
    keep the top_k.  The exact target triple is removed if it appears.
    Ties break deterministically by (head id, tail id, relation id).
    """
    head_id, relation_id, tail_id = target
    candidates = []
    for record in records:
        for k in record.posterior.survivors:
            k = int(k)
            if (record.assoc_head, k, record.assoc_tail) == (
                head_id,
                relation_id,
                tail_id,
            ):
                continue
            candidates.append(
                (
                    record.attn * float(record.posterior.probs[k]),
                    record.assoc_head,
                    record.assoc_tail,
                    k,
                    record.attn,
                    float(record.posterior.probs[k]),
                )
            )
    candidates.sort(key=lambda c: (-c[0], c[1], c[2], c[3]))
    entries = [
        RationaleEntry(
            head=vocab.term_of(h),
            relation=schema.name_of(k),
            tail=vocab.term_of(t),
            score=score,
            attn=attn,
            posterior=post,
            head_id=h,
            relation_id=k,
            tail_id=t,
        )
        for score, h, t, k, attn, post in candidates[:top_k]
    ]
    return RationaleReport(
        head=vocab.term_of(head_id),
        tail=vocab.term_of(tail_id),
        relation=schema.name_of(relation_id),
        mode=mode,
        probability=probability,
        rationales=entries,
        fallback=fallback,
    )


@dataclass
class CwaPair:
    assoc_head: int
    assoc_tail: int
    retrieval: float  # product of the two association probabilities


def cwa_rationales(
    params: ModelParams,
    kb: TripleSet,
    head: int,
    tail: int,
    n_head: int,
    n_tail: int,
) -> list[CwaPair]:
    """Closed-world assumption pair filter: rank all association cross
    pairs by the product of their retrieval probabilities and keep only
    pairs that appear as (head, tail) of some stored kb triple, capped at
    n_head * n_tail.  An empty result signals that no kb triple matched.
    """
    head_assoc = top_associations(params, head, n_head)
    tail_assoc = top_associations(params, tail, n_tail)
    kept = []
    for ha, hp in head_assoc:
        for ta, tp in tail_assoc:
            if kb.has_pair(ha, ta):
                kept.append(CwaPair(assoc_head=ha, assoc_tail=ta, retrieval=hp * tp))
    kept.sort(key=lambda p: (-p.retrieval, p.assoc_head, p.assoc_tail))
    return kept[: n_head * n_tail]


def rationalize_pair(
    params: ModelParams,
    vocab: Vocab,
    schema: RelationSchema,
    head: int,
    tail: int,
    relation: int,
    *,
    n_head: int,
    n_tail: int,
    top_k: int,
    mode: str = OWA_MODE,
    kb: TripleSet | None = None,
    include_na: bool = True,
) -> RationaleReport:
    """Predict and explain one pair in OWA or CWA mode.

    OWA ranks every surviving candidate triple.  CWA restricts the
    assumption pairs to those contained in the kb and reports only kb
    triples (relation taken from the kb); if no association pair matches
    the kb, prediction falls back to the unrestricted pair set and the
    report is flagged with an empty rationale list.
    """
    mode = mode.upper()
    if mode == OWA_MODE:
        probability, records = predict_relation(
            params, head, tail, n_head, n_tail, include_na=include_na
        )
        return extract_rationales(
            records,
            (head, relation, tail),
            top_k,
            vocab=vocab,
            schema=schema,
            probability=probability,
        )
    if mode != CWA_MODE:
        raise ValueError(f"unknown mode {mode!r}; expected OWA or CWA")
    if kb is None:
        raise ValueError("CWA mode needs a kb triple set")
    kept = cwa_rationales(params, kb, head, tail, n_head, n_tail)
    if not kept:
        trace = prediction_forward(
            params, head, tail, n_head, n_tail, include_na=include_na
        )
        return RationaleReport(
            head=vocab.term_of(head),
            tail=vocab.term_of(tail),
            relation=schema.name_of(relation),
            mode=CWA_MODE,
            probability=trace.probability,
            rationales=[],
            fallback=True,
        )
    pair_heads = np.array([p.assoc_head for p in kept], dtype=np.int64)
    pair_tails = np.array([p.assoc_tail for p in kept], dtype=np.int64)
    trace = prediction_forward(
        params,
        head,
        tail,
        n_head,
        n_tail,
        pairs=(pair_heads, pair_tails),
        include_na=include_na,
    )
    records = _records_from_trace(trace)
    candidates = []
    for record in records:
        for k in kb.relations_between(record.assoc_head, record.assoc_tail):
            if k >= schema.n_rel:
                continue  # reverse rows never appear in reports
            if (record.assoc_head, k, record.assoc_tail) == (head, relation, tail):
                continue
            candidates.append(
                (
                    record.attn * float(record.posterior.probs[k]),
                    record.assoc_head,
                    record.assoc_tail,
                    k,
                    record.attn,
                    float(record.posterior.probs[k]),
                )
            )
    candidates.sort(key=lambda c: (-c[0], c[1], c[2], c[3]))
    entries = [
        RationaleEntry(
            head=vocab.term_of(h),
            relation=schema.name_of(k),
            tail=vocab.term_of(t),
            score=score,
            attn=attn,
            posterior=post,
            head_id=h,
            relation_id=k,
            tail_id=t,
        )
        for score, h, t, k, attn, post in candidates[:top_k]
    ]
    return RationaleReport(
        head=vocab.term_of(head),
        tail=vocab.term_of(tail),
        relation=schema.name_of(relation),
        mode=CWA_MODE,
        probability=trace.probability,
        rationales=entries,
    )

"""Relational interaction recognition.

Triples (head, relation, tail) are scored by a translation rule: the
negative L1 distance between head + relation and tail.  A thresholded
softmax turns the forward-relation scores of an entity pair into a
posterior in which every relation scoring at or below the no-relation
(NA) row gets probability exactly zero.  Training uses a sampled softmax
over the gold triple and uniformly corrupted candidates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .graph import GraphFormatError, Vocab, _open_text
from .params import ModelParams

logger = logging.getLogger(__name__)

NA_NAME = "NA"
REVERSE_SUFFIX = "_inv"


@dataclass(frozen=True)
class RelationSchema:
    """Ordered forward relation names.  Row k of the relation table is
    names[k]; row k + n_rel is its reverse; the last row is NA."""

    names: tuple[str, ...]

    def __post_init__(self):
        if not self.names:
            raise ValueError("schema needs at least one relation")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate relation names")
        if NA_NAME in self.names:
            raise ValueError(f"{NA_NAME!r} is reserved for the no-relation row")

    @property
    def n_rel(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(
                f"unknown relation {name!r}; known relations: "
                + ", ".join(self.names)
            ) from None

    def name_of(self, idx: int) -> str:
        if 0 <= idx < self.n_rel:
            return self.names[idx]
        if self.n_rel <= idx < 2 * self.n_rel:
            return self.names[idx - self.n_rel] + REVERSE_SUFFIX
        if idx == 2 * self.n_rel:
            return NA_NAME
        raise IndexError(f"relation index {idx} out of range")


@dataclass
class LabeledPair:
    """A supervision example for one target relation: does `relation`
    hold between head and tail (label 1) or not (label 0)?"""

    head: int
    tail: int
    label: int
    relation: int


@dataclass
class TripleSet:
    """Deduplicated (head, relation, tail) id triples with per-relation
    argument pools derived from the stored triples."""

    triples: list[tuple[int, int, int]]
    augmented: bool = False
    _index: set[tuple[int, int, int]] = field(init=False, repr=False)
    _pair_relations: dict[tuple[int, int], list[int]] = field(init=False, repr=False)

    def __post_init__(self):
        deduped: list[tuple[int, int, int]] = []
        seen: set[tuple[int, int, int]] = set()
        for triple in self.triples:
            t = (int(triple[0]), int(triple[1]), int(triple[2]))
            if t not in seen:
                seen.add(t)
                deduped.append(t)
        self.triples = deduped
        self._index = seen
        self._pair_relations = {}
        for h, r, t in deduped:
            self._pair_relations.setdefault((h, t), []).append(r)

    def __len__(self) -> int:
        return len(self.triples)

    def __contains__(self, triple: tuple[int, int, int]) -> bool:
        return tuple(triple) in self._index

    def relations_between(self, head: int, tail: int) -> list[int]:
        return sorted(self._pair_relations.get((head, tail), ()))

    def has_pair(self, head: int, tail: int) -> bool:
        return (head, tail) in self._pair_relations

    def head_pool(self, relation: int) -> np.ndarray:
        heads = sorted({h for h, r, _ in self.triples if r == relation})
        return np.asarray(heads, dtype=np.int64)

    def tail_pool(self, relation: int) -> np.ndarray:
        tails = sorted({t for _, r, t in self.triples if r == relation})
        return np.asarray(tails, dtype=np.int64)

    def augment_reverse(self, n_rel: int) -> "TripleSet":
        """Add (tail, relation + n_rel, head) for every forward triple."""
        if self.augmented:
            return self
        forward = list(self.triples)
        reverse = [(t, r + n_rel, h) for h, r, t in forward]
        return TripleSet(triples=forward + reverse, augmented=True)


def load_triples_tsv(path: str, vocab: Vocab, schema: RelationSchema) -> TripleSet:
    """Load `head<TAB>relation<TAB>tail` rows.  Unknown terms or relations
    are collected and reported together in one error."""
    triples: list[tuple[int, int, int]] = []
    offenders: list[str] = []
    with _open_text(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise GraphFormatError(
                    f"{path}: line {lineno}: expected 3 tab-separated "
                    f"fields, got {len(fields)}"
                )
            head, relation, tail = fields
            bad = False
            if head not in vocab:
                offenders.append(f"line {lineno}: unknown term {head!r}")
                bad = True
            if tail not in vocab:
                offenders.append(f"line {lineno}: unknown term {tail!r}")
                bad = True
            if relation not in schema.names:
                offenders.append(f"line {lineno}: unknown relation {relation!r}")
                bad = True
            if not bad:
                triples.append(
                    (vocab.id_of(head), schema.index_of(relation), vocab.id_of(tail))
                )
    if offenders:
        raise GraphFormatError(
            f"{path}: {len(offenders)} unresolved name(s):\n  "
            + "\n  ".join(offenders)
        )
    return TripleSet(triples=triples)


def triple_score(params: ModelParams, head: int, relation: int, tail: int) -> float:
    """Translation plausibility: -||entity[head] + rel[relation] - entity[tail]||_1."""
    diff = (
        params.entity_emb[head]
        + params.relation_emb[relation]
        - params.entity_emb[tail]
    )
    return float(-np.abs(diff).sum())


@dataclass
class RelationPosterior:
    """Thresholded relation distribution for one entity pair.

    probs[k] is nonzero only for survivors (forward relations whose score
    strictly exceeds the NA score).  When the NA row is included in the
    normalizer, the survivor probabilities plus the NA mass sum to one.
    """

    probs: np.ndarray
    na_score: float
    na_mass: float
    survivors: np.ndarray

    def top(self) -> tuple[int, float] | None:
        if len(self.survivors) == 0:
            return None
        k = int(np.argmax(self.probs))
        return k, float(self.probs[k])


def posterior_from_scores(
    scores: np.ndarray, na_score: float, include_na: bool = True
) -> tuple[np.ndarray, float, np.ndarray]:
    """Thresholded softmax over forward-relation scores.

    Exactly the relations with scores[k] > na_score survive; the rest get
    probability exactly 0.0.  Survivor scores (and, by default, the NA
    score) are exponentiated with max subtraction and normalized.
    Returns (probs, na_mass, survivor_indices).
    """
    scores = np.asarray(scores, dtype=np.float64)
    survivors = np.flatnonzero(scores > na_score)
    probs = np.zeros_like(scores)
    if len(survivors) == 0:
        return probs, (1.0 if include_na else 0.0), survivors
    m = max(float(scores[survivors].max()), na_score if include_na else -np.inf)
    exp_surv = np.exp(scores[survivors] - m)
    z = exp_surv.sum()
    na_mass = 0.0
    if include_na:
        na_exp = np.exp(na_score - m)
        z += na_exp
        na_mass = float(na_exp / z)
    probs[survivors] = exp_surv / z
    return probs, na_mass, survivors


def relation_posterior(
    params: ModelParams,
    head: int,
    tail: int,
    include_na: bool = True,
) -> RelationPosterior:
    """Posterior over forward relations for one entity pair, with the NA
    row acting as a learned threshold (and, by default, absorbing the
    complementary probability mass)."""
    dims = params.dims
    rows = np.concatenate(
        [np.arange(dims.n_rel), [dims.na_index]]
    )
    diff = (
        params.entity_emb[head][None, :]
        + params.relation_emb[rows]
        - params.entity_emb[tail][None, :]
    )
    scores = -np.abs(diff).sum(axis=1)
    fwd, na = scores[: dims.n_rel], float(scores[dims.n_rel])
    probs, na_mass, survivors = posterior_from_scores(fwd, na, include_na)
    return RelationPosterior(
        probs=probs, na_score=na, na_mass=na_mass, survivors=survivors
    )


def corrupt_triples(
    triple: tuple[int, int, int],
    n_neg: int,
    side: str,
    vocab_size: int,
    rng: np.random.Generator | int,
) -> list[tuple[int, int, int]]:
    """n_neg corrupted copies of `triple` with the chosen side replaced by
    a uniform draw over all other entities.  Duplicates are allowed; the
    original entity on that side never reappears."""
    if side not in ("head", "tail"):
        raise ValueError("side must be 'head' or 'tail'")
    if vocab_size < 2:
        raise ValueError("need at least 2 entities to corrupt a triple")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    head, relation, tail = triple
    gold = head if side == "head" else tail
    draws = rng.integers(0, vocab_size - 1, size=n_neg)
    draws = draws + (draws >= gold)  # skip over the gold entity
    if side == "head":
        return [(int(e), relation, tail) for e in draws]
    return [(head, relation, int(e)) for e in draws]


def relational_loss(
    params: ModelParams,
    triples: list[tuple[int, int, int]],
    n_neg: int,
    seed: int,
) -> tuple[float, dict[str, np.ndarray]]:
    """Sampled-softmax negative log likelihood of each gold triple against
    uniformly corrupted candidates, corrupting the tail side and the head
    side separately, summed over the batch.

    The gold triple is always candidate 0 and is part of the softmax
    denominator.  Gradients follow the L1 translation score: with
    residual u = head + relation - tail, d score = (-sign(u), -sign(u),
    +sign(u)) for (head, relation, tail).
    """
    if not triples:
        raise ValueError("empty triple batch")
    if n_neg < 1:
        raise ValueError("need at least one corruption per triple")
    rng = np.random.default_rng(seed)
    ent = params.entity_emb
    rel = params.relation_emb
    batch = len(triples)
    heads = np.array([t[0] for t in triples], dtype=np.int64)
    rels = np.array([t[1] for t in triples], dtype=np.int64)
    tails = np.array([t[2] for t in triples], dtype=np.int64)

    cand_tails = np.empty((batch, n_neg + 1), dtype=np.int64)
    cand_heads = np.empty((batch, n_neg + 1), dtype=np.int64)
    cand_tails[:, 0] = tails
    cand_heads[:, 0] = heads
    for b, triple in enumerate(triples):
        corrupted_t = corrupt_triples(triple, n_neg, "tail", params.vocab_size, rng)
        corrupted_h = corrupt_triples(triple, n_neg, "head", params.vocab_size, rng)
        cand_tails[b, 1:] = [t for _, _, t in corrupted_t]
        cand_heads[b, 1:] = [h for h, _, _ in corrupted_h]

    grad_entity = np.zeros_like(ent)
    grad_relation = np.zeros_like(rel)
    loss = 0.0
    for cand, fixed, fixed_is_head in (
        (cand_tails, heads, True),
        (cand_heads, tails, False),
    ):
        if fixed_is_head:
            # residual = head + relation - candidate_tail
            base = ent[fixed] + rel[rels]  # (B, d)
            diff = base[:, None, :] - ent[cand]  # (B, C, d)
        else:
            # residual = candidate_head + relation - tail
            base = rel[rels] - ent[fixed]
            diff = ent[cand] + base[:, None, :]
        sign = np.sign(diff)
        scores = -np.abs(diff).sum(axis=2)  # (B, C)
        shifted = scores - scores.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1))
        loss += float((log_z - shifted[:, 0]).sum())
        weight = np.exp(shifted) / np.exp(log_z)[:, None]  # softmax
        weight[:, 0] -= 1.0
        # With residual u, d score/d(head) = d score/d(relation) = -sign(u)
        # and d score/d(tail) = +sign(u).
        weighted_sign = weight[:, :, None] * sign  # (B, C, d)
        summed = weighted_sign.sum(axis=1)  # (B, d)
        np.add.at(grad_relation, rels, -summed)
        flat_cand = cand.reshape(-1)
        flat_sign = weighted_sign.reshape(-1, ent.shape[1])
        if fixed_is_head:
            np.add.at(grad_entity, fixed, -summed)
            np.add.at(grad_entity, flat_cand, flat_sign)
        else:
            np.add.at(grad_entity, fixed, summed)
            np.add.at(grad_entity, flat_cand, -flat_sign)
    return loss, {"entity_emb": grad_entity, "relation_emb": grad_relation}

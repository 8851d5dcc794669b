"""Acceptance gate: eight end-to-end criteria over the full pipeline.

Each test prints one `[acceptance] criterion N <name>: PASS|FAIL` line
directly to the terminal (capture is suspended, so it shows without -s).
Criteria 5-7 share one trained model built by the module fixture.
"""

import json
import time
from types import SimpleNamespace

import numpy as np
import pytest

from relrec.cli import main
from relrec.evaluation import f1_score, generate_synthetic, split_dataset
from relrec.graph import CoocGraph, Vocab, compute_ppmi
from relrec.params import (
    ModelDims,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from relrec.rationale import attention_weights, rationalize_pair
from relrec.recall import association_probability
from relrec.relational import (
    TripleSet,
    posterior_from_scores,
    relational_loss,
    triple_score,
)
from relrec.training import (
    TrainConfig,
    bce_loss,
    grad_check,
    joint_train,
    predict_probabilities,
)

LN_2 = 0.6931471805599453
LN_3 = 1.0986122886681098
TWO_LN_2 = 1.3862943611198906

TARGET_RELATION = 0
N_ASSOC = 16


def _verdict(capsys, number: int, name: str, ok: bool, detail: str) -> None:
    status = "PASS" if ok else "FAIL"
    with capsys.disabled():
        print(f"\n[acceptance] criterion {number} {name}: {status} ({detail})")
    assert ok, f"criterion {number} {name}: {detail}"


@pytest.fixture(scope="module")
def trained():
    """The reference synthetic world and one jointly trained model."""
    world = generate_synthetic(n_entities=300, n_clusters=6, n_rel=4, seed=1)
    ppmi = compute_ppmi(world.graph)
    pairs = world.pairs_by_relation[TARGET_RELATION]
    train_pairs, dev_pairs, test_pairs = split_dataset(pairs, seed=1)
    held_out = {
        (p.head, TARGET_RELATION, p.tail)
        for p in dev_pairs + test_pairs
        if p.label == 1
    }
    kb = TripleSet(
        triples=[t for t in world.triples.triples if t not in held_out]
    )
    config = TrainConfig(
        d=32, seed=1, max_epochs=200, lr=0.01, b1=128, b2=128, b3=32,
        n_assoc=N_ASSOC, patience=10,
    )
    start = time.perf_counter()
    result = joint_train(
        world.graph, ppmi, kb, train_pairs, dev_pairs, config, world.schema
    )
    elapsed = time.perf_counter() - start
    return SimpleNamespace(
        world=world,
        ppmi=ppmi,
        kb=kb,
        config=config,
        result=result,
        elapsed=elapsed,
        train_pairs=train_pairs,
        dev_pairs=dev_pairs,
        test_pairs=test_pairs,
    )


def test_criterion_1_cli_pipeline_produces_table_report(tmp_path, capsys):
    data = tmp_path / "data"
    model = tmp_path / "model.bin"
    splits = tmp_path / "splits"
    codes = [
        main(["synth", "--out", str(data), "--entities", "60", "--clusters",
              "4", "--relations", "2", "--noise", "0.2", "--seed", "7"]),
        main(["train", "--graph", str(data / "graph.tsv"),
              "--triples", str(data / "triples.tsv"),
              "--pairs", str(data / "pairs.tsv"),
              "--out", str(model), "--splits-out", str(splits),
              "--relation", "rel_0", "--dim", "8", "--epochs", "3",
              "--b1", "32", "--b2", "32", "--b3", "32",
              "--n-assoc", "4", "--n-neg", "8", "--seed", "1"]),
        main(["evaluate", "--model", str(model),
              "--pairs", str(splits / "test.tsv")]),
    ]
    evaluate_out = capsys.readouterr().out
    lines = evaluate_out.strip().splitlines()
    metrics = json.loads(lines[-3])
    table_header, table_row = lines[-2], lines[-1]

    head = (splits / "test.tsv").read_text().splitlines()[0].split("\t")
    codes.append(
        main(["rationalize", "--model", str(model), "--head", head[0],
              "--tail", head[1], "--topk", "3"])
    )
    rationale_out = capsys.readouterr().out

    ok = (
        codes == [0, 0, 0, 0]
        and {"relation", "precision", "recall", "f1", "n_pairs"} <= set(metrics)
        and all(col in table_header for col in ("precision", "recall", "F1"))
        and table_row.startswith("rel_0")
        and "rank" in rationale_out
    )
    _verdict(
        capsys,
        1,
        "end-to-end CLI with table report",
        ok,
        f"exit codes {codes}, report row {table_row!r}",
    )


def test_criterion_2_gradient_oracle(capsys):
    start = time.perf_counter()
    results = grad_check()  # |V|=12, d=4, n_rel=3, n_assoc=2, n_neg=5
    elapsed = time.perf_counter() - start
    worst = max(r.max_error for r in results)
    ok = (
        [r.loss_name for r in results] == ["recall", "relational", "prediction"]
        and all(r.passed for r in results)
        and worst <= 1e-4
        and elapsed < 10.0
    )
    _verdict(
        capsys,
        2,
        "gradients match finite differences",
        ok,
        f"max rel err {worst:.2e}, {elapsed:.2f}s",
    )


def test_criterion_3_normalization_suite(capsys):
    dims = ModelDims(d=8, d_p=6, d_a=5, n_rel=3)
    recall_worst = 0.0
    attn_worst = 0.0
    for seed in range(100):
        params = init_params(dims, 30, seed=seed)
        rng = np.random.default_rng(seed)
        probs = association_probability(params, int(rng.integers(0, 30)))
        recall_worst = max(recall_worst, abs(float(probs.sum()) - 1.0))
        reprs = rng.normal(size=(int(rng.integers(1, 9)), dims.d_p))
        attn = attention_weights(params, reprs)
        attn_worst = max(attn_worst, abs(float(attn.sum()) - 1.0))

    rng = np.random.default_rng(123)
    zero_branch_ok = True
    for _ in range(1000):
        scores = rng.normal(scale=3.0, size=6)
        na = float(rng.normal(scale=3.0))
        posterior, na_mass, survivors = posterior_from_scores(scores, na)
        for k in range(6):
            if (posterior[k] == 0.0) != (scores[k] <= na):
                zero_branch_ok = False
        total = float(posterior.sum()) + na_mass
        zero_branch_ok = zero_branch_ok and abs(total - 1.0) <= 1e-9

    ok = recall_worst <= 1e-9 and attn_worst <= 1e-9 and zero_branch_ok
    _verdict(
        capsys,
        3,
        "normalization invariants",
        ok,
        f"recall dev {recall_worst:.1e}, attention dev {attn_worst:.1e}, "
        f"zero-branch exact over 1000 vectors: {zero_branch_ok}",
    )


def test_criterion_4_closed_form_values(capsys):
    posterior, _, _ = posterior_from_scores(np.array([2.0, 0.0]), 1.0)
    posterior_ok = abs(posterior[0] - 0.7311) <= 1e-4 and posterior[1] == 0.0

    dims = ModelDims.square(2, 1)
    params = init_params(dims, 2, seed=0)
    for tensor in params.tensors().values():
        tensor[...] = 0.0
    params.entity_emb[0] = [1.0, 0.0]
    params.context_emb[0] = [0.0, 0.0]
    params.context_emb[1] = [LN_3, 0.0]
    probs = association_probability(params, 0)
    softmax_ok = abs(probs[0] - 0.25) <= 1e-9 and abs(probs[1] - 0.75) <= 1e-9

    bce, _ = bce_loss(np.array([0.5]), np.array([1.0]))
    bce_ok = abs(bce - LN_2) <= 1e-12

    tied = init_params(ModelDims.square(2, 1), 3, seed=0)
    for tensor in tied.tensors().values():
        tensor[...] = 0.0
    relational, _ = relational_loss(tied, [(0, 0, 1)], n_neg=1, seed=0)
    relational_ok = abs(relational - TWO_LN_2) <= 1e-9

    ok = posterior_ok and softmax_ok and bce_ok and relational_ok
    _verdict(
        capsys,
        4,
        "closed-form unit values",
        ok,
        f"posterior {posterior[0]:.6f}, softmax ({probs[0]:.6f}, {probs[1]:.6f}), "
        f"bce {bce:.12f}, relational {relational:.12f}",
    )


def test_criterion_5_synthetic_end_to_end(trained, capsys):
    probs = predict_probabilities(
        trained.result.params, trained.test_pairs, N_ASSOC, N_ASSOC
    )
    labels = np.array([p.label for p in trained.test_pairs], dtype=np.float64)
    precision, recall, f1 = f1_score(probs, labels)

    first_ten = [l.loss_recall for l in trained.result.log[:10]]
    drops = sum(1 for a, b in zip(first_ten, first_ten[1:]) if b < a)
    drop_fraction = drops / max(1, len(first_ten) - 1)

    ok = (
        f1 >= 0.85
        and trained.result.epochs_run <= 200
        and trained.elapsed < 300.0
        and drop_fraction >= 0.9
    )
    _verdict(
        capsys,
        5,
        "synthetic end-to-end training",
        ok,
        f"test F1 {f1:.3f} in {trained.result.epochs_run} epochs / "
        f"{trained.elapsed:.0f}s, early L_n drop fraction {drop_fraction:.2f}",
    )


def test_criterion_6_rationale_fidelity(trained, capsys):
    world = trained.world
    params = trained.result.params
    probs = predict_probabilities(
        params, trained.test_pairs, N_ASSOC, N_ASSOC
    )
    true_positives = [
        p
        for p, prob in zip(trained.test_pairs, probs)
        if p.label == 1 and prob >= 0.5
    ]
    assert true_positives, "no correctly predicted positive test pairs"

    rule_true = 0
    total = 0
    for pair in true_positives:
        report = rationalize_pair(
            params, world.vocab, world.schema, pair.head, pair.tail,
            TARGET_RELATION, n_head=N_ASSOC, n_tail=N_ASSOC, top_k=5,
            mode="owa",
        )
        for entry in report.rationales:
            total += 1
            if world.rule_holds(entry.head_id, entry.relation_id, entry.tail_id):
                rule_true += 1
    owa_fidelity = rule_true / max(1, total)

    kb_triples = set(trained.kb.triples)
    cwa_emitted = 0
    cwa_in_kb = 0
    fallbacks = 0
    for pair in trained.test_pairs:
        report = rationalize_pair(
            params, world.vocab, world.schema, pair.head, pair.tail,
            TARGET_RELATION, n_head=N_ASSOC, n_tail=N_ASSOC, top_k=5,
            mode="cwa", kb=trained.kb,
        )
        if report.fallback:
            fallbacks += 1
            continue
        for entry in report.rationales:
            cwa_emitted += 1
            if (entry.head_id, entry.relation_id, entry.tail_id) in kb_triples:
                cwa_in_kb += 1

    ok = owa_fidelity >= 0.60 and cwa_emitted > 0 and cwa_in_kb == cwa_emitted
    _verdict(
        capsys,
        6,
        "rationale fidelity vs generative rule",
        ok,
        f"OWA {rule_true}/{total} = {owa_fidelity:.3f} over "
        f"{len(true_positives)} true-positive pairs; CWA {cwa_in_kb}/"
        f"{cwa_emitted} kb-contained, {fallbacks} fallbacks",
    )


def test_criterion_7_determinism_and_persistence(trained, tmp_path, capsys):
    meta = {"train": trained.config.to_dict(), "target_relation": "rel_0"}
    first = tmp_path / "first.bin"
    again = tmp_path / "again.bin"
    save_checkpoint(
        str(first), trained.result.params, trained.world.vocab, meta,
        state=trained.result.state,
    )

    retrained = joint_train(
        trained.world.graph, trained.ppmi, trained.kb, trained.train_pairs,
        trained.dev_pairs, trained.config, trained.world.schema,
    )
    save_checkpoint(
        str(again), retrained.params, trained.world.vocab, meta,
        state=retrained.state,
    )
    byte_identical = first.read_bytes() == again.read_bytes()

    reloaded = load_checkpoint(str(first))
    before = predict_probabilities(
        trained.result.params, trained.test_pairs[:25], N_ASSOC, N_ASSOC
    )
    after = predict_probabilities(
        reloaded.params, trained.test_pairs[:25], N_ASSOC, N_ASSOC
    )
    round_trip_delta = float(np.max(np.abs(before - after)))

    ok = byte_identical and round_trip_delta <= 1e-12
    _verdict(
        capsys,
        7,
        "determinism and persistence",
        ok,
        f"identical-seed retrain byte-identical: {byte_identical}, "
        f"round-trip prediction delta {round_trip_delta:.1e}",
    )


def test_criterion_8_invariance_properties(capsys):
    shift_worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        params = init_params(ModelDims.square(6, 2), 20, seed=seed)
        entity = int(rng.integers(0, 20))
        base = association_probability(params, entity)
        query = params.entity_emb[entity]
        shift = float(rng.normal(scale=5.0)) * query / float(query @ query)
        params.context_emb += shift[None, :]
        shifted = association_probability(params, entity)
        shift_worst = max(shift_worst, float(np.max(np.abs(base - shifted))))

    translation_worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        params = init_params(ModelDims.square(6, 3), 20, seed=seed)
        h, t = rng.choice(20, size=2, replace=False)
        r = int(rng.integers(0, 3))
        base = triple_score(params, int(h), r, int(t))
        params.entity_emb += rng.normal(scale=2.0, size=6)[None, :]
        moved = triple_score(params, int(h), r, int(t))
        translation_worst = max(translation_worst, abs(base - moved))

    scaling_worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(2000 + seed)
        n = int(rng.integers(4, 10))
        vocab = Vocab([f"t{i}" for i in range(n)])
        counts = {}
        for _ in range(n * 2):
            i, j = rng.choice(n, size=2, replace=False)
            key = (int(min(i, j)), int(max(i, j)))
            counts[key] = counts.get(key, 0) + int(rng.integers(1, 9))
        factor = int(rng.integers(2, 30))
        ppmi = compute_ppmi(CoocGraph.from_counts(vocab, counts))
        scaled = compute_ppmi(
            CoocGraph.from_counts(vocab, {k: c * factor for k, c in counts.items()})
        )
        for i in range(n):
            ids_a, vals_a = ppmi.row(i)
            ids_b, vals_b = scaled.row(i)
            assert np.array_equal(ids_a, ids_b)
            if len(vals_a):
                scaling_worst = max(
                    scaling_worst, float(np.max(np.abs(vals_a - vals_b)))
                )

    ok = shift_worst <= 1e-12 and translation_worst <= 1e-12 and scaling_worst <= 1e-12
    _verdict(
        capsys,
        8,
        "invariance properties",
        ok,
        f"logit shift {shift_worst:.1e}, translation {translation_worst:.1e}, "
        f"count scaling {scaling_worst:.1e} over 100 cases each",
    )

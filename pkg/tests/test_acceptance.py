"""Acceptance gate: one test per release criterion, numbered and self-reporting.

Each test prints a PASS line with the measured figures when its assertions
hold; under ``pytest -v`` every criterion also shows up as exactly one
PASSED/FAILED line. These tests favour independent re-derivation over reuse:
metric oracles, loss identities, and state-machine properties are recomputed
here from first principles rather than imported from the other test modules.
"""

import contextlib
import io
import math
import random
import time

import numpy as np
import pytest

from ravqa import autodiff as ad
from ravqa import cli
from ravqa import data as dat
from ravqa.annotate import (
    MAX_ATTEMPTS,
    AnnotationStore,
    MockGeneratorClient,
    RecordState,
    ReviewVerdict,
    apply_expert,
    apply_generated,
    apply_generation_failure,
    apply_review,
    record_from_sample,
)
from ravqa.autodiff import Tensor
from ravqa.metrics import bleu, evaluate_model, metric_tokens, rouge_l, rouge_n
from ravqa.model import GatedFusionModel, ModelConfig, nll_loss
from ravqa.strategies import (
    Strategy,
    generate,
    greedy_ids,
    make_target,
    parse_output,
    parse_stage1_rationale,
    stage2_input_text,
    two_stage_generate,
)
from ravqa.training import TrainConfig, fit, fit_two_stage


def _pass(num: int, name: str, detail: str = "") -> None:
    suffix = f" [{detail}]" if detail else ""
    print(f"PASS criterion {num:02d} {name}{suffix}")


# -- 01 gradient integrity -------------------------------------------------------


def test_criterion_01_gradient_integrity():
    """Full-model mean NLL matches central differences on a 2-sample batch."""
    started = time.perf_counter()
    cfg = ModelConfig(vocab_size=32, d=16, n_max=8, m=4, heads=2, image_size=4, seed=11)
    model = GatedFusionModel(cfg)
    r = np.random.default_rng(2)
    batch = []
    for _ in range(2):
        image = r.uniform(size=(4, 4))
        question = list(r.integers(7, 32, size=5))
        prefix = [dat.BOS_ID] + list(r.integers(7, 32, size=4))
        labels = prefix[1:] + [dat.EOS_ID]
        batch.append((question, image, prefix, labels))
    token_count = sum(len(labels) for _, _, _, labels in batch)

    def mean_nll():
        losses = []
        for question, image, prefix, labels in batch:
            trace = model.fuse(question, image)
            logits = model.decode_logits(trace.fused, prefix)
            losses.append(ad.cross_entropy_sum(logits, labels))
        return ad.scale(ad.add_n(losses), 1.0 / token_count)

    report = ad.grad_check(mean_nll, model.params, eps=1e-5, tol=1e-4)
    elapsed = time.perf_counter() - started
    assert report.passed, report
    assert elapsed < 60.0, f"gradient check took {elapsed:.1f}s"
    _pass(1, "gradient integrity",
          f"max rel err {report.max_rel_err:.2e}, {elapsed:.1f}s")


# -- 02 fusion invariants --------------------------------------------------------


def _random_fusion_inputs(seed: int, m_choices=(1, 4, 9)):
    r = np.random.default_rng(seed)
    d, heads = 8, 2
    m = int(r.choice(m_choices))
    side = math.isqrt(m)
    cfg = ModelConfig(vocab_size=16, d=d, n_max=12, m=m, heads=heads,
                      image_size=side * 2, seed=seed)
    model = GatedFusionModel(cfg)
    for name in ("fuse.wq", "fuse.wk", "fuse.wv", "fuse.gate_text", "fuse.gate_visual"):
        model.params[name].data[:] = r.normal(0.0, 0.4, size=d * d)
    n = int(r.integers(1, 10))
    text = Tensor.from_array(r.normal(size=(n, d)))
    image = Tensor.from_array(r.normal(size=(m, d)))
    return model, text, image


def test_criterion_02_fusion_invariants():
    """1000 random draws satisfy the attention and gate interpolation contracts."""
    for seed in range(1000):
        model, text, image = _random_fusion_inputs(seed)
        attended, weights = model.cross_attention(text, image)
        fused, gate = model.gated_fusion(text, attended)
        assert np.abs(weights.nd().sum(axis=1) - 1.0).max() <= 1e-9
        assert (gate.data > 0.0).all() and (gate.data < 1.0).all()
        lo = np.minimum(text.data, attended.data)
        hi = np.maximum(text.data, attended.data)
        assert (fused.data >= lo).all() and (fused.data <= hi).all()

    for seed in range(50):
        model, text, image = _random_fusion_inputs(seed, m_choices=(1,))
        attended, weights = model.cross_attention(text, image)
        assert (weights.data == 1.0).all()
        value_row = (image.nd() @ model.params["fuse.wv"].nd()).ravel()
        assert all((row == value_row).all() for row in attended.nd())

    _pass(2, "fusion invariants", "1000 draws + 50 single-patch draws")


# -- 03 loss consistency ---------------------------------------------------------


def test_criterion_03_loss_consistency():
    """Uniform logits give N*ln(V); the sum is exactly the mean times the count."""
    r = np.random.default_rng(5)
    worst = 0.0
    for _ in range(200):
        n, v = int(r.integers(1, 40)), int(r.integers(2, 50))
        mask = r.uniform(size=n) < 0.7
        if not mask.any():
            mask[r.integers(0, n)] = True
        count = int(mask.sum())
        targets = r.integers(0, v, size=n)

        total, mean = nll_loss(np.full((n, v), r.normal()), targets, mask)
        worst = max(worst, abs(total - count * math.log(v)))
        assert total == pytest.approx(count * math.log(v), abs=1e-9)

        total, mean = nll_loss(r.normal(size=(n, v)), targets, mask)
        assert total == mean * count

    _pass(3, "loss consistency", f"200 draws, worst uniform-logits gap {worst:.1e}")


# -- 04 toy learning -------------------------------------------------------------


def test_criterion_04_toy_learning():
    """Both strategies clear 90% test accuracy; rationales do not degrade it."""
    started = time.perf_counter()
    corpus = dat.synth_generate(1250, seed=0)
    train = [s for s in corpus if s.split == "train"]
    test = [s for s in corpus if s.split == "test"]
    assert (len(train), len(test)) == (1000, 250)
    vocab = dat.build_vocab(train)

    accuracy = {}
    for strategy in ("no-rationale", "explanation"):
        model = GatedFusionModel(ModelConfig(vocab_size=len(vocab), seed=0))
        config = TrainConfig(strategy=strategy, epochs=60, batch_size=32, lr=5e-4, seed=0)
        fit(model, vocab, train, config)
        report, _ = evaluate_model(model, vocab, test, Strategy(strategy))
        accuracy[strategy] = report.closed_accuracy

    elapsed = time.perf_counter() - started
    assert accuracy["no-rationale"] >= 0.90, accuracy
    assert accuracy["explanation"] >= 0.90, accuracy
    assert accuracy["explanation"] >= accuracy["no-rationale"] - 0.02, accuracy
    assert elapsed < 900.0, f"toy learning took {elapsed:.0f}s"
    _pass(4, "toy learning",
          f"no-rationale {accuracy['no-rationale']:.1%}, "
          f"explanation {accuracy['explanation']:.1%}, {elapsed:.0f}s")


# -- 05 two-stage plumbing -------------------------------------------------------


def test_criterion_05_two_stage_plumbing():
    """The stage-1 rationale reaches the stage-2 input and the output verbatim."""
    corpus = dat.synth_generate(250, seed=0)
    train = [s for s in corpus if s.split == "train"]
    test = [s for s in corpus if s.split == "test"]
    assert len(test) == 50
    vocab = dat.build_vocab(train)

    stage1 = GatedFusionModel(ModelConfig(vocab_size=len(vocab), seed=0))
    stage2 = GatedFusionModel(ModelConfig(vocab_size=len(vocab), seed=1))
    config = TrainConfig(strategy="two-stage", epochs=12, batch_size=16, lr=5e-3,
                         stage2_lr=5e-3, stage2_epochs=1, seed=0)
    fit_two_stage(stage1, stage2, vocab, train, config)

    for sample in test:
        ids = greedy_ids(stage1, vocab, sample.question, sample.grid())
        rationale, ok = parse_stage1_rationale(dat.decode(vocab, ids))
        assert ok and rationale, f"stage-1 output unparseable for {sample.id}"
        out = two_stage_generate(stage1, stage2, vocab, sample.question, sample.grid())
        assert out.rationale == rationale
        assert rationale in out.stage2_input
        assert out.stage2_input == stage2_input_text(sample.question, rationale)

    _pass(5, "two-stage plumbing", "50/50 rationales verbatim")


# -- 06 metric oracle equivalence ------------------------------------------------


def _oracle_ngrams(tokens, n):
    return [tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1)]


def _oracle_clipped(cand_grams, ref_grams):
    return sum(min(cand_grams.count(g), ref_grams.count(g)) for g in set(cand_grams))


def _oracle_bleu(cand, ref, max_n):
    if not cand:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        cg, rg = _oracle_ngrams(cand, n), _oracle_ngrams(ref, n)
        if not cg:
            p = 1.0 if not rg else 1e-9
        else:
            clipped = _oracle_clipped(cg, rg)
            p = clipped / len(cg) if clipped else 1e-9
        log_sum += math.log(p)
    brevity = min(1.0, math.exp(1.0 - len(ref) / len(cand)))
    return brevity * math.exp(log_sum / max_n)


def _oracle_f1(overlap, cand_total, ref_total):
    if cand_total == 0 or ref_total == 0:
        return 0.0
    precision, recall = overlap / cand_total, overlap / ref_total
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _oracle_rouge_n(cand, ref, n):
    cg, rg = _oracle_ngrams(cand, n), _oracle_ngrams(ref, n)
    return _oracle_f1(_oracle_clipped(cg, rg), len(cg), len(rg))


def _oracle_lcs(a, b):
    best = 0
    table = {}
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i, j] = table.get((i - 1, j - 1), 0) + 1
            else:
                table[i, j] = max(table.get((i - 1, j), 0), table.get((i, j - 1), 0))
            best = max(best, table[i, j])
    return best


def _oracle_rouge_l(cand, ref):
    return _oracle_f1(_oracle_lcs(cand, ref), len(cand), len(ref))


def test_criterion_06_metric_oracle_equivalence():
    """BLEU-1..4 and ROUGE-1/2/L match a brute-force oracle on 1000 pairs."""
    r = random.Random(13)
    words = ["left", "right", "upper", "lower", "marker", "region", "the", "a", "no"]
    worst = 0.0
    for _ in range(1000):
        cand = [r.choice(words) for _ in range(r.randint(0, 12))]
        ref = [r.choice(words) for _ in range(r.randint(0, 12))]
        cand_text, ref_text = " ".join(cand), " ".join(ref)
        assert metric_tokens(cand_text) == cand
        for n in range(1, 5):
            worst = max(worst, abs(bleu(cand_text, ref_text, n) - _oracle_bleu(cand, ref, n)))
        for n in (1, 2):
            worst = max(worst, abs(rouge_n(cand_text, ref_text, n) - _oracle_rouge_n(cand, ref, n)))
        worst = max(worst, abs(rouge_l(cand_text, ref_text) - _oracle_rouge_l(cand, ref)))
    assert worst <= 1e-12, f"oracle disagreement {worst:.2e}"

    assert bleu("the the the the", "the cat", max_n=1) == pytest.approx(0.25, abs=1e-12)
    assert rouge_l("a b c d", "a c d f") == pytest.approx(0.75, abs=1e-12)
    assert bleu("a b", "a b c d", max_n=2) == pytest.approx(math.exp(-1.0), abs=1e-12)

    _pass(6, "metric oracle equivalence", f"1000 pairs, worst gap {worst:.1e}")


# -- 07 strategy round-trip ------------------------------------------------------


MALFORMED_DECODES = [
    "",
    "no keywords at all",
    "Answer:",
    "Rationale: dangling tail Answer:",
    "Answer: a Answer: b",
    "yes Answer: late keyword",
    "Rationale: swapped Answer:",
]


def test_criterion_07_strategy_round_trip():
    """serialize -> parse is the identity on 1000 keyword-free pairs."""
    r = random.Random(99)
    words = ["flare", "oval", "dense", "clear", "distal", "margin", "mild", "focal"]

    def phrase(k):
        return " ".join(r.choice(words) for _ in range(r.randint(1, k)))

    for _ in range(1000):
        answer, rationale = phrase(3), phrase(8)
        for strategy in (Strategy.NO_RATIONALE, Strategy.EXPLANATION, Strategy.REASONING):
            out = parse_output(strategy, make_target(strategy, answer, rationale))
            assert out.parse_ok and out.answer == answer
            if strategy is not Strategy.NO_RATIONALE:
                assert out.rationale == rationale
        got, ok = parse_stage1_rationale(
            make_target(Strategy.TWO_STAGE, "", rationale, stage=1))
        assert ok and got == rationale
        out = parse_output(Strategy.TWO_STAGE,
                           make_target(Strategy.TWO_STAGE, answer, stage=2))
        assert out.parse_ok and out.answer == answer

    for text in MALFORMED_DECODES:
        for strategy in Strategy:
            out = parse_output(strategy, text)
            assert out.parse_ok is False and out.answer == "" and out.raw == text
        got, ok = parse_stage1_rationale(text)
        assert ok is False and got is None

    _pass(7, "strategy round-trip",
          f"1000 pairs x 4 strategies, {len(MALFORMED_DECODES)} malformed decodes")


# -- 08 annotation state machine -------------------------------------------------


def test_criterion_08_annotation_state_machine():
    """Random verdict walks: escalation only at the attempt cap, approval only
    on a triple pass, and strict export admits only terminal records."""
    r = random.Random(4242)
    base = dat.synth_generate(1, seed=0)[0]
    escalated = approved = 0

    for walk in range(2000):
        rec = record_from_sample(base)
        for step in range(30):
            if rec.state in (RecordState.APPROVED, RecordState.EXPERT_WRITTEN):
                break
            previous = rec
            if rec.state is RecordState.EXPERT_ESCALATED:
                assert rec.attempts == MAX_ATTEMPTS
                rec = apply_expert(rec, f"expert text {walk}")
            elif rec.state is RecordState.PENDING_REVIEW:
                verdict = ReviewVerdict(accurate=r.random() < 0.5,
                                        relevant=r.random() < 0.5,
                                        complete=r.random() < 0.5)
                rec = apply_review(rec, verdict)
                if rec.state is RecordState.APPROVED:
                    approved += 1
                    assert verdict.accurate and verdict.relevant and verdict.complete
                elif rec.state is RecordState.EXPERT_ESCALATED:
                    escalated += 1
                    assert not verdict.approved and rec.attempts == MAX_ATTEMPTS
                else:
                    assert rec.state is RecordState.REGENERATE
                    assert not verdict.approved and rec.attempts < MAX_ATTEMPTS
            elif r.random() < 0.2:
                rec = apply_generation_failure(rec, "transport glitch")
                assert rec.state is previous.state and rec.attempts == previous.attempts
            else:
                rec = apply_generated(rec, f"machine rationale {step}")
                assert rec.state is RecordState.PENDING_REVIEW
            assert 0 <= rec.attempts <= MAX_ATTEMPTS
            assert rec.version > previous.version

    assert escalated > 50 and approved > 50, (escalated, approved)

    store = AnnotationStore()
    samples = dat.synth_generate(6, seed=3)
    store.add_samples(samples)
    client = MockGeneratorClient(seed=0)
    pass_all = ReviewVerdict(accurate=True, relevant=True, complete=True)
    reject = ReviewVerdict(accurate=False, relevant=True, complete=True)

    rec = store.records()[0]  # -> approved
    rec = store.request_generation(rec.id, rec.version, client)
    rec = store.record_review(rec.id, rec.version, pass_all)
    assert rec.state is RecordState.APPROVED
    rec = store.records()[1]  # -> expert_written
    for _ in range(MAX_ATTEMPTS):
        rec = store.request_generation(rec.id, rec.version, client)
        rec = store.record_review(rec.id, rec.version, reject)
    assert rec.state is RecordState.EXPERT_ESCALATED
    rec = store.submit_expert(rec.id, rec.version, "handwritten rationale")
    assert rec.state is RecordState.EXPERT_WRITTEN
    rec = store.records()[2]  # left mid-flight with a rationale
    store.request_generation(rec.id, rec.version, client)

    strict_ids = {s.id for s in store.export_annotated("strict")}
    assert strict_ids == {samples[0].id, samples[1].id}
    permissive_ids = {s.id for s in store.export_annotated("permissive")}
    assert samples[2].id in permissive_ids

    _pass(8, "annotation state machine",
          f"2000 walks, {approved} approvals, {escalated} escalations")


# -- 09 published statistics fixture ---------------------------------------------


def test_criterion_09_fixture_statistics():
    """The stats command reproduces every published benchmark cell exactly."""
    expected = {
        ("R-RAD", "closed"): (300, 1823, 272),
        ("R-RAD", "open"): (267, 1241, 179),
        ("R-SLAKE", "closed"): (545, 1943, 416),
        ("R-SLAKE", "open"): (545, 2976, 645),
        ("R-Path", "closed"): (3361, 9806, 3391),
        ("R-Path", "open"): (3425, 9933, 3364),
    }
    buffer = io.StringIO()
    with contextlib.redirect_stdout(buffer):
        assert cli.main(["stats", "--bundled"]) == 0
    cells = {}
    for line in buffer.getvalue().splitlines()[1:]:
        parts = line.split()
        if len(parts) == 5 and parts[2].isdigit():
            cells[parts[0], parts[1]] = (int(parts[2]), int(parts[3]), int(parts[4]))
    assert cells == expected
    _pass(9, "fixture statistics", "6/6 published cells exact")


# -- 10 determinism ---------------------------------------------------------------


def test_criterion_10_determinism():
    """Same seed, same bits: corpus records, loss curves, greedy generations."""
    first = dat.synth_generate(150, seed=7)
    second = dat.synth_generate(150, seed=7)
    assert first == second

    def short_fit():
        corpus = dat.synth_generate(80, seed=7)
        train = [s for s in corpus if s.split == "train"]
        vocab = dat.build_vocab(train)
        model = GatedFusionModel(ModelConfig(vocab_size=len(vocab), d=16, heads=2, seed=0))
        config = TrainConfig(strategy="explanation", epochs=3, batch_size=8,
                             lr=5e-3, seed=0)
        report = fit(model, vocab, train, config)
        return model, vocab, corpus, report

    model_a, vocab, corpus, report_a = short_fit()
    model_b, _, _, report_b = short_fit()
    assert report_a.epoch_losses == report_b.epoch_losses
    assert report_a.param_hash == report_b.param_hash

    for sample in corpus[:5]:
        out_a = generate(model_a, vocab, Strategy.EXPLANATION, sample.question, sample.grid())
        out_b = generate(model_b, vocab, Strategy.EXPLANATION, sample.question, sample.grid())
        assert out_a.raw_ids == out_b.raw_ids and out_a.raw == out_b.raw

    _pass(10, "determinism", "corpus, loss curve, and generations bitwise equal")

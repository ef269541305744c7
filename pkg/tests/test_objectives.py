import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthquery import autodiff as ad
from depthquery import training as tr
from depthquery.errors import ConfigError, InputError, TrainingError


def t64(x):
    return ad.Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# cross entropy


def test_ce_zero_when_gold_prob_one():
    logits = t64([50.0, 0.0, 0.0])
    assert tr.cross_entropy(logits, "positive").item() == pytest.approx(0.0, abs=1e-12)


def test_ce_uniform_is_log3():
    logits = t64([0.0, 0.0, 0.0])
    assert tr.cross_entropy(logits, 1).item() == pytest.approx(math.log(3.0), abs=1e-9)


def test_ce_closed_form_two_zero_zero():
    # -ln(e^2 / (e^2 + 2)) = ln(1 + 2 e^-2)
    expected = math.log(1.0 + 2.0 * math.exp(-2.0))
    got = tr.cross_entropy(t64([2.0, 0.0, 0.0]), 0).item()
    assert got == pytest.approx(expected, abs=1e-9)


def test_ce_invalid_label():
    with pytest.raises(InputError):
        tr.cross_entropy(t64([0.0, 0.0, 0.0]), "meh")
    with pytest.raises(InputError):
        tr.cross_entropy(t64([0.0, 0.0, 0.0]), 7)


def test_ce_batch_matches_singles():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((4, 3))
    golds = np.array([0, 2, 1, 0])
    batch = tr.cross_entropy_batch(t64(logits), golds).item()
    singles = np.mean([tr.cross_entropy(t64(logits[i]), int(golds[i])).item()
                       for i in range(4)])
    assert batch == pytest.approx(singles, rel=1e-12)


# ---------------------------------------------------------------------------
# regularizers


def test_sparsity_bounds_and_mean():
    assert tr.reg_sparsity(t64(np.zeros(5))).item() == 0.0
    assert tr.reg_sparsity(t64(np.ones(5))).item() == 1.0
    assert tr.reg_sparsity(t64([0.2, 0.4, 0.6, 0.8])).item() == pytest.approx(0.5)


def test_span_mask_zero_when_span_gates_zero():
    w = t64([0.5, 0.9, 0.0, 0.0])
    m = np.array([0.0, 0.0, 1.0, 1.0])
    assert tr.reg_span_mask(w, m).item() == pytest.approx(0.0, abs=1e-12)


def test_span_mask_hand_value():
    w = t64([0.5, 0.9, 0.5, 0.0])
    m = np.array([0.0, 0.0, 1.0, 1.0])
    assert tr.reg_span_mask(w, m).item() == pytest.approx(-math.log(0.5) / 4, abs=1e-6)
    assert tr.reg_span_mask(w, m).item() == pytest.approx(0.1733, abs=1e-4)


def test_span_mask_l1_variant():
    w = t64([0.5, 0.9, 0.5, 0.25])
    m = np.array([0.0, 0.0, 1.0, 1.0])
    assert tr.reg_span_mask(w, m, penalty="l1").item() == pytest.approx(0.1875)


@given(st.floats(0.0, 0.95), st.floats(0.0, 0.049))
@settings(max_examples=50, deadline=None)
def test_span_mask_monotone_in_on_span_gates(base, bump):
    m = np.array([0.0, 1.0, 1.0])
    lo = tr.reg_span_mask(t64([0.7, base, 0.3]), m).item()
    hi = tr.reg_span_mask(t64([0.7, base + bump, 0.3]), m).item()
    assert hi >= lo


def test_gate_entropy_extremes():
    uniform = t64(np.full(3, 1 / 3))
    assert tr.reg_gate_entropy(uniform).item() == pytest.approx(-math.log(3.0), abs=1e-9)
    one_hot = t64([0.0, 0.0, 1.0])
    assert tr.reg_gate_entropy(one_hot).item() == pytest.approx(0.0, abs=1e-9)
    mixed = t64([0.5, 0.25, 0.25])
    expected = 0.5 * math.log(0.5) + 2 * 0.25 * math.log(0.25)
    assert tr.reg_gate_entropy(mixed).item() == pytest.approx(expected, abs=1e-9)
    assert tr.reg_gate_entropy(mixed).item() == pytest.approx(-1.0397, abs=1e-4)


def test_loss_weights_validation():
    with pytest.raises(ConfigError):
        tr.LossWeights(sparsity=-0.1)


# ---------------------------------------------------------------------------
# total loss assembly (uses a real ReadBatch)


def _tiny_read_batch(seed=0, token_sel=True, fusion=True):
    from depthquery import readout as ro
    from depthquery.substrate import DepthSubstrate
    rng = np.random.default_rng(seed)
    reg = ad.ParamRegistry(dtype=np.float64)
    cfg = ro.ReadoutConfig(heads=1, use_token_sel=token_sel,
                           use_gated_fusion=fusion)
    p = ro.init_readout(reg, cfg, 4, 2, rng)
    sub = DepthSubstrate(enhanced=t64(rng.standard_normal((1, 5, 4))),
                         levels=[t64(rng.standard_normal((1, 5, 4)))
                                 for _ in range(2)])
    context = ro.reorganize_context(p, cfg, sub.enhanced)
    queries = [ro.AspectQuery((1, 2)), ro.AspectQuery((4, 4))]
    read = ro.read_aspects(p, cfg, sub, context, queries, np.array([0, 0]))
    return read, reg


def test_total_loss_reduces_to_ce_when_weights_zero():
    read, _ = _tiny_read_batch()
    golds = np.array([0, 2])
    zero = tr.LossWeights(0.0, 0.0, 0.0)
    loss, parts = tr.total_loss(read, golds, zero)
    ce = tr.cross_entropy_batch(read.logits, golds)
    assert loss.item() == pytest.approx(ce.item(), rel=1e-12)
    assert "sparsity" not in parts


def test_total_loss_composes_all_terms():
    read, _ = _tiny_read_batch(seed=1)
    golds = np.array([1, 0])
    weights = tr.LossWeights(sparsity=0.3, span_mask=0.2, gate_entropy=0.1)
    loss, parts = tr.total_loss(read, golds, weights)
    expected = (tr.cross_entropy_batch(read.logits, golds).item()
                + 0.3 * tr.reg_sparsity(read.w).item()
                + 0.2 * tr.reg_span_mask(read.w, read.span_mask).item()
                + 0.1 * tr.reg_gate_entropy(read.g).item())
    assert loss.item() == pytest.approx(expected, rel=1e-10)
    assert math.isfinite(loss.item())


def test_total_loss_skips_regularizers_of_ablated_selectors():
    read, _ = _tiny_read_batch(seed=2, token_sel=False, fusion=False)
    golds = np.array([0, 1])
    weights = tr.LossWeights(sparsity=1.0, span_mask=1.0, gate_entropy=1.0)
    loss, parts = tr.total_loss(read, golds, weights)
    ce = tr.cross_entropy_batch(read.logits, golds)
    assert loss.item() == pytest.approx(ce.item(), rel=1e-12)
    assert set(parts) == {"ce", "total"}


def test_total_loss_gradients_flow_everywhere():
    read, reg = _tiny_read_batch(seed=3)
    loss, _ = tr.total_loss(read, np.array([0, 2]), tr.LossWeights())
    ad.backward(loss)
    with_grad = [name for name, p in reg.params.items() if p.tensor.grad is not None]
    assert len(with_grad) == len(reg.params)


# ---------------------------------------------------------------------------
# optimizer


def test_adamw_zero_grad_zero_decay_keeps_params():
    reg = ad.ParamRegistry(dtype=np.float64)
    w = reg.create("w", np.array([1.0, -2.0]))
    opt = tr.AdamW(reg, lr=0.1, weight_decay=0.0)
    w.grad = np.zeros(2)
    opt.step()
    npt.assert_array_equal(w.data, [1.0, -2.0])


def test_adamw_single_step_hand_oracle():
    reg = ad.ParamRegistry(dtype=np.float64)
    w = reg.create("w", np.array([1.0]))
    opt = tr.AdamW(reg, lr=0.1, weight_decay=0.1)
    w.grad = np.array([0.5])
    opt.step()
    m_hat = 0.5                        # (0.1 * 0.5) / (1 - 0.9)
    v_hat = 0.25                       # (0.001 * 0.25) / (1 - 0.999)
    adaptive = m_hat / (math.sqrt(v_hat) + 1e-8)
    expected = 1.0 - 0.1 * (adaptive + 0.1 * 1.0)
    assert w.data[0] == pytest.approx(expected, rel=1e-12)


def test_adamw_skips_parameters_without_grad():
    reg = ad.ParamRegistry(dtype=np.float64)
    w = reg.create("w", np.array([3.0]))
    opt = tr.AdamW(reg, lr=0.1, weight_decay=0.5)
    opt.step()
    npt.assert_array_equal(w.data, [3.0])


def test_adamw_raises_on_nan_naming_parameter():
    reg = ad.ParamRegistry(dtype=np.float64)
    w = reg.create("layer.w", np.array([1.0]))
    w.grad = np.array([np.nan])
    opt = tr.AdamW(reg)
    with pytest.raises(TrainingError, match="layer.w"):
        opt.step()


def test_clip_scales_exactly_when_norm_exceeds_bound():
    reg = ad.ParamRegistry(dtype=np.float64)
    a = reg.create("a", np.zeros(2))
    b = reg.create("b", np.zeros(1))
    a.grad = np.array([3.0, 0.0])
    b.grad = np.array([4.0])
    norm = tr.clip_gradients(reg, 1.0)
    assert norm == pytest.approx(5.0)
    total = math.sqrt((a.grad ** 2).sum() + (b.grad ** 2).sum())
    assert total == pytest.approx(1.0, rel=1e-12)
    # under the bound, gradients are untouched
    a.grad = np.array([0.3, 0.0])
    b.grad = np.array([0.4])
    tr.clip_gradients(reg, 1.0)
    npt.assert_allclose(a.grad, [0.3, 0.0])


# ---------------------------------------------------------------------------
# evaluation metrics


def test_evaluate_all_correct():
    labels = ["positive", "neutral", "negative"] * 2
    report = tr.evaluate(labels, labels)
    assert report.accuracy == 1.0
    assert report.macro_f1 == 1.0


def test_evaluate_hand_confusion_case():
    golds = ["positive", "positive", "negative", "negative"]
    preds = ["positive", "negative", "negative", "negative"]
    report = tr.evaluate(preds, golds)
    assert report.accuracy == pytest.approx(0.75)
    assert report.f1("positive") == pytest.approx(2 / 3)
    assert report.f1("negative") == pytest.approx(0.8)
    assert report.f1("neutral") == 0.0
    assert report.macro_f1 == pytest.approx((2 / 3 + 0.8 + 0.0) / 3)
    assert report.macro_f1 == pytest.approx(0.4889, abs=1e-4)
    npt.assert_array_equal(report.confusion.sum(axis=1),
                           [2, 0, 2])  # row sums are gold counts


def test_evaluate_order_invariance():
    rng = np.random.default_rng(1)
    golds = [tr.LABELS[i] for i in rng.integers(0, 3, size=50)]
    preds = [tr.LABELS[i] for i in rng.integers(0, 3, size=50)]
    base = tr.evaluate(preds, golds)
    perm = rng.permutation(50)
    permuted = tr.evaluate([preds[i] for i in perm], [golds[i] for i in perm])
    assert base.accuracy == permuted.accuracy
    assert base.macro_f1 == permuted.macro_f1


def test_evaluate_rejects_length_mismatch():
    with pytest.raises(InputError):
        tr.evaluate(["positive"], ["positive", "negative"])


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)),
                min_size=1, max_size=60))
@settings(max_examples=60, deadline=None)
def test_evaluate_matches_independent_confusion_oracle(pairs):
    golds = [tr.LABELS[g] for g, _ in pairs]
    preds = [tr.LABELS[p] for _, p in pairs]
    report = tr.evaluate(preds, golds)
    # oracle: naive counting loops
    f1s = []
    for cls in tr.LABELS:
        tp = sum(1 for g, p in zip(golds, preds) if g == cls and p == cls)
        fp = sum(1 for g, p in zip(golds, preds) if g != cls and p == cls)
        fn = sum(1 for g, p in zip(golds, preds) if g == cls and p != cls)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    acc = sum(1 for g, p in zip(golds, preds) if g == p) / len(pairs)
    assert report.accuracy == pytest.approx(acc)
    assert report.macro_f1 == pytest.approx(float(np.mean(f1s)))


# ---------------------------------------------------------------------------
# paired t-test


def test_paired_t_reproduces_reference_statistics():
    full = [81.22, 81.73, 81.71]
    enc = [75.36, 75.18, 74.55]
    res = tr.paired_t_test(full, enc)
    assert res.delta_mean == pytest.approx(6.523, abs=1e-3)
    assert res.t == pytest.approx(17.38, abs=0.02)
    assert res.p == pytest.approx(0.0033, abs=0.0003)
    assert res.significant and not res.degenerate


def test_paired_t_identical_lists_degenerate():
    res = tr.paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert res.degenerate
    assert res.delta_mean == 0.0
    assert res.t == 0.0


def test_paired_t_constant_positive_shift_degenerate_infinite():
    res = tr.paired_t_test([2.0, 3.0], [1.0, 2.0])
    assert res.degenerate and res.t == math.inf and res.p == 0.0


def test_paired_t_antisymmetry():
    a = [70.0, 72.0, 74.5]
    b = [68.0, 71.5, 70.0]
    ab = tr.paired_t_test(a, b)
    ba = tr.paired_t_test(b, a)
    assert ab.delta_mean == pytest.approx(-ba.delta_mean)
    assert ab.t == pytest.approx(-ba.t)
    assert ab.p == pytest.approx(ba.p)


def test_paired_t_input_validation():
    with pytest.raises(InputError):
        tr.paired_t_test([1.0], [2.0])
    with pytest.raises(InputError):
        tr.paired_t_test([1.0, 2.0], [1.0])

"""
Unit tests for losses.py
"""

import logging
import math

import numpy as np
import pytest

import tensor_core as tc
from losses import (
    Affine,
    ClassifierParams,
    SclConfig,
    UclParams,
    classify,
    cross_entropy,
    modality_ucl,
    scl_loss,
    supcon_loss,
    total_loss,
    ucl_loss,
)
from tensor_core import ShapeMismatchError, Tensor


def _selector(in_width, out_width):
    """Affine map that copies the first ``out_width`` input columns."""
    w = np.zeros((in_width, out_width))
    w[:out_width, :out_width] = np.eye(out_width)
    return Affine(w=tc.parameter(w), b=tc.zeros((out_width,)))


def _supcon_anchor_terms(samples, labels, tau):
    """Brute-force SupCon term of every anchor that has a positive, by explicit double loop."""
    c = samples / np.linalg.norm(samples, axis=1, keepdims=True)
    terms = {}
    for i in range(len(c)):
        positives = [p for p in range(len(c)) if p != i and labels[p] == labels[i]]
        if not positives:
            continue
        denom = sum(math.exp(c[i] @ c[a] / tau) for a in range(len(c)) if a != i)
        terms[i] = -sum(math.log(math.exp(c[i] @ c[p] / tau) / denom) for p in positives) / len(positives)
    return terms


def _supcon_loop(samples, labels, tau):
    terms = _supcon_anchor_terms(samples, labels, tau)
    return sum(terms.values()) / len(terms)


def test_uniform_scores_give_log_batch_size(rng):
    """Identical modality features make every score equal, so the loss is ln B."""
    for batch in (2, 4, 7):
        fused = Tensor(rng.standard_normal((batch, 8)))
        features = Tensor(np.tile(rng.standard_normal(4), (batch, 1)))
        loss = modality_ucl(fused, features, Affine.init(rng, 8, 4))
        assert loss.item() == pytest.approx(math.log(batch), abs=1e-9)


def test_aligned_predictions_closed_form():
    """Each prediction aligned with its own feature and orthogonal to the rest gives -log(e / (e + 3))."""
    features = np.eye(4)
    fused = np.hstack([np.eye(4), np.zeros((4, 4))])
    loss = modality_ucl(Tensor(fused), Tensor(features), _selector(8, 4))
    assert loss.item() == pytest.approx(-math.log(math.e / (math.e + 3)), abs=1e-12)


def test_ucl_is_non_negative(rng):
    """Random instances never give a negative InfoNCE value."""
    for batch in range(2, 9):
        fused, feats = Tensor(rng.standard_normal((batch, 6))), Tensor(rng.standard_normal((batch, 3)))
        loss = modality_ucl(fused, feats, Affine.init(rng, 6, 3))
        assert loss.item() >= 0.0


def test_ucl_decreases_as_matched_score_grows():
    """Raising one matched similarity with all other similarities fixed lowers the loss."""
    features = np.eye(4)[:3]
    values = []
    for cosine in (0.2, 0.5, 0.9):
        fused = np.zeros((3, 8))
        fused[:, :4] = np.eye(4)[:3]
        fused[0, :4] = [cosine, 0.0, 0.0, math.sqrt(1 - cosine**2)]
        values.append(modality_ucl(Tensor(fused), Tensor(features), _selector(8, 4)).item())
    assert values[0] > values[1] > values[2]


def test_ucl_single_utterance_is_skipped(rng, caplog):
    """B < 2 leaves no negatives: zero loss and a warning."""
    with caplog.at_level(logging.WARNING, logger="losses"):
        loss = modality_ucl(Tensor(rng.standard_normal((1, 8))), Tensor(rng.standard_normal((1, 4))), Affine.init(rng, 8, 4))
    assert loss.item() == 0.0
    assert "UCL skipped" in caplog.text


def test_ucl_loss_sums_modalities(rng):
    """The total is the sum of the per-modality terms."""
    params = UclParams.init(rng, 8, 4)
    fused = Tensor(rng.standard_normal((5, 8)))
    features = {m: Tensor(rng.standard_normal((5, 4))) for m in ("text", "audio", "visual")}
    total, terms = ucl_loss(fused, features, params)
    assert set(terms) == {"text", "audio", "visual"}
    assert total.item() == pytest.approx(sum(terms.values()), abs=1e-12)


def test_ucl_params_for_modality_subset(rng):
    """Only the requested predictors are built; asking for a missing one raises KeyError."""
    params = UclParams.init(rng, 8, 4, modalities=("text", "audio"))
    assert params.visual is None
    with pytest.raises(KeyError):
        params.predictor("visual")
    assert set(params.parameters()) == {"text.w", "text.b", "audio.w", "audio.b"}


def test_scl_two_identical_samples_is_zero():
    """Two same-label samples with identical features: the only candidate is the positive."""
    features = Tensor(np.array([[1.0, 2.0], [1.0, 2.0]]))
    assert supcon_loss(features, [1, 1], tau=1.0).item() == pytest.approx(0.0, abs=1e-12)
    cfg = SclConfig(tau=1.0, projection=_selector(4, 2))
    loss = scl_loss(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[1.0, 2.0, 5.0, 5.0]])), [0], cfg)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_scl_matches_hand_set_unit_vectors():
    """Four unit vectors in two classes at tau=0.5 agree with the double-loop oracle."""
    samples = np.array([[1.0, 0.0], [0.8, 0.6], [0.0, 1.0], [-0.6, 0.8]])
    labels = [0, 0, 1, 1]
    loss = supcon_loss(Tensor(samples), labels, tau=0.5)
    assert loss.item() == pytest.approx(_supcon_loop(samples, labels, 0.5), abs=1e-12)


def test_scl_matches_oracle_on_random_instances(rng):
    """scl_loss over [S_t; P(X)] equals the double loop for every 2B <= 12."""
    for batch in range(2, 7):
        text = rng.standard_normal((batch, 4))
        fused = rng.standard_normal((batch, 8))
        labels = rng.integers(0, 3, size=batch)
        cfg = SclConfig(tau=0.5, projection=Affine.init(rng, 8, 4))
        samples = np.vstack([text, cfg.projection(Tensor(fused)).data])
        expected = _supcon_loop(samples, np.concatenate([labels, labels]), 0.5)
        assert scl_loss(Tensor(text), Tensor(fused), labels, cfg).item() == pytest.approx(expected, abs=1e-10)


def test_scl_averages_over_anchors_with_positives(rng):
    """The loss is the mean of the per-anchor terms; anchors without a positive are left out."""
    samples = rng.standard_normal((7, 4))
    labels = np.array([0, 0, 1, 1, 1, 2, 0])
    terms = _supcon_anchor_terms(samples, labels, 0.3)
    assert sorted(terms) == [0, 1, 2, 3, 4, 6]

    loss = supcon_loss(Tensor(samples), labels, 0.3).item()
    assert loss == pytest.approx(np.mean(list(terms.values())), abs=1e-12)


def test_scl_is_permutation_invariant(rng):
    """Reordering samples together with their labels leaves the loss unchanged."""
    samples = rng.standard_normal((8, 4))
    labels = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    perm = rng.permutation(8)
    a = supcon_loss(Tensor(samples), labels, 0.07).item()
    b = supcon_loss(Tensor(samples[perm]), labels[perm], 0.07).item()
    assert a == pytest.approx(b, abs=1e-10)
    assert a >= 0.0


def test_scl_without_positives_is_skipped(rng, caplog):
    """All-distinct labels give zero loss and a warning."""
    with caplog.at_level(logging.WARNING, logger="losses"):
        loss = supcon_loss(Tensor(rng.standard_normal((3, 4))), [0, 1, 2], 0.07)
    assert loss.item() == 0.0
    assert "SCL skipped" in caplog.text


def test_scl_text_only_and_invalid_settings(rng):
    """Without fused features SCL runs over the text rows; bad temperatures and shapes are rejected."""
    text = rng.standard_normal((4, 4))
    labels = [0, 0, 1, 1]
    cfg = SclConfig(tau=0.5)
    assert scl_loss(Tensor(text), None, labels, cfg).item() == pytest.approx(_supcon_loop(text, labels, 0.5), abs=1e-12)
    with pytest.raises(ValueError):
        SclConfig(tau=0.0)
    with pytest.raises(ValueError):
        scl_loss(Tensor(text), Tensor(rng.standard_normal((4, 8))), labels, cfg)
    with pytest.raises(ShapeMismatchError):
        scl_loss(Tensor(text), None, [0, 1], cfg)


def test_classify_zero_weights_is_uniform(rng):
    """Zero weights and bias give a uniform distribution and predict class 0."""
    head = ClassifierParams(head=Affine.init(rng, 12, 3, zero=True))
    logits, predictions = classify(Tensor(rng.standard_normal((4, 12))), head)
    np.testing.assert_allclose(tc.softmax(logits, axis=1).data, np.full((4, 3), 1 / 3), rtol=0, atol=1e-15)
    assert predictions.tolist() == [0, 0, 0, 0]


def test_classify_shift_invariance_and_softmax(rng):
    """A constant added to every logit keeps predictions; probabilities match a direct softmax."""
    head = ClassifierParams.init(rng, 12, 3)
    fusion = Tensor(rng.standard_normal((5, 12)))
    logits, predictions = classify(fusion, head)
    head.head.b.data += 7.5
    _, shifted = classify(fusion, head)
    assert shifted.tolist() == predictions.tolist()

    raw = logits.data
    expected = np.exp(raw - raw.max(axis=1, keepdims=True))
    expected /= expected.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(tc.softmax(logits, axis=1).data, expected, rtol=0, atol=1e-12)
    np.testing.assert_allclose(tc.softmax(logits, axis=1).data.sum(axis=1), np.ones(5), rtol=0, atol=1e-12)


def test_cross_entropy(rng):
    """Uniform logits give ln J; the loss is never negative; labels must lie in [0, J)."""
    assert cross_entropy(Tensor(np.zeros((2, 4))), [1, 3]).item() == pytest.approx(math.log(4), abs=1e-12)
    for _ in range(5):
        assert cross_entropy(Tensor(rng.standard_normal((6, 3)) * 4), rng.integers(0, 3, size=6)).item() >= 0.0
    with pytest.raises(ShapeMismatchError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_total_loss():
    """Weighted sum with defaults 0.1 and 0.05; zero weights reduce to cross-entropy."""
    assert total_loss(1.0, 2.0, 4.0, 0.1, 0.05).item() == pytest.approx(1.4, abs=1e-12)
    assert total_loss(1.0, 2.0, 4.0).item() == pytest.approx(1.4, abs=1e-12)
    assert total_loss(1.25, 2.0, 4.0, 0.0, 0.0).item() == 1.25
    with pytest.raises(ValueError):
        total_loss(1.0, 2.0, 4.0, -0.1, 0.05)


def test_loss_gradients(rng):
    """UCL, SCL and cross-entropy pass finite-difference checks on parameters and inputs."""
    fused = rng.standard_normal((4, 8))
    feats = rng.standard_normal((4, 4))
    predictor = Affine.init(rng, 8, 4)
    reports = tc.grad_check_params(
        lambda: modality_ucl(Tensor(fused), Tensor(feats), predictor), predictor.parameters(), atol=1e-8
    )
    assert all(r.passed for r in reports.values())
    assert tc.grad_check(lambda t: modality_ucl(t, Tensor(feats), predictor), Tensor(fused), atol=1e-8).passed

    cfg = SclConfig(tau=0.5, projection=Affine.init(rng, 8, 4))
    labels = [0, 1, 0, 1]
    reports = tc.grad_check_params(lambda: scl_loss(Tensor(feats), Tensor(fused), labels, cfg), cfg.parameters(), atol=1e-8)
    assert all(r.passed for r in reports.values())
    assert tc.grad_check(lambda t: scl_loss(t, Tensor(fused), labels, cfg), Tensor(feats), atol=1e-8).passed

    head = ClassifierParams.init(rng, 8, 3)
    targets = [0, 2, 1, 2]
    assert tc.grad_check(lambda t: cross_entropy(classify(t, head)[0], targets), Tensor(fused), atol=1e-8).passed


def test_losses_are_non_negative_on_many_instances(rng):
    """Cross-entropy, UCL and SCL stay non-negative over a thousand random instances."""
    for _ in range(1000):
        batch = int(rng.integers(2, 7))
        scale = float(rng.choice([0.1, 1.0, 10.0]))
        fused = Tensor(scale * rng.standard_normal((batch, 6)))
        feats = Tensor(scale * rng.standard_normal((batch, 3)))
        labels = rng.integers(0, 3, size=batch)
        assert cross_entropy(Tensor(scale * rng.standard_normal((batch, 3))), labels).item() >= 0.0
        assert modality_ucl(fused, feats, Affine.init(rng, 6, 3)).item() >= 0.0
        assert scl_loss(feats, fused, labels, SclConfig(tau=0.07, projection=Affine.init(rng, 6, 3))).item() >= 0.0

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from embedlab import concepts as cp
from embedlab.exceptions import CapacityError, DegenerateLabels, RangeError, ShapeError
from embedlab.sae import SaeModel, sae_decode, sae_encode
from embedlab.store import EmbeddingMatrix, Vocabulary

import oracles


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _binary_latents(seed=0, n=200, m=6, informative=2):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    A = np.abs(rng.normal(size=(n, m)))
    A[:, informative] += 2.0 * y
    return A, y


def _identity_sae(d=4):
    # latents = relu(+x), relu(-x); decoder reconstructs x exactly
    return SaeModel(np.hstack([np.eye(d), -np.eye(d)]), np.vstack([np.eye(d), -np.eye(d)]))


# -- concept filter ---------------------------------------------------------


def test_huge_alpha_empties_support():
    A, y = _binary_latents()
    model = cp.fit_concept_filter(A, y, alpha=1e6, n_epochs=5)
    assert model.support.size == 0
    assert np.all(model.weights == 0)


def test_informative_latent_has_positive_weight():
    A, y = _binary_latents(informative=2)
    model = cp.fit_concept_filter(A, y, alpha=0.01, lr=0.5, n_epochs=50)
    assert 2 in model.support
    assert model.weights[0, 2] > 0
    assert int(np.argmax(np.abs(model.weights[0]))) == 2
    flipped = cp.fit_concept_filter(A, 1 - y, alpha=0.01, lr=0.5, n_epochs=50)
    assert flipped.weights[0, 2] < 0


def test_zero_alpha_keeps_all_latents():
    A, y = _binary_latents(1)
    model = cp.fit_concept_filter(A, y, alpha=0.0, n_epochs=3)
    assert model.support.tolist() == list(range(A.shape[1]))


def test_support_shrinks_with_alpha():
    A, y = _binary_latents(2, m=10)
    sizes = [cp.fit_concept_filter(A, y, alpha=a, lr=0.5, n_epochs=30).support.size for a in (0.0, 0.01, 0.1, 10.0)]
    assert sizes[0] == 10 and sizes[-1] == 0
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))


def test_filter_errors_and_determinism():
    A, y = _binary_latents(3)
    with pytest.raises(RangeError):
        cp.fit_concept_filter(A, y, alpha=-1)
    with pytest.raises(DegenerateLabels):
        cp.fit_concept_filter(A, np.zeros_like(y))
    a = cp.fit_concept_filter(A, y, n_epochs=5, seed=1)
    b = cp.fit_concept_filter(A, y, n_epochs=5, seed=1)
    assert a.weights.tobytes() == b.weights.tobytes()


def test_multiclass_one_vs_rest_rows():
    rng = np.random.default_rng(4)
    y = np.arange(90) % 3
    A = np.abs(rng.normal(size=(90, 5)))
    A[np.arange(90), y] += 3.0
    model = cp.fit_concept_filter(A, y, alpha=0.001, lr=0.5, n_epochs=40)
    assert model.weights.shape == (3, 5)
    for c in range(3):
        assert int(np.argmax(model.weights[c])) == c
    est = cp.ConceptFilter(alpha=0.001, learning_rate=0.5, n_epochs=40).fit(A, y)
    assert est.score(A, y) > 0.9
    np.testing.assert_allclose(est.predict_proba(A).sum(axis=1), 1.0)
    assert clone(est).get_params() == est.get_params()


def test_model_dict_round_trip():
    A, y = _binary_latents(5)
    m = cp.fit_concept_filter(A, y, alpha=0.05, lr=0.5, n_epochs=10)
    back = cp.SparseLinearModel.from_dict(m.to_dict())
    assert back.weights.tobytes() == m.weights.tobytes()
    assert back.support.tolist() == m.support.tolist()


# -- assignment -------------------------------------------------------------


def test_two_by_two_assignment():
    cols, total = cp.max_similarity_assignment(np.array([[0.9, 0.1], [0.2, 0.8]]))
    assert cols.tolist() == [0, 1]
    assert total == pytest.approx(1.7)


def test_assignment_injective_and_optimal_6x9():
    rng = np.random.default_rng(0)
    for _ in range(3):
        sim = rng.uniform(-1, 1, size=(6, 9))
        cols, total = cp.max_similarity_assignment(sim)
        assert len(set(cols.tolist())) == 6
        assert total == pytest.approx(oracles.best_injection(sim), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 4), st.integers(0, 3))
def test_assignment_matches_enumeration(seed, r, extra):
    rng = np.random.default_rng(seed)
    # rounding creates ties
    sim = np.round(rng.uniform(-1, 1, size=(r, r + extra)), 1)
    cols, total = cp.max_similarity_assignment(sim)
    assert len(set(cols.tolist())) == r
    assert total == pytest.approx(oracles.best_injection(sim), abs=1e-12)


def test_assignment_capacity():
    with pytest.raises(CapacityError):
        cp.linear_assignment(np.zeros((3, 2)))


def test_name_concepts():
    sae = _identity_sae(3)
    vocab = Vocabulary(["ex", "ey", "ez", "neg x"], EmbeddingMatrix(np.vstack([np.eye(3), -np.eye(3)[[0]]])))
    names = cp.name_concepts(sae, [0, 3, 1], vocab)
    got = {p.concept: p.term for p in names}
    assert got == {0: "ex", 1: "ey", 3: "neg x"}
    assert names.total_similarity == pytest.approx(3.0)
    assert len(cp.name_concepts(sae, [], vocab)) == 0
    with pytest.raises(CapacityError):
        cp.name_concepts(sae, range(5), vocab)
    with pytest.raises(RangeError):
        cp.name_concepts(sae, [6], vocab)


# -- bottleneck and intervention -------------------------------------------


def test_cbm_with_empty_support_is_sigmoid_bias():
    sae = _identity_sae()
    clf = cp.SparseLinearModel(np.zeros((1, 8)), np.array([0.3]), 1.0)
    X = np.random.default_rng(0).normal(size=(5, 4))
    np.testing.assert_allclose(cp.cbm_predict(sae, clf, X), _sigmoid(0.3))


def test_cbm_ignores_latents_outside_support():
    sae = _identity_sae()
    w = np.zeros((1, 8))
    w[0, [1, 6]] = [1.5, -0.7]
    clf = cp.SparseLinearModel(w, np.array([-0.2]), 0.1)
    X = np.random.default_rng(1).normal(size=(10, 4))
    base = cp.cbm_predict(sae, clf, X)
    outside = [0, 2, 3, 4, 5, 7]
    assert cp.cbm_predict(sae, clf, X, suppress=outside).tobytes() == base.tobytes()
    A = sae_encode(sae, X)
    np.testing.assert_allclose(base, _sigmoid(A @ w[0] - 0.2), atol=1e-12)
    with pytest.raises(ShapeError):
        cp.cbm_predict(sae, cp.SparseLinearModel(np.zeros((1, 3)), np.zeros(1), 0.0), X)


def test_artifact_neurons_ranking():
    m = 12
    enc = np.zeros((4, m))
    enc[0, 7] = 5.0  # latent 7 fires strongly on the artifact direction
    enc[0, 2] = 1.0
    enc[1, 3] = 1.0
    sae = SaeModel(enc, enc.T.copy())
    artifacts = np.tile([1.0, 0.2, 0.0, 0.0], (6, 1))
    top = cp.find_artifact_neurons(sae, artifacts, k=2)
    assert top.tolist() == [7, 2]
    assert sorted(cp.find_artifact_neurons(sae, artifacts, k=m).tolist()) == list(range(m))
    freq = cp.find_artifact_neurons(sae, artifacts, k=3, statistic="frequency")
    assert set(freq.tolist()) == {2, 3, 7}
    with pytest.raises(RangeError):
        cp.find_artifact_neurons(sae, artifacts, k=0)
    with pytest.raises(RangeError):
        cp.find_artifact_neurons(sae, artifacts, k=m + 1)


def test_intervention_cases():
    rng = np.random.default_rng(2)
    sae = SaeModel(rng.normal(size=(4, 8)), rng.normal(size=(8, 4)))
    X = rng.normal(size=(6, 4))
    plain = sae_decode(sae, sae_encode(sae, X))
    assert cp.intervene(sae, [], X).tobytes() == plain.tobytes()
    assert np.all(cp.intervene(sae, range(8), X) == 0)
    A = sae_encode(sae, X)
    A[:, [1, 4]] = 0
    np.testing.assert_allclose(cp.intervene(sae, [4, 1], X), sae_decode(sae, A))
    with pytest.raises(RangeError):
        cp.intervene(sae, [8], X)


def test_bottleneck_estimator_suppression():
    rng = np.random.default_rng(3)
    y = rng.integers(0, 2, 200)
    X = rng.normal(size=(200, 4))
    X[:, 0] += 2.5 * (2 * y - 1)
    est = cp.ConceptBottleneck(_identity_sae(), alpha=0.001, learning_rate=0.5, n_epochs=40).fit(X, y)
    assert est.score(X, y) > 0.85
    muted = clone(est).set_params(suppress=(0, 4)).fit(X, y)
    assert muted.score(X, y) < 0.7

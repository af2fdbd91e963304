import numpy as np
import pytest
from sklearn.base import clone

from cdakit import ClusteringDomainAdapter, SimplifiedSpectralClustering
from cdakit.embedding_io import SynthConfig, synthesize_domain_pair


@pytest.fixture(scope="module")
def pair():
    return synthesize_domain_pair(SynthConfig(6, 20, 32, 0.21, 0.63, 0.0, 3))


def test_params_round_trip_through_clone():
    est = ClusteringDomainAdapter(lam=0.25, alpha=0.6, random_state=3)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert twin.set_params(max_iters=10).max_iters == 10
    assert clone(SimplifiedSpectralClustering(alpha=0.5)).alpha == 0.5


def test_fit_transform_predict(pair):
    s, t = pair
    est = ClusteringDomainAdapter(max_iters=150, alpha=0.75, random_state=1)
    est.fit(s.vectors, s.labels * 10 + 3, X_target=t.vectors)
    h = est.transform(t.vectors)
    assert h.shape == (t.n, s.dim) and np.all(np.abs(h) <= 1)
    pred = est.predict(t.vectors)
    assert pred.min() >= 0 and pred.max() < est.pseudo_labels_.max() + 1
    assert set(np.unique(est.predict_source(s.vectors))) <= set(est.classes_)
    assert est.n_features_in_ == s.dim


def test_fit_is_deterministic(pair):
    s, t = pair
    a = ClusteringDomainAdapter(max_iters=60, alpha=0.75).fit(s.vectors, s.labels, X_target=t.vectors)
    b = ClusteringDomainAdapter(max_iters=60, alpha=0.75).fit(s.vectors, s.labels, X_target=t.vectors)
    assert np.array_equal(a.transform(t.vectors), b.transform(t.vectors))


def test_input_validation(pair):
    s, t = pair
    est = ClusteringDomainAdapter(max_iters=5)
    with pytest.raises(ValueError, match="X_target"):
        est.fit(s.vectors, s.labels)
    with pytest.raises(ValueError, match="features"):
        est.fit(s.vectors, s.labels, X_target=t.vectors[:, :5])
    with pytest.raises(Exception):
        ClusteringDomainAdapter().transform(t.vectors)

"""scikit-learn style wrappers around the single-node, distributed and secure drivers."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_non_negative

from .cluster import dsanls_run
from .matcore import as_matrix, relative_error
from .sanls import RunConfig, init_scale, run
from .secure import SecureConfig, audit_protocol, run_protocol
from .sketch import SUBSAMPLING, keyed_rng, Stream
from .solvers import hals_update

__all__ = ["SecureNMF", "SketchedNMF"]


def _seed(random_state) -> int:
    if random_state is None:
        return int(np.random.SeedSequence().entropy & 0x7FFFFFFF)
    if isinstance(random_state, np.random.RandomState):
        return int(random_state.randint(0, 2**31 - 1))
    return int(random_state)


def _validate(est, X, reset=True):
    X = est._validate_input(X, reset)
    check_non_negative(X, type(est).__name__)
    return as_matrix(X)


class _NMFBase(TransformerMixin, BaseEstimator):

    def _validate_input(self, X, reset):
        X = check_array(X, accept_sparse="csr", dtype=np.float64)
        if reset:
            self.n_features_in_ = X.shape[1]
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def transform(self, X):
        """Nonnegative codes ``W`` with ``X ~ W @ components_``, by HALS on ``W`` alone."""
        check_is_fitted(self, "components_")
        X = _validate(self, X, reset=False)
        V = np.ascontiguousarray(self.components_.T)
        k = V.shape[1]
        total = float(X.sum())
        scale = np.sqrt(max(total, 1e-300) / (X.shape[0] * X.shape[1]) / k)
        W = keyed_rng(_seed(self.random_state), 0, Stream.INIT).uniform(0, scale, (X.shape[0], k))
        for _ in range(self.transform_iter):
            W = hals_update(X, W, V)
        return W

    def inverse_transform(self, W):
        check_is_fitted(self, "components_")
        return np.asarray(W) @ self.components_


class SketchedNMF(_NMFBase):
    """Nonnegative matrix factorisation ``X ~ W H`` by sketched ANLS.

    Parameters
    ----------
    n_components : int
        Rank ``k``.
    method : {'sanls-pcd', 'sanls-pgd', 'hals', 'mu'}
    sketch : {'subsampling', 'gaussian'}
    d_frac : float
        Sketch size as a fraction of the sketched dimension.
    max_iter : int
        Outer iterations ``T``.
    n_nodes : int
        Simulated cluster size; ``1`` runs the single-machine driver.
    alpha, beta : float
        Proximal weight schedule ``alpha + beta t`` (PCD).
    eta0, gamma : float
        Step schedule ``eta0 / (1 + gamma t)`` (PGD).
    clamp : bool
        Cap iterates at ``sqrt(2 ||X||_F)``.
    transform_iter : int
        HALS sweeps used by :meth:`transform`.
    random_state : int or None

    Attributes
    ----------
    components_ : ndarray of shape (n_components, n_features)
    reconstruction_err_ : float
        Relative error ``||X - W H||_F / ||X||_F`` at the end of fitting.
    trace_ : RunTrace
    n_iter_ : int
    """

    def __init__(self, n_components=10, method="sanls-pcd", sketch=SUBSAMPLING, d_frac=0.1,
                 max_iter=200, n_nodes=1, alpha=1.0, beta=1.0, eta0=0.01, gamma=0.01,
                 clamp=False, transform_iter=100, random_state=0):
        self.n_components = n_components
        self.method = method
        self.sketch = sketch
        self.d_frac = d_frac
        self.max_iter = max_iter
        self.n_nodes = n_nodes
        self.alpha = alpha
        self.beta = beta
        self.eta0 = eta0
        self.gamma = gamma
        self.clamp = clamp
        self.transform_iter = transform_iter
        self.random_state = random_state

    def _config(self) -> RunConfig:
        return RunConfig(k=self.n_components, T=self.max_iter, method=self.method,
                         sketch=self.sketch, d_frac=self.d_frac, eta0=self.eta0,
                         gamma=self.gamma, alpha=self.alpha, beta=self.beta,
                         seed=_seed(self.random_state), clamp=self.clamp)

    def fit_transform(self, X, y=None):
        X = _validate(self, X)
        config = self._config()
        if self.n_nodes > 1:
            U, V, trace, _ = dsanls_run(X, config, self.n_nodes)
        else:
            U, V, trace = run(X, config)
        self.components_ = np.ascontiguousarray(V.T)
        self.n_components_ = V.shape[1]
        self.trace_ = trace
        self.n_iter_ = trace.t[-1]
        self.reconstruction_err_ = relative_error(X, U, V)
        return U

    def fit(self, X, y=None):
        self.fit_transform(X)
        return self


class SecureNMF(_NMFBase):
    """Federated NMF where party ``r`` privately owns a block of columns of ``X``.

    ``components_`` is the simulator's global view assembled from every
    party's private ``V`` block; the parties themselves never see it.

    Parameters
    ----------
    n_components : int
    protocol : {'syn-sd', 'syn-ssd-u', 'syn-ssd-v', 'syn-ssd-uv', 'asyn-sd', 'asyn-ssd-v'}
    n_parties : int
        Number of parties for a balanced column split.
    column_widths : sequence of int, optional
        Explicit per-party widths (overrides ``n_parties``).
    outer_iter, inner_iter : int
        ``T1`` and ``T2`` for synchronous protocols; asynchronous clients
        run ``inner_iter`` local iterations per push and the server stops
        after ``outer_iter * n_parties`` updates.
    d_frac : float
    rho : float
        Server relaxation parameter.
    random_state : int or None

    Attributes
    ----------
    components_ : ndarray of shape (n_components, n_features)
    reconstruction_err_ : float
    audit_ : AuditReport
        Privacy audit of the full message trace.
    result_ : SecureResult
    """

    def __init__(self, n_components=10, protocol="syn-ssd-uv", n_parties=4, column_widths=None,
                 outer_iter=20, inner_iter=5, d_frac=0.1, rho=10.0, solver="hals",
                 sketch=SUBSAMPLING, transform_iter=100, random_state=0):
        self.n_components = n_components
        self.protocol = protocol
        self.n_parties = n_parties
        self.column_widths = column_widths
        self.outer_iter = outer_iter
        self.inner_iter = inner_iter
        self.d_frac = d_frac
        self.rho = rho
        self.solver = solver
        self.sketch = sketch
        self.transform_iter = transform_iter
        self.random_state = random_state

    def fit_transform(self, X, y=None):
        X = _validate(self, X)
        init_scale(X, self.n_components)  # rejects an all-zero X early
        config = SecureConfig(k=self.n_components, T1=self.outer_iter, T2=self.inner_iter,
                              T=self.inner_iter, d_frac=self.d_frac, rho=self.rho,
                              solver=self.solver, sketch=self.sketch, seed=_seed(self.random_state))
        widths = self.column_widths if self.column_widths is not None else self.n_parties
        res = run_protocol(X, self.protocol, widths, config)
        self.result_ = res
        self.audit_ = audit_protocol(res.log, res.parties)
        self.components_ = np.ascontiguousarray(res.V.T)
        self.n_components_ = self.n_components
        self.reconstruction_err_ = relative_error(X, res.U, res.V)
        return res.U

    def fit(self, X, y=None):
        self.fit_transform(X)
        return self

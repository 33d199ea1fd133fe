"""Efficient hinging-hyperplanes (EHH) network and its ANOVA importances.

The network has one hidden layer. Source nodes are hinges
``max(0, x_m - beta)``; a min-node of order ``p`` takes the minimum of ``p``
source nodes that read pairwise different input dimensions. The output is
``alpha0 + Z @ alpha`` where ``Z`` stacks all source and min-node values.

Because every node reads a known set of input dimensions, the prediction
splits exactly into univariate terms ``f_m`` and pairwise terms ``f_{m,m'}``;
the standard deviation of each term over a sample set is its importance.
"""

from __future__ import annotations

import csv
import itertools
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from .errors import ConfigError, DataError, ShapeError, SingularityError
from .pwlnet import BiasGrid

log = logging.getLogger(__name__)

# instrumentation: incremented by anova_decompose / importance_inverse
counters: Counter = Counter()


@dataclass
class EhhNetwork:
    n_inputs: int
    src_dim: np.ndarray  # (n1,) input dimension read by each source node
    src_bias: np.ndarray  # (n1,)
    min_nodes: List[Tuple[int, ...]]  # source-node indices per min-node
    alpha: np.ndarray  # (n1 + n_min, n_out)
    alpha0: np.ndarray  # (n_out,)
    _groups: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default=None, repr=False)

    def __post_init__(self):
        self.src_dim = np.asarray(self.src_dim, dtype=np.int64)
        self.src_bias = np.asarray(self.src_bias, dtype=np.float64)
        self.min_nodes = [tuple(int(i) for i in node) for node in self.min_nodes]
        self.alpha = np.array(self.alpha, dtype=np.float64, ndmin=2)
        if self.alpha.shape[0] == 1 and self.n_nodes != 1:
            self.alpha = self.alpha.T
        self.alpha0 = np.array(self.alpha0, dtype=np.float64, ndmin=1)
        if self.alpha.shape != (self.n_nodes, self.alpha0.size):
            raise ShapeError(f"alpha shape {self.alpha.shape} != ({self.n_nodes}, {self.alpha0.size})")
        for k, node in enumerate(self.min_nodes):
            dims = self.src_dim[list(node)]
            if len(set(dims.tolist())) != len(node):
                raise ShapeError(f"min-node {k} combines source nodes from the same input dimension")
        # column indices (into Z) and member arrays grouped by order
        groups = {}
        for p in sorted({len(n) for n in self.min_nodes}):
            cols = np.array([self.n_sources + k for k, n in enumerate(self.min_nodes) if len(n) == p])
            members = np.array([n for n in self.min_nodes if len(n) == p], dtype=np.int64)
            groups[p] = (cols, members)
        self._groups = groups

    @property
    def n_sources(self) -> int:
        return self.src_dim.size

    @property
    def n_nodes(self) -> int:
        return self.n_sources + len(self.min_nodes)

    @property
    def n_out(self) -> int:
        return self.alpha0.size

    def node_dims(self, k: int) -> Tuple[int, ...]:
        """Sorted input dimensions read by hidden node ``k``."""
        if k < self.n_sources:
            return (int(self.src_dim[k]),)
        node = self.min_nodes[k - self.n_sources]
        return tuple(sorted(int(self.src_dim[s]) for s in node))

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.n_inputs:
            raise ShapeError(f"EHH expects {self.n_inputs} inputs, got {X.shape[-1]}")
        return X

    def hidden(self, X) -> np.ndarray:
        X = self._check(X)
        S = np.maximum(0.0, X[..., self.src_dim] - self.src_bias)
        Z = np.empty(X.shape[:-1] + (self.n_nodes,))
        Z[..., : self.n_sources] = S
        for cols, members in self._groups.values():
            Z[..., cols] = S[..., members].min(axis=-1)
        return Z

    def forward(self, X) -> np.ndarray:
        return self.alpha0 + self.hidden(X) @ self.alpha

    __call__ = forward

    def backward(self, X, dH):
        """Gradients of a scalar loss w.r.t. ``alpha``, ``alpha0`` and the input.

        ``X`` is a batch ``(n, M)`` and ``dH`` is ``dL/dH`` of shape ``(n, n_out)``.
        Kinks get subgradient 0; ties inside a min-node go to the first member.
        """
        X = self._check(np.atleast_2d(X))
        dH = np.atleast_2d(np.asarray(dH, dtype=np.float64))
        Z = self.hidden(X)
        d_alpha = Z.T @ dH
        d_alpha0 = dH.sum(axis=0)
        dZ = dH @ self.alpha.T
        n1 = self.n_sources
        pre = X[:, self.src_dim] - self.src_bias
        S = np.maximum(0.0, pre)
        dS = dZ[:, :n1].copy()
        rows = np.arange(X.shape[0])[:, None]
        for cols, members in self._groups.values():
            vals = S[:, members]  # (n, n_p, p)
            pick = members[np.arange(members.shape[0]), vals.argmin(axis=-1)]  # (n, n_p)
            np.add.at(dS, (np.broadcast_to(rows, pick.shape), pick), dZ[:, cols])
        dpre = dS * (pre > 0)
        dX = np.zeros_like(X)
        np.add.at(dX.T, self.src_dim, dpre.T)
        return {"alpha": d_alpha, "alpha0": d_alpha0}, dX

    def activation_pattern(self, X) -> np.ndarray:
        X = self._check(X)
        pre = X[..., self.src_dim] - self.src_bias
        parts = [pre > 0]
        S = np.maximum(0.0, pre)
        for cols, members in self._groups.values():
            parts.append(S[..., members].argmin(axis=-1))
        return np.concatenate([p.astype(np.int64) for p in parts], axis=-1)

    def nonzero_weights(self, tol: float = 1e-6) -> int:
        return int(np.sum(np.abs(self.alpha) > tol))

    def to_dict(self) -> dict:
        return {
            "kind": "ehh",
            "M": self.n_inputs,
            "bias_lists": [self.src_bias[self.src_dim == m].tolist() for m in range(self.n_inputs)],
            "source_nodes": [[int(d), float(b)] for d, b in zip(self.src_dim, self.src_bias)],
            "min_nodes": [list(n) for n in self.min_nodes],
            "alpha": self.alpha.tolist(),
            "alpha0": self.alpha0.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EhhNetwork":
        src = doc["source_nodes"]
        return cls(
            n_inputs=int(doc["M"]),
            src_dim=[s[0] for s in src],
            src_bias=[s[1] for s in src],
            min_nodes=[tuple(n) for n in doc["min_nodes"]],
            alpha=np.asarray(doc["alpha"], dtype=np.float64).reshape(len(src) + len(doc["min_nodes"]), -1),
            alpha0=doc["alpha0"],
        )


def ehh_generate(
    n_inputs: int,
    grids,
    P: int = 2,
    cap: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    n_out: int = 1,
) -> EhhNetwork:
    """Build an EHH structure with zero output weights.

    ``grids`` is a :class:`BiasGrid` or a list of per-dimension bias sequences.
    Every (dimension, bias) pair becomes a source node. Order-``p`` min-nodes
    (``2 <= p <= P``) combine source nodes from distinct dimensions; at most
    ``cap`` of each order are kept, drawn uniformly without replacement.
    """
    if n_inputs < 1:
        raise ConfigError("EHH needs at least one input dimension")
    if cap is not None and cap < 0:
        raise ConfigError(f"candidate cap must be >= 0, got {cap}")
    if P < 1:
        raise ConfigError(f"P must be >= 1, got {P}")
    if isinstance(grids, BiasGrid):
        bias_lists = [grids.biases[m] for m in range(grids.dim)]
    else:
        bias_lists = [np.atleast_1d(np.asarray(g, dtype=np.float64)) for g in grids]
    if len(bias_lists) != n_inputs:
        raise ShapeError(f"{len(bias_lists)} bias lists for {n_inputs} inputs")
    if any(len(b) == 0 for b in bias_lists):
        raise ConfigError("every input dimension needs at least one bias")
    rng = np.random.default_rng(0) if rng is None else rng

    src_dim = np.concatenate([np.full(len(b), m) for m, b in enumerate(bias_lists)])
    src_bias = np.concatenate(bias_lists)
    by_dim = [np.flatnonzero(src_dim == m) for m in range(n_inputs)]

    min_nodes: List[Tuple[int, ...]] = []
    if P >= 2:
        pairs = [
            (a, b)
            for m1, m2 in itertools.combinations(range(n_inputs), 2)
            for a in by_dim[m1]
            for b in by_dim[m2]
        ]
        if cap is not None and cap < len(pairs):
            keep = np.sort(rng.choice(len(pairs), size=cap, replace=False))
            pairs = [pairs[k] for k in keep]
        min_nodes.extend((int(a), int(b)) for a, b in pairs)
    for p in range(3, P + 1):
        if p > n_inputs:
            break
        n_combos = sum(
            int(np.prod([len(by_dim[m]) for m in dims])) for dims in itertools.combinations(range(n_inputs), p)
        )
        target = n_combos if cap is None else min(cap, n_combos)
        chosen = set()
        while len(chosen) < target:
            dims = np.sort(rng.choice(n_inputs, size=p, replace=False))
            chosen.add(tuple(int(rng.choice(by_dim[m])) for m in dims))
        min_nodes.extend(sorted(chosen))

    n_nodes = src_dim.size + len(min_nodes)
    return EhhNetwork(n_inputs, src_dim, src_bias, min_nodes, np.zeros((n_nodes, n_out)), np.zeros(n_out))


def ehh_forward(net: EhhNetwork, X) -> np.ndarray:
    return net.forward(X)


def _lasso_cd(Zc, Yc, lam, alpha, max_sweeps=2000, tol=1e-10):
    """Cyclic coordinate descent on ``mean ||Yc - Zc a||^2 + lam*|a|_1``.

    Columns of ``Zc`` are already centered; all outputs are updated together
    since the problem separates across them.
    """
    n = Zc.shape[0]
    G = Zc.T @ Zc / n
    c = Zc.T @ Yc / n
    diag = np.diag(G).copy()
    Ga = G @ alpha
    scale = max(np.max(np.abs(c)), 1e-300)
    for _ in range(max_sweeps):
        max_step = 0.0
        for j in range(Zc.shape[1]):
            if diag[j] <= 1e-14:
                if np.any(alpha[j]):
                    Ga -= np.outer(G[:, j], alpha[j])
                    alpha[j] = 0.0
                continue
            rho = c[j] - Ga[j] + diag[j] * alpha[j]
            new = np.sign(rho) * np.maximum(np.abs(rho) - lam / 2.0, 0.0) / diag[j]
            delta = new - alpha[j]
            if np.any(delta):
                Ga += np.outer(G[:, j], delta)
                alpha[j] = new
                max_step = max(max_step, float(np.max(np.abs(delta)) * diag[j]))
        if max_step <= tol * scale:
            break
    return alpha


def ehh_train(net: EhhNetwork, X, Y, lam: float = 0.0, max_sweeps: int = 2000, tol: float = 1e-10) -> EhhNetwork:
    """Fit the output weights on a fixed structure, in place.

    Minimises ``mean squared error + lam * sum|alpha|`` (``alpha0`` is not
    penalised). ``lam == 0`` is solved directly by least squares; otherwise by
    coordinate descent, which yields exact zeros.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise DataError("EHH training needs at least one sample")
    Y = np.asarray(Y, dtype=np.float64).reshape(X.shape[0], -1)
    if Y.shape[1] != net.n_out:
        raise ShapeError(f"targets have {Y.shape[1]} outputs, network has {net.n_out}")
    if lam < 0:
        raise ConfigError("l1 penalty must be >= 0")
    Z = net.hidden(X)
    if lam == 0.0:
        A = np.hstack([np.ones((Z.shape[0], 1)), Z])
        sol = np.linalg.lstsq(A, Y, rcond=None)[0]
        net.alpha0 = sol[0].copy()
        net.alpha = sol[1:].copy()
        return net
    zm = Z.mean(axis=0)
    ym = Y.mean(axis=0)
    alpha = _lasso_cd(Z - zm, Y - ym, lam, net.alpha.copy(), max_sweeps=max_sweeps, tol=tol)
    net.alpha = alpha
    net.alpha0 = ym - zm @ alpha
    return net


# -- ANOVA --------------------------------------------------------------------


@dataclass
class AnovaReport:
    main: np.ndarray  # sigma_m, one per input component
    pairs: Dict[Tuple[int, int], float]  # sigma_{m,m'}
    terms_main: np.ndarray  # f_m values, (n, M, n_out)
    terms_pair: Dict[Tuple[int, int], np.ndarray]  # (n, n_out)

    @property
    def per_component(self) -> np.ndarray:
        """Main effect plus half of every pair importance the component is in."""
        out = self.main.copy()
        for (a, b), s in self.pairs.items():
            out[a] += 0.5 * s
            out[b] += 0.5 * s
        return out

    def rows(self, names: Optional[Sequence[str]] = None):
        names = list(names) if names is not None else [f"x{m}" for m in range(self.main.size)]
        out = [(names[m], float(s)) for m, s in enumerate(self.main)]
        out += [(f"{names[a]}:{names[b]}", float(s)) for (a, b), s in sorted(self.pairs.items())]
        return out

    def write_csv(self, path, names: Optional[Sequence[str]] = None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["component", "sigma"])
            for name, s in self.rows(names):
                w.writerow([name, repr(s)])


def _sigma(values: np.ndarray) -> float:
    # population variance summed across outputs
    return float(np.sqrt(np.sum(np.var(values, axis=0))))


def anova_decompose(net: EhhNetwork, X) -> AnovaReport:
    """Split the prediction into univariate and pairwise terms over ``X``.

    ``sigma_m`` is the population standard deviation of ``f_m`` over the
    samples (for several outputs, the root of the summed variances).
    """
    counters["anova_calls"] += 1
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise DataError("ANOVA needs a nonempty sample set")
    if any(len(n) > 2 for n in net.min_nodes):
        raise ConfigError("ANOVA reporting supports min-nodes of order <= 2 only")
    Z = net.hidden(X)
    contrib = Z[:, :, None] * net.alpha[None, :, :]  # (n, nodes, out)
    M = net.n_inputs
    terms_main = np.zeros((X.shape[0], M, net.n_out))
    np.add.at(terms_main.transpose(1, 0, 2), net.src_dim, contrib[:, : net.n_sources].transpose(1, 0, 2))
    terms_pair: Dict[Tuple[int, int], np.ndarray] = {}
    for k in range(len(net.min_nodes)):
        key = net.node_dims(net.n_sources + k)
        if key not in terms_pair:
            terms_pair[key] = np.zeros((X.shape[0], net.n_out))
        terms_pair[key] += contrib[:, net.n_sources + k]
    main = np.array([_sigma(terms_main[:, m]) for m in range(M)])
    pairs = {key: _sigma(v) for key, v in terms_pair.items()}
    return AnovaReport(main, pairs, terms_main, terms_pair)


def importance_inverse(W, sigma_m) -> np.ndarray:
    """Map importances of ``x~ = W x`` back onto the components of ``x``.

    Square ``W`` is inverted exactly, other shapes use the Moore-Penrose
    pseudo-inverse. ``W`` must have full rank; negative results are clamped
    to zero (counted in ``counters["clamped_entries"]``).
    """
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    sigma_m = np.asarray(sigma_m, dtype=np.float64)
    if sigma_m.shape != (W.shape[0],):
        raise ShapeError(f"sigma has {sigma_m.size} entries, W has {W.shape[0]} rows")
    full = min(W.shape)
    rank = np.linalg.matrix_rank(W)
    if rank < full:
        _, _, piv = scipy.linalg.qr(W, pivoting=True)
        bad = sorted(int(c) for c in piv[rank:]) if W.shape[0] >= W.shape[1] else []
        raise SingularityError(f"W has rank {rank} < {full}; dependent columns {bad}", columns=bad)
    if W.shape[0] == W.shape[1]:
        sigma_in = np.linalg.solve(W, sigma_m)
    else:
        sigma_in = np.linalg.pinv(W) @ sigma_m
    neg = sigma_in < 0
    if neg.any():
        counters["clamped_entries"] += int(neg.sum())
        log.debug("clamped %d negative input importances", int(neg.sum()))
        sigma_in = np.where(neg, 0.0, sigma_in)
    return sigma_in


# -- linear reduction + EHH ---------------------------------------------------


@dataclass
class LinearEhh:
    """Standardise, reduce with ``W`` (rows orthonormal at init), then an EHH network."""

    W: np.ndarray  # (d, n_features)
    mean: np.ndarray
    std: np.ndarray
    ehh: EhhNetwork

    def transform(self, X) -> np.ndarray:
        flat = np.asarray(X, dtype=np.float64).reshape(-1, self.W.shape[1])
        return ((flat - self.mean) / self.std) @ self.W.T

    def predict(self, X) -> np.ndarray:
        return self.ehh.forward(self.transform(X))

    def importance(self, X) -> np.ndarray:
        """ANOVA importances over a sample set, mapped back onto the raw features."""
        rep = anova_decompose(self.ehh, self.transform(X))
        return importance_inverse(self.W, rep.per_component)

    def n_params(self) -> int:
        return int(self.W.size + self.ehh.nonzero_weights() + self.ehh.alpha0.size)

    def to_dict(self) -> dict:
        return {"W": self.W.tolist(), "mean": self.mean.tolist(), "std": self.std.tolist(), "ehh": self.ehh.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "LinearEhh":
        return cls(
            np.asarray(doc["W"], dtype=np.float64),
            np.asarray(doc["mean"], dtype=np.float64),
            np.asarray(doc["std"], dtype=np.float64),
            EhhNetwork.from_dict(doc["ehh"]),
        )


def regression_basis(Xs: np.ndarray, Ys: np.ndarray, d: int) -> np.ndarray:
    """``d`` orthonormal rows: the span of the least-squares directions first,
    completed by the leading principal axes of what remains."""
    D = Xs.shape[1]
    if d > D:
        raise ConfigError(f"reduced dimension {d} exceeds feature count {D}")
    rows: List[np.ndarray] = []
    B = np.linalg.lstsq(Xs, Ys, rcond=None)[0]
    if np.any(B):
        U, s, _ = np.linalg.svd(B, full_matrices=False)
        rows = [U[:, k] for k in range(len(s)) if s[k] > 1e-10 * s[0]][:d]

    def project_out(v):
        for r in rows:
            v = v - r * (r @ v)
        return v

    R = Xs - (Xs @ np.array(rows).T) @ np.array(rows) if rows else Xs
    _, _, Vt = np.linalg.svd(R, full_matrices=True)
    for v in itertools.chain(Vt, np.eye(D)):
        if len(rows) >= d:
            break
        v = project_out(project_out(v))
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            rows.append(v / nv)
    return np.array(rows)


def _standardize(A: np.ndarray):
    m = A.mean(axis=0)
    s = A.std(axis=0)
    return m, np.where(s > 1e-12, s, 1.0)


def fit_linear_ehh(
    X,
    Y,
    d: int,
    lam: float = 1e-4,
    rng: Optional[np.random.Generator] = None,
    cap: Optional[int] = 64,
    steps: int = 200,
    lr: float = 0.01,
    X_val=None,
    Y_val=None,
    polish_sweeps: int = 200,
) -> LinearEhh:
    """Fit ``W`` and the EHH output weights to predict ``Y`` from ``X``.

    ``W`` starts from :func:`regression_basis`, hinge biases sit on the BReLU
    grid of the reduced features, output weights come from a lasso fit, and
    then ``W`` and the weights are trained jointly by full-batch Adam on
    ``mean squared error + lam * |alpha|_1``. A final lasso pass re-sparsifies
    the weights. With a validation set, the candidate (after the lasso start,
    at any Adam step, or after the final pass) with the lowest validation
    error is returned.
    """
    from .pwlnet import Optimizer, OptimizerConfig, brelu_bias_grid

    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.asarray(Y, dtype=np.float64).reshape(X.shape[0], -1)
    if X.shape[0] == 0:
        raise DataError("fitting needs at least one sample")
    rng = rng if rng is not None else np.random.default_rng(0)
    mean, std = _standardize(X)
    ym, ys = _standardize(Y)
    Xs = (X - mean) / std
    Ys = (Y - ym) / ys

    W = regression_basis(Xs, Ys, d)
    Xt = Xs @ W.T
    tm, ts = _standardize(Xt)
    net = ehh_generate(d, brelu_bias_grid(ts, tm), P=2, cap=cap, rng=rng, n_out=Y.shape[1])
    ehh_train(net, Xt, Ys, lam, max_sweeps=polish_sweeps, tol=1e-6)

    val = None
    if X_val is not None:
        Xv = (np.atleast_2d(np.asarray(X_val, dtype=np.float64)) - mean) / std
        Yv = (np.asarray(Y_val, dtype=np.float64).reshape(Xv.shape[0], -1) - ym) / ys
        val = (Xv, Yv)
    best = [np.inf, None]

    def consider():
        if val is None:
            return
        err = float(np.mean((net.forward(val[0] @ W.T) - val[1]) ** 2))
        if err < best[0]:
            best[0] = err
            best[1] = (W.copy(), net.alpha.copy(), net.alpha0.copy())

    consider()
    if steps and np.any(Ys):
        opt = Optimizer(OptimizerConfig("adam", lr))
        params = {"W": W, "alpha": net.alpha, "alpha0": net.alpha0}
        n = Ys.size
        for _ in range(steps):
            Xt = Xs @ W.T
            dH = 2.0 * (net.forward(Xt) - Ys) / n
            g, dXt = net.backward(Xt, dH)
            grads = {"W": dXt.T @ Xs, "alpha": g["alpha"] + lam * np.sign(net.alpha), "alpha0": g["alpha0"]}
            opt.step(params, grads)
            consider()
        ehh_train(net, Xs @ W.T, Ys, lam, max_sweeps=polish_sweeps, tol=1e-6)
        consider()
    if best[1] is not None:
        W, net.alpha, net.alpha0 = best[1]
    # fold the target scaling into the output layer
    net.alpha = net.alpha * ys
    net.alpha0 = net.alpha0 * ys + ym
    return LinearEhh(W, mean, std, net)

"""Posterior approximation over latent-code indices from data proximity alone.

The approximation for observation n is a categorical over the N dataset
indices: row n is the kernel affinity kappa(x_n | x_i) normalized over i.
With a Gaussian RBF kernel whose bandwidth equals the observation noise
variance, this approximates the true index posterior of the empiricalized
data-generating model without ever looking at a decoder or a prior. Rows
are computed in log space and only exponentiated after the row-wise
log-sum-exp, since realistic rows span hundreds of orders of magnitude.

Tables are immutable once built, cached on disk keyed by dataset
fingerprint plus kernel descriptor, and shared read-only by every
consumer.

The softened-Bernoulli kernel (for binary data) is implemented and
unit-tested but exercised by no shipped dataset; all bundled generators
are real-valued and use the RBF kernel with the observation noise
variance as its bandwidth.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .datasets import cache_dir, data_fingerprint
from .errors import ConfigurationError, DegenerateRowError, DomainError
from .mlp import mlp_forward

_ROW_CHUNK = 512


@dataclass(frozen=True)
class NoiseKernel:
    """Affinity kernel matched to the observation noise distribution."""

    variant: str              # "gaussian_rbf" | "softened_bernoulli"
    bandwidth: float = 0.0    # noise variance, RBF only
    rho: float = 0.0          # softening in (0, 1), Bernoulli only

    def __post_init__(self):
        if self.variant == "gaussian_rbf":
            if self.bandwidth <= 0:
                raise ConfigurationError("RBF kernel needs bandwidth > 0")
        elif self.variant == "softened_bernoulli":
            if not 0.0 < self.rho < 1.0:
                raise ConfigurationError("softened Bernoulli needs rho in (0, 1)")
        else:
            raise ConfigurationError(f"unknown kernel variant '{self.variant}'")

    def descriptor(self):
        if self.variant == "gaussian_rbf":
            return f"gaussian_rbf(bw={self.bandwidth:.12g})"
        return f"softened_bernoulli(rho={self.rho:.12g})"


def rbf_kernel(noise_var):
    return NoiseKernel("gaussian_rbf", bandwidth=float(noise_var))


def bernoulli_kernel(rho=0.9):
    # rho close to 1 keeps the approximation peaked while avoiding hard zeros
    return NoiseKernel("softened_bernoulli", rho=float(rho))


@dataclass
class MapaTable:
    """Row-stochastic q[n, i] plus each row's descending-order permutation."""

    q: np.ndarray            # [N, N] float64, rows sum to 1
    perm: np.ndarray         # [N, N] uint32, row-wise indices by decreasing q
    kernel_descriptor: str
    fingerprint: str

    @property
    def n(self):
        return self.q.shape[0]

    def row(self, n):
        return self.q[n]


@dataclass
class TruncatedProposal:
    """A table row with its top-k support removed and the tail renormalized."""

    n: int
    k: int
    probs: np.ndarray        # [N], exactly zero on the removed support


def softened_bernoulli_kappa(x_n, x_i, rho):
    """Product over dims of (rho*x_i)*x_n + (1 - rho*x_i)*(1 - x_n), binary inputs."""
    x_n = np.asarray(x_n, dtype=np.float64)
    x_i = np.asarray(x_i, dtype=np.float64)
    if not (np.all((x_n == 0) | (x_n == 1)) and np.all((x_i == 0) | (x_i == 1))):
        raise DomainError("Bernoulli kernel requires binary entries")
    if not 0.0 < rho <= 1.0:
        raise DomainError("rho must lie in (0, 1]")
    factors = (rho * x_i) * x_n + (1.0 - rho * x_i) * (1.0 - x_n)
    return float(np.prod(factors))


def _log_kappa_rows(X, kernel, rows):
    """Log affinities of `rows` of X against every point, [len(rows), N]."""
    if kernel.variant == "gaussian_rbf":
        d2 = np.sum((X[rows, None, :] - X[None, :, :]) ** 2, axis=2)
        return -0.5 * d2 / kernel.bandwidth
    # softened Bernoulli, in log space; rho < 1 keeps every factor positive
    if not np.all((X == 0) | (X == 1)):
        raise DomainError("Bernoulli kernel requires binary data")
    xn = X[rows, None, :]
    xi = X[None, :, :]
    factors = (kernel.rho * xi) * xn + (1.0 - kernel.rho * xi) * (1.0 - xn)
    # a one-greater-than-zero mismatch still zeroes a factor; -inf is fine here
    with np.errstate(divide="ignore"):
        return np.sum(np.log(factors), axis=2)


def _table_from_log_rows(log_rows_fn, n, descriptor, fingerprint):
    q = np.empty((n, n), dtype=np.float64)
    for start in range(0, n, _ROW_CHUNK):
        rows = np.arange(start, min(start + _ROW_CHUNK, n))
        lk = log_rows_fn(rows)
        m = lk.max(axis=1, keepdims=True)
        if not np.all(np.isfinite(m)):
            raise DegenerateRowError("a row has no kernel mass")
        q[rows] = np.exp(lk - (m + np.log(np.sum(np.exp(lk - m), axis=1, keepdims=True))))
    # stable argsort on -q breaks ties by ascending index
    perm = np.argsort(-q, axis=1, kind="stable").astype(np.uint32)
    return MapaTable(q=q, perm=perm, kernel_descriptor=descriptor, fingerprint=fingerprint)


def compute_table(X, kernel: NoiseKernel) -> MapaTable:
    """Affinity-normalized index posterior for every observation, O(N^2 D)."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise ConfigurationError("need at least 2 observations")
    return _table_from_log_rows(lambda rows: _log_kappa_rows(X, kernel, rows),
                                n, kernel.descriptor(), data_fingerprint(X))


def ground_truth_table(dataset, gt_model) -> MapaTable:
    """True index posterior of the surrogate model: likelihood of x_n at f(z_i)."""
    X = dataset.X
    decoded = mlp_forward(gt_model.decoder, dataset.z_gt.reshape(-1, 1))
    var = gt_model.noise_var

    def log_rows(rows):
        d2 = np.sum((X[rows, None, :] - decoded[None, :, :]) ** 2, axis=2)
        return -0.5 * d2 / var

    return _table_from_log_rows(log_rows, dataset.n, "ground_truth",
                                data_fingerprint(X))


def naive_table(n) -> MapaTable:
    """Uniform ablation: every row is 1/N."""
    if n < 1:
        raise ConfigurationError("need at least 1 observation")
    q = np.full((n, n), 1.0 / n)
    perm = np.tile(np.arange(n, dtype=np.uint32), (n, 1))
    return MapaTable(q=q, perm=perm, kernel_descriptor="naive_uniform", fingerprint="")


def top_k(table: MapaTable, n, k):
    """The k most-probable indices of row n (ties resolved by ascending index)."""
    if not 1 <= k <= table.n:
        raise ConfigurationError(f"k must lie in [1, {table.n}], got {k}")
    return table.perm[n, :k].astype(np.int64)


def truncate_renormalize(table: MapaTable, n, k) -> TruncatedProposal:
    """Zero out the top-k support of row n and renormalize the tail."""
    if not 0 <= k <= table.n:
        raise ConfigurationError(f"k must lie in [0, {table.n}], got {k}")
    probs = table.q[n].copy()
    if k > 0:
        probs[table.perm[n, :k].astype(np.int64)] = 0.0
    mass = probs.sum()
    if mass <= 0.0:
        raise DegenerateRowError(f"row {n}: no probability mass outside the top-{k} set")
    probs /= mass
    return TruncatedProposal(n=int(n), k=int(k), probs=probs)


def sample(proposal: TruncatedProposal, s, rng):
    """`s` i.i.d. index draws from the truncated proposal."""
    if s < 0:
        raise ConfigurationError("sample count must be non-negative")
    if s == 0:
        return np.empty(0, dtype=np.int64)
    return rng.choice(proposal.probs.size, size=s, p=proposal.probs)


# --------------------------------------------------------------- disk cache

def table_cache_key(fingerprint, kernel_descriptor):
    import hashlib
    h = hashlib.sha256(f"{fingerprint}|{kernel_descriptor}".encode()).hexdigest()[:16]
    return f"table_{h}"


def save_table(path_prefix, table: MapaTable):
    """JSON header + f64 probability matrix + u32 permutation matrix."""
    os.makedirs(os.path.dirname(os.path.abspath(str(path_prefix))), exist_ok=True)
    q_path = f"{path_prefix}.q.bin"
    perm_path = f"{path_prefix}.perm.bin"
    np.ascontiguousarray(table.q, dtype="<f8").tofile(q_path)
    np.ascontiguousarray(table.perm, dtype="<u4").tofile(perm_path)
    header = {
        "format": "mapa-lab-table-v1",
        "n": table.n,
        "kernel": table.kernel_descriptor,
        "fingerprint": table.fingerprint,
        "q": os.path.basename(q_path),
        "perm": os.path.basename(perm_path),
        "q_dtype": "<f8",
        "perm_dtype": "<u4",
    }
    with open(f"{path_prefix}.json", "w") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")
    return f"{path_prefix}.json"


def load_table(json_path):
    with open(json_path) as f:
        header = json.load(f)
    base = os.path.dirname(os.path.abspath(json_path))
    n = header["n"]
    q = np.fromfile(os.path.join(base, header["q"]), dtype="<f8").reshape(n, n)
    perm = np.fromfile(os.path.join(base, header["perm"]), dtype="<u4").reshape(n, n)
    return MapaTable(q=q.astype(np.float64), perm=perm,
                     kernel_descriptor=header["kernel"], fingerprint=header["fingerprint"])


def compute_table_cached(X, kernel: NoiseKernel, cache=None) -> MapaTable:
    """Compute once per (dataset, kernel) and reuse from the cache directory."""
    fp = data_fingerprint(np.asarray(X, dtype=np.float64))
    prefix = os.path.join(cache_dir(cache), table_cache_key(fp, kernel.descriptor()))
    json_path = f"{prefix}.json"
    if os.path.exists(json_path):
        return load_table(json_path)
    table = compute_table(X, kernel)
    save_table(prefix, table)
    return table

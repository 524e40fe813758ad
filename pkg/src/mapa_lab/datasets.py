"""Synthetic benchmark datasets and their ground-truth surrogate decoders.

Each generator is a closed-form 1-D-latent manifold plus isotropic Gaussian
observation noise. Data is not drawn from the closed form directly: a
fully-connected surrogate decoder (3 hidden layers of 50 tanh units) is
first fit to the closed form under full supervision until its held-out MSE
drops below 1e-4, and the surrogate generates the observations. The
surrogate then serves as the ground-truth model for every evaluation that
needs one. Fits are cached on disk keyed by (generator, seed) because the
staircase-shaped generators take thousands of Adam steps.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, FitFailureError
from .mlp import MlpParams, init_mlp, mlp_apply, mlp_forward, param_list
from .models import load_net_bundle, save_net_bundle
from .optim import adam_step, init_adam
from .rng import make_rng
from .special import std_normal_cdf

CACHE_ENV_VAR = "MAPA_LAB_CACHE"

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class RawGenerator:
    """Closed-form generator: latent prior, decoder map, and noise level."""

    name: str
    noise_var: float
    prior: str           # "standard_normal" | "uniform01"
    obs_dim: int


GENERATORS = {
    "figure8": RawGenerator("figure8", 0.02, "standard_normal", 2),
    "circle": RawGenerator("circle", 0.01, "standard_normal", 2),
    "abs_value": RawGenerator("abs_value", 0.01, "standard_normal", 2),
    "clusters": RawGenerator("clusters", 0.2, "standard_normal", 2),
    "spiral_dots": RawGenerator("spiral_dots", 0.01, "standard_normal", 2),
    # 1-D two-variant pair sharing one data marginal; no surrogate is fit
    "intuition1d_v1": RawGenerator("intuition1d_v1", 0.01, "uniform01", 1),
    "intuition1d_v2": RawGenerator("intuition1d_v2", 0.01, "uniform01", 1),
}


def closed_form(name, z):
    """Noiseless decoder map z -> f(z) of a named generator, vectorized."""
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    if name == "abs_value":
        a = np.abs(std_normal_cdf(z))
        return np.stack([a, a], axis=1)
    if name == "circle":
        u = 2.0 * np.pi * std_normal_cdf(z)
        return np.stack([np.cos(u), np.sin(u)], axis=1)
    if name == "figure8":
        u = (0.6 + 1.8 * std_normal_cdf(z)) * np.pi
        den = np.sin(u) ** 2 + 1.0
        return np.stack([np.sqrt(2.0) / 2.0 * np.cos(u) / den,
                         np.sqrt(2.0) * np.cos(u) * np.sin(u) / den], axis=1)
    if name == "clusters":
        u = 2.0 * np.pi / (1.0 + np.exp(-0.5 * np.pi * z))
        t = 2.0 * np.tanh(10.0 * u - 20.0 * np.floor(u / 2.0) - 10.0) + 4.0 * np.floor(u / 2.0) + 2.0
        return np.stack([np.cos(t), np.sin(t)], axis=1)
    if name == "spiral_dots":
        u = 4.0 * np.pi / (1.0 + np.exp(-0.5 * np.pi * z))
        t = np.tanh(10.0 * u - 20.0 * np.floor(u / 2.0) - 10.0) + 2.0 * np.floor(u / 2.0) + 1.0
        return np.stack([t * np.cos(t), t * np.sin(t)], axis=1)
    if name == "intuition1d_v1":
        return ((0.5 - z) ** 2).reshape(-1, 1)
    if name == "intuition1d_v2":
        return (0.25 * z ** 2).reshape(-1, 1)
    raise ConfigurationError(f"unknown generator '{name}'")


def _draw_prior(gen: RawGenerator, n, rng):
    if gen.prior == "uniform01":
        return rng.uniform(0.0, 1.0, size=n)
    return rng.standard_normal(n)


@dataclass
class GroundTruthModel:
    """Surrogate decoder standing in for the data-generating process."""

    decoder: MlpParams
    noise_var: float
    prior: str = "standard_normal"
    fit_mse: float = float("nan")
    fit_steps: int = 0


@dataclass
class Dataset:
    name: str
    X: np.ndarray        # [N, D]
    z_gt: np.ndarray     # [N]
    eps_gt: np.ndarray   # [N, D]
    noise_var: float
    seed: int
    split_fractions: tuple = (0.8, 0.1, 0.1)
    split_seed: int = 0
    split_tags: np.ndarray = field(default=None)  # int8, 0=train 1=val 2=test

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def obs_dim(self):
        return self.X.shape[1]

    def indices(self, which):
        tag = SPLIT_NAMES.index(which)
        return np.nonzero(self.split_tags == tag)[0]

    def split_sizes(self):
        return [int(np.sum(self.split_tags == t)) for t in range(3)]

    def fingerprint(self):
        return data_fingerprint(self.X)


def data_fingerprint(X):
    """Stable hex digest of an observation matrix (content addressing)."""
    import hashlib
    h = hashlib.sha256()
    h.update(str(X.shape).encode())
    h.update(np.ascontiguousarray(X, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


# ------------------------------------------------------------ surrogate fit

SURROGATE_HIDDEN = (50, 50, 50)
SURROGATE_FIT_DRAWS = 4096
SURROGATE_CHECK_DRAWS = 10000   # fresh prior draws used for the MSE gate
SURROGATE_MAX_STEPS = 20000
SURROGATE_MSE_GATE = 1e-4


def fit_surrogate(name, seed, max_steps=SURROGATE_MAX_STEPS, mse_gate=SURROGATE_MSE_GATE):
    """Fit the 3x50 surrogate decoder to a generator's closed form.

    Full-batch Adam at lr 1e-3, early-stopped once held-out MSE clears the
    gate. Raises FitFailureError with the achieved MSE if the budget runs
    out first.
    """
    gen = GENERATORS[name]
    r = make_rng(seed, "surrogate", name)
    z_fit = _draw_prior(gen, SURROGATE_FIT_DRAWS, r).reshape(-1, 1)
    y_fit = closed_form(name, z_fit[:, 0])
    z_check = _draw_prior(gen, SURROGATE_CHECK_DRAWS, r).reshape(-1, 1)
    y_check = closed_form(name, z_check[:, 0])

    net = init_mlp(1, gen.obs_dim, SURROGATE_HIDDEN, r)
    params = param_list(net)
    state = init_adam(params, lr=1e-3)

    def loss(ps):
        out = mlp_apply(ps[0::2], ps[1::2], net.activation, z_fit)
        return ad.amean(ad.square(ad.sub(out, y_fit)))

    check_every = 250
    mse = np.inf
    for step in range(1, max_steps + 1):
        _, grads = ad.value_and_grad(loss, params)
        params, state = adam_step(state, params, grads)
        if step % check_every == 0 or step == max_steps:
            pred = mlp_apply(params[0::2], params[1::2], net.activation, z_check)
            mse = float(np.mean((pred - y_check) ** 2))
            if mse < mse_gate:
                fitted = MlpParams(weights=params[0::2], biases=params[1::2],
                                   activation=net.activation)
                return fitted, mse, step
    raise FitFailureError(
        f"surrogate for '{name}' missed MSE gate {mse_gate:g} after {max_steps} steps "
        f"(achieved {mse:.3e} on {SURROGATE_CHECK_DRAWS} held-out draws)")


def cache_dir(override=None):
    if override:
        return str(override)
    env = os.environ.get(CACHE_ENV_VAR)
    if env:
        return env
    return os.path.join(os.path.expanduser("~"), ".cache", "mapa_lab")


def _surrogate_cached(name, seed, cache=None):
    path = os.path.join(cache_dir(cache), f"surrogate_{name}_seed{seed}.json")
    if os.path.exists(path):
        header, nets = load_net_bundle(path)
        return nets["decoder"], float(header["mse"]), int(header["steps"])
    decoder, mse, steps = fit_surrogate(name, seed)
    save_net_bundle(path, {"decoder": decoder},
                    {"kind": "surrogate", "generator": name, "seed": seed,
                     "mse": mse, "steps": steps,
                     "check_draws": SURROGATE_CHECK_DRAWS})
    return decoder, mse, steps


# ---------------------------------------------------------------- generation

def generate(name, n, seed, cache=None, split_fractions=(0.8, 0.1, 0.1)):
    """Draw a dataset of `n` points and its ground-truth model.

    The surrogate decoder generates the observations: X = f(z) + eps with
    z from the generator's prior and eps ~ N(0, noise_var * I), so that
    X - eps_gt reproduces f(z_gt) exactly. The two intuition1d variants
    use their closed forms directly and carry no ground-truth model.
    """
    if name not in GENERATORS:
        raise ConfigurationError(f"unknown generator '{name}'")
    if n < 10:
        raise ConfigurationError("need at least 10 points")
    gen = GENERATORS[name]

    if gen.prior == "uniform01":
        decoder_fn, gt_model = lambda z: closed_form(name, z), None
    else:
        surrogate, mse, steps = _surrogate_cached(name, seed, cache)
        gt_model = GroundTruthModel(decoder=surrogate, noise_var=gen.noise_var,
                                    fit_mse=mse, fit_steps=steps)
        decoder_fn = lambda z: mlp_forward(surrogate, z.reshape(-1, 1))

    r = make_rng(seed, "data", name)
    z = _draw_prior(gen, n, r)
    eps = r.standard_normal((n, gen.obs_dim)) * np.sqrt(gen.noise_var)
    X = decoder_fn(z) + eps

    ds = Dataset(name=name, X=X, z_gt=z, eps_gt=eps, noise_var=gen.noise_var, seed=seed)
    ds = split(ds, split_fractions, seed)
    return ds, gt_model


def _split_tags(n, fractions, seed):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ConfigurationError("expected (train, val, test) fractions")
    if any(f < 0 for f in fractions):
        raise ConfigurationError("split fractions must be non-negative")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError("split fractions must sum to 1")
    bounds = np.round(np.cumsum(fractions) * n).astype(int)
    bounds[-1] = n
    perm = make_rng(seed, "split").permutation(n)
    tags = np.empty(n, dtype=np.int8)
    start = 0
    for t, stop in enumerate(bounds):
        tags[perm[start:stop]] = t
        start = stop
    return tags


def split(dataset: Dataset, fractions, seed) -> Dataset:
    """Re-tag a dataset into disjoint train/val/test; deterministic per seed."""
    tags = _split_tags(dataset.n, fractions, seed)
    return Dataset(name=dataset.name, X=dataset.X, z_gt=dataset.z_gt,
                   eps_gt=dataset.eps_gt, noise_var=dataset.noise_var,
                   seed=dataset.seed, split_fractions=tuple(fractions),
                   split_seed=seed, split_tags=tags)


# --------------------------------------------------------------- disk format

def save_dataset(dirpath, dataset: Dataset, gt_model=None, provenance=None):
    """One JSON metadata file plus flat little-endian float64 arrays."""
    os.makedirs(dirpath, exist_ok=True)
    arrays = {"X": "X.bin", "z_gt": "z_gt.bin", "eps_gt": "eps_gt.bin"}
    for attr, fname in arrays.items():
        np.ascontiguousarray(getattr(dataset, attr), dtype="<f8").tofile(
            os.path.join(dirpath, fname))
    meta = {
        "format": "mapa-lab-dataset-v1",
        "name": dataset.name,
        "n": dataset.n,
        "obs_dim": dataset.obs_dim,
        "noise_var": dataset.noise_var,
        "seed": dataset.seed,
        "split_fractions": list(dataset.split_fractions),
        "split_seed": dataset.split_seed,
        "split_sizes": dataset.split_sizes(),
        "arrays": arrays,
        "dtype": "<f8",
        "fingerprint": dataset.fingerprint(),
        "gt_model": None,
    }
    if gt_model is not None:
        save_net_bundle(os.path.join(dirpath, "gt_model.json"), {"decoder": gt_model.decoder},
                        {"kind": "ground_truth_model", "noise_var": gt_model.noise_var,
                         "prior": gt_model.prior, "mse": gt_model.fit_mse,
                         "steps": gt_model.fit_steps})
        meta["gt_model"] = "gt_model.json"
    if provenance is not None:
        meta["provenance"] = provenance
    path = os.path.join(dirpath, "dataset.json")
    with open(path, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_dataset(dirpath):
    """Read back (Dataset, GroundTruthModel | None) from save_dataset output."""
    with open(os.path.join(dirpath, "dataset.json")) as f:
        meta = json.load(f)
    n, d = meta["n"], meta["obs_dim"]
    arrs = {}
    for attr, fname in meta["arrays"].items():
        arrs[attr] = np.fromfile(os.path.join(dirpath, fname), dtype="<f8").astype(np.float64)
    ds = Dataset(name=meta["name"], X=arrs["X"].reshape(n, d), z_gt=arrs["z_gt"],
                 eps_gt=arrs["eps_gt"].reshape(n, d), noise_var=meta["noise_var"],
                 seed=meta["seed"])
    ds = split(ds, meta["split_fractions"], meta["split_seed"])
    gt = None
    if meta.get("gt_model"):
        header, nets = load_net_bundle(os.path.join(dirpath, meta["gt_model"]))
        gt = GroundTruthModel(decoder=nets["decoder"], noise_var=float(header["noise_var"]),
                              prior=header["prior"], fit_mse=float(header["mse"]),
                              fit_steps=int(header["steps"]))
    return ds, gt

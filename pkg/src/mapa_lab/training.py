"""Training loop: random restarts, validation-based selection, divergence
handling, and per-epoch history suitable for the CSV schema.

Methods:

* ``ae``          self-reconstruction objective
* ``vae``         single-sample ELBO, mean-field Gaussian proposal
* ``iwae``        S-sample importance-weighted bound, same proposal
* ``mapa``        index-proposal stochastic bound, affinity table
* ``mapa_gt``     ablation: table from the true surrogate posterior
* ``mapa_naive``  ablation: uniform table

The empiricalized methods treat the train split as the atom set: tables
are built over it and the inner sums always range over all train atoms,
whatever the gradient batch. Restarts run on independent seed streams, so
results are bitwise reproducible and restart-parallelism cannot change
them. Validation uses each method's own objective (the deterministic,
complete marginalization for the empiricalized methods).
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .datasets import Dataset
from .errors import ConfigurationError, NumericError, TrainingError
from .mapa import compute_table_cached, ground_truth_table, naive_table, rbf_kernel
from .mlp import init_mlp, param_list, replace_params
from .models import (
    PRIOR_EMPIRICAL,
    PRIOR_STANDARD_NORMAL,
    GaussianProposal,
    GenerativeModel,
)
from .objectives import (
    CostMeter,
    ae_loss,
    elbo_vae,
    exact_empiricalized_lml,
    iwae_bound,
    mapa_bound_batch,
)
from .optim import adam_step, init_adam
from .rng import make_rng

METHODS = ("ae", "vae", "iwae", "mapa", "mapa_gt", "mapa_naive")
MAPA_METHODS = ("mapa", "mapa_gt", "mapa_naive")

HISTORY_FIELDS = ("epoch", "train_bound", "val_bound", "wall_clock_s",
                  "decoder_passes", "encoder_passes")


@dataclass
class TrainConfig:
    method: str
    epochs: int = 500
    batch_size: int = 100
    lr: float = 1e-3
    restarts: int = 3
    s: int = 10                 # importance samples (iwae / mapa)
    k_frac: float = 0.1         # top-k size as a fraction of s (mapa)
    hidden: tuple = (50, 50, 50)
    latent_dim: int = 1
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method '{self.method}'")
        if self.method == "iwae" and self.s < 1:
            raise ConfigurationError("iwae needs s >= 1")


def mapa_k(s, k_frac):
    """Top-k size rule: a fraction of the importance-sample count, at least 1."""
    return max(1, int(round(k_frac * s)))


@dataclass
class RestartOutcome:
    index: int
    params: list
    val_metric: float
    history: list
    meter: CostMeter
    failed: bool = False
    fail_reason: str = ""


@dataclass
class TrainResult:
    method: str
    model: GenerativeModel
    proposal: GaussianProposal
    best_restart: int
    val_metric: float
    history: list               # per-epoch dicts for the winning restart
    restart_summaries: list
    config: TrainConfig
    atom_indices: np.ndarray = field(default=None)   # train-split rows used as atoms


def build_table(dataset: Dataset, method, atom_indices, gt_model=None, cache=None):
    """The affinity table (or ablation) over the train-split atoms."""
    X_atoms = dataset.X[atom_indices]
    if method == "mapa":
        return compute_table_cached(X_atoms, rbf_kernel(dataset.noise_var), cache)
    if method == "mapa_gt":
        if gt_model is None:
            raise ConfigurationError("mapa_gt requires the ground-truth model")
        sub = Dataset(name=dataset.name, X=X_atoms, z_gt=dataset.z_gt[atom_indices],
                      eps_gt=dataset.eps_gt[atom_indices], noise_var=dataset.noise_var,
                      seed=dataset.seed)
        return ground_truth_table(sub, gt_model)
    if method == "mapa_naive":
        return naive_table(len(atom_indices))
    return None


def _init_params(config: TrainConfig, obs_dim, restart):
    """Architecture prototypes plus the initial flat parameter list."""
    r = make_rng(config.seed, "init", restart)
    decoder = init_mlp(config.latent_dim, obs_dim, config.hidden, r)
    if config.method in ("vae", "iwae"):
        prop_net = init_mlp(obs_dim, 2 * config.latent_dim, config.hidden, r)
        params = param_list(decoder) + param_list(prop_net)
        return decoder, None, prop_net, params
    encoder = init_mlp(obs_dim, config.latent_dim, config.hidden, r)
    return decoder, encoder, None, param_list(decoder) + param_list(encoder)


def _run_restart(dataset: Dataset, config: TrainConfig, restart, table, atom_indices):
    method = config.method
    train_idx = atom_indices
    n_atoms = len(train_idx)
    X_atoms = dataset.X[train_idx]
    val_idx = dataset.indices("val")
    X_val = dataset.X[val_idx]

    decoder, encoder, prop_net, params = _init_params(config, dataset.obs_dim, restart)
    if encoder is not None:
        proto = GenerativeModel(decoder=decoder, encoder=encoder,
                                noise_var=dataset.noise_var, prior=PRIOR_EMPIRICAL)
    else:
        proto = GenerativeModel(decoder=decoder, encoder=None,
                                noise_var=dataset.noise_var, prior=PRIOR_STANDARD_NORMAL)
        proposal = GaussianProposal(net=prop_net, latent_dim=config.latent_dim)
    state = init_adam(params, lr=config.lr)
    meter = CostMeter()
    history = []
    k = mapa_k(config.s, config.k_frac) if method in MAPA_METHODS else 0

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        enc0, dec0 = meter.encoder_passes, meter.decoder_passes
        r_epoch = make_rng(config.seed, "epoch", restart, epoch)
        order = r_epoch.permutation(n_atoms)
        bound_sum, count = 0.0, 0
        try:
            for start in range(0, n_atoms, config.batch_size):
                batch = order[start:start + config.batch_size]

                if method == "ae":
                    def loss(ps):
                        return ad.neg(ad.amean(ae_loss(
                            proto, X_atoms[batch], n_atoms, params=ps, meter=meter)))
                elif method == "vae":
                    eps = r_epoch.standard_normal((batch.size, config.latent_dim))
                    def loss(ps):
                        return ad.neg(ad.amean(elbo_vae(
                            proto, proposal, X_atoms[batch],
                            params=ps, eps=eps, meter=meter)))
                elif method == "iwae":
                    eps = r_epoch.standard_normal((batch.size, config.s, config.latent_dim))
                    def loss(ps):
                        return ad.neg(ad.amean(iwae_bound(
                            proto, proposal, X_atoms[batch], config.s,
                            params=ps, eps=eps, meter=meter)))
                else:
                    def loss(ps):
                        return ad.neg(ad.amean(mapa_bound_batch(
                            proto, table, X_atoms, batch, k, config.s,
                            rng=r_epoch, params=ps, meter=meter)))

                value, grads = ad.value_and_grad(loss, params)
                if not np.isfinite(value):
                    raise NumericError("loss")
                params, state = adam_step(state, params, grads)
                bound_sum += -value * batch.size
                count += batch.size
        except NumericError as err:
            return RestartOutcome(index=restart, params=None, val_metric=-np.inf,
                                  history=history, meter=meter, failed=True,
                                  fail_reason=str(err))

        val = _validation_metric(method, proto, proposal if encoder is None else None,
                                 params, X_atoms, X_val, config, restart, epoch)
        history.append({
            "epoch": epoch,
            "train_bound": bound_sum / max(count, 1),
            "val_bound": val,
            "wall_clock_s": time.perf_counter() - t0,
            "decoder_passes": meter.decoder_passes - dec0,
            "encoder_passes": meter.encoder_passes - enc0,
        })

    final_val = history[-1]["val_bound"] if history else -np.inf
    return RestartOutcome(index=restart, params=params, val_metric=final_val,
                          history=history, meter=meter)


def _validation_metric(method, proto, proposal, params, X_atoms, X_val, config,
                       restart, epoch):
    """The method's own objective on the validation split (selection proxy)."""
    if X_val.shape[0] == 0:
        return float("nan")
    if method == "ae":
        vals = ae_loss(proto, X_val, X_atoms.shape[0], params=params)
    elif method == "vae":
        eps = make_rng(config.seed, "val", restart, epoch).standard_normal(
            (X_val.shape[0], config.latent_dim))
        vals = elbo_vae(proto, proposal, X_val, params=params, eps=eps)
    elif method == "iwae":
        eps = make_rng(config.seed, "val", restart, epoch).standard_normal(
            (X_val.shape[0], max(config.s, 1), config.latent_dim))
        vals = iwae_bound(proto, proposal, X_val, max(config.s, 1), params=params, eps=eps)
    else:
        # deterministic, complete form of the empiricalized objective
        vals = exact_empiricalized_lml(proto, X_val, X_atoms, params=params)
    return float(np.mean(np.asarray(vals)))


def train(dataset: Dataset, config: TrainConfig, gt_model=None, cache=None) -> TrainResult:
    """Run all restarts, select the best by validation metric, keep its history."""
    atom_indices = dataset.indices("train")
    if atom_indices.size == 0:
        raise ConfigurationError("dataset has an empty train split")
    table = build_table(dataset, config.method, atom_indices, gt_model, cache) \
        if config.method in MAPA_METHODS else None

    def worker(r):
        return _run_restart(dataset, config, r, table, atom_indices)

    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            outcomes = list(pool.map(worker, range(config.restarts)))
    else:
        outcomes = [worker(r) for r in range(config.restarts)]

    ok = [o for o in outcomes if not o.failed]
    if not ok:
        reasons = "; ".join(o.fail_reason for o in outcomes)
        raise TrainingError(f"all {config.restarts} restarts failed: {reasons}")
    best = max(ok, key=lambda o: (o.val_metric if np.isfinite(o.val_metric)
                                  else o.history[-1]["train_bound"], -o.index))

    decoder_proto, encoder_proto, prop_proto, _ = _init_params(
        config, dataset.obs_dim, best.index)
    nd = 2 * decoder_proto.n_layers
    decoder = replace_params(decoder_proto, best.params[:nd])
    if config.method in ("vae", "iwae"):
        model = GenerativeModel(decoder=decoder, encoder=None,
                                noise_var=dataset.noise_var, prior=PRIOR_STANDARD_NORMAL)
        proposal = GaussianProposal(net=replace_params(prop_proto, best.params[nd:]),
                                    latent_dim=config.latent_dim)
    else:
        model = GenerativeModel(decoder=decoder,
                                encoder=replace_params(encoder_proto, best.params[nd:]),
                                noise_var=dataset.noise_var, prior=PRIOR_EMPIRICAL)
        proposal = None

    summaries = [{
        "restart": o.index,
        "failed": o.failed,
        "val_metric": o.val_metric,
        "decoder_passes": o.meter.decoder_passes,
        "encoder_passes": o.meter.encoder_passes,
    } for o in outcomes]
    return TrainResult(method=config.method, model=model, proposal=proposal,
                       best_restart=best.index, val_metric=best.val_metric,
                       history=best.history, restart_summaries=summaries,
                       config=config, atom_indices=atom_indices)

"""Common evaluation protocol and the headline experiments.

Every trained model is scored the same way, whatever objective trained it:

1. freeze the generative parameters and fit a 50-component Gaussian-mixture
   proposal by maximizing the importance-weighted bound with S = 500
   (Adam, lr 1e-3, batch 1000, 100 epochs);
2. estimate per-point test log-likelihood with the same bound at
   S = 20000, chunked to bound memory.

KL to the ground truth is the Monte-Carlo average of
LL_gt(x) - LL_learned(x) over fresh ground-truth samples (the test split
by default), with both sides estimated by the identical protocol so their
bound bias cancels to first order.

The remaining entry points reproduce the posterior-trend comparison, the
non-identifiability study, and the forward-pass cost accounting.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from . import autodiff as ad
from .errors import ConfigurationError, NumericError, TrainingError
from .mapa import MapaTable, compute_table, ground_truth_table, rbf_kernel
from .mlp import init_mlp, mlp_apply, mlp_forward, param_list, replace_params
from .models import MixtureProposal
from .objectives import CostMeter, gaussian_loglik
from .optim import adam_step, init_adam
from .rng import make_rng
from .special import LOG_2PI, gaussian_logpdf
from .training import TrainConfig, train

EVAL_COMPONENTS = 50
EVAL_FIT_S = 500
EVAL_FIT_LR = 1e-3
EVAL_FIT_BATCH = 1000
EVAL_FIT_EPOCHS = 100
EVAL_LL_S = 20000
EVAL_LL_CHUNK = 500
POINT_CHUNK = 100


# ------------------------------------------------------- mixture machinery

def _mixture_heads(proposal: MixtureProposal, x, params=None):
    """(log-weights, means, logvars) of the mixture encoder on batch x."""
    if params is None:
        w, b = proposal.net.weights, proposal.net.biases
    else:
        w, b = params[0::2], params[1::2]
    out = mlp_apply(w, b, proposal.net.activation, x)
    k, latent = proposal.n_components, proposal.latent_dim
    bsz = np.asarray(x).shape[0]
    logits = ad.narrow(out, 1, 0, k)
    log_w = ad.sub(logits, ad.logsumexp(logits, axis=1, keepdims=True))
    means = ad.reshape(ad.narrow(out, 1, k, k * latent), (bsz, k, latent))
    logvars = ad.reshape(ad.narrow(out, 1, k + k * latent, k * latent), (bsz, k, latent))
    return log_w, means, logvars


def _sample_components(log_w_values, s, rng):
    """Per-row categorical draws; the index is treated as a sampled constant."""
    probs = np.exp(log_w_values)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((probs.shape[0], s))
    idx = np.empty((probs.shape[0], s), dtype=np.int64)
    for row in range(probs.shape[0]):
        idx[row] = np.searchsorted(cdf[row], u[row], side="right")
    return np.minimum(idx, probs.shape[1] - 1)


def _mixture_log_density_composite(z, log_w, means, logvars):
    """Reference implementation from generic primitives (slow, test oracle)."""
    bsz, s, latent = ad.val(z).shape
    k = ad.val(means).shape[1]
    z4 = ad.reshape(z, (bsz, s, 1, latent))
    mu4 = ad.reshape(means, (bsz, 1, k, latent))
    lv4 = ad.reshape(logvars, (bsz, 1, k, latent))
    quad = ad.div(ad.square(ad.sub(z4, mu4)), ad.exp(lv4))
    comp = ad.mul(-0.5, ad.add(ad.asum(ad.add(lv4, quad), axis=3), latent * LOG_2PI))
    lw3 = ad.reshape(log_w, (bsz, 1, k))
    return ad.logsumexp(ad.add(lw3, comp), axis=2)


def _mixture_log_density(z, log_w, means, logvars):
    """log q(z | x) under the full mixture; differentiable wrt every head.

    Fused primitive: this is the hottest tensor in the whole evaluation
    pipeline ([B, S, K] per chunk), so forward and backward are written
    by hand instead of composing generic ops. Verified against
    `_mixture_log_density_composite` and finite differences in the tests.
    """
    zv, lwv = ad.val(z), ad.val(log_w)
    mv, lvv = ad.val(means), ad.val(logvars)
    bsz, s, latent = zv.shape
    k = mv.shape[1]

    diff = zv[:, :, None, :] - mv[:, None, :, :]          # [B, S, K, L]
    inv_var = np.exp(-lvv)                                # [B, K, L]
    quad = np.einsum("bskl,bkl->bsk", diff * diff, inv_var)
    lv_sum = lvv.sum(axis=2)                              # [B, K]
    comp = -0.5 * (lv_sum[:, None, :] + quad + latent * LOG_2PI)
    a = lwv[:, None, :] + comp                            # [B, S, K]
    m = a.max(axis=2, keepdims=True)
    logq = (m + np.log(np.sum(np.exp(a - m), axis=2, keepdims=True)))[:, :, 0]
    if not np.all(np.isfinite(logq)):
        raise NumericError("mixture_log_density")

    def make_pulls():
        def softmax_weights(g):
            r = np.exp(a - logq[:, :, None])
            return g[:, :, None] * r                      # [B, S, K]

        cache = {}

        def gr_of(g):
            key = id(g)
            if key not in cache:
                cache.clear()
                cache[key] = softmax_weights(g)
            return cache[key]

        def pull_z(g):
            gr = gr_of(g)
            return -np.einsum("bsk,bskl,bkl->bsl", gr, diff, inv_var)

        def pull_lw(g):
            return gr_of(g).sum(axis=1)

        def pull_means(g):
            gr = gr_of(g)
            return np.einsum("bsk,bskl,bkl->bkl", gr, diff, inv_var)

        def pull_logvars(g):
            gr = gr_of(g)
            quad_l = diff * diff * inv_var[:, None, :, :]
            return 0.5 * (np.einsum("bsk,bskl->bkl", gr, quad_l)
                          - gr.sum(axis=1)[:, :, None])
        return pull_z, pull_lw, pull_means, pull_logvars

    pz, plw, pm, plv = make_pulls()
    pulls = ((z, pz), (log_w, plw), (means, pm), (logvars, plv))
    parents = tuple(x for x, _ in pulls if isinstance(x, ad.Tensor))
    if not parents:
        return logq
    fns = tuple(fn for x, fn in pulls if isinstance(x, ad.Tensor))
    return ad.Tensor(logq, parents, lambda g: tuple(fn(g) for fn in fns))


def mog_iwae_bound(model, proposal: MixtureProposal, x, s, rng, params=None,
                   meter=None):
    """Importance-weighted bound with the mixture proposal; the generative
    model is a frozen constant, gradients reach only the proposal heads.

    Sampling is stratified per draw: a component index is sampled (constant)
    and the Gaussian within it is reparameterized, so gradients flow through
    the selected means/logvars and, via the density, through every head.
    """
    xb = np.asarray(x, dtype=np.float64)
    bsz, d = xb.shape
    latent = proposal.latent_dim
    log_w, means, logvars = _mixture_heads(proposal, xb, params)
    comp_idx = _sample_components(np.asarray(ad.val(log_w)), s, rng)
    eps = rng.standard_normal((bsz, s, latent))
    mu_sel = ad.take_pairs(means, comp_idx)
    lv_sel = ad.take_pairs(logvars, comp_idx)
    z = ad.add(mu_sel, ad.mul(ad.exp(ad.mul(0.5, lv_sel)), eps))     # [B, S, L]

    log_q = _mixture_log_density(z, log_w, means, logvars)
    log_pz = ad.add(ad.mul(-0.5, ad.asum(ad.square(z), axis=2)), -0.5 * latent * LOG_2PI)
    y = mlp_apply(model.decoder.weights, model.decoder.biases,
                  model.decoder.activation, ad.reshape(z, (bsz * s, latent)))
    log_px = gaussian_loglik(xb[:, None, :], ad.reshape(y, (bsz, s, d)), model.noise_var)
    if meter is not None:
        meter.add(enc=bsz, dec=bsz * s)
    logw = ad.sub(ad.add(log_px, log_pz), log_q)
    return ad.add(ad.logsumexp(logw, axis=1), -np.log(s))


# ------------------------------------------------------------ proposal fit

def init_mixture_proposal(obs_dim, latent_dim, rng, n_components=EVAL_COMPONENTS,
                          hidden=(50, 50, 50)):
    net = init_mlp(obs_dim, n_components * (1 + 2 * latent_dim), hidden, rng)
    return MixtureProposal(net=net, latent_dim=latent_dim, n_components=n_components)


def fit_eval_proposal(frozen_model, X_train, rng, n_components=EVAL_COMPONENTS,
                      s=EVAL_FIT_S, lr=EVAL_FIT_LR, batch_size=EVAL_FIT_BATCH,
                      epochs=EVAL_FIT_EPOCHS, point_chunk=POINT_CHUNK, meter=None):
    """Maximize the S-sample bound over mixture-proposal parameters only.

    The generative model is asserted frozen: its arrays are bit-identical
    before and after. On divergence the fit restarts once at half the
    learning rate, then raises.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    latent = frozen_model.decoder.input_dim
    before = [a.copy() for a in param_list(frozen_model.decoder)]

    try:
        proposal = _fit_proposal_once(frozen_model, X_train, rng, n_components,
                                      s, lr, batch_size, epochs, point_chunk, meter)
    except NumericError:
        proposal = _fit_proposal_once(frozen_model, X_train, rng, n_components,
                                      s, lr * 0.5, batch_size, epochs, point_chunk, meter)

    after = param_list(frozen_model.decoder)
    for a, b in zip(before, after):
        if not np.array_equal(a, b):
            raise ConfigurationError("generative parameters changed during proposal fit")
    assert proposal.latent_dim == latent
    return proposal


def _fit_proposal_once(model, X_train, rng, n_components, s, lr, batch_size,
                       epochs, point_chunk, meter):
    n = X_train.shape[0]
    latent = model.decoder.input_dim
    proposal = init_mixture_proposal(X_train.shape[1], latent, rng, n_components)
    params = param_list(proposal.net)
    state = init_adam(params, lr=lr)

    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            xb = X_train[batch]
            total_grads = [np.zeros_like(p) for p in params]
            for cstart in range(0, batch.size, point_chunk):
                xc = xb[cstart:cstart + point_chunk]

                def loss(ps):
                    bound = mog_iwae_bound(model, proposal, xc, s, rng, params=ps,
                                           meter=meter)
                    return ad.neg(ad.asum(bound))

                _, grads = ad.value_and_grad(loss, params)
                for t, g in zip(total_grads, grads):
                    t += g
            scaled = [g / batch.size for g in total_grads]
            params, state = adam_step(state, params, scaled)
    proposal.net = replace_params(proposal.net, params)
    return proposal


# ------------------------------------------------------------- LL estimate

def estimate_ll(frozen_model, proposal: MixtureProposal, X_test, rng,
                s_total=EVAL_LL_S, s_chunk=EVAL_LL_CHUNK,
                point_chunk=POINT_CHUNK, meter=None):
    """Per-point bound at S = s_total, computed in S-chunks of s_chunk."""
    X_test = np.asarray(X_test, dtype=np.float64)
    out = np.empty(X_test.shape[0])
    for start in range(0, X_test.shape[0], point_chunk):
        xc = X_test[start:start + point_chunk]
        chunk_lses = []
        done = 0
        while done < s_total:
            s_now = min(s_chunk, s_total - done)
            bound = mog_iwae_bound(frozen_model, proposal, xc, s_now, rng, meter=meter)
            # undo the per-chunk 1/s to recombine exactly: lse = bound + log s
            chunk_lses.append(np.asarray(bound) + np.log(s_now))
            done += s_now
        lse = np.logaddexp.reduce(np.stack(chunk_lses), axis=0)
        out[start:start + xc.shape[0]] = lse - np.log(s_total)
    return out


@dataclass
class EvalReport:
    method: str
    dataset: str
    kl: float
    kl_stderr: float
    test_ll: np.ndarray
    gt_ll: np.ndarray
    meter: CostMeter
    metadata: dict = field(default_factory=dict)


def kl_to_ground_truth(gt_model, learned_model, dataset, rng, n_samples=None,
                       gt_proposal=None, learned_proposal=None,
                       fit_kwargs=None, ll_kwargs=None):
    """MC estimate of KL[p_gt || p_learned] over ground-truth samples.

    Uses the dataset's test split by default; `n_samples` draws fresh
    points from the ground-truth model instead. Proposals may be passed in
    to reuse earlier fits (the gt-side fit depends only on the dataset).
    """
    fit_kwargs = fit_kwargs or {}
    ll_kwargs = ll_kwargs or {}
    X_train = dataset.X[dataset.indices("train")]
    if n_samples is None:
        x_eval = dataset.X[dataset.indices("test")]
    else:
        z = rng.standard_normal(n_samples)
        eps = rng.standard_normal((n_samples, dataset.obs_dim)) * np.sqrt(gt_model.noise_var)
        x_eval = mlp_forward(gt_model.decoder, z.reshape(-1, 1)) + eps

    meter = CostMeter()
    if gt_proposal is None:
        gt_proposal = fit_eval_proposal(gt_model, X_train, make_rng(0, "eval", "gt-fit"),
                                        meter=meter, **fit_kwargs)
    if learned_proposal is None:
        learned_proposal = fit_eval_proposal(learned_model, X_train,
                                             make_rng(0, "eval", "learned-fit"),
                                             meter=meter, **fit_kwargs)
    ll_gt = estimate_ll(gt_model, gt_proposal, x_eval,
                        make_rng(0, "eval", "gt-ll"), meter=meter, **ll_kwargs)
    ll_learned = estimate_ll(learned_model, learned_proposal, x_eval,
                             make_rng(0, "eval", "learned-ll"), meter=meter, **ll_kwargs)
    diffs = ll_gt - ll_learned
    kl = float(diffs.mean())
    stderr = float(diffs.std(ddof=1) / np.sqrt(diffs.size)) if diffs.size > 1 else 0.0
    return kl, stderr, ll_gt, ll_learned, meter


# ---------------------------------------------------------- posterior trends

@dataclass
class TrendRecord:
    point: int                 # dataset row index of the conditioning x
    grid_z: np.ndarray         # z grid for the original-model posterior
    log_posterior_grid: np.ndarray
    grid_integral: float       # trapezoid mass of the grid posterior
    z_coords: np.ndarray       # latent coordinate of every atom
    log_empirical_scaled: np.ndarray   # log(N * true empiricalized row)
    log_mapa_scaled: np.ndarray        # log(N * affinity row)
    spearman: float            # rank agreement of the two rows


def posterior_trends(dataset, gt_model, table: MapaTable, x_indices,
                     grid=(-4.0, 4.0, 801)):
    """Per-point comparison of the three posterior views on shared axes."""
    zg = np.linspace(grid[0], grid[1], grid[2])
    fz = mlp_forward(gt_model.decoder, zg.reshape(-1, 1))          # [G, D]
    log_prior = gaussian_logpdf(zg, 0.0, 1.0)
    gt_table = ground_truth_table(dataset, gt_model)
    n = dataset.n
    records = []
    with np.errstate(divide="ignore"):
        for idx in np.atleast_1d(x_indices):
            x = dataset.X[idx]
            ll = gaussian_logpdf(x, fz, gt_model.noise_var).sum(axis=1) + log_prior
            m = ll.max()
            log_px = m + np.log(np.trapezoid(np.exp(ll - m), zg))
            log_post = ll - log_px
            integral = float(np.trapezoid(np.exp(log_post), zg))
            emp = gt_table.q[idx]
            mapa_row = table.q[idx]
            rho = float(spearmanr(emp, mapa_row).statistic)
            records.append(TrendRecord(
                point=int(idx), grid_z=zg, log_posterior_grid=log_post,
                grid_integral=integral, z_coords=dataset.z_gt.copy(),
                log_empirical_scaled=np.log(emp) + np.log(n),
                log_mapa_scaled=np.log(mapa_row) + np.log(n),
                spearman=rho))
    return records


# ------------------------------------------------------- non-identifiability

@dataclass
class VariantTrend:
    point: int
    corr_variant1: float       # rank agreement: affinity row vs variant-1 row
    corr_variant2: float


@dataclass
class NonIdentResult:
    dataset: str
    records: list
    median_corr_variant1: float
    median_corr_variant2: float
    decoder_max_discrepancy: float
    table_fingerprint: str
    variant2_coords: np.ndarray


def non_identifiability_study(dataset, gt_model, rng, n_points=50,
                              vae_config: TrainConfig = None, cache=None):
    """Compare how well one shared table tracks the posteriors of two models
    that explain the data equally well: the ground truth (variant 1) and a
    mean-field-Gaussian-trained model (variant 2).
    """
    if dataset.name not in ("abs_value", "circle"):
        raise ConfigurationError("study is defined for abs_value and circle only")
    table = compute_table(dataset.X, rbf_kernel(dataset.noise_var))

    if vae_config is None:
        vae_config = TrainConfig(method="vae", epochs=300, batch_size=100,
                                 restarts=3, seed=int(rng.integers(1 << 31)))
    result = train(dataset, vae_config, cache=cache)     # TrainingError propagates
    v2_decoder = result.model.decoder
    prop_out = mlp_forward(result.proposal.net, dataset.X)
    v2_coords = prop_out[:, :vae_config.latent_dim][:, 0]   # posterior means

    v1_decoded = mlp_forward(gt_model.decoder, dataset.z_gt.reshape(-1, 1))
    v2_decoded = mlp_forward(v2_decoder, v2_coords.reshape(-1, 1))

    def posterior_rows(decoded, x_idx):
        d2 = np.sum((dataset.X[x_idx][None, :] - decoded) ** 2, axis=1)
        ll = -0.5 * d2 / dataset.noise_var
        w = np.exp(ll - ll.max())
        return w / w.sum()

    points = rng.choice(dataset.n, size=min(n_points, dataset.n), replace=False)
    records = []
    for idx in points:
        row = table.q[idx]
        r1 = float(spearmanr(row, posterior_rows(v1_decoded, idx)).statistic)
        r2 = float(spearmanr(row, posterior_rows(v2_decoded, idx)).statistic)
        records.append(VariantTrend(point=int(idx), corr_variant1=r1, corr_variant2=r2))

    zg = np.linspace(-3, 3, 601).reshape(-1, 1)
    disc = float(np.max(np.abs(mlp_forward(gt_model.decoder, zg) - mlp_forward(v2_decoder, zg))))
    return NonIdentResult(
        dataset=dataset.name, records=records,
        median_corr_variant1=float(np.median([r.corr_variant1 for r in records])),
        median_corr_variant2=float(np.median([r.corr_variant2 for r in records])),
        decoder_max_discrepancy=disc,
        table_fingerprint=table.fingerprint,
        variant2_coords=v2_coords)


# ------------------------------------------------------------ pass counting

def count_passes(dataset, table: MapaTable, s_grid, k_frac, batch_size,
                 latent_dim=1, hidden=(50, 50, 50), seed=0):
    """Per-point forward-pass costs for each method and sample count.

    IWAE costs are closed-form (decoder passes = B*S exactly, one encoder
    pass per point). The index-proposal costs are measured from a real
    batch's CostMeter and are capped by the atom count N per batch, which
    is also reported as the ceiling row ("mapa_max").
    """
    if batch_size > table.n:
        raise ConfigurationError("batch size exceeds dataset size")
    from .models import GenerativeModel
    from .objectives import mapa_bound_batch
    r = make_rng(seed, "count-passes")
    decoder = init_mlp(latent_dim, dataset.obs_dim, hidden, r)
    encoder = init_mlp(dataset.obs_dim, latent_dim, hidden, r)
    model = GenerativeModel(decoder=decoder, encoder=encoder,
                            noise_var=dataset.noise_var, prior="empirical")
    rows = []
    for s in s_grid:
        k = max(1, int(round(k_frac * s)))
        batch = r.choice(table.n, size=batch_size, replace=False)
        meter = CostMeter()
        mapa_bound_batch(model, table, dataset.X, batch, k, s, rng=r, meter=meter)
        rows.append({
            "method": "mapa", "s": s, "k": k,
            "decoder_per_point": meter.decoder_passes / batch_size,
            "encoder_per_point": meter.encoder_passes / batch_size,
            "total_per_point": meter.total() / batch_size,
        })
        rows.append({
            "method": "iwae", "s": s, "k": 0,
            "decoder_per_point": float(s),
            "encoder_per_point": 1.0,
            "total_per_point": float(s + 1),
        })
    rows.append({
        "method": "mapa_max", "s": 0, "k": 0,
        "decoder_per_point": table.n / batch_size,
        "encoder_per_point": table.n / batch_size,
        "total_per_point": 2 * table.n / batch_size,
    })
    return rows

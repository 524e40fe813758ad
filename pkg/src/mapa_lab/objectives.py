"""Per-point training objectives: AE loss, exact empiricalized log marginal
likelihood, single-sample ELBO, importance-weighted bound, and the
index-proposal stochastic bound.

Conventions shared by every function here:

* `x` is one point [D] or a batch [B, D]; the return value has matching
  shape ([] or [B]) and is a Tensor when `params` is a list of lifted
  autodiff leaves, a plain ndarray otherwise.
* `params`, when given, replaces the model's own arrays: decoder arrays
  first, then encoder (or proposal-net) arrays, in `param_list` order.
* Monte-Carlo draws can be passed explicitly (`eps`, `samples`) so tests
  can hold them fixed across finite-difference evaluations; training
  passes an rng instead.
* A `CostMeter` counts network forward passes: one per distinct input row
  per network. Batched calls share passes wherever the math allows.

The index-proposal bound never differentiates through the table: row
probabilities enter only as constant log-coefficients.
"""

import numpy as np
from dataclasses import dataclass

from . import autodiff as ad
from .errors import ConfigurationError, DegenerateRowError
from .mlp import mlp_apply
from .special import LOG_2PI


@dataclass
class CostMeter:
    encoder_passes: int = 0
    decoder_passes: int = 0

    def add(self, enc=0, dec=0):
        self.encoder_passes += int(enc)
        self.decoder_passes += int(dec)

    def total(self):
        return self.encoder_passes + self.decoder_passes


@dataclass
class BoundEstimate:
    """Per-point bound values bundled with what produced them."""

    values: np.ndarray
    method: str
    s: int = 0
    k: int = 0
    meter: CostMeter = None

    def mean(self):
        return float(np.mean(self.values))


def _as_batch(x):
    xv = np.asarray(x, dtype=np.float64)
    if xv.ndim == 1:
        return xv.reshape(1, -1), True
    return xv, False


def _maybe_squeeze(out, single):
    if not single:
        return out
    return ad.reshape(out, ()) if isinstance(out, ad.Tensor) else out.reshape(())


def _model_nets(model, params):
    """(dec_w, dec_b, enc_w, enc_b), lifted from `params` when given."""
    if params is None:
        return (model.decoder.weights, model.decoder.biases,
                model.encoder.weights, model.encoder.biases)
    return model.nets_from(params)


def gaussian_loglik(x, y, var):
    """Isotropic Gaussian log-likelihood of rows `x` at means `y` (AD-aware).

    Sums over the trailing axis; broadcasting between x and y is allowed.
    """
    d = np.asarray(x).shape[-1]
    sq = ad.asum(ad.square(ad.sub(x, y)), axis=-1)
    return ad.add(ad.mul(-0.5 / var, sq), -0.5 * d * (LOG_2PI + np.log(var)))


# ------------------------------------------------------------------ AE loss

def ae_loss(model, x, n_atoms, params=None, meter=None):
    """Self-reconstruction log-likelihood minus log N."""
    xb, single = _as_batch(x)
    dec_w, dec_b, enc_w, enc_b = _model_nets(model, params)
    z = mlp_apply(enc_w, enc_b, model.encoder.activation, xb)
    y = mlp_apply(dec_w, dec_b, model.decoder.activation, z)
    if meter is not None:
        meter.add(enc=xb.shape[0], dec=xb.shape[0])
    out = ad.add(gaussian_loglik(xb, y, model.noise_var), -np.log(n_atoms))
    return _maybe_squeeze(out, single)


# ------------------------------------------------- exact empiricalized LML

def exact_empiricalized_lml(model, x, X_atoms, params=None, meter=None):
    """log (1/N) sum_i p(x | f(g(x_i))), the complete marginalization.

    Decoder/encoder run once over the atom set per call, shared by every
    point in the batch.
    """
    xb, single = _as_batch(x)
    X_atoms = np.asarray(X_atoms, dtype=np.float64)
    n = X_atoms.shape[0]
    dec_w, dec_b, enc_w, enc_b = _model_nets(model, params)
    z = mlp_apply(enc_w, enc_b, model.encoder.activation, X_atoms)
    y = mlp_apply(dec_w, dec_b, model.decoder.activation, z)   # [N, D]
    if meter is not None:
        meter.add(enc=n, dec=n)
    y3 = ad.reshape(y, (1, n, X_atoms.shape[1]))
    ll = gaussian_loglik(xb[:, None, :], y3, model.noise_var)  # [B, N]
    out = ad.add(ad.logsumexp(ll, axis=1), -np.log(n))
    return _maybe_squeeze(out, single)


# ------------------------------------------------------------- VAE and IWAE

def _proposal_heads(proposal, x, params, n_dec_arrays):
    """Mean and log-variance heads of a mean-field proposal on batch x."""
    if params is None:
        w, b = proposal.net.weights, proposal.net.biases
    else:
        rest = params[n_dec_arrays:]
        w, b = rest[0::2], rest[1::2]
    out = mlp_apply(w, b, proposal.net.activation, x)
    latent = proposal.latent_dim
    mu = ad.narrow(out, 1, 0, latent)
    logvar = ad.narrow(out, 1, latent, latent)
    return mu, logvar


def _decoder_net(model, params):
    if params is None:
        return model.decoder.weights, model.decoder.biases
    nd = 2 * model.decoder.n_layers
    return params[:nd:2], params[1:nd:2]


def elbo_vae(model, proposal, x, rng=None, params=None, eps=None, meter=None):
    """Single-sample reparameterized ELBO under a standard-normal prior.

    `params`, when given, packs decoder arrays then proposal-net arrays.
    """
    xb, single = _as_batch(x)
    b, latent = xb.shape[0], proposal.latent_dim
    if eps is None:
        eps = rng.standard_normal((b, latent))
    mu, logvar = _proposal_heads(proposal, xb, params, 2 * model.decoder.n_layers)
    sigma = ad.exp(ad.mul(0.5, logvar))
    z = ad.add(mu, ad.mul(sigma, eps))

    log_q = _diag_gaussian_loglik(z, mu, logvar)
    log_pz = ad.add(ad.mul(-0.5, ad.asum(ad.square(z), axis=1)), -0.5 * latent * LOG_2PI)
    dec_w, dec_b = _decoder_net(model, params)
    y = mlp_apply(dec_w, dec_b, model.decoder.activation, z)
    log_px = gaussian_loglik(xb, y, model.noise_var)
    if meter is not None:
        meter.add(enc=b, dec=b)
    out = ad.sub(ad.add(log_px, log_pz), log_q)
    return _maybe_squeeze(out, single)


def _diag_gaussian_loglik(z, mu, logvar):
    """Diagonal-Gaussian log density of z at (mu, logvar); sums the last axis."""
    latent = np.asarray(ad.val(z)).shape[-1]
    quad = ad.div(ad.square(ad.sub(z, mu)), ad.exp(logvar))
    per_dim = ad.add(logvar, quad)
    return ad.mul(-0.5, ad.add(ad.asum(per_dim, axis=-1), latent * LOG_2PI))


def iwae_bound(model, proposal, x, s, rng=None, params=None, eps=None, meter=None):
    """S-sample importance-weighted stochastic lower bound (Gaussian proposal)."""
    if s < 1:
        raise ConfigurationError("importance-sample count must be >= 1")
    xb, single = _as_batch(x)
    b, latent, d = xb.shape[0], proposal.latent_dim, xb.shape[1]
    if eps is None:
        eps = rng.standard_normal((b, s, latent))
    mu, logvar = _proposal_heads(proposal, xb, params, 2 * model.decoder.n_layers)
    mu3 = ad.reshape(mu, (b, 1, latent))
    logvar3 = ad.reshape(logvar, (b, 1, latent))
    z = ad.add(mu3, ad.mul(ad.exp(ad.mul(0.5, logvar3)), eps))      # [B, S, L]

    log_q = _diag_gaussian_loglik(z, mu3, logvar3)                  # [B, S]
    log_pz = ad.add(ad.mul(-0.5, ad.asum(ad.square(z), axis=-1)), -0.5 * latent * LOG_2PI)
    dec_w, dec_b = _decoder_net(model, params)
    y = mlp_apply(dec_w, dec_b, model.decoder.activation, ad.reshape(z, (b * s, latent)))
    log_px = gaussian_loglik(xb[:, None, :], ad.reshape(y, (b, s, d)), model.noise_var)
    if meter is not None:
        meter.add(enc=b, dec=b * s)
    logw = ad.sub(ad.add(log_px, log_pz), log_q)
    out = ad.add(ad.logsumexp(logw, axis=1), -np.log(s))
    return _maybe_squeeze(out, single)


# ------------------------------------------------------ index-proposal bound

def draw_proposal_indices(table, n_idx, k, s, rng):
    """Sample S tail indices per row from the truncated-renormalized proposal.

    Returns (samples [B, S] int64, log_tilde_q [B, S]). Requires k < N.
    """
    n_rows = len(n_idx)
    samples = np.empty((n_rows, s), dtype=np.int64)
    log_tq = np.empty((n_rows, s), dtype=np.float64)
    for row, n in enumerate(n_idx):
        tail = table.perm[n, k:].astype(np.int64)
        tq = table.q[n, tail]
        mass = tq.sum()
        if mass <= 0.0:
            raise DegenerateRowError(f"row {n}: no mass outside the top-{k} set")
        tq = tq / mass
        picks = rng.choice(tail.size, size=s, p=tq)
        samples[row] = tail[picks]
        log_tq[row] = np.log(tq[picks])
    return samples, log_tq


def mapa_bound_batch(model, table, X_atoms, n_idx, k, s, rng=None, params=None,
                     samples=None, log_tilde_q=None, meter=None):
    """Stochastic lower bound on the empiricalized LML for table rows `n_idx`.

    The top-k terms are summed exactly with weight 1/N; the remainder is
    importance-sampled from the truncated proposal with weight
    1/(N*S*tilde_q). Within the batch, the networks run once over the
    union of referenced atom indices and the outputs are shared, so the
    meter counts at most N decoder (and encoder) passes regardless of S.
    """
    X_atoms = np.asarray(X_atoms, dtype=np.float64)
    n, d = X_atoms.shape
    n_idx = np.asarray(n_idx, dtype=np.int64)
    b = n_idx.size
    if table.n != n:
        raise ConfigurationError("table size does not match atom count")
    if not 0 <= k <= n:
        raise ConfigurationError(f"k must lie in [0, {n}], got {k}")
    if s < 0:
        raise ConfigurationError("sample count must be non-negative")
    if k == n and s > 0:
        raise DegenerateRowError("k = N leaves the proposal with empty support")
    if k + s == 0:
        raise ConfigurationError("need k >= 1 or s >= 1")

    parts = []
    coefs = []
    if k > 0:
        topk = table.perm[n_idx, :k].astype(np.int64)        # [B, k]
        parts.append(topk)
        coefs.append(np.full((b, k), -np.log(n)))
    if s > 0:
        if samples is None:
            samples, log_tilde_q = draw_proposal_indices(table, n_idx, k, s, rng)
        parts.append(samples)
        coefs.append(-np.log(n) - np.log(s) - log_tilde_q)   # [B, S]
    refs = np.concatenate(parts, axis=1)
    coef = np.concatenate(coefs, axis=1)

    uniq, inv = np.unique(refs, return_inverse=True)
    dec_w, dec_b, enc_w, enc_b = _model_nets(model, params)
    z = mlp_apply(enc_w, enc_b, model.encoder.activation, X_atoms[uniq])
    y = mlp_apply(dec_w, dec_b, model.decoder.activation, z)    # [U, D]
    if meter is not None:
        meter.add(enc=uniq.size, dec=uniq.size)

    y_sel = ad.take_rows(y, inv.reshape(b, k + s))              # [B, k+S, D]
    ll = gaussian_loglik(X_atoms[n_idx][:, None, :], y_sel, model.noise_var)
    return ad.logsumexp(ad.add(ll, coef), axis=1)


def mapa_bound(model, table, X_atoms, n, k, s, rng=None, params=None, meter=None):
    """Single-point convenience wrapper over mapa_bound_batch."""
    out = mapa_bound_batch(model, table, X_atoms, np.array([n]), k, s,
                           rng=rng, params=params, meter=meter)
    return _maybe_squeeze(out, True)


def bound_estimate(method, model, x, rng=None, proposal=None, table=None,
                   X_atoms=None, n_idx=None, s=0, k=0):
    """Evaluate one objective on a batch, returning a BoundEstimate bundle."""
    meter = CostMeter()
    if method == "ae":
        values = ae_loss(model, x, len(X_atoms), meter=meter)
    elif method == "exact":
        values = exact_empiricalized_lml(model, x, X_atoms, meter=meter)
    elif method == "vae":
        values = elbo_vae(model, proposal, x, rng=rng, meter=meter)
        s = 1
    elif method == "iwae":
        values = iwae_bound(model, proposal, x, s, rng=rng, meter=meter)
    elif method in ("mapa", "mapa_gt", "mapa_naive"):
        values = mapa_bound_batch(model, table, X_atoms, n_idx, k, s,
                                  rng=rng, meter=meter)
    else:
        raise ConfigurationError(f"unknown method '{method}'")
    return BoundEstimate(values=np.atleast_1d(np.asarray(values)), method=method,
                         s=s, k=k, meter=meter)

"""Copula-based prior recovery for 1-D latent spaces.

After empiricalized training, the latent codes z_n = g(x_n) follow an
arbitrary 1-D distribution. The recovery rank-transforms them to a
standard Gaussian (empirical Gaussian copula, then whitening) and
distills a fresh encoder/decoder pair that absorbs the transform, so the
recovered model generates with a standard-normal prior:

* encoder: least squares onto the transformed latents;
* decoder: minimizes the Gaussian likelihood KL against the original
  reconstructions, which for a shared fixed noise variance reduces to a
  scaled MSE between decoder outputs, measured in nats.

Ranks are descending-survival counts (fraction of latents >= z_n), with
midranks on exact ties, clamped to [1/(N+1), N/(N+1)] because the inverse
CDF diverges at the boundary ranks the raw formula produces.
"""

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .errors import ConfigurationError, DomainError, RecoveryFailureError
from .mlp import MlpParams, init_mlp, mlp_apply, mlp_forward, param_list, replace_params
from .models import PRIOR_STANDARD_NORMAL, GenerativeModel
from .optim import adam_step, init_adam
from .rng import make_rng
from .special import std_normal_inv_cdf


def copula_transform(z_values):
    """Map 1-D latents to an approximately standard-normal sample by rank."""
    z = np.asarray(z_values, dtype=np.float64)
    if z.ndim != 1:
        raise ConfigurationError("copula recovery supports exactly 1-D latents")
    n = z.size
    if n < 10:
        raise ConfigurationError("need at least 10 latents")
    # survival midranks: fraction of latents >= z_n
    ranks = (n - rankdata(z, method="average") + 1.0) / n
    if np.all(ranks == ranks[0]):
        raise DomainError("constant latent vector: ranks are degenerate")
    ranks = np.clip(ranks, 1.0 / (n + 1), n / (n + 1.0))
    u = std_normal_inv_cdf(ranks)
    sd = u.std()
    if sd == 0.0:
        raise DomainError("degenerate ranks after clamping")
    return (u - u.mean()) / sd


@dataclass
class RecoveryConfig:
    lr: float = 5e-4
    epochs: int = 1500
    batch_size: int = 100
    encoder_stop_mse: float = 1e-5     # early stop
    decoder_stop_nats: float = 1e-3
    encoder_fail_mse: float = 1e-2     # hard gate after the budget
    decoder_fail_nats: float = 0.05
    seed: int = 0


def _fit_net(net_proto, inputs, targets, lr, epochs, stop, rng, batch_size=100,
             loss_scale=1.0):
    """Minibatch Adam MSE fit; returns (fitted net, final loss, epochs used)."""
    params = param_list(net_proto)
    state = init_adam(params, lr=lr)
    n = inputs.shape[0]

    def batch_loss(ps, xb, yb):
        out = mlp_apply(ps[0::2], ps[1::2], net_proto.activation, xb)
        return ad.mul(loss_scale, ad.amean(ad.asum(
            ad.square(ad.sub(out, yb)), axis=1)))

    def full_loss(ps):
        out = mlp_apply(ps[0::2], ps[1::2], net_proto.activation, inputs)
        return float(loss_scale * np.mean(np.sum((np.asarray(out) - targets) ** 2, axis=1)))

    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            _, grads = ad.value_and_grad(
                lambda ps: batch_loss(ps, inputs[batch], targets[batch]), params)
            params, state = adam_step(state, params, grads)
        if full_loss(params) < stop:
            break
    fitted = replace_params(net_proto, params)
    return fitted, full_loss(params), epoch


def distill(model: GenerativeModel, z_star, X, config: RecoveryConfig = None):
    """Refit encoder to the transformed latents, then decoder to the old
    reconstructions through the new encoder. Returns (recovered model,
    diagnostics dict); raises RecoveryFailureError when a gate is missed.

    Both nets warm-start from the trained model, adapted for the rank
    transform's affine proxy z ~ mu - sigma * z_star (the survival-rank
    map reverses order), which leaves only the residual warp to learn.
    """
    config = config or RecoveryConfig()
    X = np.asarray(X, dtype=np.float64)
    z_star = np.asarray(z_star, dtype=np.float64).reshape(-1, 1)
    r = make_rng(config.seed, "distill")
    z_old = mlp_forward(model.encoder, X)
    mu, sigma = float(z_old.mean()), float(z_old.std())

    enc_proto = MlpParams(weights=[w.copy() for w in model.encoder.weights],
                          biases=[b.copy() for b in model.encoder.biases],
                          activation=model.encoder.activation)
    enc_proto.weights[-1] = -enc_proto.weights[-1] / sigma
    enc_proto.biases[-1] = (mu - model.encoder.biases[-1]) / sigma
    encoder, enc_mse, enc_epochs = _fit_net(enc_proto, X, z_star, config.lr,
                                            config.epochs, config.encoder_stop_mse,
                                            r, config.batch_size)
    if enc_mse > config.encoder_fail_mse:
        raise RecoveryFailureError(
            f"encoder distillation MSE {enc_mse:.3e} above gate {config.encoder_fail_mse:g}")

    y_old = mlp_forward(model.decoder, z_old)
    z_new = mlp_forward(encoder, X)
    # KL between equal-variance Gaussians: ||mu1 - mu2||^2 / (2 sigma^2)
    kl_scale = 1.0 / (2.0 * model.noise_var)
    dec_proto = MlpParams(weights=[w.copy() for w in model.decoder.weights],
                          biases=[b.copy() for b in model.decoder.biases],
                          activation=model.decoder.activation)
    dec_proto.weights[0] = dec_proto.weights[0] * -sigma
    dec_proto.biases[0] = dec_proto.biases[0] + mu * model.decoder.weights[0][:, 0]
    decoder, dec_nats, dec_epochs = _fit_net(dec_proto, z_new, y_old, config.lr,
                                             config.epochs, config.decoder_stop_nats,
                                             r, config.batch_size, loss_scale=kl_scale)
    if dec_nats > config.decoder_fail_nats:
        raise RecoveryFailureError(
            f"decoder distillation KL {dec_nats:.4f} nats above gate "
            f"{config.decoder_fail_nats:g}")

    recovered = GenerativeModel(decoder=decoder, encoder=encoder,
                                noise_var=model.noise_var, prior=PRIOR_STANDARD_NORMAL)
    diagnostics = {
        "encoder_mse": enc_mse,
        "encoder_epochs": enc_epochs,
        "decoder_kl_nats": dec_nats,
        "decoder_epochs": dec_epochs,
    }
    return recovered, diagnostics


def recover_prior(model: GenerativeModel, X, config: RecoveryConfig = None):
    """Full recovery: transform the model's own latents, then distill."""
    z = mlp_forward(model.encoder, np.asarray(X, dtype=np.float64))[:, 0]
    z_star = copula_transform(z)
    return distill(model, z_star, X, config)

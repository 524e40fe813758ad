"""Model containers and the on-disk model format.

A model file is a JSON header plus a sidecar binary blob of little-endian
float64 parameter arrays, concatenated in header order. The same bundle
format stores generative models, ground-truth surrogates, and proposal
encoders, so every pipeline stage reads and writes one schema.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .mlp import MlpParams, param_list

PRIOR_STANDARD_NORMAL = "standard_normal"
PRIOR_EMPIRICAL = "empirical"


@dataclass
class GenerativeModel:
    """Decoder + prior-amortizing encoder with fixed isotropic Gaussian noise."""

    decoder: MlpParams   # latent -> observation
    encoder: MlpParams   # observation -> latent
    noise_var: float
    prior: str = PRIOR_STANDARD_NORMAL

    def __post_init__(self):
        if self.encoder is not None:
            if self.decoder.input_dim != self.encoder.output_dim:
                raise ConfigurationError("encoder output dim must match decoder input dim")
            if self.decoder.input_dim >= self.decoder.output_dim:
                raise ConfigurationError("latent dim must be smaller than observation dim")
        if self.noise_var <= 0:
            raise ConfigurationError("noise_var must be positive")

    @property
    def latent_dim(self):
        return self.decoder.input_dim

    @property
    def obs_dim(self):
        return self.decoder.output_dim

    def param_arrays(self):
        """Decoder arrays then encoder arrays, the package-wide convention."""
        return param_list(self.decoder) + param_list(self.encoder)

    def nets_from(self, flat):
        """Split a flat param list back into (dec_w, dec_b, enc_w, enc_b)."""
        nd = 2 * self.decoder.n_layers
        dec, enc = flat[:nd], flat[nd:]
        return dec[0::2], dec[1::2], enc[0::2], enc[1::2]

    def with_param_arrays(self, flat):
        nd = 2 * self.decoder.n_layers
        decoder = MlpParams(weights=list(flat[:nd:2]), biases=list(flat[1:nd:2]),
                            activation=self.decoder.activation)
        encoder = MlpParams(weights=list(flat[nd::2]), biases=list(flat[nd + 1::2]),
                            activation=self.encoder.activation)
        return GenerativeModel(decoder=decoder, encoder=encoder,
                               noise_var=self.noise_var, prior=self.prior)


@dataclass
class GaussianProposal:
    """Mean-field Gaussian proposal: encoder maps x to (mean, log-variance)."""

    net: MlpParams
    latent_dim: int

    def __post_init__(self):
        if self.net.output_dim != 2 * self.latent_dim:
            raise ConfigurationError("proposal net must output 2*latent_dim values")


@dataclass
class MixtureProposal:
    """Gaussian-mixture proposal: encoder maps x to K logits + K (mean, logvar) pairs."""

    net: MlpParams
    latent_dim: int
    n_components: int

    def __post_init__(self):
        want = self.n_components * (1 + 2 * self.latent_dim)
        if self.net.output_dim != want:
            raise ConfigurationError(f"mixture net must output {want} values")


# --------------------------------------------------------------- disk format

def _mlp_header(net: MlpParams):
    return {
        "activation": net.activation,
        "shapes": [[list(w.shape), list(b.shape)] for w, b in zip(net.weights, net.biases)],
    }


def save_net_bundle(json_path, nets, extra=None):
    """Write named MlpParams nets as JSON header + little-endian f64 blob."""
    json_path = str(json_path)
    blob_path = os.path.splitext(json_path)[0] + ".bin"
    header = {
        "format": "mapa-lab-net-bundle-v1",
        "blob": os.path.basename(blob_path),
        "dtype": "<f8",
        "nets": {name: _mlp_header(net) for name, net in nets.items()},
    }
    if extra:
        header.update(extra)
    chunks = []
    for name in nets:
        for arr in param_list(nets[name]):
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.makedirs(os.path.dirname(os.path.abspath(json_path)), exist_ok=True)
    with open(blob_path, "wb") as f:
        for c in chunks:
            f.write(c)
    with open(json_path, "w") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")
    return json_path


def load_net_bundle(json_path):
    """Read back (header, {name: MlpParams}) written by save_net_bundle."""
    json_path = str(json_path)
    with open(json_path) as f:
        header = json.load(f)
    blob_path = os.path.join(os.path.dirname(os.path.abspath(json_path)), header["blob"])
    raw = np.fromfile(blob_path, dtype="<f8")
    nets = {}
    offset = 0
    for name, meta in header["nets"].items():
        weights, biases = [], []
        for w_shape, b_shape in meta["shapes"]:
            n = int(np.prod(w_shape))
            weights.append(raw[offset:offset + n].reshape(w_shape).astype(np.float64))
            offset += n
            n = int(np.prod(b_shape))
            biases.append(raw[offset:offset + n].astype(np.float64))
            offset += n
        nets[name] = MlpParams(weights=weights, biases=biases, activation=meta["activation"])
    if offset != raw.size:
        raise ConfigurationError(f"blob size {raw.size} does not match header ({offset} expected)")
    return header, nets


def save_model(json_path, model: GenerativeModel, extra=None):
    meta = {"noise_var": model.noise_var, "prior": model.prior, "kind": "generative_model"}
    if extra:
        meta.update(extra)
    nets = {"decoder": model.decoder}
    if model.encoder is not None:
        nets["encoder"] = model.encoder
    return save_net_bundle(json_path, nets, meta)


def load_model(json_path):
    header, nets = load_net_bundle(json_path)
    model = GenerativeModel(decoder=nets["decoder"], encoder=nets.get("encoder"),
                            noise_var=float(header["noise_var"]), prior=header["prior"])
    return model, header

"""Networks: point-cloud autoencoder, conditional generator, latent critic.

The generator maps a flattened depth image and a Gaussian input vector to a
shape latent, which a frozen decoder (transferred from the autoencoder) turns
into ``N x 3`` points::

    image --image_encoder--> z_i --+
                                   +--concat--head--> z (tanh) --decoder--> points
    r -----noise_embedder--> z_r --+

The deterministic variant drops the noise branch.
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class SizeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_points: int = 64
    image_size: int = 16
    latent_dim: int = 16          # dimension of the random input r
    shape_latent: int = 32        # autoencoder bottleneck, also the critic's input
    image_hidden: int = 128
    image_feat: int = 64
    noise_hidden: int = 64
    noise_feat: int = 64
    head_hidden: int = 128
    critic_hidden: int = 48
    point_feat: int = 128
    decoder_hidden: tuple = (128, 256)

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        cp["model"] = {k: (",".join(map(str, v)) if isinstance(v, tuple) else str(v))
                       for k, v in asdict(self).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_section(cls, section) -> "ModelConfig":
        kw = {}
        for key, default in asdict(cls()).items():
            if key in section:
                raw = section[key]
                kw[key] = tuple(int(x) for x in raw.split(",")) if isinstance(default, tuple) else int(raw)
        return cls(**kw)


class Module:
    """Holds named parameter tensors; subclasses fill ``self.params`` in order."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _dense(self, name, n_in, n_out, rng, gain=2.0):
        w = rng.normal(0.0, np.sqrt(gain / n_in), size=(n_in, n_out))
        self.params[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
        self.params[f"{name}.b"] = Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.b")

    def linear(self, name, x):
        return ad.add(ad.matmul(x, self.params[f"{name}.w"]), self.params[f"{name}.b"])

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict, prefix: str = "") -> None:
        for k, v in self.params.items():
            arr = np.asarray(state[prefix + k], dtype=np.float64)
            if arr.shape != v.shape:
                raise SizeMismatch(f"{k}: checkpoint shape {arr.shape} != {v.shape}")
            v.data = arr.copy()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.data).tobytes())
        return h.hexdigest()

    def set_trainable(self, flag: bool) -> None:
        for v in self.params.values():
            v.requires_grad = flag

    def zero_(self) -> None:
        for v in self.params.values():
            v.data = np.zeros_like(v.data)


class PointEncoder(Module):
    """Shared per-point MLP, max pooling over points, tanh bottleneck."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self._dense("enc1", 3, 64, rng)
        self._dense("enc2", 64, cfg.point_feat, rng)
        self._dense("enc3", cfg.point_feat, cfg.shape_latent, rng, gain=1.0)

    def __call__(self, points) -> Tensor:
        h = ad.relu(self.linear("enc1", points))
        h = ad.relu(self.linear("enc2", h))
        pooled = ad.reduce_max(h, axis=-2)
        return ad.tanh(self.linear("enc3", pooled))


class ShapeDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        self.n_points = cfg.n_points
        sizes = (cfg.shape_latent,) + tuple(cfg.decoder_hidden)
        self.n_hidden = len(cfg.decoder_hidden)
        for i in range(self.n_hidden):
            self._dense(f"dec{i + 1}", sizes[i], sizes[i + 1], rng)
        self._dense("dec_out", sizes[-1], 3 * cfg.n_points, rng, gain=0.1)

    def __call__(self, z) -> Tensor:
        h = z
        for i in range(self.n_hidden):
            h = ad.relu(self.linear(f"dec{i + 1}", h))
        out = self.linear("dec_out", h)
        return ad.reshape(out, out.shape[:-1] + (self.n_points, 3))


class ShapeAutoencoder:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = PointEncoder(cfg, rng)
        self.decoder = ShapeDecoder(cfg, rng)

    def encode(self, points) -> Tensor:
        pts = points if isinstance(points, Tensor) else Tensor(points)
        if pts.shape[-2] != self.cfg.n_points:
            raise SizeMismatch(f"expected {self.cfg.n_points} points, got {pts.shape[-2]}")
        return self.encoder(pts)

    def decode(self, z) -> Tensor:
        return self.decoder(z)

    @property
    def params(self) -> dict:
        out = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.params.items()})
        return out

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict) -> None:
        self.encoder.load_state(state, "encoder.")
        self.decoder.load_state(state, "decoder.")


class Generator(Module):
    """Conditional (``conditional=True``) or deterministic image-to-points generator."""

    def __init__(self, cfg: ModelConfig, decoder: ShapeDecoder, seed: int = 0, conditional: bool = True):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.conditional = conditional
        self._dense("img1", cfg.image_size ** 2, cfg.image_hidden, rng)
        self._dense("img2", cfg.image_hidden, cfg.image_feat, rng)
        head_in = cfg.image_feat
        if conditional:
            self._dense("noise1", cfg.latent_dim, cfg.noise_hidden, rng)
            self._dense("noise2", cfg.noise_hidden, cfg.noise_feat, rng)
            head_in += cfg.noise_feat
        self._dense("head1", head_in, cfg.head_hidden, rng)
        self._dense("head2", cfg.head_hidden, cfg.shape_latent, rng, gain=1.0)
        self.decoder = decoder
        decoder.set_trainable(False)

    def encode(self, images, noise=None) -> Tensor:
        """The pre-decoder latent ``z = E_I(I, r)``."""
        images = images if isinstance(images, Tensor) else Tensor(images)
        if images.shape[-1] != self.cfg.image_size ** 2:
            raise ad.ShapeMismatch(f"image vector of length {images.shape[-1]}, expected {self.cfg.image_size ** 2}")
        z_i = ad.relu(self.linear("img2", ad.relu(self.linear("img1", images))))
        feats = z_i
        if self.conditional:
            if noise is None:
                raise ValueError("conditional generator needs a noise input")
            noise = noise if isinstance(noise, Tensor) else Tensor(noise)
            if noise.shape[-1] != self.cfg.latent_dim or noise.shape[:-1] != images.shape[:-1]:
                raise ad.ShapeMismatch(f"noise shape {noise.shape} does not match images {images.shape}")
            z_r = ad.relu(self.linear("noise2", ad.relu(self.linear("noise1", noise))))
            feats = ad.concat([z_i, z_r], axis=-1)
        return ad.tanh(self.linear("head2", ad.relu(self.linear("head1", feats))))

    def __call__(self, images, noise=None):
        """Return ``(points, z)`` with points shaped ``(..., N, 3)``."""
        z = self.encode(images, noise)
        return self.decoder(z), z

    def frozen(self) -> "Generator":
        """A view of this generator whose parameters carry no gradient."""
        clone = object.__new__(Generator)
        Module.__init__(clone)
        clone.cfg, clone.conditional, clone.decoder = self.cfg, self.conditional, self.decoder
        clone.params = {k: Tensor(v.data) for k, v in self.params.items()}
        return clone

    def full_state(self) -> dict:
        state = {f"gen.{k}": v.data.copy() for k, v in self.params.items()}
        state.update({f"decoder.{k}": v.data.copy() for k, v in self.decoder.params.items()})
        return state

    def full_checksum(self) -> str:
        return hashlib.sha256((self.checksum() + self.decoder.checksum()).encode()).hexdigest()


class Critic(Module):
    """``D: latent -> scalar``, tanh hidden layers and a linear output."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, hidden=None):
        super().__init__()
        rng = np.random.default_rng(seed)
        sizes = (cfg.shape_latent,) + tuple(hidden if hidden is not None else (cfg.critic_hidden,))
        self.n_hidden = len(sizes) - 1
        for i in range(self.n_hidden):
            self._dense(f"crit{i + 1}", sizes[i], sizes[i + 1], rng, gain=1.0)
        self._dense("crit_out", sizes[-1], 1, rng, gain=1.0)

    def __call__(self, z) -> Tensor:
        h = z
        for i in range(self.n_hidden):
            h = ad.tanh(self.linear(f"crit{i + 1}", h))
        return ad.reshape(self.linear("crit_out", h), z.shape[:-1] if isinstance(z, Tensor) else np.shape(z)[:-1])

    def input_gradient_graph(self, z) -> Tensor:
        """``grad_z D(z)`` per row, built from differentiable ops.

        Backward recurrence written forward: ``delta <- (delta * (1 - h^2)) W^T``.
        Differentiating this graph w.r.t. the critic weights gives the exact
        parameter gradient of the gradient penalty without second-order tapes.
        """
        z = z if isinstance(z, Tensor) else Tensor(z)
        acts = []
        h = z
        for i in range(self.n_hidden):
            h = ad.tanh(self.linear(f"crit{i + 1}", h))
            acts.append(h)
        w_out = self.params["crit_out.w"]                  # (H, 1)
        delta = ad.reshape(ad.transpose(w_out), (1, w_out.shape[0]))
        for i in reversed(range(self.n_hidden)):
            h = acts[i]
            delta = ad.mul(delta, ad.sub(1.0, ad.mul(h, h)))
            delta = ad.matmul(delta, ad.transpose(self.params[f"crit{i + 1}.w"]))
        return delta


def generate(image, r, gen: Generator) -> np.ndarray:
    """One point cloud ``(N, 3)`` for one flattened image and one input vector."""
    image = np.asarray(image, dtype=np.float64).reshape(1, -1)
    noise = None if r is None else np.asarray(r, dtype=np.float64).reshape(1, -1)
    pts, _ = gen.frozen()(image, noise)
    return pts.data[0]


def generate_deterministic(image, gen: Generator) -> np.ndarray:
    if gen.conditional:
        raise ValueError("generate_deterministic needs a deterministic generator")
    return generate(image, None, gen)


def encode_shape(points, ae: ShapeAutoencoder) -> np.ndarray:
    """Shape latent of one ``(N, 3)`` cloud or a ``(B, N, 3)`` batch."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 2:
        return ae.encode(pts[None]).data[0]
    return ae.encode(pts).data


def decode_shape(latent, ae: ShapeAutoencoder) -> np.ndarray:
    return ae.decode(Tensor(latent)).data


def critic_score(z, critic: Critic) -> float:
    return float(critic(Tensor(np.asarray(z, dtype=np.float64).reshape(1, -1))).data[0])

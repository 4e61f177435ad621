"""Seeded synthetic paired embeddings with controllable group imbalance and bias.

For a sample with label ``y`` and groups ``a``::

    image = y * label_signal * u + y * sum_a bias[a] * v_a + e
    text  = w_y + rho * e + sqrt(1 - rho^2) * e'

``u = w_1``, ``w_0`` and the ``v_a`` are orthonormal directions drawn once per
seed; ``e`` and ``e'`` are independent isotropic Gaussians with standard
deviation ``noise_sigma``. ``rho = text_noise_share`` gives every pair
instance-level content in common, which is what contrastive matching
learns from. The group shift acts on positives only, so a shifted group's
positives sit further from the positive text template and its AUC moves.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from ..dataspace import AttributeSchema, Dataset, Sample
from ..errors import ConfigurationError

DEFAULT_PROPORTIONS = {
    "race": {"Asian": 0.08, "Black": 0.15, "White": 0.77},
    "gender": {"Female": 0.57, "Male": 0.43},
    "ethnicity": {"Non-Hispanic": 0.958, "Hispanic": 0.042},
    "language": {"English": 0.973, "Spanish": 0.015, "Other": 0.012},
}


@dataclass(frozen=True)
class SyntheticConfig:
    """Generator settings.

    ``proportions`` maps attribute -> group -> probability (ordered);
    ``bias_magnitude`` maps attribute -> group -> shift, absent means 0.
    """

    n_samples: int = 2000
    embed_dim: int = 16
    proportions: dict = field(default_factory=lambda: {a: dict(g) for a, g in DEFAULT_PROPORTIONS.items()})
    bias_magnitude: dict = field(default_factory=dict)
    label_signal: float = 1.0
    noise_sigma: float = 0.3
    positive_rate: float = 0.5
    text_noise_share: float = 0.7
    weights: dict = None
    seed: int = 0

    def __post_init__(self):
        if not self.proportions:
            raise ConfigurationError("at least one attribute is required")
        n_groups = 0
        for attr, props in self.proportions.items():
            if len(props) < 2:
                raise ConfigurationError(f"attribute {attr!r} needs at least two groups")
            if any(p < 0 for p in props.values()) or abs(sum(props.values()) - 1.0) > 1e-9:
                raise ConfigurationError(f"group proportions of {attr!r} must be non-negative and sum to 1")
            n_groups += len(props)
        if self.n_samples < 10 * n_groups:
            raise ConfigurationError(f"n_samples must be at least 10 x {n_groups} groups")
        for attr, shifts in self.bias_magnitude.items():
            for g in shifts:
                if g not in self.proportions.get(attr, {}):
                    raise ConfigurationError(f"bias given for unknown group {attr}={g}")
        if not self.noise_sigma > 0:
            raise ConfigurationError("noise_sigma must be positive")
        if not 0 <= self.text_noise_share <= 1:
            raise ConfigurationError("text_noise_share must lie in [0, 1]")
        if not 0 < self.positive_rate < 1:
            raise ConfigurationError("positive_rate must lie in (0, 1)")
        if self.embed_dim < 2 + len(self._biased()):
            raise ConfigurationError(
                f"embed_dim must be at least {2 + len(self._biased())} for orthonormal directions"
            )

    def _biased(self):
        return [(a, g) for a, shifts in self.bias_magnitude.items() for g, b in shifts.items() if b != 0]

    def schema(self):
        return AttributeSchema(tuple((a, tuple(p)) for a, p in self.proportions.items()), self.weights)

    def to_dict(self):
        return {k: (dict(v) if isinstance(v, dict) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


def generate_synthetic(cfg):
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    schema = cfg.schema()
    biased = cfg._biased()
    n, d = cfg.n_samples, cfg.embed_dim
    Q, _ = np.linalg.qr(rng.standard_normal((d, 2 + len(biased))))
    u, w0 = Q[:, 0], Q[:, 1]
    shift_dir = {key: Q[:, 2 + k] for k, key in enumerate(biased)}

    labels = (rng.random(n) < cfg.positive_rate).astype(np.int64)
    groups = {}
    for attr, props in cfg.proportions.items():
        names = list(props)
        groups[attr] = np.array(names, dtype=object)[rng.choice(len(names), size=n, p=list(props.values()))]
    image = labels[:, None] * cfg.label_signal * u[None, :]
    for (attr, g), v in shift_dir.items():
        member = (groups[attr] == g) & (labels == 1)
        image = image + member[:, None] * cfg.bias_magnitude[attr][g] * v[None, :]
    noise = cfg.noise_sigma * rng.standard_normal((n, d))
    own = cfg.noise_sigma * rng.standard_normal((n, d))
    rho = cfg.text_noise_share
    image = image + noise
    text = np.where(labels[:, None] == 1, u[None, :], w0[None, :]) + rho * noise + math.sqrt(1.0 - rho * rho) * own

    width = max(1, int(math.log10(max(n - 1, 1))) + 1)
    samples = [
        Sample(f"s{i:0{width}d}", image[i], text[i], int(labels[i]), {a: str(groups[a][i]) for a in schema.names})
        for i in range(n)
    ]
    return Dataset(schema, samples, "unsplit")

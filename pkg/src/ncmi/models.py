"""Small feature extractors: linear map, MLP and a two-block conv net."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import DimensionError, Tensor, conv2d, matmul, max_pool2d

ACTIVATIONS = ("relu", "tanh", "sigmoid")


@dataclass
class ModelSpec:
    arch: str = "mlp"  # mlp | tinyconv | linear
    input_dim: int = 10  # flat input width; for tinyconv, channels*H*W
    hidden: list[int] = field(default_factory=lambda: [64])
    feature_dim: int = 16
    activation: str = "relu"
    seed: int = 0
    image_shape: list[int] | None = None  # [channels, H, W] for tinyconv

    def __post_init__(self):
        if self.arch not in ("mlp", "tinyconv", "linear"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be at least 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.arch == "tinyconv" and not self.image_shape:
            raise ValueError("tinyconv needs image_shape [channels, H, W]")

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(rng, fan_in, shape):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Model:
    """Ordered collection of named parameters plus a forward function."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(spec.seed)
        if spec.arch == "tinyconv":
            ch, h, w = spec.image_shape
            self._add("conv1.w", _uniform(rng, ch * 9, (8, ch, 3, 3)))
            self._add("conv1.b", np.zeros(8))
            self._add("conv2.w", _uniform(rng, 8 * 9, (16, 8, 3, 3)))
            self._add("conv2.b", np.zeros(16))
            flat = 16 * (h // 2 // 2) * (w // 2 // 2)
            widths = [flat, spec.feature_dim]
        elif spec.arch == "linear":
            widths = [spec.input_dim, spec.feature_dim]
        else:
            widths = [spec.input_dim, *spec.hidden, spec.feature_dim]
        self.n_dense = len(widths) - 1
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self._add(f"fc{i}.w", _uniform(rng, a, (a, b)))
            self._add(f"fc{i}.b", np.zeros(b))

    def _add(self, name, value):
        self.params[name] = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)

    def add_head(self, n_classes: int, rng: np.random.Generator) -> None:
        """Append a linear classifier head (used by the cross-entropy path)."""
        d = self.spec.feature_dim
        bound = 1.0 / np.sqrt(d)
        self._add("head.w", rng.uniform(-bound, bound, size=(d, n_classes)))
        self._add("head.b", np.zeros(n_classes))

    @property
    def has_head(self) -> bool:
        return "head.w" in self.params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def _act(self, t: Tensor) -> Tensor:
        return getattr(t, self.spec.activation)()

    def features(self, x) -> Tensor:
        """Features before any centering, normalization or simplex head."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        spec = self.spec
        p = self.params
        if spec.arch == "tinyconv":
            ch, h, w = spec.image_shape
            if x.size // max(x.shape[0], 1) != ch * h * w:
                raise DimensionError(f"input {x.shape} does not match image shape {spec.image_shape}")
            t = x.reshape(x.shape[0], ch, h, w)
            t = max_pool2d(self._act(conv2d(t, p["conv1.w"], p["conv1.b"])))
            t = max_pool2d(self._act(conv2d(t, p["conv2.w"], p["conv2.b"])))
            t = t.reshape(x.shape[0], -1)
        else:
            if x.ndim != 2 or x.shape[1] != spec.input_dim:
                raise DimensionError(f"input {x.shape} does not match input_dim {spec.input_dim}")
            t = x
        for i in range(self.n_dense):
            t = matmul(t, p[f"fc{i}.w"]) + p[f"fc{i}.b"]
            if i < self.n_dense - 1:
                t = self._act(t)
        return t

    def logits(self, features: Tensor) -> Tensor:
        return matmul(features, self.params["head.w"]) + self.params["head.b"]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, value in arrays.items():
            if name not in self.params:
                if name.startswith("head."):
                    self._add(name, value)
                    continue
                raise KeyError(f"unexpected parameter {name!r}")
            if self.params[name].shape != value.shape:
                raise DimensionError(f"{name}: stored {value.shape}, model {self.params[name].shape}")
            self.params[name].data[...] = value


def forward_features(model: Model, inputs) -> Tensor:
    return model.features(inputs)

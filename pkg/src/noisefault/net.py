"""A small convolutional classifier, written directly on numpy.

The network maps a log-mel feature batch [B, n_mels, n_frames] to logits:
input batch norm over mel bands, then three conv blocks (3x3 conv, batch
norm, ReLU, 2x2 max pool), global average pooling, and a linear head.
Everything runs in float64 with explicit forward and backward passes, so
gradients can be verified against finite differences.

Also here: the Adam optimizer, the piecewise-linear learning-rate
schedule, a finite-difference gradient checker, and checkpoint I/O.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError
from .features import BatchNorm

_INIT_STREAM = 0x4E4554
_GRADCHECK_STREAM = 0x4744


class Conv2d:
    """3x3 convolution, stride 1, zero padding 1 (same spatial shape).

    The forward and backward passes loop over the nine kernel offsets and
    contract channels with tensordot, which keeps memory flat.
    """

    def __init__(self, in_channels: int, out_channels: int):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.weight = np.zeros((out_channels, in_channels, 3, 3))
        self.bias = np.zeros(out_channels)
        self.dweight = np.zeros_like(self.weight)
        self.dbias = np.zeros_like(self.bias)
        self._cache = None

    def init(self, rng: np.random.Generator) -> None:
        bound = 1.0 / np.sqrt(self.in_channels * 9)
        self.weight[...] = rng.uniform(-bound, bound, self.weight.shape)
        self.bias[...] = 0.0

    def params(self) -> dict:
        return {"W": self.weight, "b": self.bias}

    def grads(self) -> dict:
        return {"W": self.dweight, "b": self.dbias}

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, c_in, h, w = x.shape
        if c_in != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {c_in}")
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        acc = np.zeros((b, h, w, self.out_channels))
        for di in range(3):
            for dj in range(3):
                acc += np.tensordot(
                    padded[:, :, di : di + h, dj : dj + w],
                    self.weight[:, :, di, dj],
                    axes=([1], [1]),
                )
        self._cache = padded
        return acc.transpose(0, 3, 1, 2) + self.bias[None, :, None, None]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        padded = self._cache
        b, _, hp, wp = padded.shape
        h, w = hp - 2, wp - 2
        self.dbias = dy.sum(axis=(0, 2, 3))
        self.dweight = np.zeros_like(self.weight)
        dpadded = np.zeros_like(padded)
        for di in range(3):
            for dj in range(3):
                window = padded[:, :, di : di + h, dj : dj + w]
                self.dweight[:, :, di, dj] = np.tensordot(
                    dy, window, axes=([0, 2, 3], [0, 2, 3])
                )
                dpadded[:, :, di : di + h, dj : dj + w] += np.tensordot(
                    dy, self.weight[:, :, di, dj], axes=([1], [0])
                ).transpose(0, 3, 1, 2)
        return dpadded[:, :, 1 : 1 + h, 1 : 1 + w]


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dy, 0.0)


class MaxPool2x2:
    """2x2 max pooling with stride 2; trailing odd rows/columns are dropped."""

    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        if h2 == 0 or w2 == 0:
            raise ValueError(f"input {x.shape} too small for 2x2 pooling")
        windows = (
            x[:, :, : 2 * h2, : 2 * w2]
            .reshape(b, c, h2, 2, w2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, h2, w2, 4)
        )
        argmax = windows.argmax(axis=-1)
        self._cache = (argmax, x.shape)
        return np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        argmax, shape = self._cache
        b, c, h, w = shape
        h2, w2 = h // 2, w // 2
        dwindows = np.zeros((b, c, h2, w2, 4))
        np.put_along_axis(dwindows, argmax[..., None], dy[..., None], axis=-1)
        dx = np.zeros(shape)
        dx[:, :, : 2 * h2, : 2 * w2] = (
            dwindows.reshape(b, c, h2, w2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, 2 * h2, 2 * w2)
        )
        return dx


class GlobalAvgPool:
    """Mean over the spatial axes: [B, C, H, W] -> [B, C]."""

    def __init__(self):
        self._shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        b, c, h, w = self._shape
        return np.broadcast_to(dy[:, :, None, None], self._shape) / (h * w)


class Linear:
    def __init__(self, in_features: int, out_features: int):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = np.zeros((out_features, in_features))
        self.bias = np.zeros(out_features)
        self.dweight = np.zeros_like(self.weight)
        self.dbias = np.zeros_like(self.bias)
        self._cache = None

    def init(self, rng: np.random.Generator) -> None:
        bound = 1.0 / np.sqrt(self.in_features)
        self.weight[...] = rng.uniform(-bound, bound, self.weight.shape)
        self.bias[...] = 0.0

    def params(self) -> dict:
        return {"W": self.weight, "b": self.bias}

    def grads(self) -> dict:
        return {"W": self.dweight, "b": self.dbias}

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x
        return x @ self.weight.T + self.bias

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._cache
        self.dweight = dy.T @ x
        self.dbias = dy.sum(axis=0)
        return dy @ self.weight


@dataclass(frozen=True)
class Architecture:
    """Static shape description of the classifier."""

    n_mels: int
    n_classes: int
    widths: tuple = (16, 32, 64)
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.n_mels < 8:
            raise ValueError("need at least 8 mel bands for three pooling stages")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 3 or any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be three positive ints, got {self.widths}")

    def to_json(self) -> dict:
        return {
            "n_mels": self.n_mels,
            "n_classes": self.n_classes,
            "widths": list(self.widths),
            "bn_eps": self.bn_eps,
            "bn_momentum": self.bn_momentum,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Architecture":
        return cls(
            n_mels=int(data["n_mels"]),
            n_classes=int(data["n_classes"]),
            widths=tuple(data["widths"]),
            bn_eps=float(data["bn_eps"]),
            bn_momentum=float(data["bn_momentum"]),
        )


class Network:
    """The full classifier with explicit forward/backward passes.

    Parameter, gradient, and running-statistic tensors are exposed as flat
    name -> array dicts ("block1_conv/W" style) so the optimizer and the
    checkpoint format stay independent of the layer objects.
    """

    def __init__(self, arch: Architecture):
        self.arch = arch
        eps, mom = arch.bn_eps, arch.bn_momentum
        self.input_bn = BatchNorm(arch.n_mels, eps=eps, momentum=mom)
        self.blocks = []
        c_in = 1
        for width in arch.widths:
            self.blocks.append(
                {
                    "conv": Conv2d(c_in, width),
                    "bn": BatchNorm(width, eps=eps, momentum=mom),
                    "relu": ReLU(),
                    "pool": MaxPool2x2(),
                }
            )
            c_in = width
        self.gap = GlobalAvgPool()
        self.head = Linear(arch.widths[-1], arch.n_classes)

    def _named_layers(self):
        yield "input_bn", self.input_bn
        for i, block in enumerate(self.blocks, start=1):
            yield f"block{i}_conv", block["conv"]
            yield f"block{i}_bn", block["bn"]
        yield "head", self.head

    def init_params(self, seed: int) -> None:
        rng = np.random.default_rng(np.random.SeedSequence([_INIT_STREAM, seed]))
        for block in self.blocks:
            block["conv"].init(rng)
        self.head.init(rng)

    def params(self) -> dict:
        out = {}
        for name, layer in self._named_layers():
            for key, value in layer.params().items():
                out[f"{name}/{key}"] = value
        return out

    def grads(self) -> dict:
        out = {}
        for name, layer in self._named_layers():
            for key, value in layer.grads().items():
                out[f"{name}/{key}"] = value
        return out

    def state(self) -> dict:
        out = {}
        for name, layer in self._named_layers():
            if isinstance(layer, BatchNorm):
                for key, value in layer.state().items():
                    out[f"{name}/{key}"] = value
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params().values())

    def forward(self, features: np.ndarray, train: bool) -> np.ndarray:
        """[B, n_mels, n_frames] -> logits [B, n_classes]."""
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 3 or x.shape[1] != self.arch.n_mels:
            raise ValueError(
                f"expected [batch, {self.arch.n_mels}, frames], got {x.shape}"
            )
        x = self.input_bn.forward(x, train)
        x = x[:, None, :, :]
        for block in self.blocks:
            x = block["conv"].forward(x)
            x = block["bn"].forward(x, train)
            x = block["relu"].forward(x)
            x = block["pool"].forward(x)
        x = self.gap.forward(x)
        return self.head.forward(x)

    def backward(self, dlogits: np.ndarray) -> None:
        """Populate all parameter gradients from the logit gradient."""
        dx = self.head.backward(np.asarray(dlogits, dtype=np.float64))
        dx = self.gap.backward(dx)
        for block in reversed(self.blocks):
            dx = block["pool"].backward(dx)
            dx = block["relu"].backward(dx)
            dx = block["bn"].backward(dx)
            dx = block["conv"].backward(dx)
        self.input_bn.backward(dx[:, 0, :, :])

    def load(self, params: dict, state: dict) -> None:
        own_params = self.params()
        if set(params) != set(own_params):
            raise DataError(
                f"parameter names do not match this architecture: "
                f"missing {sorted(set(own_params) - set(params))}, "
                f"unexpected {sorted(set(params) - set(own_params))}"
            )
        for key, value in params.items():
            if own_params[key].shape != value.shape:
                raise DataError(
                    f"shape mismatch for {key}: "
                    f"expected {own_params[key].shape}, got {value.shape}"
                )
            own_params[key][...] = value
        own_state = self.state()
        if set(state) != set(own_state):
            raise DataError("running-statistic names do not match this architecture")
        for name, layer in self._named_layers():
            if isinstance(layer, BatchNorm):
                layer.running_mean = np.array(state[f"{name}/running_mean"], dtype=np.float64)
                layer.running_var = np.array(state[f"{name}/running_var"], dtype=np.float64)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One in-place Adam update with bias correction."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**state.t
    correction2 = 1.0 - b2**state.t
    for key, param in params.items():
        grad = grads[key]
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient for {key}")
        m = state.m[key]
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * np.square(grad)
        m_hat = m / correction1
        v_hat = v / correction2
        param -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass(frozen=True)
class LrSchedule:
    """Hold, then decay linearly, then hold at the floor.

    Epochs are 1-based: [1, hold_epochs] at base_lr, linear down to
    final_lr at decay_end_epoch, then constant through total_epochs.
    """

    base_lr: float = 1e-4
    final_lr: float = 1e-5
    hold_epochs: int = 30
    decay_end_epoch: int = 90
    total_epochs: int = 100

    def __post_init__(self):
        if not (1 <= self.hold_epochs < self.decay_end_epoch <= self.total_epochs):
            raise ValueError(
                f"need 1 <= hold ({self.hold_epochs}) < decay end "
                f"({self.decay_end_epoch}) <= total ({self.total_epochs})"
            )

    def at_epoch(self, epoch: int) -> float:
        if not 1 <= epoch <= self.total_epochs:
            raise ValueError(f"epoch {epoch} outside [1, {self.total_epochs}]")
        if epoch <= self.hold_epochs:
            return self.base_lr
        if epoch >= self.decay_end_epoch:
            return self.final_lr
        frac = (epoch - self.hold_epochs) / (self.decay_end_epoch - self.hold_epochs)
        return self.base_lr + (self.final_lr - self.base_lr) * frac

    def scaled_to(self, total_epochs: int) -> "LrSchedule":
        """Shrink or stretch the schedule, keeping breakpoints at the same
        30% / 90% fractions of the run."""
        if total_epochs < 2:
            raise ValueError("schedule needs at least 2 epochs")
        hold = self.hold_epochs / self.total_epochs
        decay = self.decay_end_epoch / self.total_epochs
        hold_epochs = max(1, round(hold * total_epochs))
        decay_end = min(total_epochs, max(hold_epochs + 1, round(decay * total_epochs)))
        return LrSchedule(self.base_lr, self.final_lr, hold_epochs, decay_end, total_epochs)


def relative_error(analytic: float, numeric: float) -> float:
    """|a - n| scaled by max(|a| + |n|, 1e-4), so tiny gradients do not
    inflate the ratio with pure floating-point noise."""
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-4)


def grad_check(compute_loss, params: dict, grads: dict, eps: float = 1e-5,
               samples_per_param: int | None = 8, seed: int = 0) -> float:
    """Compare analytic gradients against central finite differences.

    compute_loss() must re-evaluate the loss with the current parameter
    values; grads holds the analytic gradients captured beforehand. Each
    tensor contributes samples_per_param randomly chosen coordinates (all
    of them when None). Returns the worst relative error seen.
    """
    rng = np.random.default_rng(np.random.SeedSequence([_GRADCHECK_STREAM, seed]))
    worst = 0.0
    for name in sorted(params):
        flat = params[name].reshape(-1)
        gflat = np.asarray(grads[name]).reshape(-1)
        if samples_per_param is None or flat.size <= samples_per_param:
            indices = np.arange(flat.size)
        else:
            indices = rng.choice(flat.size, size=samples_per_param, replace=False)
        for i in indices:
            original = flat[i]
            flat[i] = original + eps
            loss_plus = compute_loss()
            flat[i] = original - eps
            loss_minus = compute_loss()
            flat[i] = original
            numeric = (loss_plus - loss_minus) / (2.0 * eps)
            worst = max(worst, relative_error(gflat[i], numeric))
    return worst


CHECKPOINT_VERSION = 1


def save_checkpoint(path, network: Network, meta: dict | None = None,
                    adam: AdamState | None = None) -> None:
    """Write parameters, running statistics, optimizer state, and JSON
    metadata to .npz."""
    info = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": network.arch.to_json(),
    }
    if meta:
        info.update(meta)
    arrays = {f"param:{k}": v for k, v in network.params().items()}
    arrays.update({f"state:{k}": v for k, v in network.state().items()})
    if adam is not None:
        info["optimizer"] = {
            "t": adam.t, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
        }
        arrays.update({f"adam_m:{k}": v for k, v in adam.m.items()})
        arrays.update({f"adam_v:{k}": v for k, v in adam.v.items()})
    np.savez(path, meta=np.array(json.dumps(info, sort_keys=True)), **arrays)


def _grouped(archive, prefix: str) -> dict:
    return {k[len(prefix):]: archive[k] for k in archive.files if k.startswith(prefix)}


def load_checkpoint(path):
    """Read a checkpoint back; returns (network, meta, adam-or-None)."""
    try:
        with np.load(path, allow_pickle=False) as archive:
            try:
                meta = json.loads(str(archive["meta"][()]))
            except (KeyError, json.JSONDecodeError) as exc:
                raise DataError(f"checkpoint {path} has no readable metadata") from exc
            if meta.get("format_version") != CHECKPOINT_VERSION:
                raise DataError(
                    f"checkpoint {path} has format version "
                    f"{meta.get('format_version')}, expected {CHECKPOINT_VERSION}"
                )
            params = _grouped(archive, "param:")
            state = _grouped(archive, "state:")
            adam_m = _grouped(archive, "adam_m:")
            adam_v = _grouped(archive, "adam_v:")
    except FileNotFoundError:
        raise
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    network = Network(Architecture.from_json(meta["architecture"]))
    network.load(params, state)
    adam = None
    if "optimizer" in meta:
        opt = meta["optimizer"]
        if set(adam_m) != set(params) or set(adam_v) != set(params):
            raise DataError(f"checkpoint {path} has incomplete optimizer state")
        adam = AdamState(m=adam_m, v=adam_v, t=int(opt["t"]), beta1=float(opt["beta1"]),
                         beta2=float(opt["beta2"]), eps=float(opt["eps"]))
    return network, meta, adam

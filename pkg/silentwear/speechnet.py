"""SpeechNet: five convolutional blocks, global average pool, dense head.

Blocks 1-3 convolve along time only (per electrode channel, zero-padded so the
time axis is preserved); blocks 4-5 mix 7 neighbouring channels without
padding, shrinking the channel axis 14 -> 8 -> 2. Every convolution is
followed by BatchNorm (affine), ReLU and max pooling.

Inputs are z-scored per window and per channel (:func:`normalize_windows`)
before they reach :func:`forward`.
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from silentwear import nnkernels as nk
from silentwear.config import SpeechNetConfig
from silentwear.errors import (
    Corrupt,
    InvalidConfig,
    ShapeMismatch,
    VersionMismatch,
    WindowTooShort,
)
from silentwear.nnkernels import Mode, Padding, RunningStats, Tape

MAGIC = b"SWNM"
VERSION = 1
_PREAMBLE = struct.Struct("<4sHI")

MIN_WINDOW = 128
NORM_EPS = 1e-8
HEAD = "head"


@dataclass(frozen=True)
class BlockSpec:
    name: str
    filters: int
    kernel: Tuple[int, int]
    padding: Padding
    pool: Tuple[int, int]


ARCHITECTURE: Tuple[BlockSpec, ...] = (
    BlockSpec("block1", 8, (1, 4), Padding.SAME_TIME, (1, 8)),
    BlockSpec("block2", 16, (1, 16), Padding.SAME_TIME, (1, 4)),
    BlockSpec("block3", 16, (1, 8), Padding.SAME_TIME, (1, 4)),
    BlockSpec("block4", 32, (7, 1), Padding.VALID, (1, 1)),
    BlockSpec("block5", 32, (7, 1), Padding.VALID, (1, 1)),
)


@dataclass(frozen=True)
class LayerGeometry:
    name: str
    in_shape: Tuple[int, int, int]
    conv_shape: Tuple[int, int, int]
    out_shape: Tuple[int, int, int]
    kernel: Tuple[int, int]


def layer_geometry(
    n_channels: int, t: int, arch: Tuple[BlockSpec, ...] = ARCHITECTURE
) -> List[LayerGeometry]:
    """Per-block shapes ``(c, h, w)`` under floor pooling."""
    if t < MIN_WINDOW:
        raise WindowTooShort(f"window of {t} samples, need at least {MIN_WINDOW}")
    c, h, w = 1, n_channels, t
    out = []
    for block in arch:
        kh, kw = block.kernel
        if block.padding is Padding.VALID:
            ch, cw = h - kh + 1, w - kw + 1
        else:
            ch, cw = h - kh + 1, w
        if ch < 1 or cw < 1:
            raise InvalidConfig(f"{block.name}: kernel {block.kernel} exceeds input {(h, w)}")
        ph, pw = block.pool
        oh, ow = ch // ph, cw // pw
        out.append(LayerGeometry(block.name, (c, h, w), (block.filters, ch, cw),
                                 (block.filters, oh, ow), block.kernel))
        c, h, w = block.filters, oh, ow
    return out


class SpeechNet:
    """Parameters (trainable) and buffers (BN running statistics) of one model."""

    def __init__(
        self,
        config: SpeechNetConfig,
        params: Dict[str, np.ndarray],
        buffers: Dict[str, np.ndarray],
    ):
        self.config = config
        self.params = params
        self.buffers = buffers

    @property
    def n_channels(self) -> int:
        return self.config.n_channels

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def clone(self) -> "SpeechNet":
        return SpeechNet(
            self.config.model_copy(),
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {k: v.copy() for k, v in self.params.items()}
        state.update({k: v.copy() for k, v in self.buffers.items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name in list(self.params) + list(self.buffers):
            if name not in state:
                raise ShapeMismatch(f"state is missing {name}")
        self.params = {k: state[k].copy() for k in self.params}
        self.buffers = {k: state[k].copy() for k in self.buffers}


def _block_in_channels(arch=ARCHITECTURE):
    c = 1
    for block in arch:
        yield block, c
        c = block.filters


def build_speechnet(
    n_channels: int = 14,
    n_classes: int = 9,
    seed: int = 0,
    batchnorm: bool = True,
    config: Optional[SpeechNetConfig] = None,
) -> SpeechNet:
    """Fresh SpeechNet with fan-in uniform weights, zero biases, identity BN."""
    if config is None:
        config = SpeechNetConfig(n_channels=n_channels, n_classes=n_classes, batchnorm=batchnorm)
    if config.n_channels < 13:
        raise InvalidConfig(f"n_channels must be >= 13, got {config.n_channels}")
    if config.n_classes < 2:
        raise InvalidConfig(f"n_classes must be >= 2, got {config.n_classes}")

    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    buffers: Dict[str, np.ndarray] = {}
    for block, in_c in _block_in_channels():
        kh, kw = block.kernel
        bound = 1.0 / np.sqrt(in_c * kh * kw)
        params[f"{block.name}.conv.weight"] = rng.uniform(
            -bound, bound, size=(block.filters, in_c, kh, kw)
        ).astype(np.float32)
        params[f"{block.name}.conv.bias"] = np.zeros(block.filters, dtype=np.float32)
        if config.batchnorm:
            params[f"{block.name}.bn.gamma"] = np.ones(block.filters, dtype=np.float32)
            params[f"{block.name}.bn.beta"] = np.zeros(block.filters, dtype=np.float32)
            buffers[f"{block.name}.bn.running_mean"] = np.zeros(block.filters, dtype=np.float32)
            buffers[f"{block.name}.bn.running_var"] = np.ones(block.filters, dtype=np.float32)

    features = ARCHITECTURE[-1].filters
    bound = 1.0 / np.sqrt(features)
    params[f"{HEAD}.dense.weight"] = rng.uniform(
        -bound, bound, size=(features, config.n_classes)
    ).astype(np.float32)
    params[f"{HEAD}.dense.bias"] = np.zeros(config.n_classes, dtype=np.float32)
    return SpeechNet(config, params, buffers)


def param_count(model: SpeechNet) -> int:
    """Trainable scalars; BN running statistics are not counted."""
    return model.param_count


def normalize_windows(x: np.ndarray) -> np.ndarray:
    """Z-score each channel of each window over time."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    std = x.std(axis=-1, keepdims=True)
    return ((x - mean) / (std + NORM_EPS)).astype(np.float32)


def as_batch(model: SpeechNet, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Bring ``(C, T)``, ``(n, C, T)`` or ``(n, 1, C, T)`` input to 4-D."""
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 2
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != model.n_channels:
        raise ShapeMismatch(
            f"expected windows with {model.n_channels} channels, got shape {x.shape}"
        )
    if x.shape[3] < MIN_WINDOW:
        raise WindowTooShort(f"window of {x.shape[3]} samples, need at least {MIN_WINDOW}")
    return x, single


def forward(
    model: SpeechNet,
    x: np.ndarray,
    mode: Mode = Mode.EVAL,
    tape: Optional[Tape] = None,
    freeze_bn: bool = False,
    trace: Optional[list] = None,
) -> np.ndarray:
    """Logits for normalized windows.

    In ``Mode.TRAIN`` BatchNorm normalizes with batch statistics and the
    model's running statistics are updated in place, unless ``freeze_bn``.
    ``trace`` (a list) receives the per-sample output shape of every stage.
    """
    h, single = as_batch(model, x)
    cfg = model.config
    bn_mode = Mode.EVAL if freeze_bn else Mode(mode)
    for block in ARCHITECTURE:
        p = block.name
        h = nk.conv2d(h, model.params[f"{p}.conv.weight"], model.params[f"{p}.conv.bias"],
                      block.padding, tape=tape, key=f"{p}.conv")
        if cfg.batchnorm:
            running = RunningStats(model.buffers[f"{p}.bn.running_mean"],
                                   model.buffers[f"{p}.bn.running_var"])
            h, running = nk.batchnorm2d(h, model.params[f"{p}.bn.gamma"],
                                        model.params[f"{p}.bn.beta"], running, bn_mode,
                                        cfg.bn_eps, cfg.bn_momentum, tape=tape, key=f"{p}.bn")
            if bn_mode is Mode.TRAIN:
                model.buffers[f"{p}.bn.running_mean"] = running.mean
                model.buffers[f"{p}.bn.running_var"] = running.var
        h = nk.relu(h, tape=tape)
        h = nk.maxpool2d(h, block.pool, tape=tape)
        if trace is not None:
            trace.append(h.shape[1:])
    h = nk.adaptive_avg_pool(h, tape=tape)
    if trace is not None:
        trace.append(h.shape[1:])
    h = nk.flatten(h, tape=tape)
    logits = nk.dense(h, model.params[f"{HEAD}.dense.weight"],
                      model.params[f"{HEAD}.dense.bias"], tape=tape, key=f"{HEAD}.dense")
    if trace is not None:
        trace.append(logits.shape[1:])
    return logits[0] if single else logits


def predict_logits(model: SpeechNet, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for ``(n, C, T)`` normalized windows, in chunks."""
    if len(x) == 0:
        return np.zeros((0, model.n_classes), dtype=np.float32)
    return np.concatenate(
        [forward(model, x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    )


# Model file

def save(model: SpeechNet, path: Union[str, Path]) -> Path:
    """Write ``SWNM`` | u16 version | u32 manifest length | manifest JSON | f32 blobs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = [(k, v, "param") for k, v in model.params.items()]
    tensors += [(k, v, "buffer") for k, v in model.buffers.items()]
    manifest = {
        "config": model.config.model_dump(mode="json"),
        "tensors": [{"name": k, "shape": list(v.shape), "kind": kind} for k, v, kind in tensors],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PREAMBLE.pack(MAGIC, VERSION, len(blob)))
        f.write(blob)
        for _, v, _ in tensors:
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return path


def load(path: Union[str, Path]) -> SpeechNet:
    data = Path(path).read_bytes()
    if len(data) < _PREAMBLE.size:
        raise Corrupt(f"{path}: file truncated at byte offset {len(data)}")
    magic, version, manifest_len = _PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise Corrupt(f"{path}: not a SpeechNet model file (magic {magic!r})")
    if version != VERSION:
        raise VersionMismatch(f"{path}: model file version {version}, reader supports {VERSION}")
    offset = _PREAMBLE.size
    try:
        manifest = json.loads(data[offset:offset + manifest_len].decode("utf-8"))
        config = SpeechNetConfig(**manifest["config"])
        entries = manifest["tensors"]
    except (ValueError, KeyError, TypeError) as e:
        raise Corrupt(f"{path}: unreadable layer manifest ({e})") from e
    offset += manifest_len

    params, buffers = {}, {}
    for entry in entries:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 4 * count
        if end > len(data):
            raise Corrupt(f"{path}: tensor {entry['name']} truncated at byte offset {len(data)}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        target = params if entry["kind"] == "param" else buffers
        target[entry["name"]] = arr.astype(np.float32)
        offset = end
    if offset != len(data):
        raise Corrupt(f"{path}: {len(data) - offset} trailing bytes after offset {offset}")
    return SpeechNet(config, params, buffers)

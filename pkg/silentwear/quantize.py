"""BatchNorm folding, 8-bit post-training quantization and integer inference.

Scheme:

* weights: int8, symmetric, one scale per output channel (``max|w| / 127``);
* activations: uint8, asymmetric, one scale/zero-point per tensor, calibrated
  from observed ranges (which always include 0);
* biases: int32 at the combined scale ``s_w * s_in``;
* requantization: fixed-point multiplier (int32 mantissa, right shift),
  rounding half away from zero, saturating to ``[0, 255]``.

Integer accumulation is exact: products and sums of the integer operands are
evaluated in float64, where every intermediate stays below 2**53.
"""

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from silentwear import nnkernels as nk
from silentwear.config import QuantConfig, SpeechNetConfig
from silentwear.emgio import LabeledWindow, stack_windows
from silentwear.errors import (
    Corrupt,
    EmptyCalibrationSet,
    ShapeMismatch,
    UnpopulatedStats,
    VersionMismatch,
)
from silentwear.nnkernels import Padding
from silentwear.seeding import rng_for
from silentwear.speechnet import (
    ARCHITECTURE,
    HEAD,
    BlockSpec,
    SpeechNet,
    as_batch,
    layer_geometry,
    normalize_windows,
)

MAGIC = b"SWQ1"
VERSION = 1
_PREAMBLE = struct.Struct("<4sHI")

QMIN, QMAX = 0, 255
WMAX = 127
INT32_MIN, INT32_MAX = -(2 ** 31), 2 ** 31 - 1

# Deployed 14x400 model on the GAP9 target.
DEPLOYED_MACS = 2_145_984
DEPLOYED_FOOTPRINT_BYTES = 15_493


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# BatchNorm folding

def fold_batchnorm(model: SpeechNet) -> SpeechNet:
    """BN-free model whose Eval-mode forward matches ``model``'s.

    ``W' = W * gamma / sqrt(var + eps)`` per output channel and
    ``b' = (b - mean) * gamma / sqrt(var + eps) + beta``.
    """
    cfg = model.config
    if not cfg.batchnorm:
        return model.clone()
    params = {}
    for block in ARCHITECTURE:
        p = block.name
        try:
            mean = model.buffers[f"{p}.bn.running_mean"].astype(np.float64)
            var = model.buffers[f"{p}.bn.running_var"].astype(np.float64)
        except KeyError as e:
            raise UnpopulatedStats(f"{p}: missing running statistics") from e
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var)) and np.all(var >= 0)):
            raise UnpopulatedStats(f"{p}: running statistics are not populated")
        gamma = model.params[f"{p}.bn.gamma"].astype(np.float64)
        beta = model.params[f"{p}.bn.beta"].astype(np.float64)
        scale = gamma / np.sqrt(var + cfg.bn_eps)
        w = model.params[f"{p}.conv.weight"].astype(np.float64)
        b = model.params[f"{p}.conv.bias"].astype(np.float64)
        params[f"{p}.conv.weight"] = (w * scale[:, None, None, None]).astype(np.float32)
        params[f"{p}.conv.bias"] = ((b - mean) * scale + beta).astype(np.float32)
    params[f"{HEAD}.dense.weight"] = model.params[f"{HEAD}.dense.weight"].copy()
    params[f"{HEAD}.dense.bias"] = model.params[f"{HEAD}.dense.bias"].copy()
    return SpeechNet(cfg.model_copy(update={"batchnorm": False}), params, {})


# Quantized model

@dataclass(frozen=True)
class ActQParams:
    scale: float
    zero_point: int

    @classmethod
    def from_range(cls, lo: float, hi: float) -> "ActQParams":
        lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
        if hi == lo:
            return cls(1.0, 0)
        scale = (hi - lo) / (QMAX - QMIN)
        zp = int(np.clip(round_half_away(-lo / scale), QMIN, QMAX))
        return cls(scale, zp)

    def quantize(self, x: np.ndarray) -> np.ndarray:
        q = round_half_away(np.asarray(x, dtype=np.float64) / self.scale) + self.zero_point
        return np.clip(q, QMIN, QMAX).astype(np.int64)

    def dequantize(self, q: np.ndarray) -> np.ndarray:
        return (np.asarray(q, dtype=np.float64) - self.zero_point) * self.scale


@dataclass
class QLayer:
    name: str
    kind: str  # "conv" | "dense"
    weight: np.ndarray  # int8
    weight_scale: np.ndarray  # float32, one per output channel
    bias: np.ndarray  # int32
    input_q: ActQParams
    output_q: Optional[ActQParams] = None
    padding: Padding = Padding.VALID
    pool: Tuple[int, int] = (1, 1)
    multiplier: np.ndarray = field(default=None, repr=False)
    shift: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.output_q is not None and self.multiplier is None:
            real = (self.weight_scale.astype(np.float64) * self.input_q.scale
                    / self.output_q.scale)
            self.multiplier, self.shift = fixed_point_multiplier(real)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0] if self.kind == "conv" else self.weight.shape[1]


@dataclass
class QuantizedSpeechNet:
    config: SpeechNetConfig
    input_q: ActQParams
    layers: List[QLayer]

    @property
    def n_channels(self) -> int:
        return self.config.n_channels

    @property
    def n_classes(self) -> int:
        return self.config.n_classes


def quantize_weights(w: np.ndarray, axis: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Symmetric int8 per channel along ``axis``; all-zero channels get scale 1."""
    w = np.asarray(w, dtype=np.float64)
    reduce = tuple(i for i in range(w.ndim) if i != axis)
    amax = np.abs(w).max(axis=reduce)
    scale = np.where(amax > 0, amax / WMAX, 1.0).astype(np.float32)
    shape = [1] * w.ndim
    shape[axis] = -1
    q = np.clip(round_half_away(w / scale.astype(np.float64).reshape(shape)), -WMAX, WMAX)
    return q.astype(np.int8), scale


def dequantize_weights(q: np.ndarray, scale: np.ndarray, axis: int = 0) -> np.ndarray:
    shape = [1] * q.ndim
    shape[axis] = -1
    return q.astype(np.float64) * scale.astype(np.float64).reshape(shape)


def fixed_point_multiplier(real: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """``real ~= m0 * 2**-shift`` with ``m0`` an int32 in ``[2**30, 2**31)``."""
    real = np.atleast_1d(np.asarray(real, dtype=np.float64))
    mant, exp = np.frexp(real)
    shift = 31 - exp
    m0 = np.rint(mant * 2.0 ** 31).astype(np.int64)
    carry = m0 == 2 ** 31
    m0[carry] //= 2
    shift[carry] -= 1
    # multipliers >= 2**30 would need a left shift; keep at least one bit of right shift
    low = shift < 1
    if np.any(low):
        shift[low] = 1
        m0[low] = np.minimum(np.rint(real[low] * 2.0), INT32_MAX).astype(np.int64)
    zero = real == 0
    m0[zero], shift[zero] = 0, 1
    return m0.astype(np.int64), shift.astype(np.int64)


def requantize(acc: np.ndarray, multiplier: np.ndarray, shift: np.ndarray,
               zero_point: int) -> np.ndarray:
    """Scale int32 accumulators ``(n, k, h, w)`` per channel ``k`` into uint8."""
    m = multiplier.reshape(1, -1, 1, 1)
    s = shift.reshape(1, -1, 1, 1)
    prod = acc.astype(np.int64) * m
    mag = (np.abs(prod) + (np.int64(1) << (s - 1))) >> s
    q = np.sign(prod) * mag + zero_point
    return np.clip(q, QMIN, QMAX)


def _saturate32(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), INT32_MIN, INT32_MAX).astype(np.int64)


# Calibration

def _float_stages(folded: SpeechNet, x: np.ndarray) -> List[np.ndarray]:
    """Input followed by each block's output (conv, ReLU, pool) of a BN-free model."""
    h = x
    out = [h]
    for block in ARCHITECTURE:
        h = nk.conv2d(h, folded.params[f"{block.name}.conv.weight"],
                      folded.params[f"{block.name}.conv.bias"], block.padding)
        h = nk.maxpool2d(nk.relu(h), block.pool)
        out.append(h)
    return out


def _select_calibration(x: np.ndarray, cfg: QuantConfig, seed: int) -> np.ndarray:
    n = len(x)
    if n == 0:
        raise EmptyCalibrationSet("no calibration windows")
    if n < cfg.min_calibration:
        logger.warning(
            f"[Quant] only {n} calibration windows (recommended >= {cfg.min_calibration})"
        )
    if n > cfg.n_calibration:
        idx = np.sort(rng_for(seed, "calibration").choice(n, size=cfg.n_calibration,
                                                           replace=False))
        x = x[idx]
    return x


def calibrate_and_quantize(
    model: SpeechNet,
    calib_windows: Union[np.ndarray, Sequence[LabeledWindow]],
    cfg: Optional[QuantConfig] = None,
    seed: int = 0,
    chunk: int = 128,
) -> QuantizedSpeechNet:
    """Fold BN, calibrate activation ranges and quantize every layer.

    ``calib_windows`` are preprocessed (not normalized) windows, either an
    ``(n, C, T)`` array or a list of :class:`LabeledWindow`.
    """
    cfg = cfg or QuantConfig()
    if isinstance(calib_windows, np.ndarray):
        x = calib_windows
    else:
        x, _ = stack_windows(list(calib_windows))
    x = _select_calibration(np.asarray(x, dtype=np.float32), cfg, seed)
    folded = fold_batchnorm(model)

    n_stages = len(ARCHITECTURE) + 1
    lo = np.full(n_stages, np.inf)
    hi = np.full(n_stages, -np.inf)
    for start in range(0, len(x), chunk):
        xb, _ = as_batch(folded, normalize_windows(x[start:start + chunk]))
        for i, act in enumerate(_float_stages(folded, xb)):
            lo[i] = min(lo[i], float(act.min()))
            hi[i] = max(hi[i], float(act.max()))
    acts = [ActQParams.from_range(lo[i], hi[i]) for i in range(n_stages)]

    layers = []
    for i, block in enumerate(ARCHITECTURE):
        layers.append(_quantize_conv(folded, block, acts[i], acts[i + 1]))
    layers.append(_quantize_dense(folded, acts[-1]))
    qmodel = QuantizedSpeechNet(config=folded.config, input_q=acts[0], layers=layers)
    logger.info(
        f"[Quant] quantized with {len(x)} calibration windows, "
        f"footprint {footprint_bytes(qmodel)} B"
    )
    return qmodel


def _quantize_bias(b: np.ndarray, w_scale: np.ndarray, in_scale: float) -> np.ndarray:
    combined = w_scale.astype(np.float64) * in_scale
    return np.clip(round_half_away(b.astype(np.float64) / combined),
                   INT32_MIN, INT32_MAX).astype(np.int32)


def _quantize_conv(folded: SpeechNet, block: BlockSpec, in_q: ActQParams,
                   out_q: ActQParams) -> QLayer:
    wq, ws = quantize_weights(folded.params[f"{block.name}.conv.weight"], axis=0)
    bq = _quantize_bias(folded.params[f"{block.name}.conv.bias"], ws, in_q.scale)
    return QLayer(block.name, "conv", wq, ws, bq, in_q, out_q, block.padding, block.pool)


def _quantize_dense(folded: SpeechNet, in_q: ActQParams) -> QLayer:
    wq, ws = quantize_weights(folded.params[f"{HEAD}.dense.weight"], axis=1)
    bq = _quantize_bias(folded.params[f"{HEAD}.dense.bias"], ws, in_q.scale)
    return QLayer(HEAD, "dense", wq, ws, bq, in_q)


# Integer inference

def _conv_block(layer: QLayer, xq: np.ndarray) -> np.ndarray:
    centered = (xq - layer.input_q.zero_point).astype(np.float64)
    acc, _ = nk.conv2d_forward(centered, layer.weight.astype(np.float64),
                               layer.bias.astype(np.float64), layer.padding)
    q = requantize(_saturate32(acc), layer.multiplier, layer.shift,
                   layer.output_q.zero_point)
    q = np.maximum(q, layer.output_q.zero_point)  # ReLU
    q, _ = nk.maxpool2d_forward(q, layer.pool)
    return q


def _avg_pool(xq: np.ndarray) -> np.ndarray:
    n, c, h, w = xq.shape
    total = xq.reshape(n, c, h * w).sum(axis=-1)
    count = h * w
    return (total + count // 2) // count


def qforward(qmodel: QuantizedSpeechNet, x: np.ndarray) -> np.ndarray:
    """Logits (dequantized float32) for normalized windows, integer path."""
    xb, single = as_batch(qmodel, x)
    h = qmodel.input_q.quantize(xb)
    for layer in qmodel.layers[:-1]:
        h = _conv_block(layer, h)
    feats = _avg_pool(h)
    head = qmodel.layers[-1]
    centered = (feats - head.input_q.zero_point).astype(np.float64)
    acc = _saturate32(centered @ head.weight.astype(np.float64)
                      + head.bias.astype(np.float64))
    logits = (acc * (head.weight_scale.astype(np.float64) * head.input_q.scale)).astype(
        np.float32
    )
    return logits[0] if single else logits


def qpredict_logits(qmodel: QuantizedSpeechNet, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    if len(x) == 0:
        return np.zeros((0, qmodel.n_classes), dtype=np.float32)
    return np.concatenate(
        [qforward(qmodel, x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    )


# Accounting

def footprint_breakdown(qmodel: QuantizedSpeechNet) -> Dict[str, dict]:
    """Bytes per layer: int8 weights, int32 biases, f32 weight scales.

    Activation parameters (f32 scale + u8 zero-point per tensor) are listed
    under ``activations``. Requantization multipliers are derived from the
    scales at load time and are not stored.
    """
    out: Dict[str, dict] = {}
    for layer in qmodel.layers:
        entry = {
            "weights": int(layer.weight.size),
            "biases": int(layer.bias.size) * 4,
            "weight_scales": int(layer.weight_scale.size) * 4,
        }
        entry["total"] = sum(entry.values())
        out[layer.name] = entry
    n_acts = 1 + sum(1 for layer in qmodel.layers if layer.output_q is not None)
    out["activations"] = {"tensors": n_acts, "total": n_acts * 5}
    return out


def footprint_bytes(qmodel: QuantizedSpeechNet) -> int:
    return int(sum(entry["total"] for entry in footprint_breakdown(qmodel).values()))


def mac_breakdown(
    input_shape: Tuple[int, int] = (14, 400),
    n_classes: int = 9,
    arch: Tuple[BlockSpec, ...] = ARCHITECTURE,
) -> Dict[str, int]:
    """MACs per layer: conv ``out_elems * in_c * kh * kw``, dense ``in * out``."""
    n_channels, t = input_shape
    out = {}
    for geo in layer_geometry(n_channels, t, arch):
        k, ho, wo = geo.conv_shape
        kh, kw = geo.kernel
        out[geo.name] = int(k * ho * wo * geo.in_shape[0] * kh * kw)
    out[HEAD] = int(arch[-1].filters * n_classes)
    return out


def count_macs(
    arch: Tuple[BlockSpec, ...] = ARCHITECTURE,
    input_shape: Tuple[int, int] = (14, 400),
    n_classes: int = 9,
) -> int:
    return int(sum(mac_breakdown(input_shape, n_classes, arch).values()))


def accounting_report(qmodel: QuantizedSpeechNet, t: int = 400) -> dict:
    """Footprint and MAC accounting next to the deployed-model figures."""
    footprint = footprint_bytes(qmodel)
    macs = mac_breakdown((qmodel.n_channels, t), qmodel.n_classes)
    total_macs = sum(macs.values())
    report = {
        "input_shape": [qmodel.n_channels, t],
        "footprint_bytes": footprint,
        "footprint_breakdown": footprint_breakdown(qmodel),
        "macs": total_macs,
        "macs_per_layer": macs,
        "activation_qparams": {
            "input": [qmodel.input_q.scale, qmodel.input_q.zero_point],
            **{layer.name: [layer.output_q.scale, layer.output_q.zero_point]
               for layer in qmodel.layers if layer.output_q is not None},
        },
    }
    if (qmodel.n_channels, t, qmodel.n_classes) == (14, 400, 9):
        report["deployed_reference"] = {
            "macs": DEPLOYED_MACS,
            "macs_gap_percent": round(100.0 * (total_macs - DEPLOYED_MACS) / DEPLOYED_MACS, 2),
            "footprint_bytes": DEPLOYED_FOOTPRINT_BYTES,
            "footprint_ratio": round(footprint / DEPLOYED_FOOTPRINT_BYTES, 4),
        }
    return report


# Quantized model file

def save_quantized(qmodel: QuantizedSpeechNet, path: Union[str, Path]) -> Path:
    """``SWQ1`` | u16 version | u32 manifest length | manifest JSON | blobs.

    Per layer, in manifest order: int8 weights, int32 biases, f32 weight scales.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    layers_meta = []
    blobs = []
    for layer in qmodel.layers:
        layers_meta.append({
            "name": layer.name,
            "kind": layer.kind,
            "weight_shape": list(layer.weight.shape),
            "padding": Padding(layer.padding).value,
            "pool": list(layer.pool),
            "input_q": [layer.input_q.scale, layer.input_q.zero_point],
            "output_q": (None if layer.output_q is None
                         else [layer.output_q.scale, layer.output_q.zero_point]),
        })
        blobs.append(np.ascontiguousarray(layer.weight, dtype=np.int8).tobytes())
        blobs.append(np.ascontiguousarray(layer.bias, dtype="<i4").tobytes())
        blobs.append(np.ascontiguousarray(layer.weight_scale, dtype="<f4").tobytes())
    manifest = {
        "config": qmodel.config.model_dump(mode="json"),
        "input_q": [qmodel.input_q.scale, qmodel.input_q.zero_point],
        "layers": layers_meta,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PREAMBLE.pack(MAGIC, VERSION, len(blob)))
        f.write(blob)
        for b in blobs:
            f.write(b)
    return path


def _take(data: bytes, offset: int, dtype: str, count: int, path, what: str):
    size = np.dtype(dtype).itemsize * count
    if offset + size > len(data):
        raise Corrupt(f"{path}: {what} truncated at byte offset {len(data)}")
    return np.frombuffer(data, dtype=dtype, count=count, offset=offset).copy(), offset + size


def load_quantized(path: Union[str, Path]) -> QuantizedSpeechNet:
    data = Path(path).read_bytes()
    if len(data) < _PREAMBLE.size:
        raise Corrupt(f"{path}: file truncated at byte offset {len(data)}")
    magic, version, manifest_len = _PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise Corrupt(f"{path}: not a quantized model file (magic {magic!r})")
    if version != VERSION:
        raise VersionMismatch(f"{path}: quantized file version {version}, reader supports {VERSION}")
    offset = _PREAMBLE.size
    try:
        manifest = json.loads(data[offset:offset + manifest_len].decode("utf-8"))
        config = SpeechNetConfig(**manifest["config"])
        input_q = ActQParams(float(manifest["input_q"][0]), int(manifest["input_q"][1]))
        metas = manifest["layers"]
    except (ValueError, KeyError, TypeError, IndexError) as e:
        raise Corrupt(f"{path}: unreadable layer manifest ({e})") from e
    offset += manifest_len

    layers = []
    for meta in metas:
        shape = tuple(meta["weight_shape"])
        out_ch = shape[0] if meta["kind"] == "conv" else shape[1]
        w, offset = _take(data, offset, "i1", int(np.prod(shape)), path, f"{meta['name']} weights")
        b, offset = _take(data, offset, "<i4", out_ch, path, f"{meta['name']} biases")
        s, offset = _take(data, offset, "<f4", out_ch, path, f"{meta['name']} scales")
        out_q = meta["output_q"]
        layers.append(QLayer(
            name=meta["name"],
            kind=meta["kind"],
            weight=w.reshape(shape).astype(np.int8),
            weight_scale=s.astype(np.float32),
            bias=b.astype(np.int32),
            input_q=ActQParams(float(meta["input_q"][0]), int(meta["input_q"][1])),
            output_q=None if out_q is None else ActQParams(float(out_q[0]), int(out_q[1])),
            padding=Padding(meta["padding"]),
            pool=tuple(meta["pool"]),
        ))
    if offset != len(data):
        raise Corrupt(f"{path}: {len(data) - offset} trailing bytes after offset {offset}")
    if len(layers) != len(ARCHITECTURE) + 1:
        raise ShapeMismatch(f"{path}: expected {len(ARCHITECTURE) + 1} layers, found {len(layers)}")
    return QuantizedSpeechNet(config=config, input_q=input_q, layers=layers)

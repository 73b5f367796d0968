"""Network description, construction, forward passes, and the model file.

A network is a flat list of layers (conv / maxpool / detection_head) ending
in a detection head whose channel count is ``C + 5K``: C class channels
followed, per box b, by one confidence channel and four raw coordinate
channels (x, y, w, h). The final activation is split: sigmoid on confidence,
softmax over classes (sigmoid when C == 1), identity on coordinates.

Model files are little-endian binary: magic ``LCDT``, a u32 version, a
JSON-encoded network description, then one record per weight/bias tensor
(dtype tag, dims, optional quantization range, payload, CRC32). The format
is documented in FORMATS.md.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (BadMagicError, ChecksumError, ConfigError, DataError,
                     TruncatedError, VersionError)
from .quant import (CalibrationRecord, QuantParams, QuantizedTensor, dequantize,
                    qconv2d, qmaxpool2d, quantize_with)
from .tensor import activate, conv2d_batched, maxpool2d_batched, sigmoid, softmax

MAGIC = b"LCDT"
VERSION = 1
DTYPE_F32 = 0
DTYPE_U8 = 1

LAYER_KINDS = ("conv", "maxpool", "detection_head")
LAYER_ACTIVATIONS = ("relu", "leaky_relu", "identity", "final")


@dataclass
class LayerSpec:
    kind: str
    kernel: tuple[int, int] = (1, 1)
    out_channels: int | None = None
    stride: int = 1
    padding: str = "same"
    activation: str = "identity"


@dataclass
class NetworkSpec:
    layers: list[LayerSpec]
    num_classes: int
    boxes_per_cell: int
    input_channels: int = 3
    name: str = "custom"

    @property
    def head_channels(self) -> int:
        return self.num_classes + 5 * self.boxes_per_cell

    @property
    def total_stride(self) -> int:
        s = 1
        for layer in self.layers:
            s *= layer.stride
        return s

    def validate(self):
        if self.num_classes < 1 or self.boxes_per_cell < 1:
            raise ConfigError("num_classes and boxes_per_cell must be >= 1")
        heads = [i for i, l in enumerate(self.layers) if l.kind == "detection_head"]
        if len(heads) != 1:
            raise ConfigError(f"network must have exactly one detection_head, found {len(heads)}")
        if heads[0] != len(self.layers) - 1:
            raise ConfigError("detection_head must be the last layer")
        head = self.layers[-1]
        if head.out_channels != self.head_channels:
            raise ConfigError(
                f"detection_head has {head.out_channels} channels, "
                f"needs C + 5K = {self.head_channels}")
        for i, layer in enumerate(self.layers):
            if layer.kind not in LAYER_KINDS:
                raise ConfigError(f"layer {i}: unknown kind {layer.kind!r}")
            if layer.kind != "maxpool" and layer.activation not in LAYER_ACTIVATIONS:
                raise ConfigError(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.stride < 1:
                raise ConfigError(f"layer {i}: stride must be >= 1")


@dataclass
class LayerWeights:
    """Weights of one layer; ``w`` is float32 or a QuantizedTensor, pools hold nothing."""

    w: np.ndarray | QuantizedTensor | None = None
    b: np.ndarray | None = None

    @property
    def quantized(self) -> bool:
        return isinstance(self.w, QuantizedTensor)


@dataclass
class Model:
    spec: NetworkSpec
    weights: list[LayerWeights]
    calibration: CalibrationRecord | None = None

    @property
    def quantized(self) -> bool:
        return any(lw.quantized for lw in self.weights)


# ---------------------------------------------------------------------------
# construction

def _layer_from_dict(entry: dict, index: int) -> LayerSpec:
    try:
        kind = entry["kind"]
    except KeyError:
        raise ConfigError(f"backbone layer {index}: missing field 'kind'") from None
    if kind == "maxpool":
        size = int(entry.get("size", entry.get("kernel", [2, 2])[0]))
        return LayerSpec(kind="maxpool", kernel=(size, size),
                         stride=int(entry.get("stride", size)))
    try:
        kernel = entry["kernel"]
        out_channels = int(entry["out_channels"])
    except KeyError as e:
        raise ConfigError(f"backbone layer {index}: missing field {e.args[0]!r}") from None
    return LayerSpec(
        kind=kind,
        kernel=(int(kernel[0]), int(kernel[1])),
        out_channels=out_channels,
        stride=int(entry.get("stride", 1)),
        padding=entry.get("padding", "same"),
        activation=entry.get("activation", "relu"),
    )


def build_lcdet(config: dict, num_classes: int | None = None,
                boxes_per_cell: int | None = None) -> NetworkSpec:
    """Build the detector: configured backbone plus the two-conv detection head.

    The head is a 3x3 conv (channel count from ``convdet_channels``) with
    ReLU, then a 1x1 conv to C + 5K channels carrying the split final
    activation.
    """
    c = int(num_classes if num_classes is not None else config.get("num_classes", 1))
    k = int(boxes_per_cell if boxes_per_cell is not None else config.get("boxes_per_cell", 3))
    if c < 1 or k < 1:
        raise ConfigError("num_classes and boxes_per_cell must be >= 1")
    layers = [_layer_from_dict(entry, i) for i, entry in enumerate(config.get("backbone", []))]
    convdet = int(config.get("convdet_channels", 256))
    layers.append(LayerSpec(kind="conv", kernel=(3, 3), out_channels=convdet,
                            stride=1, padding="same", activation="relu"))
    layers.append(LayerSpec(kind="detection_head", kernel=(1, 1),
                            out_channels=c + 5 * k, stride=1, padding="same",
                            activation="final"))
    spec = NetworkSpec(layers=layers, num_classes=c, boxes_per_cell=k,
                       input_channels=int(config.get("input_channels", 3)),
                       name=str(config.get("name", "custom")))
    spec.validate()
    return spec


def parse_config(text: str) -> dict:
    try:
        config = json.loads(text)
    except json.JSONDecodeError as e:
        raise DataError(f"config parse error at line {e.lineno}, column {e.colno}: {e.msg}") from e
    if not isinstance(config, dict):
        raise DataError("config root must be a JSON object")
    return config


def _conv(out_ch, kernel=3, stride=1):
    return {"kind": "conv", "kernel": [kernel, kernel], "out_channels": out_ch,
            "stride": stride, "padding": "same", "activation": "relu"}


def _pool():
    return {"kind": "maxpool", "size": 2, "stride": 2}


def profile_config(name: str) -> dict:
    """Built-in network profiles.

    ``toy``: four conv/pool stages, total stride 16, sized for 112x112
    desk-scale experiments. ``paper``: the full-size 24-conv backbone with
    total stride 64 and a 3x3x4096 first head conv (256 is the compact
    preset, reachable via ``convdet_channels``).
    """
    if name == "toy":
        return {
            "name": "toy",
            "input_channels": 3,
            "num_classes": 1,
            "boxes_per_cell": 3,
            "convdet_channels": 64,
            "input_size": 112,
            "backbone": [
                _conv(16), _pool(),
                _conv(32), _pool(),
                _conv(48), _pool(),
                _conv(64), _conv(64), _pool(),
            ],
        }
    if name == "paper":
        backbone = [
            _conv(64, kernel=7, stride=2), _pool(),
            _conv(192), _pool(),
            _conv(128, kernel=1), _conv(256), _conv(256, kernel=1), _conv(512), _pool(),
        ]
        for _ in range(4):
            backbone += [_conv(256, kernel=1), _conv(512)]
        backbone += [_conv(512, kernel=1), _conv(1024), _pool()]
        for _ in range(2):
            backbone += [_conv(512, kernel=1), _conv(1024)]
        backbone += [_conv(1024), _conv(1024, stride=2), _conv(1024), _conv(1024)]
        return {
            "name": "paper",
            "input_channels": 3,
            "num_classes": 1,
            "boxes_per_cell": 3,
            "convdet_channels": 4096,
            "input_size": 448,
            "backbone": backbone,
        }
    raise ConfigError(f"unknown profile {name!r} (available: toy, paper)")


def init_model(spec: NetworkSpec, seed: int = 0) -> Model:
    """He-initialized float model; head coordinate biases start at 0.5."""
    rng = np.random.default_rng(seed)
    weights = []
    in_ch = spec.input_channels
    for layer in spec.layers:
        if layer.kind == "maxpool":
            weights.append(LayerWeights())
            continue
        kh, kw = layer.kernel
        fan_in = kh * kw * in_ch
        if layer.kind == "detection_head":
            w = rng.normal(0.0, 0.01, size=(kh, kw, in_ch, layer.out_channels))
            b = np.zeros(layer.out_channels, dtype=np.float32)
            c, k = spec.num_classes, spec.boxes_per_cell
            for box in range(k):
                # centered offsets and a quarter-image size prior; identical
                # box priors let responsibility settle on one predictor early
                b[c + 5 * box + 1:c + 5 * box + 5] = 0.5
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(kh, kw, in_ch, layer.out_channels))
            b = np.zeros(layer.out_channels, dtype=np.float32)
        weights.append(LayerWeights(w.astype(np.float32), b))
        in_ch = layer.out_channels
    return Model(spec=spec, weights=weights)


# ---------------------------------------------------------------------------
# forward passes

def check_resolution(spec: NetworkSpec, height: int, width: int):
    ts = spec.total_stride
    if height % ts or width % ts:
        raise ConfigError(
            f"input {width}x{height} rejected: height and width must be "
            f"multiples of the total stride {ts}")


def run_layers_float(model: Model, x: np.ndarray, outputs: list | None = None) -> np.ndarray:
    """Float forward over a batch (N, H, W, C); returns the raw head output.

    When ``outputs`` is a list, every layer's output (post layer activation,
    head pre-split) is appended to it.
    """
    for i, (layer, lw) in enumerate(zip(model.spec.layers, model.weights)):
        try:
            if layer.kind == "maxpool":
                x = maxpool2d_batched(x, layer.kernel[0], layer.stride)
            else:
                if lw.quantized:
                    raise ConfigError("model holds quantized weights; use quantized mode")
                x = conv2d_batched(x, lw.w, lw.b, layer.stride, layer.padding)
                if layer.kind != "detection_head" and layer.activation != "identity":
                    x = activate(x, layer.activation)
        except ConfigError as e:
            raise ConfigError(f"layer {i} ({layer.kind}): {e}") from e
        if outputs is not None:
            outputs.append(x)
    return x


def forward_layer_outputs(model: Model, image: np.ndarray) -> list[np.ndarray]:
    """Per-layer float outputs for one image (calibration hook)."""
    outputs: list[np.ndarray] = []
    run_layers_float(model, image[None].astype(np.float32, copy=False), outputs)
    return [o[0] for o in outputs]


def head_activation(raw: np.ndarray, num_classes: int, boxes_per_cell: int) -> np.ndarray:
    """Split final activation: sigmoid confidence, softmax classes, raw coords."""
    out = np.array(raw, copy=True)
    c = num_classes
    if c == 1:
        out[..., 0] = sigmoid(raw[..., 0])
    else:
        out[..., :c] = softmax(raw[..., :c], axis=-1)
    for b in range(boxes_per_cell):
        ch = c + 5 * b
        out[..., ch] = sigmoid(raw[..., ch])
    return out


def _run_layers_quantized(model: Model, image: np.ndarray) -> np.ndarray:
    calib = model.calibration
    if calib is None:
        raise ConfigError("quantized mode requires a calibration record")
    if len(calib.layers) != len(model.spec.layers):
        raise ConfigError("calibration record does not match the network layer count")
    q = quantize_with(image, calib.input_range)
    for i, (layer, lw) in enumerate(zip(model.spec.layers, model.weights)):
        try:
            if layer.kind == "maxpool":
                q = qmaxpool2d(q, layer.kernel[0], layer.stride)
            else:
                if not lw.quantized:
                    raise ConfigError("float weights in quantized mode; quantize the model first")
                act = layer.activation if layer.kind != "detection_head" else "identity"
                if act == "final":
                    act = "identity"
                q = qconv2d(q, lw.w, lw.b, layer.stride, layer.padding,
                            out_params=calib.layers[i], activation=act)
        except ConfigError as e:
            raise ConfigError(f"layer {i} ({layer.kind}): {e}") from e
    return dequantize(q)


def forward(model: Model, image: np.ndarray, mode: str = "float") -> np.ndarray:
    """Single forward pass producing the activated (gh, gw, C + 5K) grid."""
    spec = model.spec
    if image.ndim != 3 or image.shape[2] != spec.input_channels:
        raise ConfigError(
            f"image must be (H, W, {spec.input_channels}), got {image.shape}")
    check_resolution(spec, image.shape[0], image.shape[1])
    if mode == "float":
        raw = run_layers_float(model, image[None].astype(np.float32, copy=False))[0]
    elif mode == "quantized":
        raw = _run_layers_quantized(model, image.astype(np.float32, copy=False))
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    return head_activation(raw, spec.num_classes, spec.boxes_per_cell)


# ---------------------------------------------------------------------------
# serialization

def _spec_to_dict(spec: NetworkSpec) -> dict:
    return {
        "name": spec.name,
        "num_classes": spec.num_classes,
        "boxes_per_cell": spec.boxes_per_cell,
        "input_channels": spec.input_channels,
        "layers": [
            {"kind": l.kind, "kernel": list(l.kernel), "out_channels": l.out_channels,
             "stride": l.stride, "padding": l.padding, "activation": l.activation}
            for l in spec.layers
        ],
    }


def _spec_from_dict(d: dict) -> NetworkSpec:
    layers = [
        LayerSpec(kind=e["kind"], kernel=tuple(e["kernel"]),
                  out_channels=e["out_channels"], stride=e["stride"],
                  padding=e["padding"], activation=e["activation"])
        for e in d["layers"]
    ]
    spec = NetworkSpec(layers=layers, num_classes=d["num_classes"],
                       boxes_per_cell=d["boxes_per_cell"],
                       input_channels=d["input_channels"], name=d.get("name", "custom"))
    spec.validate()
    return spec


def _pack_record(arr: np.ndarray, params: QuantParams | None) -> bytes:
    dims = arr.shape
    if params is None:
        tag, payload = DTYPE_F32, arr.astype("<f4", copy=False).tobytes()
        head = struct.pack("<BI", tag, len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    else:
        tag, payload = DTYPE_U8, arr.astype(np.uint8, copy=False).tobytes()
        head = struct.pack("<BI", tag, len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
        head += struct.pack("<2f", params.min, params.max)
    return head + payload + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(
                f"file truncated: needed {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_record(r: _Reader):
    tag, rank = r.unpack("<BI")
    if tag not in (DTYPE_F32, DTYPE_U8):
        raise DataError(f"unknown dtype tag {tag}")
    dims = r.unpack(f"<{rank}I")
    params = None
    if tag == DTYPE_U8:
        lo, hi = r.unpack("<2f")
        params = QuantParams(lo, hi)
    count = int(np.prod(dims)) if dims else 1
    itemsize = 4 if tag == DTYPE_F32 else 1
    payload = r.take(count * itemsize)
    (crc,) = r.unpack("<I")
    if zlib.crc32(payload) != crc:
        raise ChecksumError("payload CRC32 mismatch")
    if tag == DTYPE_F32:
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        return arr, None
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(dims).copy()
    return arr, params


def save(model: Model) -> bytes:
    """Serialize a model to bytes; ``load(save(m))`` is bit-identical."""
    header = _spec_to_dict(model.spec)
    if model.calibration is not None:
        header["calibration"] = {
            "input": [model.calibration.input_range.min, model.calibration.input_range.max],
            "layers": [[p.min, p.max] for p in model.calibration.layers],
        }
    else:
        header["calibration"] = None
    blob = json.dumps(header, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob]
    for lw in model.weights:
        if lw.w is None:
            continue
        if isinstance(lw.w, QuantizedTensor):
            out.append(_pack_record(lw.w.data, lw.w.params))
        else:
            out.append(_pack_record(lw.w, None))
        out.append(_pack_record(lw.b, None))
    return b"".join(out)


def load(data: bytes) -> Model:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagicError("not a model file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionError(f"unsupported model file version {version} (expected {VERSION})")
    (blob_len,) = r.unpack("<I")
    try:
        header = json.loads(r.take(blob_len).decode())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DataError(f"model header is not valid JSON: {e}") from e
    spec = _spec_from_dict(header)
    calibration = None
    if header.get("calibration") is not None:
        cal = header["calibration"]
        calibration = CalibrationRecord(
            QuantParams(*cal["input"]),
            [QuantParams(lo, hi) for lo, hi in cal["layers"]])
    weights = []
    for layer in spec.layers:
        if layer.kind == "maxpool":
            weights.append(LayerWeights())
            continue
        w, params = _read_record(r)
        b, bparams = _read_record(r)
        if bparams is not None:
            raise DataError("bias records must be float32")
        lw = LayerWeights(QuantizedTensor(w, params) if params is not None else w, b)
        weights.append(lw)
    if r.pos != len(data):
        raise DataError(f"{len(data) - r.pos} trailing bytes after last record")
    return Model(spec=spec, weights=weights, calibration=calibration)


def save_file(model: Model, path):
    with open(path, "wb") as f:
        f.write(save(model))


def load_file(path) -> Model:
    with open(path, "rb") as f:
        return load(f.read())


def quantize_model(model: Model, calibration: CalibrationRecord) -> Model:
    """Quantize every conv weight tensor per-tensor; biases stay float32."""
    from .quant import quantize
    if model.quantized:
        raise ConfigError("model is already quantized")
    weights = []
    for lw in model.weights:
        if lw.w is None:
            weights.append(LayerWeights())
        else:
            weights.append(LayerWeights(quantize(lw.w), lw.b.copy()))
    return Model(spec=model.spec, weights=weights, calibration=calibration)

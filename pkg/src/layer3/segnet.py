"""
Range-image segmentation network.

    stem        conv3x3 + affine + relu at full resolution
    stage i     [xyz + normals, downsized] ++ features -> stride-2 conv3x3
                + affine + relu, then depth_i residual blocks
    neck        single-head scaled dot-product self-attention on the coarsest map
    FPN         every stage deconvolved to H/2 x W/2 and concatenated
    head        deconv to H x W, then two conv3x3 anti-aliasing layers
"""
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from src.exceptions import CheckpointError, FrameMismatch, InvalidConfig, MissingNormals, ShapeMismatch
from src.layer2.projection import Frame, SphericalImageSet
from src.layer3.autograd import (Tensor, batch_affine, concat, conv2d, deconv2d, downsample_nearest,
                                 get_default_dtype, load_tensors, no_grad, relu, reshape, save_tensors,
                                 scale_dot_attention, transpose)

logger = logging.getLogger("SegNet")

GEOMETRY_CHANNELS = 6
CHECKPOINT_FORMAT = "rangeseg-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    stage_widths: Tuple[int, ...] = (16, 32, 64)
    stage_depths: Tuple[int, ...] = (1, 1, 1)
    num_classes: int = 9
    attention_dim: int = 16
    include_range_channel: bool = False
    geometry_injection: bool = True
    use_reflectivity: bool = True
    fpn_width: int = 16
    head_width: int = 16
    xyz_scale: float = 10.0
    ignore_id: int = 255

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        if len(self.stage_widths) < 2:
            raise InvalidConfig(f"need at least 2 stages, got {len(self.stage_widths)}")
        if len(self.stage_widths) != len(self.stage_depths):
            raise InvalidConfig(f"stage_widths {self.stage_widths} and stage_depths {self.stage_depths} differ in length")
        if any(w <= 0 for w in self.stage_widths) or any(d < 0 for d in self.stage_depths):
            raise InvalidConfig("stage widths must be positive and depths non-negative")
        if min(self.num_classes, self.attention_dim, self.fpn_width, self.head_width) <= 0:
            raise InvalidConfig("num_classes, attention_dim, fpn_width and head_width must be positive")
        if self.xyz_scale <= 0:
            raise InvalidConfig("xyz_scale must be positive")

    @property
    def input_channels(self) -> int:
        return 7 + int(self.include_range_channel)

    @property
    def num_stages(self) -> int:
        return len(self.stage_widths)

    @property
    def downsampling(self) -> int:
        return 2 ** self.num_stages

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["stage_depths"] = list(self.stage_depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


def net_config_from_config(config: dict, preset: Optional[str] = None, **overrides) -> NetConfig:
    net = config.get('network', {})
    preset = preset or net.get('preset', 'small')
    presets = net.get('presets', {})
    if preset not in presets:
        raise InvalidConfig(f"unknown network preset '{preset}' (available: {sorted(presets)})")
    fields = dict(
        stage_widths=presets[preset]['stage_widths'],
        stage_depths=presets[preset]['stage_depths'],
        num_classes=net.get('num_classes', 9),
        attention_dim=net.get('attention_dim', 16),
        include_range_channel=net.get('include_range_channel', False),
        geometry_injection=net.get('geometry_injection', True),
        use_reflectivity=net.get('use_reflectivity', True),
        fpn_width=net.get('fpn_width', 16),
        head_width=net.get('head_width', 16),
        xyz_scale=net.get('xyz_scale', 10.0),
        ignore_id=config.get('dataset', {}).get('ignore_id', 255),
    )
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return NetConfig(**fields)


def load_net_config(config_path: str = "config/config.yaml", preset: Optional[str] = None) -> NetConfig:
    with open(config_path, 'r') as f:
        return net_config_from_config(yaml.safe_load(f), preset)


def parameter_shapes(config: NetConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Every parameter's name and shape, in initialization order."""
    shapes = OrderedDict()
    g = GEOMETRY_CHANNELS if config.geometry_injection else 0
    widths = config.stage_widths

    def conv_affine(prefix, cout, cin, k):
        shapes[f"{prefix}.weight"] = (cout, cin, k, k)
        shapes[f"{prefix}.scale"] = (cout,)
        shapes[f"{prefix}.shift"] = (cout,)

    conv_affine("stem", widths[0], config.input_channels, 3)
    prev = widths[0]
    for i, (w, depth) in enumerate(zip(widths, config.stage_depths), start=1):
        conv_affine(f"stage{i}.down", w, prev + g, 3)
        for j in range(depth):
            conv_affine(f"stage{i}.block{j}.conv1", w, w, 3)
            conv_affine(f"stage{i}.block{j}.conv2", w, w, 3)
        prev = w

    d, top = config.attention_dim, widths[-1]
    for name, cout in (("query", d), ("key", d), ("value", top)):
        shapes[f"neck.{name}.weight"] = (cout, top, 1, 1)
        shapes[f"neck.{name}.bias"] = (cout,)

    f = config.fpn_width
    for i, w in enumerate(widths, start=1):
        k = 2 ** (i - 1)
        shapes[f"fpn{i}.weight"] = (w, f, k, k)
        shapes[f"fpn{i}.bias"] = (f,)

    h = config.head_width
    shapes["head.up.weight"] = (config.num_stages * f, h, 2, 2)
    shapes["head.up.bias"] = (h,)
    shapes["head.conv1.weight"] = (h, h, 3, 3)
    shapes["head.conv1.bias"] = (h,)
    shapes["head.conv2.weight"] = (config.num_classes, h, 3, 3)
    shapes["head.conv2.bias"] = (config.num_classes,)
    return shapes


def _fan_in(name: str, shape: Tuple[int, ...]) -> int:
    # Deconv weights are (C_in, C_out, k, k); with k == stride each output sees C_in inputs
    if name.startswith("fpn") or name.startswith("head.up"):
        return shape[0]
    return int(np.prod(shape[1:]))


class SegModel:
    def __init__(self, config: NetConfig, params: "OrderedDict[str, Tensor]"):
        self.config = config
        self.params = params

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "SegModel":
        return SegModel(self.config, OrderedDict(
            (k, Tensor(v.data.copy(), requires_grad=True, name=k, dtype=v.dtype)) for k, v in self.params.items()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((k, v.data) for k, v in self.params.items())

    def save(self, path: str, extra: Optional[dict] = None):
        save_checkpoint(self, path, extra)

    @classmethod
    def load(cls, path: str) -> "SegModel":
        return load_checkpoint(path)[0]

    # --- forward ---

    def _conv_affine(self, x: Tensor, prefix: str, stride: int = 1) -> Tensor:
        p = self.params
        y = conv2d(x, p[f"{prefix}.weight"], None, stride=stride, padding=1)
        return batch_affine(y, p[f"{prefix}.scale"], p[f"{prefix}.shift"])

    def _attend(self, x: Tensor) -> Tensor:
        p = self.params
        n, c, h, w = x.shape

        def tokens(name):
            y = conv2d(x, p[f"neck.{name}.weight"], p[f"neck.{name}.bias"])
            return transpose(reshape(y, (n, y.shape[1], h * w)), (0, 2, 1))

        attended = scale_dot_attention(tokens("query"), tokens("key"), tokens("value"))
        return x + reshape(transpose(attended, (0, 2, 1)), (n, c, h, w))

    def forward_batch(self, inputs: Tensor, geometry: Optional[Tensor] = None) -> Tensor:
        """(N, C_in, H, W) inputs and (N, 6, H, W) geometry -> (N, num_classes, H, W) logits."""
        cfg = self.config
        if inputs.ndim != 4 or inputs.shape[1] != cfg.input_channels:
            raise ShapeMismatch("forward", inputs.shape, (None, cfg.input_channels, None, None),
                                "inputs must be (N, C_in, H, W)")
        n, _, h, w = inputs.shape
        if h % cfg.downsampling or w % cfg.downsampling:
            raise ShapeMismatch("forward", inputs.shape, detail=f"H and W must be divisible by {cfg.downsampling}")
        if cfg.geometry_injection:
            if geometry is None:
                raise MissingNormals("geometry injection needs the xyz + normals block")
            if geometry.shape != (n, GEOMETRY_CHANNELS, h, w):
                raise ShapeMismatch("forward geometry", geometry.shape, (n, GEOMETRY_CHANNELS, h, w))

        p = self.params
        x = relu(self._conv_affine(inputs, "stem"))
        features = []
        for i, depth in enumerate(cfg.stage_depths, start=1):
            if cfg.geometry_injection:
                x = concat([x, downsample_nearest(geometry, 2 ** (i - 1))], axis=1)
            x = relu(self._conv_affine(x, f"stage{i}.down", stride=2))
            for j in range(depth):
                y = relu(self._conv_affine(x, f"stage{i}.block{j}.conv1"))
                y = self._conv_affine(y, f"stage{i}.block{j}.conv2")
                x = relu(x + y)
            features.append(x)

        features[-1] = self._attend(features[-1])

        pyramid = [deconv2d(f, p[f"fpn{i}.weight"], p[f"fpn{i}.bias"], stride=2 ** (i - 1))
                   for i, f in enumerate(features, start=1)]
        y = relu(deconv2d(concat(pyramid, axis=1), p["head.up.weight"], p["head.up.bias"], stride=2))
        y = relu(conv2d(y, p["head.conv1.weight"], p["head.conv1.bias"], padding=1))
        return conv2d(y, p["head.conv2.weight"], p["head.conv2.bias"], padding=1)


def build(config: NetConfig, seed: int = 0) -> SegModel:
    """He-initialized model; identical seeds give identical parameters."""
    rng = np.random.default_rng(seed)
    dtype = get_default_dtype()
    params = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".scale"):
            data = np.ones(shape)
        elif name.endswith(".shift") or name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, np.sqrt(2.0 / _fan_in(name, shape)), size=shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    model = SegModel(config, params)
    logger.info(f"built model: widths {list(config.stage_widths)}, depths {list(config.stage_depths)}, "
                f"{model.param_count} parameters")
    return model


def make_input(img: SphericalImageSet, config: NetConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    Network planes of one vehicle-frame image set.

    Returns (C_in, H, W) inputs [xyz / xyz_scale, reflectivity, normals, (range / xyz_scale)]
    and the (6, H, W) geometry block [xyz / xyz_scale, normals]. Invalid pixels are zero.
    """
    if img.frame_tag != Frame.VEHICLE:
        raise FrameMismatch("network inputs are built from vehicle-frame image sets")
    if img.normals is None or img.normals_valid is None:
        raise MissingNormals("run surface_normals before building network inputs")
    dtype = get_default_dtype()
    xyz = np.where(img.valid[..., None], img.xyz, 0.0) / config.xyz_scale
    normals = np.where(img.normals_valid[..., None], img.normals, 0.0)
    refl = img.reflectivity if config.use_reflectivity else np.zeros_like(img.reflectivity)
    planes = [xyz.transpose(2, 0, 1), refl[None], normals.transpose(2, 0, 1)]
    if config.include_range_channel:
        planes.append((img.range / config.xyz_scale)[None])
    inputs = np.concatenate(planes, axis=0).astype(dtype)
    geometry = np.concatenate([xyz.transpose(2, 0, 1), normals.transpose(2, 0, 1)], axis=0).astype(dtype)
    return inputs, geometry


def forward(model: SegModel, img: SphericalImageSet) -> Tensor:
    """(H, W, num_classes) logits of one image set."""
    inputs, geometry = make_input(img, model.config)
    logits = model.forward_batch(Tensor(inputs[None]), Tensor(geometry[None]))
    h, w = img.shape
    return reshape(transpose(logits, (0, 2, 3, 1)), (h, w, model.config.num_classes))


def predict(model: SegModel, img: SphericalImageSet) -> np.ndarray:
    with no_grad():
        logits = forward(model, img).data
    ids = np.argmax(logits, axis=-1)
    return np.where(img.valid, ids, model.config.ignore_id).astype(np.int32)


def predict_batch(model: SegModel, inputs: np.ndarray, geometry: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """(N, H, W) class ids for a stacked batch."""
    with no_grad():
        logits = model.forward_batch(Tensor(inputs), Tensor(geometry)).data
    ids = np.argmax(logits, axis=1)
    return np.where(valid, ids, model.config.ignore_id).astype(np.int32)


def permute_classes(model: SegModel, order: Sequence[int]) -> SegModel:
    """Model whose class k is the original class order[k]."""
    order = np.asarray(order, dtype=np.int64)
    if sorted(order.tolist()) != list(range(model.config.num_classes)):
        raise InvalidConfig(f"{order.tolist()} is not a permutation of the classes")
    permuted = model.copy()
    for name in ("head.conv2.weight", "head.conv2.bias"):
        permuted.params[name].data = permuted.params[name].data[order].copy()
    return permuted


def save_checkpoint(model: SegModel, path: str, extra: Optional[dict] = None):
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "config": model.config.to_dict()}
    header.update(extra or {})
    save_tensors(path, model.state_dict(), header)


def load_checkpoint(path: str) -> Tuple[SegModel, dict]:
    header, tensors = load_tensors(path)
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: not a version {CHECKPOINT_VERSION} model checkpoint")
    config = NetConfig.from_dict(header["config"])
    expected = parameter_shapes(config)
    if list(expected) != list(tensors) or any(tuple(tensors[k].shape) != s for k, s in expected.items()):
        raise CheckpointError(f"{path}: parameters do not match the stored network config")
    params = OrderedDict((k, Tensor(v, requires_grad=True, name=k, dtype=v.dtype)) for k, v in tensors.items())
    return SegModel(config, params), header

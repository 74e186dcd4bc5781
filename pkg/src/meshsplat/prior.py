"""Identity prior: a conditioned per-texel network over the UV grid.

Each valid texel feeds an 8-vector [texture RGB, standardized canonical
position, u, v] through a small MLP whose hidden activations are modulated
per layer as tanh(γ⊙z + β). The modulation coefficients come from a
driving embedding: each control group (expression coefficients and the
five pose/translation groups) is encoded by its own linear+tanh block,
the latents are concatenated, and a final linear layer yields the
embedding. The network emits the 13 raw gaussian-map channels; activation
into surfel parameters lives in gaussian_map.

Everything is trained with hand-written backprop so gradients can be
validated against finite differences without an autograd dependency.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, TrainingDivergedError
from .gaussian_map import GaussianMap, decode_backward, decode_surfels
from .imageio import atomic_write_bytes
from .objectives import LossWeights, total_loss
from .optim import Adam
from .renderer import Camera, rasterize, rasterize_backward
from .rig import DrivingSignal, SurfaceFrames, texel_centers
from .validation import check_array

MGPW_MAGIC = b"MGPW"
MGPW_VERSION = 1

GROUP_NAMES = ("psi", "jaw", "eyes", "neck", "glob", "t")
N_INPUT_CHANNELS = 8
N_OUTPUT_CHANNELS = 13


def group_sizes(n_expressions: int) -> tuple:
    return (n_expressions, 3, 6, 3, 3, 3)


def group_slices(n_expressions: int) -> dict:
    sizes = group_sizes(n_expressions)
    out = {}
    off = 0
    for name, size in zip(GROUP_NAMES, sizes):
        out[name] = slice(off, off + size)
        off += size
    return out


@dataclass
class PriorConfig:
    n_expressions: int
    embed_dim: int = 128
    group_latent: int = 16
    hidden_layers: int = 3
    hidden_width: int = 64
    max_offset: float = 0.02

    def __post_init__(self):
        for name in ("n_expressions", "embed_dim", "group_latent",
                     "hidden_layers", "hidden_width"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"PriorConfig.{name} must be >= 1")
        if self.max_offset <= 0:
            raise ContractError("PriorConfig.max_offset must be > 0")

    def param_specs(self) -> list:
        """(name, shape) pairs; declaration order fixes serialization."""
        latent = self.group_latent
        specs = []
        for name, size in zip(GROUP_NAMES, group_sizes(self.n_expressions)):
            specs.append((f"enc_w_{name}", (latent, size)))
            specs.append((f"enc_b_{name}", (latent,)))
        specs.append(("enc_w_agg",
                      (self.embed_dim, latent * len(GROUP_NAMES))))
        specs.append(("enc_b_agg", (self.embed_dim,)))
        width = self.hidden_width
        for layer in range(self.hidden_layers):
            fan_in = N_INPUT_CHANNELS if layer == 0 else width
            specs.append((f"dec_w{layer}", (width, fan_in)))
            specs.append((f"dec_b{layer}", (width,)))
            specs.append((f"film_wg{layer}", (width, self.embed_dim)))
            specs.append((f"film_bg{layer}", (width,)))
            specs.append((f"film_wb{layer}", (width, self.embed_dim)))
            specs.append((f"film_bb{layer}", (width,)))
        specs.append(("dec_w_out", (N_OUTPUT_CHANNELS, width)))
        specs.append(("dec_b_out", (N_OUTPUT_CHANNELS,)))
        return specs

    def to_json(self) -> dict:
        return {
            "n_expressions": self.n_expressions,
            "embed_dim": self.embed_dim,
            "group_latent": self.group_latent,
            "hidden_layers": self.hidden_layers,
            "hidden_width": self.hidden_width,
            "max_offset": self.max_offset,
        }

    @staticmethod
    def from_json(obj: dict) -> "PriorConfig":
        keys = {"n_expressions", "embed_dim", "group_latent",
                "hidden_layers", "hidden_width", "max_offset"}
        unknown = set(obj) - keys
        if unknown:
            raise ContractError(f"PriorConfig: unknown keys {sorted(unknown)}")
        missing = keys - set(obj)
        if missing:
            raise ContractError(f"PriorConfig: missing keys {sorted(missing)}")
        return PriorConfig(**obj)


def init_weights(cfg: PriorConfig, seed: int = 0) -> dict:
    """He-style init; FiLM starts near identity (γ≈1, β≈0) so the decoder
    behaves like a plain MLP until the conditioning pathway trains."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in cfg.param_specs():
        if name.startswith(("enc_b", "dec_b", "film_bb")):
            weights[name] = np.zeros(shape)
        elif name.startswith("film_bg"):
            weights[name] = np.ones(shape)
        elif name.startswith("film_w"):
            weights[name] = rng.normal(
                0.0, 0.1 / np.sqrt(shape[1]), shape)
        else:
            weights[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), shape)
    return weights


def check_weights(cfg: PriorConfig, weights: dict) -> None:
    specs = cfg.param_specs()
    names = [n for n, _ in specs]
    if list(weights.keys()) != names:
        raise ContractError(
            "weights do not match config parameter layout")
    for name, shape in specs:
        check_array(weights[name], name, shape=shape)


# ---------------------------------------------------------------------------
# Driving encoder.

def encode_driving(cfg: PriorConfig, weights: dict,
                   driving: DrivingSignal):
    """Returns (embedding (D,), cache for the backward pass)."""
    if driving.n_expressions != cfg.n_expressions:
        raise ContractError(
            f"driving has {driving.n_expressions} expression coefficients, "
            f"prior expects {cfg.n_expressions}")
    x = driving.concat()
    slices = group_slices(cfg.n_expressions)
    latents = []
    pre = {}
    for name in GROUP_NAMES:
        z = weights[f"enc_w_{name}"] @ x[slices[name]] \
            + weights[f"enc_b_{name}"]
        h = np.tanh(z)
        pre[name] = h
        latents.append(h)
    h_all = np.concatenate(latents)
    embed = weights["enc_w_agg"] @ h_all + weights["enc_b_agg"]
    return embed, {"x": x, "h": pre, "h_all": h_all}


def encode_driving_backward(cfg: PriorConfig, weights: dict, cache: dict,
                            d_embed: np.ndarray):
    """Returns (parameter grads, gradient wrt the concatenated driving)."""
    grads = {}
    grads["enc_w_agg"] = np.outer(d_embed, cache["h_all"])
    grads["enc_b_agg"] = d_embed.copy()
    dh_all = weights["enc_w_agg"].T @ d_embed
    slices = group_slices(cfg.n_expressions)
    latent = cfg.group_latent
    dx = np.zeros_like(cache["x"])
    for gi, name in enumerate(GROUP_NAMES):
        h = cache["h"][name]
        dh = dh_all[gi * latent:(gi + 1) * latent]
        dz = dh * (1.0 - h * h)
        grads[f"enc_w_{name}"] = np.outer(dz, cache["x"][slices[name]])
        grads[f"enc_b_{name}"] = dz
        dx[slices[name]] = weights[f"enc_w_{name}"].T @ dz
    return grads, dx


# ---------------------------------------------------------------------------
# Per-texel decoder.

def decode_texels(cfg: PriorConfig, weights: dict, x: np.ndarray,
                  embed: np.ndarray):
    """x: (T, 8) texel features. Returns (raw (T, 13), cache)."""
    x = check_array(x, "texel features", shape=(None, N_INPUT_CHANNELS))
    embed = check_array(embed, "embedding", shape=(cfg.embed_dim,))
    h = x
    zs, gammas, betas, hs = [], [], [], [h]
    for layer in range(cfg.hidden_layers):
        z = h @ weights[f"dec_w{layer}"].T + weights[f"dec_b{layer}"]
        gamma = weights[f"film_wg{layer}"] @ embed \
            + weights[f"film_bg{layer}"]
        beta = weights[f"film_wb{layer}"] @ embed \
            + weights[f"film_bb{layer}"]
        h = np.tanh(gamma[None, :] * z + beta[None, :])
        zs.append(z)
        gammas.append(gamma)
        betas.append(beta)
        hs.append(h)
    raw = h @ weights["dec_w_out"].T + weights["dec_b_out"]
    return raw, {"x": x, "embed": embed, "zs": zs, "gammas": gammas,
                 "hs": hs}


def decode_texels_backward(cfg: PriorConfig, weights: dict, cache: dict,
                           d_raw: np.ndarray):
    """Returns (parameter grads, d_x (T, 8), d_embed (D,))."""
    hs, zs, gammas = cache["hs"], cache["zs"], cache["gammas"]
    embed = cache["embed"]
    grads = {}
    grads["dec_w_out"] = d_raw.T @ hs[-1]
    grads["dec_b_out"] = d_raw.sum(axis=0)
    dh = d_raw @ weights["dec_w_out"]
    d_embed = np.zeros_like(embed)
    for layer in range(cfg.hidden_layers - 1, -1, -1):
        h = hs[layer + 1]
        da = dh * (1.0 - h * h)
        dgamma = (da * zs[layer]).sum(axis=0)
        dbeta = da.sum(axis=0)
        dz = da * gammas[layer][None, :]
        grads[f"film_wg{layer}"] = np.outer(dgamma, embed)
        grads[f"film_bg{layer}"] = dgamma
        grads[f"film_wb{layer}"] = np.outer(dbeta, embed)
        grads[f"film_bb{layer}"] = dbeta
        d_embed += weights[f"film_wg{layer}"].T @ dgamma
        d_embed += weights[f"film_wb{layer}"].T @ dbeta
        grads[f"dec_w{layer}"] = dz.T @ hs[layer]
        grads[f"dec_b{layer}"] = dz.sum(axis=0)
        dh = dz @ weights[f"dec_w{layer}"]
    return grads, dh, d_embed


# ---------------------------------------------------------------------------
# UV-space inputs.

@dataclass
class GeometryStats:
    mean: np.ndarray  # (3,)
    std: np.ndarray   # (3,), floored at 1e-8

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @staticmethod
    def from_json(obj: dict) -> "GeometryStats":
        return GeometryStats(np.asarray(obj["mean"], dtype=np.float64),
                             np.asarray(obj["std"], dtype=np.float64))


def compute_geometry_stats(geo_maps, masks) -> GeometryStats:
    """Per-axis mean/std over valid texels of one or more position maps."""
    rows = []
    for geo, mask in zip(geo_maps, masks):
        geo = check_array(geo, "geometry map", shape=(None, None, 3))
        rows.append(geo[np.asarray(mask, dtype=bool)])
    if not rows:
        raise ContractError("compute_geometry_stats: no maps given")
    allrows = np.concatenate(rows, axis=0)
    if allrows.shape[0] == 0:
        raise ContractError("compute_geometry_stats: no valid texels")
    return GeometryStats(mean=allrows.mean(axis=0),
                         std=np.maximum(allrows.std(axis=0), 1e-8))


@dataclass
class UVInputMaps:
    """Conditioning maps on the UV grid; geometry is already standardized
    and invalid texels are zeroed."""

    texture: np.ndarray   # (H, W, 3)
    geometry: np.ndarray  # (H, W, 3)
    mask: np.ndarray      # (H, W) bool

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        h, w = self.mask.shape
        self.texture = check_array(self.texture, "texture map",
                                   shape=(h, w, 3))
        self.geometry = check_array(self.geometry, "geometry map",
                                    shape=(h, w, 3))

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]


def build_input_maps(texture: np.ndarray, geometry: np.ndarray,
                     mask: np.ndarray, stats: GeometryStats) -> UVInputMaps:
    mask = np.asarray(mask, dtype=bool)
    geo = (np.asarray(geometry, dtype=np.float64) - stats.mean) / stats.std
    geo = np.where(mask[:, :, None], geo, 0.0)
    tex = np.where(mask[:, :, None],
                   np.asarray(texture, dtype=np.float64), 0.0)
    return UVInputMaps(texture=tex, geometry=geo, mask=mask)


def _texel_features(inputs: UVInputMaps) -> np.ndarray:
    """(T, 8) feature rows for the valid texels, row-major order."""
    h, w = inputs.height, inputs.width
    uv = texel_centers(h, w)
    feats = np.concatenate([inputs.texture, inputs.geometry, uv], axis=-1)
    return feats.reshape(h * w, N_INPUT_CHANNELS)[inputs.mask.reshape(-1)]


def predict_gaussian_map(cfg: PriorConfig, weights: dict,
                         inputs: UVInputMaps, driving: DrivingSignal,
                         with_cache: bool = False):
    """Raw gaussian map for one driving signal. Invalid texels are zero."""
    embed, enc_cache = encode_driving(cfg, weights, driving)
    feats = _texel_features(inputs)
    raw_rows, dec_cache = decode_texels(cfg, weights, feats, embed)
    h, w = inputs.height, inputs.width
    raw = np.zeros((h, w, N_OUTPUT_CHANNELS))
    raw.reshape(h * w, -1)[inputs.mask.reshape(-1)] = raw_rows
    gmap = GaussianMap(raw=raw, mask=inputs.mask.copy())
    if not with_cache:
        return gmap
    return gmap, {"enc": enc_cache, "dec": dec_cache, "mask": inputs.mask}


def predict_backward(cfg: PriorConfig, weights: dict, cache: dict,
                     d_raw: np.ndarray) -> dict:
    """Parameter gradients given d(loss)/d(raw map) of shape (H, W, 13)."""
    mask = cache["mask"]
    rows = d_raw.reshape(-1, N_OUTPUT_CHANNELS)[mask.reshape(-1)]
    dec_grads, _, d_embed = decode_texels_backward(cfg, weights,
                                                   cache["dec"], rows)
    enc_grads, _ = encode_driving_backward(cfg, weights, cache["enc"],
                                           d_embed)
    grads = {}
    for name, _ in cfg.param_specs():
        grads[name] = dec_grads.get(name, enc_grads.get(name))
        if grads[name] is None:
            raise ContractError(f"predict_backward: no gradient for {name}")
    return grads


# ---------------------------------------------------------------------------
# Serialization: "MGPW", u32 version, u32 JSON length, config JSON,
# then every parameter flattened to little-endian f32 in declaration order.

def save_weights(path, cfg: PriorConfig, weights: dict) -> None:
    check_weights(cfg, weights)
    blob = json.dumps(cfg.to_json(), sort_keys=True).encode("utf-8")
    parts = [MGPW_MAGIC, struct.pack("<II", MGPW_VERSION, len(blob)), blob]
    for name, _ in cfg.param_specs():
        parts.append(np.ascontiguousarray(
            weights[name], dtype="<f4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_weights(path):
    """Returns (PriorConfig, weights dict with float64 arrays)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != MGPW_MAGIC:
        raise ContractError(f"{path}: not a MGPW weights file")
    version, jlen = struct.unpack_from("<II", data, 4)
    if version != MGPW_VERSION:
        raise ContractError(f"{path}: unsupported MGPW version {version}")
    try:
        cfg = PriorConfig.from_json(json.loads(data[12:12 + jlen]))
    except (ValueError, TypeError) as exc:
        raise ContractError(f"{path}: bad MGPW config block: {exc}") from exc
    offset = 12 + jlen
    weights = {}
    for name, shape in cfg.param_specs():
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(data):
            raise ContractError(f"{path}: truncated MGPW payload at {name}")
        weights[name] = np.frombuffer(
            data, dtype="<f4", count=count,
            offset=offset).astype(np.float64).reshape(shape)
        offset = end
    if offset != len(data):
        raise ContractError(f"{path}: {len(data) - offset} trailing bytes")
    return cfg, weights


# ---------------------------------------------------------------------------
# Training.

@dataclass
class TrainSample:
    """One supervised view: conditioning inputs, the driving signal, the
    posed surface frames for that driving, a camera, and the target."""

    inputs: UVInputMaps
    driving: DrivingSignal
    frames: SurfaceFrames
    camera: Camera
    target: np.ndarray                    # (H, W, 3)
    mask: np.ndarray | None = None        # (H, W) bool
    tag: str = "real"


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    renderer_mode: str = "tiled"
    threads: int | None = None
    loss_weights: LossWeights = field(default_factory=LossWeights)


def train_step(cfg: PriorConfig, weights: dict, sample: TrainSample,
               train_cfg: TrainConfig, optimizer: Adam) -> float:
    """One SGD step on one sample; returns the total loss before update."""
    gmap, cache = predict_gaussian_map(cfg, weights, sample.inputs,
                                       sample.driving, with_cache=True)
    surfels = decode_surfels(gmap, sample.frames,
                             max_offset=cfg.max_offset)
    out = rasterize(surfels, sample.camera,
                    np.asarray(train_cfg.background, dtype=np.float64),
                    mode=train_cfg.renderer_mode, threads=train_cfg.threads)
    report, rgrads = total_loss(out, sample.target,
                                train_cfg.loss_weights, sample.mask)
    if not np.isfinite(report.total):
        raise TrainingDivergedError(
            f"non-finite loss {report.total!r}")
    buf = rasterize_backward(out, rgrads, threads=train_cfg.threads)
    d_raw = decode_backward(gmap, sample.frames, cfg.max_offset,
                            buf.d_center, buf.d_rotation, buf.d_scales,
                            buf.d_color, buf.d_opacity)
    grads = predict_backward(cfg, weights, cache, d_raw)
    optimizer.step(weights, grads)
    return report.total


def render_prediction(cfg: PriorConfig, weights: dict, inputs: UVInputMaps,
                      driving: DrivingSignal, frames: SurfaceFrames,
                      camera: Camera, background=(0.0, 0.0, 0.0),
                      renderer_mode: str = "tiled",
                      threads: int | None = None):
    """Feed-forward predict -> decode -> rasterize for one view."""
    gmap = predict_gaussian_map(cfg, weights, inputs, driving)
    surfels = decode_surfels(gmap, frames, max_offset=cfg.max_offset)
    return rasterize(surfels, camera,
                     np.asarray(background, dtype=np.float64),
                     mode=renderer_mode, threads=threads)


def train_prior(cfg: PriorConfig, samples: list, train_cfg: TrainConfig,
                weights: dict | None = None):
    """Optimize prior weights over a sample pool with uniform sampling.

    Returns (weights, trace) where trace is the per-step total loss.
    """
    if not samples:
        raise ContractError("train_prior: empty sample list")
    if weights is None:
        weights = init_weights(cfg, seed=train_cfg.seed)
    else:
        check_weights(cfg, weights)
        weights = {k: v.astype(np.float64).copy()
                   for k, v in weights.items()}
    rng = np.random.default_rng(train_cfg.seed)
    optimizer = Adam(lr=train_cfg.lr, betas=train_cfg.betas)
    trace = []
    for _ in range(train_cfg.steps):
        k = int(rng.integers(len(samples)))
        trace.append(train_step(cfg, weights, samples[k], train_cfg,
                                optimizer))
    return weights, trace

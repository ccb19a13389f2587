"""Vision Transformer backbone on top of :mod:`selfvitmil.tensor`."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from . import tensor as T
from .tensor import DimensionError, ParameterError, Tensor

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 16
    num_blocks: int = 4
    num_heads: int = 2
    mlp_hidden_dim: int = 64
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ParameterError(f"image_size {self.image_size} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ParameterError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")

    @property
    def num_patches(self) -> int:
        return self.image_size * self.image_size // (self.patch_size * self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @classmethod
    def desk(cls) -> "ViTConfig":
        return cls()

    @classmethod
    def vit_b16(cls) -> "ViTConfig":
        return cls(image_size=224, patch_size=16, embed_dim=768, num_blocks=12, num_heads=12,
                   mlp_hidden_dim=3072)

    def to_dict(self) -> dict:
        return asdict(self)


def _trunc_normal(rng, shape, std=0.02):
    return np.clip(rng.normal(scale=std, size=shape), -2 * std, 2 * std)


def _xavier(rng, shape):
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape)


def block_names(i: int) -> list[str]:
    p = f"blocks.{i}."
    return [p + n for n in ("ln1.gamma", "ln1.beta", "attn.w_q", "attn.b_q", "attn.w_k", "attn.b_k",
                            "attn.w_v", "attn.b_v", "attn.w_o", "attn.b_o", "ln2.gamma", "ln2.beta",
                            "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2")]


class ViTModel:
    """Weights of a ViT; every weight is a leaf :class:`Tensor` in ``params``."""

    def __init__(self, config: ViTConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        n = config.num_patches + 1
        if params["pos_embed"].shape != (n, config.embed_dim):
            raise DimensionError(f"pos_embed must be {(n, config.embed_dim)}, got {params['pos_embed'].shape}")

    @classmethod
    def init(cls, config: ViTConfig, seed: int = 0) -> "ViTModel":
        rng = np.random.default_rng(seed)
        d, h = config.embed_dim, config.mlp_hidden_dim
        p = {
            "proj.w": _xavier(rng, (config.patch_dim, d)),
            "proj.b": np.zeros(d),
            "cls_token": _trunc_normal(rng, (1, d)),
            "pos_embed": _trunc_normal(rng, (config.num_patches + 1, d)),
        }
        for i in range(config.num_blocks):
            pre = f"blocks.{i}."
            p[pre + "ln1.gamma"], p[pre + "ln1.beta"] = np.ones(d), np.zeros(d)
            for w in "qkvo":
                p[pre + f"attn.w_{w}"] = _xavier(rng, (d, d))
                p[pre + f"attn.b_{w}"] = np.zeros(d)
            p[pre + "ln2.gamma"], p[pre + "ln2.beta"] = np.ones(d), np.zeros(d)
            p[pre + "mlp.w1"], p[pre + "mlp.b1"] = _xavier(rng, (d, h)), np.zeros(h)
            p[pre + "mlp.w2"], p[pre + "mlp.b2"] = _xavier(rng, (h, d)), np.zeros(d)
        p["norm.gamma"], p["norm.beta"] = np.ones(d), np.zeros(d)
        return cls(config, {k: Tensor(v, requires_grad=True) for k, v in p.items()})

    def block(self, i: int) -> dict[str, Tensor]:
        pre = f"blocks.{i}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def copy(self, requires_grad: bool = True) -> "ViTModel":
        return ViTModel(self.config, {k: Tensor(v.data.copy(), requires_grad=requires_grad)
                                      for k, v in self.params.items()})

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def save(self, path, extra: dict | None = None) -> None:
        header = {"kind": "vit", "config": self.config.to_dict(), **(extra or {})}
        checkpoint.save_weights(path, header, self.state_dict())

    @classmethod
    def load(cls, path) -> tuple["ViTModel", dict]:
        header, blobs = checkpoint.load_weights(path)
        if header.get("kind") != "vit":
            raise checkpoint.FormatError(f"{path} holds a {header.get('kind')!r} checkpoint, not a ViT")
        config = ViTConfig(**header["config"])
        return cls(config, {k: Tensor(v, requires_grad=True) for k, v in blobs.items()}), header


def prepare_images(tiles) -> np.ndarray:
    """uint8 H x W x C tiles (or one tile) -> standardised float B x C x H x W."""
    arr = np.asarray(tiles, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return (arr.transpose(0, 3, 1, 2) / 255.0 - PIXEL_MEAN) / PIXEL_STD


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """B x C x H x W -> B x N x (P*P*C), sub-patches in row-major grid order."""
    b, c, h, w = images.shape
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, c, gh, patch_size, gw, patch_size)
    return x.transpose(0, 2, 4, 3, 5, 1).reshape(b, gh * gw, patch_size * patch_size * c)


def tokenize(images, model: ViTModel) -> Tensor:
    """Project sub-patches, prepend the [cls] token, add positional embeddings.

    Accepts one C x H x W image or a B x C x H x W batch; returns
    ``(N+1) x D`` or ``B x (N+1) x D`` tokens accordingly.
    """
    cfg = model.config
    x = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != cfg.channels or x.shape[2:] != (cfg.image_size, cfg.image_size):
        raise DimensionError(f"expected images C x {cfg.image_size} x {cfg.image_size} with "
                             f"C={cfg.channels}, got {x.shape[1:] if x.ndim == 4 else x.shape}")
    b = x.shape[0]
    p = model.params
    patches = Tensor(patchify(x, cfg.patch_size))
    proj = T.matmul(patches, p["proj.w"]) + p["proj.b"]
    cls = T.reshape(T.concat([p["cls_token"]] * b, axis=0), (b, 1, cfg.embed_dim))
    tokens = T.concat([cls, proj], axis=1) + p["pos_embed"]
    return tokens[0] if single else tokens


def attention(x: Tensor, w: dict, num_heads: int, return_weights: bool = False):
    """Multi-head scaled dot-product self-attention over ``B x T x D`` tokens."""
    b, t, d = x.shape
    dh = d // num_heads

    def heads(z):
        return T.transpose(T.reshape(z, (b, t, num_heads, dh)), (0, 2, 1, 3))

    q = heads(T.matmul(x, w["attn.w_q"]) + w["attn.b_q"])
    k = heads(T.matmul(x, w["attn.w_k"]) + w["attn.b_k"])
    v = heads(T.matmul(x, w["attn.w_v"]) + w["attn.b_v"])
    att = T.softmax(T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh)))
    out = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, t, d))
    out = T.matmul(out, w["attn.w_o"]) + w["attn.b_o"]
    return (out, att) if return_weights else out


def encoder_block(tokens: Tensor, w: dict, num_heads: int, eps: float = 1e-6,
                  return_attention: bool = False):
    """Pre-norm block: ``x + MSA(LN(x))`` then ``x + MLP(LN(x))``."""
    single = tokens.ndim == 2
    x = T.reshape(tokens, (1,) + tokens.shape) if single else tokens
    a, att = attention(T.layer_norm(x, w["ln1.gamma"], w["ln1.beta"], eps), w, num_heads, True)
    x = x + a
    h = T.layer_norm(x, w["ln2.gamma"], w["ln2.beta"], eps)
    h = T.matmul(T.gelu(T.matmul(h, w["mlp.w1"]) + w["mlp.b1"]), w["mlp.w2"]) + w["mlp.b2"]
    x = x + h
    if single:
        x, att = x[0], att[0]
    return (x, att) if return_attention else x


def forward(images, model: ViTModel) -> Tensor:
    """[cls] row after every block: ``L x D`` for one image, ``B x L x D`` for a batch.

    Every recorded row passes through the shared final LayerNorm.
    """
    tokens = tokenize(images, model)
    single = tokens.ndim == 2
    x = T.reshape(tokens, (1,) + tokens.shape) if single else tokens
    b, d = x.shape[0], model.config.embed_dim
    rows = []
    for i in range(model.config.num_blocks):
        x = encoder_block(x, model.block(i), model.config.num_heads)
        rows.append(T.reshape(x[:, 0, :], (b, 1, d)))
    p = model.params
    out = T.layer_norm(T.concat(rows, axis=1), p["norm.gamma"], p["norm.beta"])
    return out[0] if single else out


def extract_features(images, model: ViTModel, k_last: int = 4) -> np.ndarray:
    """Concatenate the last ``k_last`` [cls] rows and their mean: ``(k_last + 1) * D`` per image."""
    if not 1 <= k_last <= model.config.num_blocks:
        raise ParameterError(f"k_last must be in [1, {model.config.num_blocks}], got {k_last}")
    with T.no_grad():
        cls = forward(images, model).data
    single = cls.ndim == 2
    if single:
        cls = cls[None]
    last = cls[:, -k_last:, :]
    feats = np.concatenate([last.reshape(len(cls), -1), last.mean(axis=1)], axis=1)
    return feats[0] if single else feats


def embed_tiles(tiles, model: ViTModel, k_last: int = 4, batch_size: int = 256) -> np.ndarray:
    """Features for a list of uint8 tiles, in input order."""
    tiles = list(tiles)
    width = (k_last + 1) * model.config.embed_dim
    if not tiles:
        return np.zeros((0, width))
    out = [extract_features(prepare_images(tiles[i:i + batch_size]), model, k_last)
           for i in range(0, len(tiles), batch_size)]
    return np.concatenate(out, axis=0)
